"""Dual variational estimator regularized by the Beta speed process.

Two encoder-decoder pairs map normalized (x, t) to latent Gaussians and
back to states. The density channel never samples: it decodes the latent
mean. The speed channel decodes reparameterized latent draws, giving a
speed distribution per point. Training combines per-channel losses
(reconstruction MSE plus the closed-form KL of the encoder Gaussian
against the standard normal) with a distributional physics loss: the
mean negative log-density of the speed samples under the fitted Beta
process. That training form is the sample cross-entropy, which minimizes
the KL divergence to the process up to an entropy constant; a binned KL
against the process is reported as the evaluation metric.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import beta as beta_dist

from .errors import NumericalError, ValidationError
from .estimates import from_member_layers
from .networks import DTYPE
from .stochastic_fd import BetaProcess, beta_shapes

logger = logging.getLogger(__name__)

CHANNELS = ("density", "speed")


@dataclass
class VaeConfig:
    latent_dim: int = 32
    encoder_layers: int = 4  # hidden layers before the moment heads
    decoder_layers: int = 4  # hidden layers before the linear output
    hidden: int = 32
    b_low_rho: float = 1e-3
    b_low_v: float = 1e-3

    def __post_init__(self):
        if self.latent_dim < 1 or self.encoder_layers < 1 or self.decoder_layers < 1:
            raise ValidationError("latent_dim and layer counts must be >= 1")
        if self.b_low_rho <= 0 or self.b_low_v <= 0:
            raise ValidationError("sigma lower bounds must be positive")


@dataclass
class LatentMoments:
    """Per-point diagonal Gaussian moments in latent space."""

    mu_z: torch.Tensor  # (N, D)
    sigma_z: torch.Tensor  # (N, D), >= b_low


@dataclass(frozen=True)
class BetaLossWeights:
    kappa1: float = 1.0
    kappa2: float = 1.0
    kappa3: float = 0.1

    def __post_init__(self):
        if min(self.kappa1, self.kappa2, self.kappa3) < 0:
            raise ValidationError("kappa weights must be non-negative")


@dataclass
class VaeTrainingConfig:
    lr: float = 5e-4
    epochs: int = 20000
    patience: int = 2000
    min_delta: float = 1e-6
    speed_samples: int = 50  # l, decoded draws per point
    physics_batch: int = 256  # collocation points per stochastic step
    warmup_frac: float = 0.1  # linear ramp of kappa3 over the first epochs


class ChannelVae(torch.nn.Module):
    """One encoder-decoder pair; sigma head is a logistic unit + b_low."""

    def __init__(self, config: VaeConfig, b_low):
        super().__init__()
        h, d = config.hidden, config.latent_dim
        self.b_low = float(b_low)
        enc = [torch.nn.Linear(2, h, dtype=DTYPE)]
        for _ in range(config.encoder_layers - 1):
            enc.append(torch.nn.Linear(h, h, dtype=DTYPE))
        self.encoder = torch.nn.ModuleList(enc)
        self.head_mu = torch.nn.Linear(h, d, dtype=DTYPE)
        self.head_sigma = torch.nn.Linear(h, d, dtype=DTYPE)
        dec = [torch.nn.Linear(d, h, dtype=DTYPE)]
        for _ in range(config.decoder_layers - 1):
            dec.append(torch.nn.Linear(h, h, dtype=DTYPE))
        self.decoder = torch.nn.ModuleList(dec)
        self.out = torch.nn.Linear(h, 1, dtype=DTYPE)

    def encode(self, xt):
        h = xt
        for layer in self.encoder:
            h = torch.tanh(layer(h))
        mu = self.head_mu(h)
        sigma = torch.sigmoid(self.head_sigma(h)) + self.b_low
        return LatentMoments(mu_z=mu, sigma_z=sigma)

    def decode(self, z):
        h = z
        for layer in self.decoder:
            h = torch.tanh(layer(h))
        return self.out(h)[:, 0]


class DualVae(torch.nn.Module):
    def __init__(self, config: VaeConfig):
        super().__init__()
        self.config = config
        self.density = ChannelVae(config, config.b_low_rho)
        self.speed = ChannelVae(config, config.b_low_v)

    def channel(self, name) -> ChannelVae:
        if name not in CHANNELS:
            raise ValidationError(f"channel must be one of {CHANNELS}, got {name!r}")
        return self.density if name == "density" else self.speed


def init_vae(config: VaeConfig, seed) -> DualVae:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    vae = DualVae(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for layer in vae.modules():
            if isinstance(layer, torch.nn.Linear):
                torch.nn.init.xavier_uniform_(layer.weight, generator=gen)
                layer.bias.zero_()
    return vae


def _xt_tensor(x_norm, t_norm):
    x = np.atleast_1d(np.asarray(x_norm, dtype=float))
    t = np.atleast_1d(np.asarray(t_norm, dtype=float))
    return torch.tensor(np.stack([x, t], axis=1), dtype=DTYPE)


def encode(vae: DualVae, x_norm, t_norm, channel) -> LatentMoments:
    with torch.no_grad():
        return vae.channel(channel).encode(_xt_tensor(x_norm, t_norm))


def reparameterize(moments: LatentMoments, noise_seed=None, delta=None, generator=None):
    """z = mu + delta * sigma with standard-normal delta.

    delta may be passed explicitly (test hook); otherwise it is drawn
    from the given generator or a fresh one seeded with noise_seed.
    """
    if delta is None:
        if generator is None:
            generator = torch.Generator().manual_seed(int(noise_seed))
        delta = torch.randn(moments.mu_z.shape, generator=generator, dtype=DTYPE)
    return moments.mu_z + delta * moments.sigma_z


def decode(vae: DualVae, z, channel):
    with torch.no_grad():
        return vae.channel(channel).decode(z)


def estimate_density(vae: DualVae, x_norm, t_norm):
    """Mean-latent path: decode(encode(X).mu_z), no sampling, normalized."""
    ch = vae.channel("density")
    with torch.no_grad():
        moments = ch.encode(_xt_tensor(x_norm, t_norm))
        return ch.decode(moments.mu_z).numpy()


def estimate_speed_samples(vae: DualVae, x_norm, t_norm, l, seed, v_scale=1.0):
    """(N, l) decoded speed draws, denormalized by v_scale."""
    if l < 2:
        raise ValidationError("need at least 2 speed samples")
    ch = vae.channel("speed")
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        moments = ch.encode(_xt_tensor(x_norm, t_norm))
        cols = []
        for _ in range(l):
            delta = torch.randn(moments.mu_z.shape, generator=gen, dtype=DTYPE)
            z = moments.mu_z + delta * moments.sigma_z
            cols.append(ch.decode(z))
        return torch.stack(cols, dim=1).numpy() * v_scale


def gaussian_kl(moments: LatentMoments):
    """Closed-form KL of the diagonal Gaussian against the standard
    normal, summed over latent dims, averaged over the batch."""
    mu, sigma = moments.mu_z, moments.sigma_z
    per_point = -0.5 * torch.sum(torch.log(sigma**2) - mu**2 - sigma**2 + 1.0, dim=1)
    return per_point.mean()


def vae_data_loss(vae: DualVae, xt, target, channel, generator=None):
    """Reconstruction MSE plus the KL term, normalized units.

    The density channel reconstructs through the latent mean (it never
    samples); the speed channel reconstructs through one reparameterized
    draw per call. Returns a scalar tensor.
    """
    if len(target) == 0:
        raise ValidationError("observation set is empty")
    ch = vae.channel(channel)
    moments = ch.encode(xt)
    if channel == "density":
        z = moments.mu_z
    else:
        z = reparameterize(moments, noise_seed=0, generator=generator)
    recon = torch.mean((ch.decode(z) - target) ** 2)
    return recon + gaussian_kl(moments)


def physics_distribution_loss(samples: torch.Tensor, densities, process: BetaProcess, v_scale=1.0):
    """Training form: mean negative Beta log-density of the speed samples.

    samples: (N, l) tensor in m/s, graph-connected to the speed network.
    densities: per-point densities (veh/m) used only to look up the
    process shapes; they are treated as constants so gradients flow
    through the samples alone. Samples outside [0, v_max] are clipped in
    (and counted); a batch entirely out of range is an error.
    """
    if samples.ndim != 2 or samples.shape[1] < 2:
        raise ValidationError("samples must be (N, l) with l >= 2")
    rho = np.clip(np.asarray(densities, dtype=float), 0.0, process.rho_max)
    a, b = beta_shapes(process, rho)
    a_t = torch.tensor(np.atleast_1d(a), dtype=DTYPE).unsqueeze(1)
    b_t = torch.tensor(np.atleast_1d(b), dtype=DTYPE).unsqueeze(1)

    v_max = process.v_max
    eps = 1e-9 * v_max
    out_of_range = (samples < 0) | (samples > v_max)
    n_out = int(out_of_range.sum())
    if n_out == samples.numel():
        raise NumericalError("all speed samples fall outside [0, v_max]")
    if n_out:
        logger.debug("clipped %d of %d speed samples into [0, v_max]", n_out, samples.numel())
    u = torch.clamp(samples, eps, v_max - eps) / v_max

    log_beta_fn = torch.lgamma(a_t) + torch.lgamma(b_t) - torch.lgamma(a_t + b_t)
    log_pdf = (
        (a_t - 1.0) * torch.log(u)
        + (b_t - 1.0) * torch.log1p(-u)
        - log_beta_fn
        - math.log(v_max)
    )
    return -log_pdf.mean()


def binned_kl(samples, densities, process: BetaProcess, n_bins=20, eps=1e-9):
    """Evaluation form: histogram KL against Beta bin masses, mean over points.

    Both histograms are eps-smoothed and renormalized; identical
    histograms give 0.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2:
        raise ValidationError("samples must be (N, l)")
    rho = np.clip(np.asarray(densities, dtype=float), 0.0, process.rho_max)
    a, b = beta_shapes(process, rho)
    edges = np.linspace(0.0, process.v_max, n_bins + 1)
    u_edges = edges / process.v_max

    total = 0.0
    for i in range(samples.shape[0]):
        p, _ = np.histogram(np.clip(samples[i], 0.0, process.v_max), bins=edges)
        p = p.astype(float) / p.sum()
        q = np.diff(beta_dist.cdf(u_edges, a[i], b[i]))
        p = (p + eps) / (p + eps).sum()
        q = (q + eps) / (q + eps).sum()
        total += float(np.sum(p * np.log(p / q)))
    return total / samples.shape[0]


def train_beta_vae(obs, colloc, process: BetaProcess, weights: BetaLossWeights,
                   config: VaeTrainingConfig, seed, *, grid, normalizer,
                   vae_config: VaeConfig = None, ci_level=0.95):
    """Adam on the combined loss with a linear physics warm-up.

    The physics term draws a fresh collocation minibatch and fresh latent
    noise each epoch (stochastic steps). Collocation densities come from
    the density channel's current mean-latent output, detached, so the
    process shapes never backpropagate into the density network.
    Returns (DualVae, EstimateField, trace).
    """
    vae_config = vae_config or VaeConfig()
    vae = init_vae(vae_config, seed)
    opt = torch.optim.Adam(vae.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(int(seed) + 1)

    xn, tn = normalizer.normalize_coords(obs.x, obs.t)
    rn, vn = normalizer.normalize_states(obs.rho, obs.v)
    obs_xt = torch.tensor(np.stack([xn, tn], axis=1), dtype=DTYPE)
    rho_o = torch.tensor(rn, dtype=DTYPE)
    v_o = torch.tensor(vn, dtype=DTYPE)

    cxn, ctn = normalizer.normalize_coords(colloc.x, colloc.t)
    colloc_xt_all = torch.tensor(np.stack([cxn, ctn], axis=1), dtype=DTYPE)
    n_c = colloc_xt_all.shape[0]

    warmup_epochs = max(1, int(config.warmup_frac * config.epochs))
    trace = []
    best = math.inf
    best_epoch = 0
    for epoch in range(config.epochs):
        opt.zero_grad()
        loss_rho = vae_data_loss(vae, obs_xt, rho_o, "density", generator=gen)
        loss_v = vae_data_loss(vae, obs_xt, v_o, "speed", generator=gen)

        kappa3 = weights.kappa3 * min(1.0, (epoch + 1) / warmup_epochs)
        if kappa3 > 0:
            batch = min(config.physics_batch, n_c)
            idx = torch.randperm(n_c, generator=gen)[:batch]
            xt_c = colloc_xt_all[idx]
            ch_speed = vae.channel("speed")
            moments = ch_speed.encode(xt_c)
            cols = []
            for _ in range(config.speed_samples):
                delta = torch.randn(moments.mu_z.shape, generator=gen, dtype=DTYPE)
                cols.append(ch_speed.decode(moments.mu_z + delta * moments.sigma_z))
            samples = torch.stack(cols, dim=1) * normalizer.v_scale
            with torch.no_grad():
                ch_d = vae.channel("density")
                rho_c = ch_d.decode(ch_d.encode(xt_c).mu_z) * normalizer.rho_scale
            # early density estimates can leave the fitted domain; project first
            rho_q = np.clip(rho_c.numpy(), 0.0, process.rho_max)
            loss_phy = physics_distribution_loss(samples, rho_q, process)
        else:
            loss_phy = torch.zeros((), dtype=DTYPE)

        loss = weights.kappa1 * loss_rho + weights.kappa2 * loss_v + kappa3 * loss_phy
        total = loss.item()
        if not math.isfinite(total):
            raise NumericalError(f"training diverged at epoch {epoch}; trace={trace[-5:]}")
        loss.backward()
        opt.step()
        trace.append((total, loss_rho.item(), loss_v.item(), loss_phy.item()))
        if best - total > config.min_delta:
            best = total
            best_epoch = epoch
        elif epoch - best_epoch >= config.patience:
            break

    fieldest = build_estimate_field(
        vae, grid, normalizer, l=config.speed_samples, seed=int(seed) + 2,
        ci_level=ci_level,
    )
    return vae, fieldest, trace


def build_estimate_field(vae: DualVae, grid, normalizer, l=50, seed=0, ci_level=0.95):
    """Density from the mean-latent path (a single deterministic layer),
    speed statistics from l sampled layers with empirical CIs."""
    xs = grid.x_coords()
    ts = grid.t_coords()
    xg, tg = np.meshgrid(xs, ts, indexing="ij")
    xn, tn = normalizer.normalize_coords(xg.ravel(), tg.ravel())

    rho = estimate_density(vae, xn, tn) * normalizer.rho_scale
    rho_layer = rho.reshape(1, grid.n_x, grid.n_t)

    samples = estimate_speed_samples(vae, xn, tn, l, seed, v_scale=normalizer.v_scale)
    v_layers = samples.T.reshape(l, grid.n_x, grid.n_t)

    return from_member_layers(
        rho_layer, v_layers, ci_level=ci_level, ci_method="empirical",
        metadata={"estimator": "beta-vae", "speed_samples": l},
    )

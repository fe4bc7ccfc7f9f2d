"""Percentile-family PINN: one network per calibrated curve.

Each member trains a small network against detector data plus a physics
residual built from that member's exponential speed-density curve, under
either the first-order conservation-law model or the second-order model
with relaxation. Aggregating the member predictions per grid cell gives
distributional state estimates.

Data losses are computed in normalized units. Physics residuals are
evaluated in physical units: derivatives taken in normalized coordinates
are rescaled by 1/x_scale and 1/t_scale, states by their scales.
"""

import concurrent.futures
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConvergenceError, NumericalError, ValidationError
from .estimates import from_member_layers
from .networks import DTYPE, MLP, init_parameters
from .percentile_fd import UnderwoodParams

PHYSICS_VARIANTS = ("lwr", "arz")


@dataclass(frozen=True)
class LossWeights:
    """Weights for the data and physics loss terms; tau is the relaxation
    time (seconds) of the second-order momentum residual."""

    beta_rho: float = 1.0
    beta_v: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    eta1: float = 1.0
    eta2: float = 1.0
    eta3: float = 1.0
    tau: float = 5.0

    def __post_init__(self):
        vals = (self.beta_rho, self.beta_v, self.gamma1, self.gamma2,
                self.eta1, self.eta2, self.eta3)
        if any(w < 0 for w in vals):
            raise ValidationError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")


@dataclass
class TrainingConfig:
    layers: int = 11  # total layer count, including input and output
    hidden: int = 64
    lr: float = 1e-3
    epochs: int = 20000
    patience: int = 2000
    min_delta: float = 1e-6

    def layer_sizes(self):
        if self.layers < 2:
            raise ValidationError("need at least input and output layers")
        return [2] + [self.hidden] * (self.layers - 2) + [2]


@dataclass
class AlphaMember:
    """One trained member: its percentile target, curve, network, trace."""

    alpha: float
    fd: UnderwoodParams
    net: MLP
    trace: list = field(default_factory=list)  # (total, data, physics) per epoch


def observation_tensors(obs, normalizer):
    if len(obs) == 0:
        raise ValidationError("observation set is empty")
    xn, tn = normalizer.normalize_coords(obs.x, obs.t)
    rn, vn = normalizer.normalize_states(obs.rho, obs.v)
    xt = torch.tensor(np.stack([xn, tn], axis=1), dtype=DTYPE)
    return xt, torch.tensor(rn, dtype=DTYPE), torch.tensor(vn, dtype=DTYPE)


def collocation_tensors(colloc, normalizer):
    if len(colloc) == 0:
        raise ValidationError("collocation set is empty")
    xn, tn = normalizer.normalize_coords(colloc.x, colloc.t)
    xt = torch.tensor(np.stack([xn, tn], axis=1), dtype=DTYPE)
    return xt.requires_grad_(True)


def data_loss(net, obs, weights: LossWeights, normalizer):
    """MSE against observed states, normalized units. Returns a scalar tensor."""
    xt, rho_o, v_o = observation_tensors(obs, normalizer)
    return _data_loss_t(net, xt, rho_o, v_o, weights)


def _data_loss_t(net, xt, rho_o, v_o, weights):
    out = net(xt)
    return (
        weights.beta_rho * torch.mean((out[:, 0] - rho_o) ** 2)
        + weights.beta_v * torch.mean((out[:, 1] - v_o) ** 2)
    )


def _physical_fields(net, xt, normalizer):
    """Forward pass plus physical-unit states and coordinate gradients."""
    out = net(xt)
    rho_n, v_n = out[:, 0], out[:, 1]
    d_rho = torch.autograd.grad(rho_n.sum(), xt, create_graph=True)[0]
    d_q = torch.autograd.grad((rho_n * v_n).sum(), xt, create_graph=True)[0]
    rs, vs = normalizer.rho_scale, normalizer.v_scale
    xs, ts = normalizer.x_scale, normalizer.t_scale
    rho = rho_n * rs
    v = v_n * vs
    # conservation residual d(rho)/dt + d(rho*v)/dx in veh/m/s
    cons = (rs / ts) * d_rho[:, 1] + (rs * vs / xs) * d_q[:, 0]
    return rho, v, cons


def _equilibrium_speed(rho, fd: UnderwoodParams):
    return fd.v_f * torch.exp(-rho / fd.rho_cr)


def lwr_physics_loss(net, colloc, fd: UnderwoodParams, weights: LossWeights, normalizer):
    """Curve-consistency plus conservation residual MSE, physical units."""
    xt = colloc if torch.is_tensor(colloc) else collocation_tensors(colloc, normalizer)
    rho, v, cons = _physical_fields(net, xt, normalizer)
    fd_res = v - _equilibrium_speed(rho, fd)
    return weights.gamma1 * torch.mean(fd_res**2) + weights.gamma2 * torch.mean(cons**2)


def arz_physics_loss(net, colloc, fd: UnderwoodParams, weights: LossWeights, normalizer):
    """Adds the momentum residual of the second-order model.

    Pressure p(rho) = v_f*(1 - exp(-rho/rho_cr)) so p(0) = 0; the momentum
    term differentiates the composite v + p(rho).
    """
    xt = colloc if torch.is_tensor(colloc) else collocation_tensors(colloc, normalizer)
    rho, v, cons = _physical_fields(net, xt, normalizer)
    v_eq = _equilibrium_speed(rho, fd)
    fd_res = v - v_eq

    w_comp = v + fd.v_f * (1.0 - torch.exp(-rho / fd.rho_cr))
    d_w = torch.autograd.grad(w_comp.sum(), xt, create_graph=True)[0]
    xs, ts = normalizer.x_scale, normalizer.t_scale
    momentum = d_w[:, 1] / ts + v * (d_w[:, 0] / xs) - (v_eq - v) / weights.tau

    return (
        weights.eta1 * torch.mean(fd_res**2)
        + weights.eta2 * torch.mean(cons**2)
        + weights.eta3 * torch.mean(momentum**2)
    )


def physics_loss(net, colloc, fd, physics, weights, normalizer):
    if physics == "lwr":
        return lwr_physics_loss(net, colloc, fd, weights, normalizer)
    if physics == "arz":
        return arz_physics_loss(net, colloc, fd, weights, normalizer)
    raise ValidationError(f"physics must be one of {PHYSICS_VARIANTS}, got {physics!r}")


def train_member(obs, colloc, fd, alpha, physics, weights, config: TrainingConfig, seed, normalizer) -> AlphaMember:
    """Full-batch Adam on data + physics loss with plateau early stop."""
    if physics not in PHYSICS_VARIANTS:
        raise ValidationError(f"physics must be one of {PHYSICS_VARIANTS}, got {physics!r}")
    net = init_parameters(config.layer_sizes(), seed)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)

    obs_xt, rho_o, v_o = observation_tensors(obs, normalizer)
    colloc_xt = collocation_tensors(colloc, normalizer)

    trace = []
    best = math.inf
    best_epoch = 0
    for epoch in range(config.epochs):
        opt.zero_grad()
        ld = _data_loss_t(net, obs_xt, rho_o, v_o, weights)
        lp = physics_loss(net, colloc_xt, fd, physics, weights, normalizer)
        loss = ld + lp
        total = loss.item()
        if not math.isfinite(total):
            raise NumericalError(
                f"training diverged at epoch {epoch} (alpha={alpha}); trace={trace[-5:]}"
            )
        loss.backward()
        opt.step()
        trace.append((total, ld.item(), lp.item()))
        if best - total > config.min_delta:
            best = total
            best_epoch = epoch
        elif epoch - best_epoch >= config.patience:
            break
    return AlphaMember(alpha=float(alpha), fd=fd, net=net, trace=trace)


def predict_grid(net, grid, normalizer):
    """Evaluate the network over the full lattice; physical units."""
    xs = grid.x_coords()
    ts = grid.t_coords()
    xg, tg = np.meshgrid(xs, ts, indexing="ij")
    xn, tn = normalizer.normalize_coords(xg.ravel(), tg.ravel())
    xt = torch.tensor(np.stack([xn, tn], axis=1), dtype=DTYPE)
    with torch.no_grad():
        out = net(xt)
    rho = out[:, 0].numpy().reshape(grid.n_x, grid.n_t) * normalizer.rho_scale
    v = out[:, 1].numpy().reshape(grid.n_x, grid.n_t) * normalizer.v_scale
    return rho, v


def _train_one(args):
    (obs, colloc, fd, alpha, physics, weights, config, seed, normalizer, grid) = args
    member = train_member(obs, colloc, fd, alpha, physics, weights, config, seed, normalizer)
    rho, v = predict_grid(member.net, grid, normalizer)
    return member, rho, v


def train_family(obs, colloc, family, physics, weights, config, seed, *, grid, normalizer,
                 seeds=None, jobs=1, ci_level=0.95, ci_method="gaussian"):
    """Train all family members and aggregate into an EstimateField.

    Members are independent; jobs > 1 trains them in separate processes.
    Per-member seeds default to seed + index; passing an explicit seeds
    list (for example m copies of one seed) overrides that.
    Returns (EstimateField, members). Any member failure raises a
    partial-result error listing the failing alphas, with the completed
    members attached.
    """
    if len(family) < 2:
        raise ValidationError("family must have at least 2 members for estimation")
    if seeds is None:
        seeds = [seed + j for j in range(len(family))]
    if len(seeds) != len(family):
        raise ValidationError("one seed per family member required")

    tasks = [
        (obs, colloc, m.params, m.alpha, physics, weights, config, s, normalizer, grid)
        for m, s in zip(family.members, seeds)
    ]
    results = []
    failures = []
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_train_one, t): t[3] for t in tasks}
            for fut in concurrent.futures.as_completed(futures):
                alpha = futures[fut]
                try:
                    results.append(fut.result())
                except Exception as exc:
                    failures.append((alpha, str(exc)))
        results.sort(key=lambda r: r[0].alpha)
    else:
        for t in tasks:
            try:
                results.append(_train_one(t))
            except (NumericalError, ValidationError) as exc:
                failures.append((t[3], str(exc)))

    if failures:
        done = [r[0] for r in results]
        raise ConvergenceError(
            f"{len(failures)} member(s) failed: {failures}", best=done
        )

    members = [r[0] for r in results]
    rho_layers = np.stack([r[1] for r in results])
    v_layers = np.stack([r[2] for r in results])
    fieldest = from_member_layers(
        rho_layers, v_layers, ci_level=ci_level, ci_method=ci_method,
        metadata={
            "alphas": [m.alpha for m in members],
            "physics": physics,
            "seeds": [int(s) for s in seeds],
        },
    )
    return fieldest, members

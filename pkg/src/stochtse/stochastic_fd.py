"""Stochastic fundamental diagram: a Beta speed distribution per density.

Observed (density, speed) scatter is reduced to interval statistics, a
three-parameter sigmoid mean curve and a scaled log-normal variance curve
are fitted, and the two curves are moment-matched to a Beta distribution
over [0, v_max] at every queried density.
"""

import configparser
import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.special import betaln
from scipy.stats import beta as beta_dist

from .errors import ConvergenceError, InsufficientDataError, ValidationError

logger = logging.getLogger(__name__)

# moment-matching validity: variance must stay below mu*(1-mu); the ceiling
# backs off by this factor, and a small floor keeps shapes finite where the
# fitted variance underflows (density near zero)
VAR_CLAMP_FACTOR = 0.95
VAR_FLOOR = 1e-8


@dataclass
class IntervalStats:
    """Per-density-bin sample count, mean and unbiased variance."""

    edges: np.ndarray  # I+1 edges over [0, max rho]
    counts: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    n_min: int

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def usable(self):
        return (self.counts >= self.n_min) & np.isfinite(self.variances)


@dataclass(frozen=True)
class S3Params:
    """Sigmoid mean speed curve v = v_f / (1 + (rho/rho_cr)^m)^(2/m)."""

    v_f: float
    rho_cr: float
    m_shape: float

    def __post_init__(self):
        if min(self.v_f, self.rho_cr, self.m_shape) <= 0:
            raise ValidationError(f"S3 parameters must be positive, got {self}")


@dataclass(frozen=True)
class VarianceCurve:
    """Scaled log-normal density shape A * pdf_lognormal(rho; mu_ln, sigma_ln)."""

    A: float
    mu_ln: float
    sigma_ln: float

    def __post_init__(self):
        if self.A <= 0 or self.sigma_ln <= 0:
            raise ValidationError(f"A and sigma_ln must be positive, got {self}")

    def __call__(self, rho):
        rho = np.asarray(rho, dtype=float)
        out = np.zeros_like(rho)
        pos = rho > 0
        r = rho[pos]
        out[pos] = (
            self.A
            / (r * self.sigma_ln * np.sqrt(2 * np.pi))
            * np.exp(-((np.log(r) - self.mu_ln) ** 2) / (2 * self.sigma_ln**2))
        )
        return out if out.ndim else float(out)

    @property
    def peak_density(self):
        """Interior maximum of the curve (log-normal mode)."""
        return float(np.exp(self.mu_ln - self.sigma_ln**2))


@dataclass(frozen=True)
class BetaProcess:
    """Density-indexed Beta speed distribution on [0, v_max]."""

    mean_curve: S3Params
    var_curve: VarianceCurve
    v_max: float
    rho_max: float

    def __post_init__(self):
        if self.v_max <= 0 or self.rho_max <= 0:
            raise ValidationError("v_max and rho_max must be positive")


def interval_stats(obs, n_intervals=30, n_min=20) -> IntervalStats:
    """Equal-width density bins over [0, max rho] with per-bin statistics.

    Bins below n_min samples (or without a defined variance) are excluded
    from downstream fits; the fits raise when fewer than 3 bins remain.
    """
    if n_intervals < 2:
        raise ValidationError("need at least 2 intervals")
    rho = np.asarray(obs.rho, dtype=float)
    v = np.asarray(obs.v, dtype=float)
    edges = np.linspace(0.0, rho.max(), n_intervals + 1)
    idx = np.clip(np.digitize(rho, edges) - 1, 0, n_intervals - 1)
    counts = np.bincount(idx, minlength=n_intervals)
    means = np.full(n_intervals, np.nan)
    variances = np.full(n_intervals, np.nan)
    for i in range(n_intervals):
        sel = idx == i
        if counts[i] >= 1:
            means[i] = v[sel].mean()
        if counts[i] >= 2:
            variances[i] = v[sel].var(ddof=1)
    return IntervalStats(edges=edges, counts=counts, means=means, variances=variances, n_min=n_min)


def s3_speed(params: S3Params, rho):
    """Mean speed curve; equals v_f at rho=0, v_f/2^(2/m) at rho=rho_cr."""
    rho = np.asarray(rho, dtype=float)
    if (rho < 0).any():
        raise ValidationError("density must be non-negative")
    return params.v_f / (1.0 + (rho / params.rho_cr) ** params.m_shape) ** (2.0 / params.m_shape)


def _require_usable(stats: IntervalStats, what):
    usable = stats.usable
    if usable.sum() < 3:
        raise InsufficientDataError(
            f"{what} needs at least 3 usable bins, found {int(usable.sum())} "
            f"(n_min={stats.n_min})"
        )
    return usable


def fit_s3(stats: IntervalStats, opts=None) -> S3Params:
    """Count-weighted least squares of the sigmoid curve to bin means."""
    usable = _require_usable(stats, "mean-curve fit")
    rho = stats.centers[usable]
    vbar = stats.means[usable]
    n = stats.counts[usable].astype(float)

    v_f0 = float(vbar.max()) * 1.02
    # start rho_cr where the mean is closest to half the top speed
    rho_cr0 = float(rho[np.argmin(np.abs(vbar - v_f0 / 2))])
    rho_cr0 = max(rho_cr0, 1e-3)
    x0 = np.array([v_f0, rho_cr0, 3.0])

    def residual(p):
        curve = p[0] / (1.0 + (rho / p[1]) ** p[2]) ** (2.0 / p[2])
        return np.sqrt(n) * (curve - vbar)

    lower = [0.1, 1e-3, 0.2]
    upper = [100.0, 10.0, 40.0]
    res = least_squares(residual, x0, bounds=(lower, upper), max_nfev=5000)
    cost0 = 0.5 * float(np.sum(residual(x0) ** 2))
    if not res.success:
        raise ConvergenceError(
            f"mean-curve fit did not converge: {res.message}",
            best=S3Params(v_f=float(res.x[0]), rho_cr=float(res.x[1]), m_shape=float(res.x[2])),
        )
    if res.cost > cost0 + 1e-12:
        raise ConvergenceError("mean-curve fit worse than initialization", best=None)
    return S3Params(v_f=float(res.x[0]), rho_cr=float(res.x[1]), m_shape=float(res.x[2]))


def fit_variance_curve(stats: IntervalStats, opts=None) -> VarianceCurve:
    """Least squares of the scaled log-normal shape to bin variances.

    A fit explaining less than 20% of the variance-of-variances is flagged
    with a poor-fit warning (constant variances are one such case).
    """
    usable = _require_usable(stats, "variance-curve fit")
    rho = stats.centers[usable]
    wvar = stats.variances[usable]
    if (rho <= 0).any():
        usable_pos = rho > 0
        rho, wvar = rho[usable_pos], wvar[usable_pos]
        if len(rho) < 3:
            raise InsufficientDataError("variance-curve fit needs 3 bins at positive density")

    sigma0 = 0.5
    rho_peak = float(rho[np.argmax(wvar)])
    mu0 = np.log(rho_peak) + sigma0**2

    def shape(p, r):
        return p[0] / (r * p[2] * np.sqrt(2 * np.pi)) * np.exp(
            -((np.log(r) - p[1]) ** 2) / (2 * p[2] ** 2)
        )

    a0 = float(wvar.max()) / float(
        1.0 / (rho_peak * sigma0 * np.sqrt(2 * np.pi)) * np.exp(-sigma0**2 / 2)
    )
    x0 = np.array([max(a0, 1e-8), mu0, sigma0])

    def residual(p):
        return shape(p, rho) - wvar

    res = least_squares(
        residual, x0,
        bounds=([1e-12, -20.0, 1e-3], [np.inf, 20.0, 10.0]),
        max_nfev=5000,
    )
    if not res.success:
        raise ConvergenceError(f"variance-curve fit did not converge: {res.message}", best=None)
    curve = VarianceCurve(A=float(res.x[0]), mu_ln=float(res.x[1]), sigma_ln=float(res.x[2]))

    ss_res = float(np.sum((curve(rho) - wvar) ** 2))
    ss_tot = float(np.sum((wvar - wvar.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    if r2 < 0.2:
        logger.warning("variance curve fits poorly (R^2=%.3f); shape may not match data", r2)
    return curve


def beta_shapes(process: BetaProcess, rho):
    """Moment-matched Beta shape parameters at density rho.

    mu = mean_curve(rho)/v_max and omega = var_curve(rho)/v_max^2, with
    omega clamped into [VAR_FLOOR, 0.95*mu*(1-mu)] so both shapes stay
    positive. After clamping, alpha/(alpha+beta) reproduces mu and the
    Beta variance reproduces omega exactly.
    """
    rho_arr = np.asarray(rho, dtype=float)
    if (rho_arr < 0).any() or (rho_arr > process.rho_max + 1e-12).any():
        raise ValidationError(f"density outside process domain [0, {process.rho_max}]")
    mu = s3_speed(process.mean_curve, rho_arr) / process.v_max
    if (mu <= 0).any() or (mu >= 1).any():
        raise ValidationError("normalized mean outside (0,1); v_max must exceed all fitted means")
    omega = process.var_curve(rho_arr) / process.v_max**2
    ceiling = VAR_CLAMP_FACTOR * mu * (1.0 - mu)
    clamped = omega > ceiling
    if np.any(clamped):
        logger.warning(
            "variance clamp engaged at %d of %d densities", int(np.sum(clamped)), clamped.size
        )
    omega = np.minimum(np.maximum(omega, VAR_FLOOR), ceiling)
    common = mu - mu**2 - omega
    a = mu / omega * common
    b = (1.0 - mu) / omega * common
    if np.isscalar(rho) or np.asarray(rho).ndim == 0:
        return float(a), float(b)
    return a, b


def beta_pdf(process: BetaProcess, rho, v):
    """Speed density g(v) at density rho; zero outside [0, v_max]."""
    a, b = beta_shapes(process, rho)
    v = np.asarray(v, dtype=float)
    u = v / process.v_max
    inside = (u >= 0) & (u <= 1)
    out = np.zeros_like(u)
    out[inside] = beta_dist.pdf(u[inside], a, b) / process.v_max
    return out if out.ndim else float(out)


def beta_logpdf(process: BetaProcess, rho, v):
    """log g(v); -inf outside the support."""
    a, b = beta_shapes(process, rho)
    u = np.asarray(v, dtype=float) / process.v_max
    with np.errstate(divide="ignore", invalid="ignore"):
        lp = (
            (a - 1.0) * np.log(u)
            + (b - 1.0) * np.log1p(-u)
            - betaln(a, b)
            - np.log(process.v_max)
        )
    lp = np.where((u < 0) | (u > 1), -np.inf, lp)
    return lp if lp.ndim else float(lp)


def beta_sample(process: BetaProcess, rho, n, seed):
    """n speed draws at density rho, deterministic per seed."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    a, b = beta_shapes(process, rho)
    rng = np.random.default_rng(seed)
    return rng.beta(a, b, size=n) * process.v_max


def fit_beta_process(obs, n_intervals=30, n_min=20, v_max_factor=1.05) -> BetaProcess:
    """Fit mean and variance curves from scatter and assemble the process."""
    stats = interval_stats(obs, n_intervals=n_intervals, n_min=n_min)
    mean_curve = fit_s3(stats)
    var_curve = fit_variance_curve(stats)
    # the support must clear the fitted free-flow speed, or beta_shapes
    # is undefined at densities below the observed range
    v_max = v_max_factor * max(float(np.asarray(obs.v).max()), mean_curve.v_f)
    rho_max = float(np.asarray(obs.rho).max())
    return BetaProcess(mean_curve=mean_curve, var_curve=var_curve, v_max=v_max, rho_max=rho_max)


def export_process(process: BetaProcess, path):
    """Key-value dump with [s3], [variance], [domain] sections."""
    cp = configparser.ConfigParser()
    cp["s3"] = {
        "v_f": repr(float(process.mean_curve.v_f)),
        "rho_cr": repr(float(process.mean_curve.rho_cr)),
        "m_shape": repr(float(process.mean_curve.m_shape)),
    }
    cp["variance"] = {
        "amplitude": repr(float(process.var_curve.A)),
        "mu_ln": repr(float(process.var_curve.mu_ln)),
        "sigma_ln": repr(float(process.var_curve.sigma_ln)),
    }
    cp["domain"] = {"v_max": repr(float(process.v_max)), "rho_max": repr(float(process.rho_max))}
    with open(path, "w") as fh:
        cp.write(fh)


def import_process(path) -> BetaProcess:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ValidationError(f"{path}: cannot read process file")
    try:
        s3 = S3Params(
            v_f=cp.getfloat("s3", "v_f"),
            rho_cr=cp.getfloat("s3", "rho_cr"),
            m_shape=cp.getfloat("s3", "m_shape"),
        )
        var = VarianceCurve(
            A=cp.getfloat("variance", "amplitude"),
            mu_ln=cp.getfloat("variance", "mu_ln"),
            sigma_ln=cp.getfloat("variance", "sigma_ln"),
        )
        return BetaProcess(
            mean_curve=s3, var_curve=var,
            v_max=cp.getfloat("domain", "v_max"),
            rho_max=cp.getfloat("domain", "rho_max"),
        )
    except (configparser.Error, ValueError) as exc:
        raise ValidationError(f"{path}: malformed process file ({exc})") from None


def export_spectrum(process: BetaProcess, path, n_points=100):
    """CSV of rho,alpha_shape,beta_shape,mean,variance over the domain."""
    rho = np.linspace(0.0, process.rho_max, n_points)
    a, b = beta_shapes(process, rho)
    mean = a / (a + b) * process.v_max
    var = a * b / ((a + b) ** 2 * (a + b + 1.0)) * process.v_max**2
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rho", "alpha_shape", "beta_shape", "mean", "variance"])
        for row in zip(rho, a, b, mean, var):
            writer.writerow([repr(float(c)) for c in row])

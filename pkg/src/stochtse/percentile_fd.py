"""Percentile-family Underwood curve calibration.

For a target fraction alpha, find the exponential speed-density curve
v(rho) = v_f * exp(-rho/rho_cr) below which a fraction alpha of the
weighted speed-residual mass lies. The objective is an asymmetric
weighted least squares: residuals below the curve cost (1-alpha)*w*r^2,
residuals above cost alpha*w*r^2. Written in its two-term form,

    C = sum (1-2*alpha)*w_i*g_i^2 + sum alpha*w_i*(v_i - v(rho_i))^2

with g_i the below-curve part of the residual; both forms agree
algebraically and the implementation is tested against that identity.
"""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import ConvergenceError, NumericalError, ValidationError

# 15 evenly spaced targets, 0.01 through 0.99 step 0.07
DEFAULT_ALPHAS = tuple(round(0.01 + 0.07 * j, 2) for j in range(15))

FAMILY_CSV_HEADER = ("alpha", "rho_cr", "v_f", "achieved_alpha", "objective")


@dataclass(frozen=True)
class UnderwoodParams:
    """Exponential speed-density curve parameters."""

    rho_cr: float  # critical density, veh/m
    v_f: float  # free-flow speed, m/s

    def __post_init__(self):
        if not (self.rho_cr > 0 and self.v_f > 0):
            raise ValidationError(f"rho_cr and v_f must be positive, got {self}")


@dataclass(frozen=True)
class PercentileFD:
    """One calibrated percentile curve."""

    alpha: float
    params: UnderwoodParams
    achieved_alpha: float
    objective_value: float


@dataclass
class PercentileFDFamily:
    """Ordered calibrated curves with strictly increasing alphas.

    A single-member family is permitted for diagnostics only; estimation
    requires at least two members.
    """

    members: list

    def __post_init__(self):
        if not self.members:
            raise ValidationError("family must contain at least one member")
        alphas = [m.alpha for m in self.members]
        if any(b <= a for a, b in zip(alphas, alphas[1:])):
            raise ValidationError(f"alphas must be strictly increasing, got {alphas}")

    def __len__(self):
        return len(self.members)

    def alphas(self):
        return [m.alpha for m in self.members]


@dataclass
class SampleWeights:
    """Positive per-observation weights (selection-bias correction)."""

    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if (self.w <= 0).any() or not np.isfinite(self.w).all():
            raise ValidationError("weights must be positive and finite")


@dataclass
class OptimizerOptions:
    """Multi-start Nelder-Mead settings over log-parameterized curves."""

    n_starts: int = 5
    rho_cr_bounds: tuple = (0.01, 1.0)
    v_f_bounds: tuple = (1.0, 50.0)
    starts: tuple = ((0.1, 10.0), (0.2, 20.0), (0.3, 30.0), (0.15, 25.0), (0.45, 40.0))
    maxiter: int = 4000
    xatol: float = 1e-9
    fatol: float = 1e-12


def bin_weights(rho, n_bins=30, uniform=False) -> SampleWeights:
    """Inverse-frequency weights over equal-width density bins, mean 1.

    Corrects over-representation of free-flow samples. uniform=True
    returns all-ones weights.
    """
    rho = np.asarray(rho, dtype=float)
    if uniform or rho.min() == rho.max():
        return SampleWeights(np.ones(len(rho)))
    edges = np.linspace(rho.min(), rho.max(), n_bins + 1)
    idx = np.clip(np.digitize(rho, edges) - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    w = 1.0 / counts[idx]
    return SampleWeights(w / w.mean())


def underwood_speed(params: UnderwoodParams, rho):
    """v_f * exp(-rho/rho_cr); strictly decreasing in rho."""
    rho = np.asarray(rho, dtype=float)
    if (rho < 0).any():
        raise ValidationError("density must be non-negative")
    return params.v_f * np.exp(-rho / params.rho_cr)


def below_curve_residual(params: UnderwoodParams, rho, v):
    """max(v_curve(rho) - v, 0): the below-curve part of the residual."""
    rho = np.asarray(rho, dtype=float)
    v = np.asarray(v, dtype=float)
    if (v < 0).any():
        raise ValidationError("speeds must be non-negative")
    return np.maximum(underwood_speed(params, rho) - v, 0.0)


def percentile_objective(params, obs, weights: SampleWeights, alpha):
    """Two-term asymmetric objective value, (m/s)^2.

    Equals sum_below (1-alpha)*w*r^2 + sum_above alpha*w*r^2.
    """
    if not 0 < alpha < 1:
        raise ValidationError(f"alpha must be in (0,1), got {alpha}")
    g = below_curve_residual(params, obs.rho, obs.v)
    r2 = (obs.v - underwood_speed(params, obs.rho)) ** 2
    value = float(np.sum((1.0 - 2.0 * alpha) * weights.w * g**2) + np.sum(alpha * weights.w * r2))
    # negative coefficient for alpha > 0.5 never drives the sum negative
    assert value >= 0.0, "objective must be non-negative"
    return value


def achieved_percentile(params, obs, weights: SampleWeights):
    """Weighted residual mass below the curve over total residual mass."""
    g = below_curve_residual(params, obs.rho, obs.v)
    total = np.sum(weights.w * np.abs(obs.v - underwood_speed(params, obs.rho)))
    if total == 0.0:
        raise NumericalError("all points lie on the curve; achieved ratio undefined")
    return float(np.sum(weights.w * g) / total)


def calibrate_percentile(obs, weights, alpha, opts=None) -> PercentileFD:
    """Minimize the percentile objective over (rho_cr, v_f).

    Multi-start Nelder-Mead on log parameters with box bounds. The fitted
    curve's achieved fraction normally lands within 0.03 of alpha on sane
    scatter; a larger gap is warned about, not raised.
    """
    if len(obs) < 10:
        raise ValidationError(f"need at least 10 observations, got {len(obs)}")
    if not 0 < alpha < 1:
        raise ValidationError(f"alpha must be in (0,1), got {alpha}")
    opts = opts or OptimizerOptions()
    (rc_lo, rc_hi), (vf_lo, vf_hi) = opts.rho_cr_bounds, opts.v_f_bounds

    rho = obs.rho
    v = obs.v
    w = weights.w
    if len(w) != len(obs):
        raise ValidationError("one weight per observation required")

    def fun(logp):
        rc, vf = np.exp(logp)
        if not (rc_lo <= rc <= rc_hi and vf_lo <= vf <= vf_hi):
            return 1e30
        r = v - vf * np.exp(-rho / rc)
        aw = np.where(r < 0, 1.0 - alpha, alpha)
        return float(np.sum(aw * w * r * r))

    best = None
    any_converged = False
    for rc0, vf0 in opts.starts[: opts.n_starts]:
        res = minimize(
            fun,
            np.log([rc0, vf0]),
            method="Nelder-Mead",
            options=dict(maxiter=opts.maxiter, xatol=opts.xatol, fatol=opts.fatol),
        )
        any_converged = any_converged or bool(res.success)
        if best is None or res.fun < best.fun:
            best = res

    rc, vf = np.exp(best.x)
    params = UnderwoodParams(rho_cr=float(rc), v_f=float(vf))
    if not any_converged:
        raise ConvergenceError(
            f"no Nelder-Mead start converged within {opts.maxiter} iterations for alpha={alpha}",
            best=params,
        )
    achieved = achieved_percentile(params, obs, weights)
    if abs(achieved - alpha) > 0.03:
        warnings.warn(
            f"achieved fraction {achieved:.3f} is more than 0.03 from target {alpha}",
            stacklevel=2,
        )
    return PercentileFD(
        alpha=float(alpha),
        params=params,
        achieved_alpha=achieved,
        objective_value=percentile_objective(params, obs, weights, alpha),
    )


def calibrate_family(obs, weights, alphas=DEFAULT_ALPHAS, opts=None) -> PercentileFDFamily:
    """One calibrated curve per target alpha, ordered."""
    alphas = list(alphas)
    if any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise ValidationError(f"alphas must be strictly increasing, got {alphas}")
    if any(not 0 < a < 1 for a in alphas):
        raise ValidationError("alphas must lie in (0,1)")
    members = []
    for a in alphas:
        try:
            members.append(calibrate_percentile(obs, weights, a, opts))
        except ConvergenceError as exc:
            raise ConvergenceError(f"alpha={a}: {exc}", best=exc.best) from exc
        except (ValidationError, NumericalError) as exc:
            raise type(exc)(f"alpha={a}: {exc}") from exc
    return PercentileFDFamily(members=members)


def export_family(family: PercentileFDFamily, path):
    """CSV dump: alpha,rho_cr,v_f,achieved_alpha,objective."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FAMILY_CSV_HEADER)
        for m in family.members:
            writer.writerow(
                [repr(m.alpha), repr(m.params.rho_cr), repr(m.params.v_f),
                 repr(m.achieved_alpha), repr(m.objective_value)]
            )


def import_family(path) -> PercentileFDFamily:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != FAMILY_CSV_HEADER:
            raise ValidationError(f"{path}: expected header {','.join(FAMILY_CSV_HEADER)}")
        members = []
        for row in reader:
            if not row:
                continue
            a, rc, vf, ach, obj = (float(s) for s in row)
            members.append(
                PercentileFD(
                    alpha=a,
                    params=UnderwoodParams(rho_cr=rc, v_f=vf),
                    achieved_alpha=ach,
                    objective_value=obj,
                )
            )
    return PercentileFDFamily(members=members)

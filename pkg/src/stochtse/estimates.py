"""Per-cell estimate distributions aggregated from ensemble layers.

An EstimateField stores mean and spread for density and speed over the
full grid, keeps the raw member layers (one per percentile member, or
one per speed sample), and derives a confidence band either from the
Gaussian mu +/- z*sigma rule or from empirical member percentiles.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .errors import ShapeError, ValidationError

CI_METHODS = ("gaussian", "empirical")


@dataclass
class EstimateField:
    mu_rho: np.ndarray
    sigma_rho: np.ndarray
    mu_v: np.ndarray
    sigma_v: np.ndarray
    member_densities: np.ndarray = None  # (m, n_x, n_t) or None
    member_speeds: np.ndarray = None
    ci_level: float = 0.95
    ci_method: str = "gaussian"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = self.mu_rho.shape
        for name in ("sigma_rho", "mu_v", "sigma_v"):
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} shape mismatch with mu_rho {shape}")
        if (self.sigma_rho < 0).any() or (self.sigma_v < 0).any():
            raise ValidationError("sigma must be non-negative")
        if not 0 < self.ci_level < 1:
            raise ValidationError("ci_level must be in (0,1)")
        if self.ci_method not in CI_METHODS:
            raise ValidationError(f"ci_method must be one of {CI_METHODS}")

    @property
    def shape(self):
        return self.mu_rho.shape

    def _layers(self, state):
        return self.member_densities if state == "density" else self.member_speeds

    def _moments(self, state):
        if state == "density":
            return self.mu_rho, self.sigma_rho
        if state == "speed":
            return self.mu_v, self.sigma_v
        raise ValidationError(f"unknown state {state!r}")

    def ci_bounds(self, state, method=None, level=None):
        """(lo, hi) confidence band per cell for the given state."""
        method = method or self.ci_method
        level = level or self.ci_level
        mu, sigma = self._moments(state)
        if method == "gaussian":
            z = float(norm.ppf(0.5 + level / 2))
            return mu - z * sigma, mu + z * sigma
        layers = self._layers(state)
        if layers is None:
            raise ValidationError(f"no member layers stored for {state}; empirical CI unavailable")
        tail = 100 * (1 - level) / 2
        lo = np.percentile(layers, tail, axis=0)
        hi = np.percentile(layers, 100 - tail, axis=0)
        return lo, hi


def from_member_layers(member_densities, member_speeds, ci_level=0.95, ci_method="gaussian", metadata=None) -> EstimateField:
    """Aggregate stacked member layers into mean/spread fields.

    The spread is the sample standard deviation (ddof=1) across layers.
    """
    member_densities = np.asarray(member_densities, dtype=float)
    member_speeds = np.asarray(member_speeds, dtype=float)
    if member_densities.ndim != 3 or member_speeds.ndim != 3:
        raise ShapeError("member layers must be (m, n_x, n_t)")
    if member_densities.shape[1:] != member_speeds.shape[1:]:
        raise ShapeError("density and speed member stacks must share a grid shape")

    def stats(layers):
        # layer counts may differ per state (one density layer, l speed samples)
        ddof = 1 if layers.shape[0] > 1 else 0
        return layers.mean(axis=0), layers.std(axis=0, ddof=ddof)

    mu_rho, sigma_rho = stats(member_densities)
    mu_v, sigma_v = stats(member_speeds)
    return EstimateField(
        mu_rho=mu_rho,
        sigma_rho=sigma_rho,
        mu_v=mu_v,
        sigma_v=sigma_v,
        member_densities=member_densities,
        member_speeds=member_speeds,
        ci_level=ci_level,
        ci_method=ci_method,
        metadata=dict(metadata or {}),
    )


def export_estimates(fieldest: EstimateField, out_dir):
    """Write density.csv / speed.csv layers, members.npz, metadata.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for state, name in (("density", "density.csv"), ("speed", "speed.csv")):
        mu, sigma = fieldest._moments(state)
        lo, hi = fieldest.ci_bounds(state)
        with open(out / name, "w") as fh:
            fh.write("x_index,t_index,mean,std,ci_lo,ci_hi\n")
            n_x, n_t = mu.shape
            for i in range(n_x):
                for j in range(n_t):
                    fh.write(
                        f"{i},{j},{float(mu[i, j])!r},{float(sigma[i, j])!r},"
                        f"{float(lo[i, j])!r},{float(hi[i, j])!r}\n"
                    )
    members = {}
    if fieldest.member_densities is not None:
        members["member_densities"] = fieldest.member_densities
    if fieldest.member_speeds is not None:
        members["member_speeds"] = fieldest.member_speeds
    if members:
        np.savez(out / "members.npz", **members)
    meta = dict(fieldest.metadata)
    meta.update(
        {
            "ci_level": fieldest.ci_level,
            "ci_method": fieldest.ci_method,
            "shape": list(fieldest.shape),
        }
    )
    with open(out / "metadata.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def import_estimates(out_dir) -> EstimateField:
    out = Path(out_dir)
    with open(out / "metadata.json") as fh:
        meta = json.load(fh)
    shape = tuple(meta["shape"])

    def read_layer(name):
        mu = np.empty(shape)
        sigma = np.empty(shape)
        with open(out / name) as fh:
            header = fh.readline().strip()
            if header != "x_index,t_index,mean,std,ci_lo,ci_hi":
                raise ValidationError(f"{name}: unexpected header {header!r}")
            for line in fh:
                parts = line.split(",")
                i, j = int(parts[0]), int(parts[1])
                mu[i, j] = float(parts[2])
                sigma[i, j] = float(parts[3])
        return mu, sigma

    mu_rho, sigma_rho = read_layer("density.csv")
    mu_v, sigma_v = read_layer("speed.csv")
    member_densities = member_speeds = None
    members_path = out / "members.npz"
    if members_path.exists():
        with np.load(members_path) as data:
            member_densities = data.get("member_densities")
            member_speeds = data.get("member_speeds")
    extra = {k: v for k, v in meta.items() if k not in ("ci_level", "ci_method", "shape")}
    return EstimateField(
        mu_rho=mu_rho, sigma_rho=sigma_rho, mu_v=mu_v, sigma_v=sigma_v,
        member_densities=member_densities, member_speeds=member_speeds,
        ci_level=meta["ci_level"], ci_method=meta["ci_method"], metadata=extra,
    )

"""Accuracy metrics, interval coverage, and distributional summaries.

Reports compare an estimate field against a ground-truth grid over a cell
mask (full grid by default, or only cells off the detector rows). The
fundamental-diagram reconstruction rebuilds (density, speed) scatter from
the field's spread and summarizes it as a per-density-bin percentile band
with a sigmoid curve refit through the band center. Speed histograms
collect the estimated speed distribution at cells near a target density.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError, ValidationError
from .estimates import EstimateField
from .stochastic_fd import IntervalStats, S3Params, fit_s3, s3_speed

STATES = ("density", "speed")

# density window (veh/m) for selecting cells "at" a target density
DENSITY_MATCH_TOL = 0.01


@dataclass(frozen=True)
class StateMetrics:
    mae: float
    rmse: float
    l2: float  # ||est - true||_2 / ||true||_2


@dataclass
class MetricReport:
    density: StateMetrics
    speed: StateMetrics
    n_cells: int
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "density": vars(self.density).copy(),
            "speed": vars(self.speed).copy(),
            "n_cells": self.n_cells,
            "metadata": dict(self.metadata),
        }


@dataclass
class CoverageReport:
    level: float
    density: float  # fraction of masked true cells inside the band
    speed: float
    n_cells: int
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "level": self.level,
            "density": self.density,
            "speed": self.speed,
            "n_cells": self.n_cells,
            "metadata": dict(self.metadata),
        }


def full_mask(shape):
    return np.ones(shape, dtype=bool)


def held_out_mask(shape, detector_rows):
    """True on every cell except the observed detector rows."""
    mask = np.ones(shape, dtype=bool)
    for r in detector_rows:
        if not 0 <= r < shape[0]:
            raise ValidationError(f"detector row {r} outside grid with n_x={shape[0]}")
        mask[r, :] = False
    return mask


def _check_mask(est: EstimateField, truth, mask):
    if est.shape != truth.densities.shape:
        raise ShapeError(f"estimate shape {est.shape} != truth shape {truth.densities.shape}")
    if mask is None:
        mask = full_mask(est.shape)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != est.shape:
        raise ShapeError(f"mask shape {mask.shape} != field shape {est.shape}")
    if not mask.any():
        raise ValidationError("evaluation mask selects no cells")
    return mask


def _state_metrics(est_mu, true_vals, mask):
    err = est_mu[mask] - true_vals[mask]
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err**2)))
    norm_true = float(np.linalg.norm(true_vals[mask]))
    norm_err = float(np.linalg.norm(err))
    if norm_true == 0.0:
        if norm_err > 0.0:
            raise NumericalError("relative error undefined: true field is identically zero")
        l2 = 0.0
    else:
        l2 = norm_err / norm_true
    assert rmse >= mae - 1e-12
    return StateMetrics(mae=mae, rmse=rmse, l2=l2)


def compute_metrics(est: EstimateField, truth, mask=None, metadata=None) -> MetricReport:
    """MAE, RMSE and relative L2 of the field means over masked cells."""
    mask = _check_mask(est, truth, mask)
    return MetricReport(
        density=_state_metrics(est.mu_rho, truth.densities, mask),
        speed=_state_metrics(est.mu_v, truth.speeds, mask),
        n_cells=int(mask.sum()),
        metadata=dict(metadata or {}),
    )


def ci_coverage(est: EstimateField, truth, mask=None, level=None, metadata=None) -> CoverageReport:
    """Fraction of masked true values inside the field's interval bounds."""
    mask = _check_mask(est, truth, mask)
    level = est.ci_level if level is None else float(level)

    def frac(state, true_vals):
        lo, hi = est.ci_bounds(state, level=level)
        inside = (true_vals >= lo) & (true_vals <= hi)
        return float(np.mean(inside[mask]))

    return CoverageReport(
        level=level,
        density=frac("density", truth.densities),
        speed=frac("speed", truth.speeds),
        n_cells=int(mask.sum()),
        metadata=dict(metadata or {}),
    )


@dataclass
class FdReconstruction:
    """Scatter of estimated (rho, v) pairs plus a binned percentile band."""

    rho: np.ndarray  # scatter, one entry per (cell, draw)
    v: np.ndarray
    bin_centers: np.ndarray
    band_lo: np.ndarray  # 2.5th percentile per usable bin
    band_hi: np.ndarray  # 97.5th
    band_center: np.ndarray  # median
    center_fit: S3Params  # sigmoid refit through the band center


def _speed_draws(est: EstimateField, n_draws, seed):
    """(n_cells, k) speed draws: member layers when stored, otherwise
    Gaussian draws from the per-cell moments."""
    if est.member_speeds is not None:
        layers = est.member_speeds.reshape(est.member_speeds.shape[0], -1).T
        if layers.shape[1] > n_draws:
            rng = np.random.default_rng(seed)
            keep = rng.choice(layers.shape[1], size=n_draws, replace=False)
            layers = layers[:, keep]
        return layers
    rng = np.random.default_rng(seed)
    mu = est.mu_v.reshape(-1, 1)
    sigma = est.sigma_v.reshape(-1, 1)
    return mu + sigma * rng.standard_normal((mu.shape[0], n_draws))


def reconstruct_fd_scatter(est: EstimateField, n_draws=20, n_bins=30,
                           min_bin_count=5, seed=0) -> FdReconstruction:
    """Rebuild the flow-speed scatter implied by the estimate field.

    Every cell contributes its mean density paired with n_draws speed
    draws. The scatter is cut into equal-width density bins; bins with at
    least min_bin_count points give the 2.5/97.5 percentile band and its
    median center, and the center is refit with the sigmoid mean curve.
    A zero-spread field collapses the band onto the mean curve.
    """
    draws = _speed_draws(est, n_draws, seed)
    k = draws.shape[1]
    rho = np.repeat(est.mu_rho.reshape(-1), k)
    v = draws.reshape(-1)

    edges = np.linspace(0.0, rho.max(), n_bins + 1)
    idx = np.clip(np.digitize(rho, edges) - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    centers = np.full(n_bins, np.nan)
    lo = np.full(n_bins, np.nan)
    hi = np.full(n_bins, np.nan)
    medians = np.full(n_bins, np.nan)
    variances = np.full(n_bins, np.nan)
    for i in range(n_bins):
        sel = idx == i
        if counts[i] >= min_bin_count:
            vals = v[sel]
            centers[i] = 0.5 * (edges[i] + edges[i + 1])
            lo[i], medians[i], hi[i] = np.percentile(vals, [2.5, 50.0, 97.5])
            variances[i] = vals.var(ddof=1) if counts[i] >= 2 else 0.0
    usable = np.isfinite(medians)

    # refit the sigmoid through the band center, count-weighted like the
    # stochastic mean-curve fit
    stats = IntervalStats(
        edges=edges,
        counts=np.where(usable, counts, 0),
        means=medians,
        variances=np.where(usable, variances, np.nan),
        n_min=min_bin_count,
    )
    center_fit = fit_s3(stats)

    return FdReconstruction(
        rho=rho, v=v,
        bin_centers=centers[usable],
        band_lo=lo[usable], band_hi=hi[usable], band_center=medians[usable],
        center_fit=center_fit,
    )


@dataclass
class SpeedHistogram:
    """Normalized speed histogram at one target density."""

    target_density: float
    edges: np.ndarray
    probs: np.ndarray  # sums to 1 when non-empty
    n_cells: int
    iqr: float
    empty: bool


def speed_histograms(est: EstimateField, densities, bin_count=20, tol=DENSITY_MATCH_TOL,
                     n_draws=20, seed=0):
    """Per-target-density speed distributions of the estimate.

    Cells whose estimated mean density lies within tol of a target
    contribute their speed draws. All histograms share one bin lattice
    over the pooled speed range so spreads are comparable. A target with
    no matching cells yields an empty, flagged histogram.
    """
    if not len(densities):
        raise ValidationError("need at least one target density")
    draws = _speed_draws(est, n_draws, seed)
    rho_flat = est.mu_rho.reshape(-1)

    selections = [np.abs(rho_flat - float(d)) <= tol for d in densities]
    pooled = np.concatenate([draws[sel].ravel() for sel in selections if sel.any()] or [np.zeros(1)])
    v_hi = float(pooled.max()) if pooled.max() > 0 else 1.0
    edges = np.linspace(min(0.0, float(pooled.min())), v_hi, bin_count + 1)

    out = []
    for target, sel in zip(densities, selections):
        n_cells = int(sel.sum())
        if n_cells == 0:
            out.append(SpeedHistogram(
                target_density=float(target), edges=edges,
                probs=np.zeros(bin_count), n_cells=0, iqr=float("nan"), empty=True,
            ))
            continue
        vals = draws[sel].ravel()
        counts, _ = np.histogram(np.clip(vals, edges[0], edges[-1]), bins=edges)
        probs = counts.astype(float) / counts.sum()
        q1, q3 = np.percentile(vals, [25.0, 75.0])
        out.append(SpeedHistogram(
            target_density=float(target), edges=edges, probs=probs,
            n_cells=n_cells, iqr=float(q3 - q1), empty=False,
        ))
    return out


def write_json_report(report, path):
    """Dump a report dataclass as deterministic JSON (sorted keys)."""
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_fd_reconstruction(recon: FdReconstruction, scatter_path, band_path):
    with open(scatter_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rho", "v"])
        for r, s in zip(recon.rho, recon.v):
            writer.writerow([repr(float(r)), repr(float(s))])
    with open(band_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rho", "band_lo", "band_center", "band_hi", "center_fit"])
        fit_vals = s3_speed(recon.center_fit, recon.bin_centers)
        for row in zip(recon.bin_centers, recon.band_lo, recon.band_center,
                       recon.band_hi, fit_vals):
            writer.writerow([repr(float(c)) for c in row])


def export_speed_histograms(hists, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target_density", "bin_lo", "bin_hi", "prob", "n_cells", "empty"])
        for h in hists:
            for lo, hi, p in zip(h.edges[:-1], h.edges[1:], h.probs):
                writer.writerow([
                    repr(h.target_density), repr(float(lo)), repr(float(hi)),
                    repr(float(p)), h.n_cells, int(h.empty),
                ])

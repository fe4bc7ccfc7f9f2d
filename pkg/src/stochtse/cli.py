"""Command-line pipeline around the library.

Subcommands cover the full workflow: ingest or generate a grid, calibrate
the percentile diagram family, fit the stochastic diagram, train an
estimator, evaluate against ground truth, and render plots. Every stage
writes a manifest (config hash, seeds, library versions, artifact
digests) and later stages refuse inputs whose lineage does not match the
current config.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import (
    RunConfig,
    check_lineage,
    load_run_config,
    load_scenario,
    read_manifest,
    write_manifest,
)
from .distribution_vae import BetaLossWeights, VaeConfig, VaeTrainingConfig, train_beta_vae
from .errors import ConfigError, DataError, NumericalError
from .estimates import export_estimates, import_estimates
from .evaluation import (
    ci_coverage,
    compute_metrics,
    export_fd_reconstruction,
    export_speed_histograms,
    full_mask,
    held_out_mask,
    reconstruct_fd_scatter,
    speed_histograms,
    write_json_report,
)
from .grids import ingest_grid, export_grid, make_normalizer, sample_collocation, sample_detectors
from .networks import save_checkpoint
from .percentile_fd import bin_weights, calibrate_family, export_family, import_family
from .percentile_pinn import LossWeights, TrainingConfig, train_family
from .stochastic_fd import export_process, export_spectrum, fit_beta_process, import_process
from .synthetic import apply_speed_noise, simulate_lwr

ENV_CONFIG = "STOCHTSE_CONFIG"

logger = logging.getLogger(__name__)


def _paths(config: RunConfig):
    out = Path(config.out_dir)
    return {
        "out": out,
        "grid_truth": out / "grid_truth.csv",
        "grid_noisy": out / "grid_noisy.csv",
        "family": out / "percentile_family.csv",
        "process": out / "beta_process.ini",
        "spectrum": out / "beta_spectrum.csv",
        "estimates": out / "estimates",
        "checkpoints": out / "checkpoints",
        "metrics": out / "metrics.json",
        "coverage": out / "coverage.json",
        "fd_scatter": out / "fd_scatter.csv",
        "fd_band": out / "fd_band.csv",
        "speed_hists": out / "speed_histograms.csv",
        "plots": out / "plots",
        "manifest_data": out / "manifest_data.json",
        "manifest_calibrate": out / "manifest_calibrate.json",
        "manifest_fit_fd": out / "manifest_fit_fd.json",
        "manifest_train": out / "manifest_train.json",
        "manifest_evaluate": out / "manifest_evaluate.json",
        "manifest_plot": out / "manifest_plot.json",
    }


def _require_manifest(path, producer):
    try:
        return read_manifest(path)
    except FileNotFoundError:
        raise DataError(
            f"missing manifest {path}; run the `{producer}` subcommand first"
        ) from None


def _load_grid(manifest, name):
    entry = manifest["artifacts"].get(name)
    if entry is None:
        raise DataError(f"data manifest has no {name!r} artifact; re-run generate or ingest")
    return ingest_grid(entry["path"])


def _observations(config: RunConfig, grid):
    rows = config.detector_rows()
    if rows is not None:
        return sample_detectors(grid, strategy="explicit-rows", rows=rows)
    return sample_detectors(grid, k=config.get("data", "detectors"))


def _collocation(config: RunConfig, grid, n_obs):
    n_c = config.get("data", "collocation")
    if n_c <= 0:
        n_c = 10 * n_obs
    scheme = config.get("data", "collocation_scheme")
    return sample_collocation(grid, n_c, seed=config.seed + 1000, scheme=scheme)


def cmd_ingest(config: RunConfig, args):
    src = config.get("data", "grid_file")
    if not src:
        raise ConfigError("[data] grid_file must be set for ingest")
    grid = ingest_grid(src)
    paths = _paths(config)
    export_grid(grid, paths["grid_truth"])
    # measured data carries its own noise; observed and reference grids coincide
    write_manifest(
        paths["manifest_data"], config, "data",
        {"grid_truth": paths["grid_truth"], "grid_noisy": paths["grid_truth"]},
        extra={"mode": "ingest", "source": str(src), "shape": [grid.n_x, grid.n_t]},
    )
    print(f"ingested {src}: grid {grid.n_x}x{grid.n_t} -> {paths['grid_truth']}")
    return 0


def cmd_generate(config: RunConfig, args):
    scen_path = config.get("scenario", "file")
    if not scen_path:
        raise ConfigError("[scenario] file must be set for generate")
    spec = load_scenario(scen_path)
    truth = simulate_lwr(spec.scenario, spec.fd)
    noisy = apply_speed_noise(truth, spec.noise_cv, spec.noise_seed)
    paths = _paths(config)
    export_grid(truth, paths["grid_truth"])
    export_grid(noisy, paths["grid_noisy"])
    write_manifest(
        paths["manifest_data"], config, "data",
        {"grid_truth": paths["grid_truth"], "grid_noisy": paths["grid_noisy"]},
        extra={
            "mode": "generate", "scenario": str(scen_path),
            "noise_cv": spec.noise_cv, "noise_seed": spec.noise_seed,
            "fd": {"rho_cr": spec.fd.rho_cr, "v_f": spec.fd.v_f},
            "shape": [truth.n_x, truth.n_t],
        },
    )
    print(f"generated {truth.n_x}x{truth.n_t} grid from {scen_path} -> {paths['grid_truth']}")
    return 0


def cmd_calibrate(config: RunConfig, args):
    paths = _paths(config)
    data_manifest = _require_manifest(paths["manifest_data"], "generate (or ingest)")
    check_lineage(data_manifest, config)
    noisy = _load_grid(data_manifest, "grid_noisy")
    obs = _observations(config, noisy)
    weights = bin_weights(obs.rho, n_bins=config.get("calibrate", "weight_bins"))
    family = calibrate_family(obs, weights, alphas=config.alphas())
    export_family(family, paths["family"])
    write_manifest(
        paths["manifest_calibrate"], config, "calibrate",
        {"family": paths["family"]},
        extra={"detector_rows": obs.detector_rows, "n_obs": len(obs)},
    )
    vf = [m.params.v_f for m in family.members]
    print(
        f"calibrated {len(family)} curves on {len(obs)} points; "
        f"v_f range [{min(vf):.3f}, {max(vf):.3f}] -> {paths['family']}"
    )
    return 0


def cmd_fit_fd(config: RunConfig, args):
    paths = _paths(config)
    data_manifest = _require_manifest(paths["manifest_data"], "generate (or ingest)")
    check_lineage(data_manifest, config)
    noisy = _load_grid(data_manifest, "grid_noisy")
    obs = _observations(config, noisy)
    process = fit_beta_process(
        obs,
        n_intervals=config.get("fit_fd", "intervals"),
        n_min=config.get("fit_fd", "n_min"),
        v_max_factor=config.get("fit_fd", "v_max_factor"),
    )
    export_process(process, paths["process"])
    export_spectrum(process, paths["spectrum"])
    write_manifest(
        paths["manifest_fit_fd"], config, "fit-fd",
        {"process": paths["process"], "spectrum": paths["spectrum"]},
        extra={"detector_rows": obs.detector_rows, "n_obs": len(obs)},
    )
    print(
        f"fitted stochastic diagram on {len(obs)} points; "
        f"v_f={process.mean_curve.v_f:.3f}, v_max={process.v_max:.3f} -> {paths['process']}"
    )
    return 0


def cmd_train(config: RunConfig, args):
    paths = _paths(config)
    data_manifest = _require_manifest(paths["manifest_data"], "generate (or ingest)")
    check_lineage(data_manifest, config)
    truth = _load_grid(data_manifest, "grid_truth")
    noisy = _load_grid(data_manifest, "grid_noisy")
    obs = _observations(config, noisy)
    colloc = _collocation(config, noisy, len(obs))
    normalizer = make_normalizer(noisy)
    ci_level = config.get("evaluate", "ci_level")
    paths["checkpoints"].mkdir(parents=True, exist_ok=True)
    artifacts = {}

    if config.variant == "beta":
        fd_manifest = _require_manifest(paths["manifest_fit_fd"], "fit-fd")
        check_lineage(fd_manifest, config)
        process = import_process(paths["process"])
        weights = BetaLossWeights(
            kappa1=config.get("train", "kappa1"),
            kappa2=config.get("train", "kappa2"),
            kappa3=config.get("train", "kappa3"),
        )
        vae_config = VaeConfig(
            latent_dim=config.get("train", "latent_dim"),
            encoder_layers=config.get("train", "encoder_layers"),
            decoder_layers=config.get("train", "decoder_layers"),
            hidden=config.get("train", "vae_hidden"),
        )
        train_config = VaeTrainingConfig(
            lr=config.get("train", "vae_lr"),
            epochs=config.get("train", "epochs"),
            patience=config.get("train", "patience"),
            min_delta=config.get("train", "min_delta"),
            speed_samples=config.get("train", "speed_samples"),
            physics_batch=config.get("train", "physics_batch"),
            warmup_frac=config.get("train", "warmup_frac"),
        )
        vae, fieldest, _ = train_beta_vae(
            obs, colloc, process, weights, train_config, config.seed,
            grid=truth, normalizer=normalizer, vae_config=vae_config, ci_level=ci_level,
        )
        import torch

        ckpt = paths["checkpoints"] / "beta_vae.pt"
        torch.save(vae.state_dict(), ckpt)
        artifacts["checkpoint_beta_vae"] = ckpt
    else:
        cal_manifest = _require_manifest(paths["manifest_calibrate"], "calibrate")
        check_lineage(cal_manifest, config)
        family = import_family(paths["family"])
        physics = "lwr" if config.variant == "alpha-lwr" else "arz"
        weights = LossWeights(
            beta_rho=config.get("train", "beta_rho"),
            beta_v=config.get("train", "beta_v"),
            gamma1=config.get("train", "gamma1"),
            gamma2=config.get("train", "gamma2"),
            eta1=config.get("train", "eta1"),
            eta2=config.get("train", "eta2"),
            eta3=config.get("train", "eta3"),
            tau=config.get("train", "tau"),
        )
        train_config = TrainingConfig(
            layers=config.get("train", "layers"),
            hidden=config.get("train", "hidden"),
            lr=config.get("train", "lr"),
            epochs=config.get("train", "epochs"),
            patience=config.get("train", "patience"),
            min_delta=config.get("train", "min_delta"),
        )
        fieldest, members = train_family(
            obs, colloc, family, physics, weights, train_config, config.seed,
            grid=truth, normalizer=normalizer, jobs=config.jobs, ci_level=ci_level,
        )
        for member in members:
            ckpt = paths["checkpoints"] / f"alpha_{member.alpha:.2f}.npz"
            save_checkpoint(member.net, ckpt)
            artifacts[f"checkpoint_alpha_{member.alpha:.2f}"] = ckpt

    export_estimates(fieldest, paths["estimates"])
    for name in ("density.csv", "speed.csv", "metadata.json"):
        artifacts[f"estimates_{name}"] = paths["estimates"] / name
    members_npz = paths["estimates"] / "members.npz"
    if members_npz.exists():
        artifacts["estimates_members.npz"] = members_npz
    write_manifest(
        paths["manifest_train"], config, "train", artifacts,
        extra={"variant": config.variant, "detector_rows": obs.detector_rows, "n_obs": len(obs)},
    )
    print(f"trained {config.variant} estimator on {len(obs)} points -> {paths['estimates']}")
    return 0


def _evaluation_mask(config: RunConfig, shape, detector_rows):
    if config.get("evaluate", "mask") == "held-out":
        return held_out_mask(shape, detector_rows), "held-out"
    return full_mask(shape), "full"


def cmd_evaluate(config: RunConfig, args):
    paths = _paths(config)
    data_manifest = _require_manifest(paths["manifest_data"], "generate (or ingest)")
    train_manifest = _require_manifest(paths["manifest_train"], "train")
    check_lineage(data_manifest, config)
    check_lineage(train_manifest, config)
    truth = _load_grid(data_manifest, "grid_truth")
    fieldest = import_estimates(paths["estimates"])
    rows = train_manifest.get("detector_rows", [])
    mask, mask_mode = _evaluation_mask(config, fieldest.shape, rows)

    meta = {
        "variant": train_manifest.get("variant", config.variant),
        "detector_rows": rows,
        "seed": config.seed,
        "mask": mask_mode,
    }
    metrics = compute_metrics(fieldest, truth, mask, metadata=meta)
    coverage = ci_coverage(
        fieldest, truth, mask, level=config.get("evaluate", "ci_level"), metadata=meta
    )
    write_json_report(metrics, paths["metrics"])
    write_json_report(coverage, paths["coverage"])

    recon = reconstruct_fd_scatter(
        fieldest,
        n_draws=config.get("evaluate", "fd_draws"),
        n_bins=config.get("evaluate", "fd_bins"),
        seed=config.seed,
    )
    export_fd_reconstruction(recon, paths["fd_scatter"], paths["fd_band"])
    hists = speed_histograms(
        fieldest,
        config.hist_densities(),
        bin_count=config.get("evaluate", "hist_bins"),
        n_draws=config.get("evaluate", "fd_draws"),
        seed=config.seed,
    )
    export_speed_histograms(hists, paths["speed_hists"])

    write_manifest(
        paths["manifest_evaluate"], config, "evaluate",
        {
            "metrics": paths["metrics"],
            "coverage": paths["coverage"],
            "fd_scatter": paths["fd_scatter"],
            "fd_band": paths["fd_band"],
            "speed_hists": paths["speed_hists"],
        },
        extra={"mask": mask_mode},
    )
    print(
        f"evaluated over {metrics.n_cells} cells ({mask_mode} mask): "
        f"density MAE {metrics.density.mae:.4g} RMSE {metrics.density.rmse:.4g} "
        f"L2 {metrics.density.l2:.4g}; speed coverage {coverage.speed:.3f} "
        f"at level {coverage.level}"
    )
    return 0


def _read_band(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    cols = {}
    for key in ("rho", "band_lo", "band_center", "band_hi", "center_fit"):
        cols[key] = np.array([float(r[key]) for r in rows])
    return cols


def _read_hists(path):
    groups = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            g = groups.setdefault(float(row["target_density"]), {"lo": [], "hi": [], "p": [], "n": 0, "empty": True})
            g["lo"].append(float(row["bin_lo"]))
            g["hi"].append(float(row["bin_hi"]))
            g["p"].append(float(row["prob"]))
            g["n"] = int(row["n_cells"])
            g["empty"] = bool(int(row["empty"]))
    return groups


def cmd_plot(config: RunConfig, args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = _paths(config)
    data_manifest = _require_manifest(paths["manifest_data"], "generate (or ingest)")
    train_manifest = _require_manifest(paths["manifest_train"], "train")
    eval_manifest = _require_manifest(paths["manifest_evaluate"], "evaluate")
    for manifest in (data_manifest, train_manifest, eval_manifest):
        check_lineage(manifest, config)
    truth = _load_grid(data_manifest, "grid_truth")
    fieldest = import_estimates(paths["estimates"])
    plots = paths["plots"]
    plots.mkdir(parents=True, exist_ok=True)
    extent = [truth.t0, truth.t0 + truth.duration, truth.x0, truth.x0 + truth.length]
    artifacts = {}

    # truth vs estimate heatmaps, one figure per state
    for state, true_vals, est_vals, unit in (
        ("density", truth.densities, fieldest.mu_rho, "veh/m"),
        ("speed", truth.speeds, fieldest.mu_v, "m/s"),
    ):
        fig, axes = plt.subplots(1, 2, figsize=(11, 4), sharey=True)
        vmin = min(true_vals.min(), est_vals.min())
        vmax = max(true_vals.max(), est_vals.max())
        for ax, vals, title in ((axes[0], true_vals, "reference"), (axes[1], est_vals, "estimated mean")):
            im = ax.imshow(
                vals, origin="lower", aspect="auto", extent=extent,
                vmin=vmin, vmax=vmax, cmap="viridis",
            )
            ax.set_title(f"{state} ({title})")
            ax.set_xlabel("t [s]")
        axes[0].set_ylabel("x [m]")
        fig.colorbar(im, ax=axes, label=f"{state} [{unit}]")
        out = plots / f"heatmap_{state}.png"
        fig.savefig(out, dpi=130)
        plt.close(fig)
        artifacts[f"heatmap_{state}"] = out

    # diagram scatter with the percentile band
    band = _read_band(paths["fd_band"])
    scatter = np.loadtxt(paths["fd_scatter"], delimiter=",", skiprows=1)
    if scatter.size:
        scatter = scatter.reshape(-1, 2)
        if scatter.shape[0] > 20000:
            rng = np.random.default_rng(0)
            scatter = scatter[rng.choice(scatter.shape[0], 20000, replace=False)]
    fig, ax = plt.subplots(figsize=(7, 5))
    if scatter.size:
        ax.plot(scatter[:, 0], scatter[:, 1], ".", ms=1, alpha=0.2, color="gray", label="draws")
    ax.fill_between(band["rho"], band["band_lo"], band["band_hi"], alpha=0.3, label="2.5-97.5%")
    ax.plot(band["rho"], band["band_center"], "-", label="median")
    ax.plot(band["rho"], band["center_fit"], "--", label="sigmoid fit")
    ax.set_xlabel("density [veh/m]")
    ax.set_ylabel("speed [m/s]")
    ax.legend()
    fd_png = plots / "fd_scatter.png"
    fig.savefig(fd_png, dpi=130)
    plt.close(fig)
    artifacts["fd_scatter"] = fd_png

    # speed histograms per target density
    groups = _read_hists(paths["speed_hists"])
    fig, axes = plt.subplots(1, max(len(groups), 1), figsize=(4 * max(len(groups), 1), 3.5), squeeze=False)
    for ax, (target, g) in zip(axes[0], sorted(groups.items())):
        if g["empty"]:
            ax.text(0.5, 0.5, "no cells", ha="center", va="center", transform=ax.transAxes)
        else:
            widths = np.array(g["hi"]) - np.array(g["lo"])
            ax.bar(g["lo"], g["p"], width=widths, align="edge", edgecolor="white")
        ax.set_title(f"rho = {target:g} veh/m (n={g['n']})")
        ax.set_xlabel("speed [m/s]")
    axes[0][0].set_ylabel("probability")
    fig.tight_layout()
    hist_png = plots / "speed_histograms.png"
    fig.savefig(hist_png, dpi=130)
    plt.close(fig)
    artifacts["speed_histograms"] = hist_png

    # speed traces at the detector rows: reference line inside the CI band
    rows = train_manifest.get("detector_rows", [])
    show = rows[:: max(1, len(rows) // 4)][:4] if rows else []
    lo, hi = fieldest.ci_bounds("speed")
    ts = truth.t_coords()
    fig, axes = plt.subplots(len(show) or 1, 1, figsize=(9, 2.6 * (len(show) or 1)), squeeze=False, sharex=True)
    for ax, r in zip(axes[:, 0], show):
        ax.fill_between(ts, lo[r], hi[r], alpha=0.3, label="CI")
        ax.plot(ts, fieldest.mu_v[r], lw=1, label="estimate")
        ax.plot(ts, truth.speeds[r], lw=0.8, ls="--", label="reference")
        ax.set_ylabel(f"v @ x={truth.x_coords()[r]:.0f} m")
    if show:
        axes[-1, 0].set_xlabel("t [s]")
        axes[0, 0].legend(loc="upper right", fontsize=8)
    ts_png = plots / "detector_timeseries.png"
    fig.savefig(ts_png, dpi=130)
    plt.close(fig)
    artifacts["detector_timeseries"] = ts_png

    write_manifest(paths["manifest_plot"], config, "plot", artifacts)
    print(f"wrote {len(artifacts)} figures -> {plots}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "generate": cmd_generate,
    "calibrate": cmd_calibrate,
    "fit-fd": cmd_fit_fd,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", default=None,
        help=f"run config INI (default: ${ENV_CONFIG})",
    )
    common.add_argument("--seed", type=int, default=None, help="override [run] seed")
    common.add_argument("--jobs", type=int, default=None, help="override [run] jobs")
    common.add_argument("--out", default=None, help="override [run] out_dir")
    common.add_argument("--verbose", action="store_true", help="log progress details")

    parser = argparse.ArgumentParser(
        prog="stochtse",
        description="Stochastic traffic state estimation from sparse detectors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ingest": "read an external grid CSV into the run directory",
        "generate": "simulate a synthetic scenario into the run directory",
        "calibrate": "fit the percentile diagram family from detector data",
        "fit-fd": "fit the stochastic (Beta) diagram from detector data",
        "train": "train the configured estimator and export the estimate field",
        "evaluate": "score the estimate field against the reference grid",
        "plot": "render heatmaps, diagram scatter, histograms, and speed traces",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    config_path = args.config or os.environ.get(ENV_CONFIG)
    try:
        if not config_path:
            raise ConfigError(f"no config file given: pass --config or set ${ENV_CONFIG}")
        overrides = {}
        if args.seed is not None:
            overrides[("run", "seed")] = args.seed
        if args.jobs is not None:
            overrides[("run", "jobs")] = args.jobs
        if args.out is not None:
            overrides[("run", "out_dir")] = args.out
        config = load_run_config(config_path, overrides=overrides)
        Path(config.out_dir).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](config, args)
    except ConfigError as exc:
        print(f"stochtse: config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"stochtse: data error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"stochtse: data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"stochtse: numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

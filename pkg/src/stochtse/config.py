"""Run configuration, scenario files, and artifact lineage.

A run config is one INI file validated against a fixed schema before any
work starts: unknown sections or keys are rejected, every value is type
checked, and missing keys take the documented defaults. The canonical
rendering of the validated config is hashed; every pipeline stage writes
a manifest carrying that hash plus the digests of the files it produced,
and downstream stages refuse artifacts whose lineage does not match.

Scenario files describe synthetic ground truth with four sections:
[domain] geometry and the speed-density closure, [initial] the starting
density profile, [boundary] the edge treatment, [noise] observation
scatter.
"""

import configparser
import hashlib
import json
import sys
from dataclasses import dataclass, field

from .errors import ConfigError, LineageError, ValidationError
from .percentile_fd import DEFAULT_ALPHAS, UnderwoodParams
from .synthetic import BOUNDARY_KINDS, INITIAL_KINDS, Scenario

VARIANTS = ("alpha-lwr", "alpha-arz", "beta")
MASK_MODES = ("full", "held-out")

# section -> key -> (converter, default); None default means required
_SCHEMA = {
    "run": {
        "variant": ("choice:" + ",".join(VARIANTS), "alpha-lwr"),
        "seed": ("int", 0),
        "out_dir": ("str", "out"),
        "jobs": ("int", 1),
    },
    "data": {
        "grid_file": ("str", ""),
        "detectors": ("int", 10),
        "detector_rows": ("str", ""),  # empty means equispaced from count
        "collocation": ("int", 0),  # 0 means the 10x observation default
        "collocation_scheme": ("choice:uniform-random,grid", "uniform-random"),
    },
    "scenario": {
        "file": ("str", ""),
    },
    "calibrate": {
        "alphas": ("str", "default"),
        "weight_bins": ("int", 30),
    },
    "fit_fd": {
        "intervals": ("int", 30),
        "n_min": ("int", 20),
        "v_max_factor": ("float", 1.05),
    },
    "train": {
        "layers": ("int", 11),
        "hidden": ("int", 64),
        "lr": ("float", 0.001),
        "epochs": ("int", 20000),
        "patience": ("int", 2000),
        "min_delta": ("float", 1e-6),
        "beta_rho": ("float", 1.0),
        "beta_v": ("float", 1.0),
        "gamma1": ("float", 1.0),
        "gamma2": ("float", 1.0),
        "eta1": ("float", 1.0),
        "eta2": ("float", 1.0),
        "eta3": ("float", 1.0),
        "tau": ("float", 5.0),
        "latent_dim": ("int", 32),
        "encoder_layers": ("int", 4),
        "decoder_layers": ("int", 4),
        "vae_hidden": ("int", 32),
        "vae_lr": ("float", 0.0005),
        "kappa1": ("float", 1.0),
        "kappa2": ("float", 1.0),
        "kappa3": ("float", 0.1),
        "speed_samples": ("int", 50),
        "physics_batch": ("int", 256),
        "warmup_frac": ("float", 0.1),
    },
    "evaluate": {
        "mask": ("choice:" + ",".join(MASK_MODES), "full"),
        "ci_level": ("float", 0.95),
        "fd_draws": ("int", 20),
        "fd_bins": ("int", 30),
        "hist_densities": ("str", "0.1,0.2,0.3,0.4"),
        "hist_bins": ("int", 20),
    },
}


def _convert(section, key, conv, raw):
    try:
        if conv == "int":
            return int(raw)
        if conv == "float":
            return float(raw)
        if conv == "str":
            return str(raw)
        if conv.startswith("choice:"):
            choices = conv.split(":", 1)[1].split(",")
            if raw not in choices:
                raise ValueError(f"must be one of {choices}")
            return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None
    raise ConfigError(f"unknown converter {conv!r} for [{section}] {key}")


@dataclass
class RunConfig:
    """Validated, fully-defaulted configuration for one pipeline run."""

    sections: dict
    source_path: str = ""

    def get(self, section, key):
        try:
            return self.sections[section][key]
        except KeyError:
            raise ConfigError(f"no schema entry [{section}] {key}") from None

    @property
    def variant(self):
        return self.get("run", "variant")

    @property
    def seed(self):
        return self.get("run", "seed")

    @property
    def out_dir(self):
        return self.get("run", "out_dir")

    @property
    def jobs(self):
        return self.get("run", "jobs")

    def canonical_text(self):
        """Deterministic rendering used for hashing and manifests."""
        lines = []
        for section in sorted(self.sections):
            lines.append(f"[{section}]")
            for key in sorted(self.sections[section]):
                lines.append(f"{key} = {self.sections[section][key]!r}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self):
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def alphas(self):
        raw = self.get("calibrate", "alphas")
        if raw == "default":
            return list(DEFAULT_ALPHAS)
        return parse_float_list(raw, "[calibrate] alphas")

    def detector_rows(self):
        raw = self.get("data", "detector_rows")
        if not raw.strip():
            return None
        return parse_int_list(raw, "[data] detector_rows")

    def hist_densities(self):
        return parse_float_list(self.get("evaluate", "hist_densities"), "[evaluate] hist_densities")


def parse_float_list(raw, where):
    try:
        vals = [float(tok) for tok in raw.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    if not vals:
        raise ConfigError(f"{where}: empty list")
    return vals


def parse_int_list(raw, where):
    try:
        return [int(tok) for tok in raw.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def default_config() -> RunConfig:
    sections = {s: {k: d for k, (_, d) in keys.items()} for s, keys in _SCHEMA.items()}
    return RunConfig(sections=sections)


def load_run_config(path, overrides=None) -> RunConfig:
    """Parse and validate one INI file against the schema.

    overrides maps (section, key) to raw string values (command-line
    flags) applied on top of the file before type checking.
    """
    cp = configparser.ConfigParser()
    try:
        read = cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not read:
        raise ConfigError(f"{path}: config file not found or unreadable")

    raw = {s: dict(cp.items(s)) for s in cp.sections()}
    for section, key in (overrides or {}):
        raw.setdefault(section, {})[key] = str((overrides or {})[(section, key)])

    sections = {}
    for section, entries in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key in entries:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key [{section}] {key}")
    for section, keys in _SCHEMA.items():
        got = raw.get(section, {})
        sections[section] = {
            key: _convert(section, key, conv, got[key]) if key in got else default
            for key, (conv, default) in keys.items()
        }

    config = RunConfig(sections=sections, source_path=str(path))
    _validate_semantics(config)
    return config


def _validate_semantics(config: RunConfig):
    if config.seed < 0:
        raise ConfigError("[run] seed must be >= 0")
    if config.jobs < 1:
        raise ConfigError("[run] jobs must be >= 1")
    if config.get("data", "detectors") < 1:
        raise ConfigError("[data] detectors must be >= 1")
    if not 0 < config.get("evaluate", "ci_level") < 1:
        raise ConfigError("[evaluate] ci_level must be in (0, 1)")
    alphas = config.alphas()
    if any(not 0 < a < 1 for a in alphas):
        raise ConfigError("[calibrate] alphas must lie in (0, 1)")
    if sorted(alphas) != alphas or len(set(alphas)) != len(alphas):
        raise ConfigError("[calibrate] alphas must be strictly increasing")


# ---------------------------------------------------------------------------
# scenario files

_SCENARIO_DOMAIN_KEYS = {"n_x", "n_t", "dx", "dt", "x0", "t0", "v_f", "rho_cr"}
_SCENARIO_INITIAL_KEYS = {
    "kind", "rho", "rho_left", "rho_right", "split",
    "rho_base", "amplitude", "center", "width",
}
_SCENARIO_BOUNDARY_KEYS = {"kind", "rho", "t_on", "t_off"}
_SCENARIO_NOISE_KEYS = {"cv", "seed"}


@dataclass
class ScenarioSpec:
    """Everything the generator needs: geometry, closure, noise."""

    scenario: Scenario
    fd: UnderwoodParams
    noise_cv: float = 0.0
    noise_seed: int = 0


def load_scenario(path) -> ScenarioSpec:
    cp = configparser.ConfigParser()
    try:
        read = cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not read:
        raise ConfigError(f"{path}: scenario file not found or unreadable")

    allowed = {
        "domain": _SCENARIO_DOMAIN_KEYS,
        "initial": _SCENARIO_INITIAL_KEYS,
        "boundary": _SCENARIO_BOUNDARY_KEYS,
        "noise": _SCENARIO_NOISE_KEYS,
    }
    for section in cp.sections():
        if section not in allowed:
            raise ConfigError(f"{path}: unknown scenario section [{section}]")
        for key, _ in cp.items(section):
            if key not in allowed[section]:
                raise ConfigError(f"{path}: unknown key [{section}] {key}")
    for required in ("domain", "initial"):
        if not cp.has_section(required):
            raise ConfigError(f"{path}: scenario needs a [{required}] section")

    def need(section, key, conv):
        if not cp.has_option(section, key):
            raise ConfigError(f"{path}: missing [{section}] {key}")
        try:
            return conv(cp.get(section, key))
        except ValueError as exc:
            raise ConfigError(f"{path}: [{section}] {key}: {exc}") from None

    def opt(section, key, conv, default):
        if not cp.has_option(section, key):
            return default
        try:
            return conv(cp.get(section, key))
        except ValueError as exc:
            raise ConfigError(f"{path}: [{section}] {key}: {exc}") from None

    initial = {"kind": need("initial", "kind", str)}
    if initial["kind"] not in INITIAL_KINDS:
        raise ConfigError(f"{path}: [initial] kind must be one of {INITIAL_KINDS}")
    for key, _ in cp.items("initial"):
        if key != "kind":
            initial[key] = need("initial", key, float)

    boundary = {"kind": "outflow"}
    if cp.has_section("boundary"):
        boundary["kind"] = opt("boundary", "kind", str, "outflow")
        if boundary["kind"] not in BOUNDARY_KINDS:
            raise ConfigError(f"{path}: [boundary] kind must be one of {BOUNDARY_KINDS}")
        for key, _ in cp.items("boundary"):
            if key != "kind":
                boundary[key] = need("boundary", key, float)

    try:
        scenario = Scenario(
            n_x=need("domain", "n_x", int),
            n_t=need("domain", "n_t", int),
            dx=opt("domain", "dx", float, 30.0),
            dt=opt("domain", "dt", float, 1.5),
            x0=opt("domain", "x0", float, 0.0),
            t0=opt("domain", "t0", float, 0.0),
            initial=initial,
            boundary=boundary,
        )
        fd = UnderwoodParams(
            rho_cr=need("domain", "rho_cr", float),
            v_f=need("domain", "v_f", float),
        )
    except ValidationError as exc:
        raise ConfigError(f"{path}: {exc}") from None

    return ScenarioSpec(
        scenario=scenario,
        fd=fd,
        noise_cv=opt("noise", "cv", float, 0.0) if cp.has_section("noise") else 0.0,
        noise_seed=opt("noise", "seed", int, 0) if cp.has_section("noise") else 0,
    )


# ---------------------------------------------------------------------------
# manifests

def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import numpy
    import scipy
    import torch

    from . import __version__

    return {
        "python": sys.version.split()[0],
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
        "stochtse": __version__,
    }


def write_manifest(path, config: RunConfig, stage, artifacts, extra=None):
    """Record the producing config and the digests of stage outputs.

    artifacts maps logical names to file paths; each entry stores the
    path string and its content digest so later stages can verify both
    lineage and integrity.
    """
    manifest = {
        "stage": stage,
        "config_hash": config.hash,
        "config": config.canonical_text(),
        "seed": config.seed,
        "versions": _versions(),
        "artifacts": {
            name: {"path": str(p), "sha256": file_digest(p)} for name, p in artifacts.items()
        },
    }
    if extra:
        manifest.update(extra)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: unreadable manifest ({exc})") from None


def check_lineage(manifest, config: RunConfig, verify_files=True):
    """Refuse artifacts produced under a different configuration.

    Also re-hashes the recorded artifact files so silent edits between
    stages are caught.
    """
    if manifest.get("config_hash") != config.hash:
        raise LineageError(
            f"artifact lineage mismatch: manifest stage {manifest.get('stage')!r} was "
            f"produced with config {manifest.get('config_hash')}, current config is "
            f"{config.hash}; re-run the producing subcommand"
        )
    if verify_files:
        for name, entry in manifest.get("artifacts", {}).items():
            try:
                digest = file_digest(entry["path"])
            except FileNotFoundError:
                raise LineageError(
                    f"artifact {name!r} missing at {entry['path']}; "
                    f"re-run the stage {manifest.get('stage')!r}"
                ) from None
            if digest != entry["sha256"]:
                raise LineageError(
                    f"artifact {name!r} at {entry['path']} changed since it was produced; "
                    f"re-run the stage {manifest.get('stage')!r}"
                )

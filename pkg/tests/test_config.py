import pytest

from stochtse.config import (
    RunConfig,
    check_lineage,
    default_config,
    load_run_config,
    load_scenario,
    read_manifest,
    write_manifest,
)
from stochtse.errors import ConfigError, LineageError
from stochtse.percentile_fd import DEFAULT_ALPHAS


def write_config(tmp_path, body, name="run.ini"):
    path = tmp_path / name
    path.write_text(body)
    return path


MINIMAL = """\
[run]
variant = alpha-lwr
seed = 3
"""


class TestRunConfig:
    def test_defaults_fill_missing_sections(self, tmp_path):
        cfg = load_run_config(write_config(tmp_path, MINIMAL))
        assert cfg.variant == "alpha-lwr"
        assert cfg.seed == 3
        assert cfg.out_dir == "out"
        assert cfg.get("train", "hidden") == 64
        assert cfg.get("train", "layers") == 11
        assert cfg.get("train", "lr") == 0.001
        assert cfg.get("train", "vae_lr") == 0.0005
        assert cfg.get("train", "latent_dim") == 32
        assert cfg.get("fit_fd", "intervals") == 30
        assert cfg.get("evaluate", "ci_level") == 0.95

    def test_default_alphas(self, tmp_path):
        cfg = load_run_config(write_config(tmp_path, MINIMAL))
        assert cfg.alphas() == list(DEFAULT_ALPHAS)
        assert len(cfg.alphas()) == 15
        assert cfg.alphas()[0] == 0.01 and cfg.alphas()[-1] == 0.99

    def test_explicit_alphas(self, tmp_path):
        body = MINIMAL + "[calibrate]\nalphas = 0.1,0.5,0.9\n"
        cfg = load_run_config(write_config(tmp_path, body))
        assert cfg.alphas() == [0.1, 0.5, 0.9]

    def test_unknown_section_rejected(self, tmp_path):
        body = MINIMAL + "[plotting]\ndpi = 300\n"
        with pytest.raises(ConfigError, match=r"unknown section \[plotting\]"):
            load_run_config(write_config(tmp_path, body))

    def test_unknown_key_rejected(self, tmp_path):
        body = MINIMAL + "[train]\nlearning_rate = 0.01\n"
        with pytest.raises(ConfigError, match="unknown key"):
            load_run_config(write_config(tmp_path, body))

    def test_type_errors_name_the_key(self, tmp_path):
        body = "[run]\nvariant = alpha-lwr\nseed = three\n"
        with pytest.raises(ConfigError, match="seed"):
            load_run_config(write_config(tmp_path, body))

    def test_variant_choices(self, tmp_path):
        body = "[run]\nvariant = kalman\n"
        with pytest.raises(ConfigError, match="variant"):
            load_run_config(write_config(tmp_path, body))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_run_config(tmp_path / "absent.ini")

    def test_overrides_win(self, tmp_path):
        path = write_config(tmp_path, MINIMAL)
        cfg = load_run_config(path, overrides={("run", "seed"): "99",
                                               ("run", "out_dir"): "elsewhere"})
        assert cfg.seed == 99
        assert cfg.out_dir == "elsewhere"

    def test_override_validated_too(self, tmp_path):
        path = write_config(tmp_path, MINIMAL)
        with pytest.raises(ConfigError):
            load_run_config(path, overrides={("run", "seed"): "-1"})


class TestSemantics:
    def test_bad_seed(self, tmp_path):
        with pytest.raises(ConfigError, match="seed"):
            load_run_config(write_config(tmp_path, "[run]\nseed = -4\n"))

    def test_bad_jobs(self, tmp_path):
        with pytest.raises(ConfigError, match="jobs"):
            load_run_config(write_config(tmp_path, "[run]\njobs = 0\n"))

    def test_bad_ci_level(self, tmp_path):
        body = MINIMAL + "[evaluate]\nci_level = 1.5\n"
        with pytest.raises(ConfigError, match="ci_level"):
            load_run_config(write_config(tmp_path, body))

    def test_alphas_must_increase(self, tmp_path):
        body = MINIMAL + "[calibrate]\nalphas = 0.5,0.1\n"
        with pytest.raises(ConfigError, match="increasing"):
            load_run_config(write_config(tmp_path, body))

    def test_alphas_open_interval(self, tmp_path):
        body = MINIMAL + "[calibrate]\nalphas = 0.0,0.5\n"
        with pytest.raises(ConfigError, match=r"\(0, 1\)"):
            load_run_config(write_config(tmp_path, body))

    def test_detector_rows_parse(self, tmp_path):
        body = MINIMAL + "[data]\ndetector_rows = 0, 7, 13\n"
        cfg = load_run_config(write_config(tmp_path, body))
        assert cfg.detector_rows() == [0, 7, 13]
        assert load_run_config(write_config(tmp_path, MINIMAL, "b.ini")).detector_rows() is None


class TestHash:
    def test_stable_across_reload(self, tmp_path):
        path = write_config(tmp_path, MINIMAL)
        assert load_run_config(path).hash == load_run_config(path).hash

    def test_same_content_different_file_same_hash(self, tmp_path):
        a = load_run_config(write_config(tmp_path, MINIMAL, "a.ini"))
        b = load_run_config(write_config(tmp_path, MINIMAL, "b.ini"))
        assert a.hash == b.hash

    def test_any_key_changes_hash(self, tmp_path):
        base = load_run_config(write_config(tmp_path, MINIMAL))
        bumped = load_run_config(write_config(tmp_path, MINIMAL + "[train]\nepochs = 5\n", "c.ini"))
        assert base.hash != bumped.hash

    def test_default_config_matches_schema(self):
        cfg = default_config()
        assert isinstance(cfg, RunConfig)
        assert cfg.variant == "alpha-lwr"
        assert len(cfg.hash) == 16


SCENARIO = """\
[domain]
n_x = 21
n_t = 50
dx = 30.0
dt = 1.0
v_f = 25.0
rho_cr = 0.2

[initial]
kind = riemann
rho_left = 0.05
rho_right = 0.3
split = 0.5

[noise]
cv = 0.05
seed = 11
"""


class TestScenario:
    def test_round_trip_fields(self, tmp_path):
        spec = load_scenario(write_config(tmp_path, SCENARIO, "sc.ini"))
        assert spec.scenario.n_x == 21
        assert spec.scenario.n_t == 50
        assert spec.scenario.initial["kind"] == "riemann"
        assert spec.fd.v_f == 25.0
        assert spec.fd.rho_cr == 0.2
        assert spec.noise_cv == 0.05
        assert spec.noise_seed == 11
        assert spec.scenario.boundary["kind"] == "outflow"

    def test_noise_defaults_off(self, tmp_path):
        body = SCENARIO.split("[noise]")[0]
        spec = load_scenario(write_config(tmp_path, body, "sc.ini"))
        assert spec.noise_cv == 0.0

    def test_unknown_section(self, tmp_path):
        body = SCENARIO + "[detectors]\nk = 10\n"
        with pytest.raises(ConfigError, match="unknown scenario section"):
            load_scenario(write_config(tmp_path, body, "sc.ini"))

    def test_unknown_key(self, tmp_path):
        body = SCENARIO.replace("cv = 0.05", "cv = 0.05\nsigma = 1.0")
        with pytest.raises(ConfigError, match="unknown key"):
            load_scenario(write_config(tmp_path, body, "sc.ini"))

    def test_missing_required_section(self, tmp_path):
        body = SCENARIO.split("[initial]")[0]
        with pytest.raises(ConfigError, match=r"\[initial\]"):
            load_scenario(write_config(tmp_path, body, "sc.ini"))

    def test_missing_fd_params(self, tmp_path):
        body = SCENARIO.replace("v_f = 25.0\n", "")
        with pytest.raises(ConfigError, match="v_f"):
            load_scenario(write_config(tmp_path, body, "sc.ini"))

    def test_bad_initial_kind(self, tmp_path):
        body = SCENARIO.replace("kind = riemann", "kind = sawtooth")
        with pytest.raises(ConfigError, match="kind"):
            load_scenario(write_config(tmp_path, body, "sc.ini"))

    def test_domain_validation_wrapped(self, tmp_path):
        body = SCENARIO.replace("dx = 30.0", "dx = -5.0")
        with pytest.raises(ConfigError):
            load_scenario(write_config(tmp_path, body, "sc.ini"))


class TestManifests:
    def make_artifact(self, tmp_path, name="grid.csv", text="a,b\n1,2\n"):
        path = tmp_path / name
        path.write_text(text)
        return path

    def test_round_trip(self, tmp_path):
        cfg = load_run_config(write_config(tmp_path, MINIMAL))
        art = self.make_artifact(tmp_path)
        mpath = tmp_path / "manifest.json"
        write_manifest(mpath, cfg, "data", {"grid": art}, extra={"n_obs": 42})
        m = read_manifest(mpath)
        assert m["stage"] == "data"
        assert m["config_hash"] == cfg.hash
        assert m["seed"] == 3
        assert m["n_obs"] == 42
        assert "stochtse" in m["versions"]
        assert m["artifacts"]["grid"]["path"] == str(art)
        check_lineage(m, cfg)

    def test_config_mismatch_refused(self, tmp_path):
        cfg = load_run_config(write_config(tmp_path, MINIMAL))
        art = self.make_artifact(tmp_path)
        mpath = tmp_path / "manifest.json"
        write_manifest(mpath, cfg, "data", {"grid": art})
        other = load_run_config(
            write_config(tmp_path, MINIMAL + "[train]\nepochs = 7\n", "other.ini")
        )
        with pytest.raises(LineageError, match="re-run the producing subcommand"):
            check_lineage(read_manifest(mpath), other)

    def test_edited_artifact_detected(self, tmp_path):
        cfg = load_run_config(write_config(tmp_path, MINIMAL))
        art = self.make_artifact(tmp_path)
        mpath = tmp_path / "manifest.json"
        write_manifest(mpath, cfg, "data", {"grid": art})
        art.write_text("a,b\n9,9\n")
        with pytest.raises(LineageError, match="changed since"):
            check_lineage(read_manifest(mpath), cfg)

    def test_missing_artifact_detected(self, tmp_path):
        cfg = load_run_config(write_config(tmp_path, MINIMAL))
        art = self.make_artifact(tmp_path)
        mpath = tmp_path / "manifest.json"
        write_manifest(mpath, cfg, "data", {"grid": art})
        art.unlink()
        with pytest.raises(LineageError, match="missing"):
            check_lineage(read_manifest(mpath), cfg)

    def test_verify_files_can_be_skipped(self, tmp_path):
        cfg = load_run_config(write_config(tmp_path, MINIMAL))
        art = self.make_artifact(tmp_path)
        mpath = tmp_path / "manifest.json"
        write_manifest(mpath, cfg, "data", {"grid": art})
        art.unlink()
        check_lineage(read_manifest(mpath), cfg, verify_files=False)

    def test_missing_manifest_raises_file_not_found(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_manifest(tmp_path / "absent.json")

    def test_corrupt_manifest(self, tmp_path):
        bad = tmp_path / "manifest.json"
        bad.write_text("{not json")
        from stochtse.errors import ValidationError

        with pytest.raises(ValidationError, match="unreadable manifest"):
            read_manifest(bad)

import json
import sys

import pytest

from blade_sim.blade_config import Settings, apply_overrides, build_sim_config, load_sim_config
from blade_sim.blade_schemas import SimConfig
from blade_sim.exceptions import ConfigError


class TestSettings:
    def test_defaults(self, monkeypatch):
        monkeypatch.delenv("BLADE_SIM_THREADS", raising=False)
        settings = Settings(_env_file=None)
        assert settings.threads == 1
        assert settings.log_level == "INFO"

    def test_environment_prefix(self, monkeypatch):
        monkeypatch.setenv("BLADE_SIM_THREADS", "3")
        monkeypatch.setenv("BLADE_SIM_LOG_JSON", "true")
        settings = Settings(_env_file=None)
        assert settings.threads == 3
        assert settings.log_json is True


class TestOverrides:
    def test_nested_values_are_parsed(self):
        doc = apply_overrides({}, ["privacy.epsilon=5", "privacy.enabled=true",
                                  "chain.mode=grind", "output.dir=out/run"])
        assert doc == {"privacy": {"epsilon": 5, "enabled": True},
                       "chain": {"mode": "grind"}, "output": {"dir": "out/run"}}

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["privacy.epsilon"])

    def test_cannot_descend_into_value(self):
        with pytest.raises(ConfigError):
            apply_overrides({"seed": 1}, ["seed.x=2"])

    def test_document_is_not_mutated(self, small_doc):
        before = json.dumps(small_doc, sort_keys=True)
        build_sim_config(small_doc, ["train.lr=0.5"])
        assert json.dumps(small_doc, sort_keys=True) == before


class TestBuild:
    def test_defaults(self):
        cfg = build_sim_config()
        assert isinstance(cfg, SimConfig)
        assert cfg.n_clients == 20
        assert cfg.budget.theta == 6.0
        assert cfg.chain.verify_mode == "recompute"

    @pytest.mark.parametrize("override", [
        "privacy.epsilonn=5",          # unknown key
        "privacy.epsilon=0",           # must be positive
        "behaviors.lazy_fraction=1.0",
        "watermark.degree=2",
        "chain.n_bidders=3",           # fewer bidders than clients
    ])
    def test_rejects(self, override):
        with pytest.raises(ConfigError) as err:
            build_sim_config({}, [override])
        assert err.value.code == "INVALID_CONFIG"
        assert err.value.exit_code == 2

    def test_idx_source_needs_paths(self):
        with pytest.raises(ConfigError):
            build_sim_config({"data": {"source": "idx"}})

    def test_mlp_needs_hidden_layer(self):
        cfg = build_sim_config({"model": {"kind": "mlp"}})
        with pytest.raises(ValueError):
            cfg.model_spec(8, 4)


class TestLoad:
    def test_json_file(self, tmp_path, small_doc):
        path = tmp_path / "exp.json"
        path.write_text(json.dumps(small_doc))
        cfg = load_sim_config(path, ["seed=11"])
        assert cfg.seed == 11
        assert cfg.n_clients == 4

    def test_toml_file(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text('seed = 5\n[watermark]\nenabled = true\nsnr_db = 3.0\n')
        cfg = load_sim_config(path)
        assert cfg.seed == 5
        assert cfg.watermark.enabled and cfg.watermark.snr_db == 3.0

    def test_shipped_configs_validate(self):
        from pathlib import Path
        configs = Path(__file__).resolve().parents[1] / "configs"
        for path in sorted(configs.glob("*.json")):
            load_sim_config(path)
        assert load_sim_config(configs / "detection.toml").watermark.enabled

    def test_toml_without_a_parser(self, tmp_path, monkeypatch):
        monkeypatch.setitem(sys.modules, "tomllib", None)
        monkeypatch.setitem(sys.modules, "tomli", None)
        path = tmp_path / "exp.toml"
        path.write_text("seed = 5\n")
        with pytest.raises(ConfigError) as err:
            load_sim_config(path)
        assert "tomli" in str(err.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_sim_config(tmp_path / "missing.json")

    def test_unparseable_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_sim_config(path)

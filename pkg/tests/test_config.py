import json

import pytest

from qcbf import config as cfgmod
from qcbf.core import ConfigurationError


def write(tmp_path, obj, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj, indent=1))
    return p


class TestResolve:
    def test_defaults_filled(self):
        cfg = cfgmod.resolve({"schema": 1})
        assert cfg["grid"]["count"] == [161, 161]
        assert cfg["solve"]["control_points"] == 41 and cfg["solve"]["dstb_points"] == 21
        assert cfg["train"]["gamma_init"] == 0.85 and cfg["train"]["gamma_final"] == 0.9999

    def test_partial_override_keeps_siblings(self):
        cfg = cfgmod.resolve({"schema": 1, "solve": {"tolerance": 1e-3}})
        assert cfg["solve"]["tolerance"] == 1e-3 and cfg["solve"]["max_iterations"] == 2000

    def test_seed_override(self):
        assert cfgmod.resolve({"schema": 1, "seed": 3}, seed=9)["seed"] == 9

    def test_missing_schema(self):
        with pytest.raises(ConfigurationError, match="schema"):
            cfgmod.resolve({})

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError):
            cfgmod.resolve({"schema": 1, "solve": {"tolerence": 1e-3}})

    def test_not_an_object(self):
        with pytest.raises(ConfigurationError):
            cfgmod.resolve([1, 2])

    def test_grid_lengths(self):
        with pytest.raises(ConfigurationError, match="grid"):
            cfgmod.resolve({"schema": 1, "grid": {"min": [0.0], "max": [1.0, 1.0], "count": [3, 3]}})

    def test_timescale(self):
        with pytest.raises(ConfigurationError, match="timescale"):
            cfgmod.resolve({"schema": 1, "train": {"lr_ctrl": 1e-3, "lr_dstb": 1e-3}})

    def test_zero_disturbance_bound_allowed(self):
        assert cfgmod.resolve({"schema": 1, "system": {"dstb_bound": 0.0}})["system"]["dstb_bound"] == 0.0


class TestLoad:
    def test_error_names_line(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n "schema": 1,\n "solve": {\n  "tolerance": -1\n }\n}\n')
        with pytest.raises(ConfigurationError, match=r"line 4 \(solve/tolerance\)"):
            cfgmod.load(p)

    def test_syntax_error_names_line(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n "schema": 1,\n "seed": ,\n}\n')
        with pytest.raises(ConfigurationError, match="line 3"):
            cfgmod.load(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="cannot read"):
            cfgmod.load(tmp_path / "nope.json")

    def test_shipped_configs_resolve(self):
        for name in ("configs/smoke.json", "configs/pendulum.json"):
            assert cfgmod.load(name)["schema"] == 1


class TestHash:
    def test_stable_across_key_order(self, tmp_path):
        a = cfgmod.load(write(tmp_path, {"schema": 1, "seed": 2, "solve": {"tolerance": 1e-3}}, "a.json"))
        b = cfgmod.load(write(tmp_path, {"solve": {"tolerance": 1e-3}, "seed": 2, "schema": 1}, "b.json"))
        assert cfgmod.config_hash(a) == cfgmod.config_hash(b)
        assert cfgmod.canonical_json(a) == cfgmod.canonical_json(b)

    def test_changes_with_content(self):
        assert cfgmod.config_hash(cfgmod.resolve({"schema": 1})) != cfgmod.config_hash(
            cfgmod.resolve({"schema": 1}, seed=1))

    def test_canonical_roundtrip(self):
        cfg = cfgmod.resolve({"schema": 1})
        assert cfgmod.resolve(json.loads(cfgmod.canonical_json(cfg))) == cfg

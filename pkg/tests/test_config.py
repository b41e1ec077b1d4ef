import numpy as np
import pytest

from halotomo.config import ConfigError, ExperimentConfig, config_from_dict, dump_config, load_config


def test_defaults_validate():
    cfg = config_from_dict({})
    assert isinstance(cfg, ExperimentConfig)
    assert cfg.halo.v_r == 0.06
    assert cfg.detector.efficiency_eta == 0.1
    assert cfg.field.b0 == 0.532


@pytest.mark.parametrize("data, where", [
    ({"bogus": 1}, "bogus"),
    ({"halo": {"v_rr": 0.06}}, "halo"),
    ({"analysis": {"alpha": 0.3}}, "analysis"),
])
def test_unknown_keys_rejected_with_path(data, where):
    with pytest.raises(ConfigError, match=where):
        config_from_dict(data)


@pytest.mark.parametrize("data", [
    {"seed": -1},
    {"seed": 1.5},
    {"gamma_convention": "hertz"},
    {"sequence": {"scheme": "spin-echo"}},
    {"sequence": {"taus": [1e-3, 0.8e-3]}},
    {"sequence": {"taus": ["a", "b"]}},
    {"sequence": {"shots_per_tau": 0}},
    {"field": {"gradient": [1, 2]}},
    {"detector": {"efficiency_eta": 1.5}},
    {"detector": {"lensing_matrix": [[1, 0], [0, 1]]}},
    {"analysis": {"radial_window": [1.1, 0.9]}},
    {"analysis": {"alpha_field": 4.0}},
    {"analysis": {"n_resamples": 10}},
    {"halo": "big"},
    {"resolution": {"tau_n": 1.5}},
    {"bounds": {"etas": [0.0]}},
])
def test_invalid_values_rejected(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_gradient_bound_checks_wrap():
    ok = {"gamma_convention": "cyclic_as_angular", "analysis": {"gradient_bound": 6.0}}
    config_from_dict(ok)
    bad = {"gamma_convention": "angular", "analysis": {"gradient_bound": 6.0}}
    with pytest.raises(ConfigError, match="wraps"):
        config_from_dict(bad)


def test_roundtrip_and_hash(tmp_path):
    cfg = config_from_dict({"seed": 5, "field": {"gradient": [5.0, 0, 0]}})
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    back = load_config(p)
    assert back.to_dict() == cfg.to_dict()
    assert back.hash() == cfg.hash()
    assert config_from_dict({"seed": 6}).hash() != cfg.hash()


def test_bad_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: [1,\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(OSError):
        load_config(tmp_path / "missing.yaml")


def test_numeric_types_coerced():
    cfg = config_from_dict({"halo": {"v_r": 6e-2}, "field": {"b0": 1}})
    assert isinstance(cfg.field.b0, float)
    assert np.isclose(cfg.halo.v_r, 0.06)

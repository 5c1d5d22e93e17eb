import json

import numpy as np
import pytest

from mwgs.config import PARAM_GROUPS, RunConfig, describe_defaults, load_config
from mwgs.errors import InvalidConfig, TrainingDivergence
from mwgs.optim import OptimState, adam_step, lr_schedule


def test_first_adam_step_moves_by_lr_against_gradient_sign():
    params = {"a": np.array([1.0, -2.0, 3.0])}
    adam_step(params, {"a": np.array([0.5, -7.0, 1e-3])}, OptimState(), {"a": 1e-2})
    assert np.allclose(params["a"], [1.0 - 1e-2, -2.0 + 1e-2, 3.0 - 1e-2], atol=1e-7)


def test_zero_gradient_and_zero_rate_leave_params_alone():
    params = {"a": np.ones(3), "b": np.ones(2)}
    adam_step(params, {"a": np.zeros(3), "b": np.ones(2)}, OptimState(), {"a": 1e-2, "b": 0.0})
    assert np.array_equal(params["a"], np.ones(3)) and np.array_equal(params["b"], np.ones(2))


def test_symmetric_gradients_give_symmetric_moves():
    params = {"a": np.zeros(2)}
    state = OptimState()
    for _ in range(5):
        adam_step(params, {"a": np.array([0.3, -0.3])}, state, {"a": 1e-3})
    assert params["a"][0] == -params["a"][1]


def test_non_finite_gradient_raises():
    with pytest.raises(TrainingDivergence):
        adam_step({"a": np.zeros(1)}, {"a": np.array([np.nan])}, OptimState(), {"a": 1.0})


def test_schedule_endpoints_and_monotonicity():
    assert lr_schedule(5e-4, 5e-5, 0, 100) == 5e-4
    assert lr_schedule(5e-4, 5e-5, 100, 100) == 5e-5
    assert lr_schedule(5e-4, 5e-5, 50, 100) == pytest.approx(np.sqrt(5e-4 * 5e-5))
    rates = [lr_schedule(1e-4, 1e-6, s, 10) for s in range(11)]
    assert all(x > y for x, y in zip(rates, rates[1:]))


def test_defaults_validate_and_document_every_key():
    cfg = RunConfig().validate()
    text = describe_defaults()
    assert all(name in text for name in cfg.to_dict())
    assert set(PARAM_GROUPS) <= {k[3:] for k in cfg.to_dict() if k.startswith("lr_")}


@pytest.mark.parametrize("bad", [
    {"n_r": 30}, {"M": 2, "n_r": 32}, {"k": 0}, {"encoder": "vit"}, {"lr_hrfn": [1e-3]},
    {"frozen_groups": ["nope"]}, {"background": [0, 0, 2]}, {"steps": 1.5}, {"R_min": 0.0},
])
def test_invalid_configs_are_rejected(bad):
    with pytest.raises(InvalidConfig):
        RunConfig.from_dict(bad).validate()


def test_unknown_keys_and_malformed_json(tmp_path):
    with pytest.raises(InvalidConfig, match="unknown"):
        RunConfig.from_dict({"kk": 3})
    path = tmp_path / "c.json"
    path.write_text('{"k": 3,\n  "M": }')
    with pytest.raises(InvalidConfig, match="line 2"):
        load_config(path)
    path.write_text(json.dumps({"k": 4, "M": 0, "n_r": 8}))
    assert load_config(path).k == 4


def test_overrides_parse_json_values():
    cfg = RunConfig().with_overrides(["k=4", "lr_hrfn=[1e-3,1e-4]", "encoder=conv"])
    assert cfg.k == 4 and cfg.lr_hrfn == [1e-3, 1e-4] and cfg.encoder == "conv"
    with pytest.raises(InvalidConfig):
        RunConfig().with_overrides(["k"])

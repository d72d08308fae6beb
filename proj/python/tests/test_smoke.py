import math
import os
from pathlib import Path

import numpy as np
import pytest

import cnncert

FIXTURES = Path(os.environ.get("CNNCERT_FIXTURE_DIR", Path(__file__).resolve().parents[2] / "fixtures"))


@pytest.fixture
def linear2():
    return cnncert.load_model(str(FIXTURES / "linear2.json"))


def test_load_and_forward(linear2):
    assert linear2.input_shape == (1, 1, 2)
    assert linear2.num_classes == 2
    x = np.array([[[1.0, 0.0]]])
    np.testing.assert_allclose(cnncert.forward(linear2, x).ravel(), [1.0, 0.0])
    assert cnncert.predict(linear2, x) == 0


@pytest.mark.parametrize("norm, expected", [("inf", 0.5), ("2", 1 / math.sqrt(2)), ("1", 1.0)])
def test_linear_radius(linear2, norm, expected):
    r = cnncert.certify(linear2, np.array([[[1.0, 0.0]]]), norm=norm, target=1)
    assert r["radius"] <= expected
    assert r["radius"] == pytest.approx(expected, rel=2e-3)


def test_margin_matches_hand_value(linear2):
    certified, margin = cnncert.certify_margin(linear2, np.array([[[1.0, 0.0]]]), 0.4, "inf", 0, 1)
    assert certified
    assert margin == pytest.approx(0.2)


def test_bounds_contain_forward():
    net = cnncert.load_model(str(FIXTURES / "mlp2-as-conv.json"))
    x = np.linspace(0.1, 0.4, 4).reshape(2, 2, 1)
    lo, hi = cnncert.output_bounds(net, x, 0.05, "2")
    y = cnncert.forward(net, x)
    assert np.all(lo <= y) and np.all(y <= hi)
    dlo, dhi = cnncert.dense_output_bounds(net, x, 0.05, "2")
    np.testing.assert_allclose(lo, dlo, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(hi, dhi, rtol=1e-9, atol=1e-12)


def test_attack_flips_above_radius(linear2):
    r = cnncert.sample_attack(linear2, np.array([[[1.0, 0.0]]]), "inf", 0.75, budget=200, seed=1)
    assert r["found"]
    assert r["adversarial_class"] == 1


def test_relax_and_planes():
    su, ou, sl, ol = cnncert.relax("relu", -1.0, 1.0, "relu-fastlin")
    assert (su, ou, sl, ol) == pytest.approx((0.5, 0.5, 0.5, 0.0))
    planes = cnncert.maxpool_planes([0.0, 0.0], [1.0, 1.0])
    assert sum(planes["coefficients"]) == pytest.approx(1.0)


def test_errors_are_value_errors():
    with pytest.raises(ValueError):
        cnncert.load_model_string('{"input_shape": [1, 1, 1], "blocks": []}')

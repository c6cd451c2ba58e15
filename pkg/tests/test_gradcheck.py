import numpy as np
import pytest

from spreid.gradcheck import (
    SUITES,
    TOLERANCE,
    CheckResult,
    numerical_grad,
    relative_error,
    spreid_suite,
)


def test_numerical_grad_of_cubic():
    x = np.array([1.0, -2.0, 0.5])
    g = numerical_grad(lambda: float(np.sum(x ** 3)), x)
    assert np.allclose(g, 3 * x ** 2, atol=1e-8)
    assert x.tolist() == [1.0, -2.0, 0.5]


def test_relative_error_scale():
    assert relative_error(np.array([2.0, 0.0]), np.array([2.0, 0.002])) == pytest.approx(1e-3)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_pass_threshold():
    assert CheckResult("s", "c", TOLERANCE / 2).passed
    assert not CheckResult("s", "c", TOLERANCE).passed


@pytest.mark.parametrize("name", sorted(SUITES))
def test_layer_suite(name):
    results = SUITES[name](np.random.default_rng(1))
    assert len(results) >= 20
    bad = [r for r in results if not r.passed]
    assert not bad, bad


def test_conv_suite_covers_stride_dilation_grid():
    configs = [r.config for r in SUITES["conv2d"](np.random.default_rng(2))]
    for stride in (1, 2):
        for dil in (1, 2, 3):
            assert any(f"stride={stride}" in c and f"dilation={dil}" in c for c in configs)


def test_end_to_end_model():
    results = spreid_suite(np.random.default_rng(3), n=1)
    assert len(results) == 4 and all(r.passed for r in results), results

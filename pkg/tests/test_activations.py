import numpy as np
import pytest

from grflow.activations import (
    ABS,
    COS,
    EXP,
    MISH_DERIV_MAX,
    SIGMOID,
    SIN,
    SOFTPLUS,
    TANH,
    lipmish,
    lipmish_d1,
    lipmish_d2,
    lipmish_triple,
    mish_d1,
)

GRID = np.linspace(-6.0, 6.0, 241)


@pytest.mark.parametrize("triple", [TANH, SIGMOID, SOFTPLUS, EXP, SIN, COS,
                                    lipmish_triple(-3.0), lipmish_triple(0.0),
                                    lipmish_triple(3.0)],
                         ids=lambda t: t.name)
def test_triple_derivatives_match_finite_differences(triple):
    h = 1e-5
    d1_fd = (triple.f(GRID + h) - triple.f(GRID - h)) / (2 * h)
    d2_fd = (triple.d1(GRID + h) - triple.d1(GRID - h)) / (2 * h)
    scale = np.abs(d1_fd) + 1e-6
    assert np.max(np.abs(triple.d1(GRID) - d1_fd) / scale) < 1e-5
    scale2 = np.abs(d2_fd) + 1e-4
    assert np.max(np.abs(triple.d2(GRID) - d2_fd) / scale2) < 1e-4


def test_abs_triple_consistency():
    x = np.array([-2.0, -0.5, 0.5, 2.0])
    np.testing.assert_array_equal(ABS.f(x), np.abs(x))
    np.testing.assert_array_equal(ABS.d1(x), np.sign(x))


def test_lipmish_zero_is_zero():
    for beta in (-3.0, 0.0, 0.5, 3.0):
        assert lipmish(0.0, beta) == 0.0


def test_lipmish_derivative_bound():
    """Numeric |slope| stays at or below 1 for all steepness settings."""
    xs = np.arange(-20.0, 20.0 + 1e-9, 1e-3)
    for beta in (-3.0, 0.0, 3.0):
        d = lipmish_d1(xs, beta)
        assert np.abs(d).max() <= 1.0 + 1e-6
        h = 1e-4
        numeric = (lipmish(xs + h, beta) - lipmish(xs - h, beta)) / (2 * h)
        assert np.abs(numeric).max() <= 1.0 + 1e-6


def test_lipmish_is_non_monotonic():
    xs = np.arange(-20.0, 20.0, 1e-3)
    d = lipmish_d1(xs, 0.0)
    assert (d < 0).any()


def test_scale_constant_is_the_true_derivative_supremum():
    """The divisor equals sup |d/du (u tanh(softplus(u)))| to ~1e-12, so the
    unit Lipschitz bound is tight rather than slightly violated."""
    u = np.linspace(1.4, 1.6, 2_000_001)
    observed = mish_d1(u).max()
    assert abs(observed - MISH_DERIV_MAX) < 1e-12
    assert observed <= MISH_DERIV_MAX


def test_lipmish_second_derivative_sanity():
    xs = np.linspace(-8, 8, 801)
    h = 1e-5
    for beta in (-1.0, 0.7):
        fd = (lipmish_d1(xs + h, beta) - lipmish_d1(xs - h, beta)) / (2 * h)
        assert np.max(np.abs(lipmish_d2(xs, beta) - fd)) < 1e-6

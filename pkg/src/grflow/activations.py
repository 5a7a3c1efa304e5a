"""Smooth activations with first and second derivatives.

The flow's training loss contains activation first derivatives inside the
log-determinant, so optimizing it needs second derivatives; every activation
here therefore ships value, first and second derivative evaluators.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad

# Maximum of d/du [u * tanh(softplus(u))], attained near u = 1.4906.  Dividing
# by this makes the scaled activation exactly 1-Lipschitz; the commonly quoted
# 1.088 is this value rounded down and would leave a ~4.6e-4 excess.
MISH_DERIV_MAX = 1.088498161251728


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def _mish_parts(u):
    t = np.tanh(softplus(u))
    s = sigmoid(u)
    return t, s


def mish_value(u):
    return u * np.tanh(softplus(u))


def mish_d1(u):
    t, s = _mish_parts(u)
    return t + u * s * (1.0 - t * t)


def mish_d2(u):
    t, s = _mish_parts(u)
    return 2.0 * (1.0 - t * t) * s + u * (1.0 - t * t) * s * ((1.0 - s) - 2.0 * t * s)


@dataclass(frozen=True)
class ActivationTriple:
    """Scalar function with matching first- and second-derivative evaluators."""

    name: str
    f: Callable
    d1: Callable
    d2: Callable

    def apply(self, x: ad.Tensor2) -> ad.Tensor2:
        return ad.apply(x, self.f, self.d1)

    def apply_d1(self, x: ad.Tensor2) -> ad.Tensor2:
        """Elementwise first derivative, itself differentiable once more."""
        return ad.apply(x, self.d1, self.d2)


TANH = ActivationTriple(
    "tanh",
    np.tanh,
    lambda x: 1.0 - np.tanh(x) ** 2,
    lambda x: -2.0 * np.tanh(x) * (1.0 - np.tanh(x) ** 2),
)

SIGMOID = ActivationTriple(
    "sigmoid",
    sigmoid,
    lambda x: sigmoid(x) * (1.0 - sigmoid(x)),
    lambda x: sigmoid(x) * (1.0 - sigmoid(x)) * (1.0 - 2.0 * sigmoid(x)),
)

SOFTPLUS = ActivationTriple("softplus", softplus, sigmoid,
                            lambda x: sigmoid(x) * (1.0 - sigmoid(x)))

EXP = ActivationTriple("exp", np.exp, np.exp, np.exp)

SIN = ActivationTriple("sin", np.sin, np.cos, lambda x: -np.sin(x))

COS = ActivationTriple("cos", np.cos, lambda x: -np.sin(x), lambda x: -np.cos(x))

ABS = ActivationTriple("abs", np.abs, np.sign, lambda x: np.zeros_like(x))


def lipmish(x, beta):
    """1-Lipschitz scaled Mish: (x / k) * tanh(softplus(softplus(beta) * x))."""
    s = softplus(beta)
    return (x / MISH_DERIV_MAX) * np.tanh(softplus(s * x))


def lipmish_d1(x, beta):
    s = softplus(beta)
    return mish_d1(s * x) / MISH_DERIV_MAX


def lipmish_d2(x, beta):
    s = softplus(beta)
    return s * mish_d2(s * x) / MISH_DERIV_MAX


def lipmish_triple(beta: float) -> ActivationTriple:
    """LipMish at a fixed steepness parameter."""
    return ActivationTriple(
        f"lipmish(beta={beta:g})",
        lambda x: lipmish(x, beta),
        lambda x: lipmish_d1(x, beta),
        lambda x: lipmish_d2(x, beta),
    )

import numpy as np
import pytest
from hypothesis import strategies as st

from grflow import autodiff as ad
from grflow.datasets import DatasetBundle, _t_normal
from grflow.flow import LOG_2PI
from grflow.graphs import DagGraph, parse_graph


class ConjugateGaussianModel:
    """p(z) = N(0,1), p(x|z) = N(z,1); evidence p(x) = N(0, sqrt(2))."""

    name = "conjugate"
    graph_text = "z; x; z -> x; latent z"

    def graph(self):
        return parse_graph(self.graph_text)

    def sample(self, n, rng):
        z = rng.normal(0.0, 1.0, n)
        x = rng.normal(z, 1.0)
        return np.column_stack([z, x])

    def logp(self, v):
        z, x = v.T
        return (-0.5 * z**2 - 0.5 * LOG_2PI) + (-0.5 * (x - z) ** 2 - 0.5 * LOG_2PI)

    def logp_taped(self, v):
        z = ad.slice_cols(v, 0, 1)
        x = ad.slice_cols(v, 1, 2)
        prior = ad.shift(ad.scale(ad.mul(z, z), -0.5), -0.5 * LOG_2PI)
        return ad.add(prior, _t_normal(x, z, 1.0))

    @staticmethod
    def log_evidence(x):
        return -0.5 * x**2 / 2.0 - 0.5 * np.log(2.0) - 0.5 * LOG_2PI


def conjugate_bundle(n_train=400, n_test=200, seed=0):
    model = ConjugateGaussianModel()
    rng = np.random.default_rng(seed)
    return DatasetBundle(model.name, model.sample(n_train, rng),
                         model.sample(n_test, rng), model.graph(), model=model)


def numeric_jacobian(fn, x0: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of fn: (d,) -> (k,) at x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    cols = []
    for j in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[j] += h
        xm[j] -= h
        cols.append((fn(xp) - fn(xm)) / (2.0 * h))
    return np.column_stack(cols)


@st.composite
def dag_graphs(draw, max_nodes: int = 8, edge_prob: float = 0.4,
               latent_prob: float = 0.0):
    """Random DAGs whose declaration order need not be topological."""
    n = draw(st.integers(min_value=1, max_value=max_nodes))
    rank = draw(st.permutations(list(range(n))))
    names = tuple(f"v{i}" for i in range(n))
    edges = []
    for a in range(n):
        for b in range(n):
            if rank[a] < rank[b] and draw(st.booleans() if edge_prob == 0.5
                                          else st.floats(0, 1)) < edge_prob:
                edges.append((names[a], names[b]))
    latent = frozenset(
        name for name in names
        if latent_prob and draw(st.floats(0, 1)) < latent_prob
    )
    return DagGraph(names, tuple(edges), latent)


@pytest.fixture
def rng():
    return np.random.default_rng(0)

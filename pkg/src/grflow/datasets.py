"""Synthetic benchmark datasets with exact joint log-densities, plus CSV IO.

Both synthetic models expose the joint density twice: as plain numpy (the
oracle used for evaluation) and as a taped expression (so inference
training can differentiate through it).  Conventions, recorded in the
bundle notes: the second argument of a normal is its standard deviation,
mixture components have identity covariance and equal weights, and
Laplace(a, b) is location/scale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .activations import ABS, COS, SIN, TANH
from .graphs import DagGraph, parse_graph

LOG_2PI = float(np.log(2.0 * np.pi))

ARITHMETIC_CIRCUIT_GRAPH = """\
# heavy-tailed arithmetic circuit
z0 ; z1 ; z2 ; z3 ; z4 ; z5 ; x0 ; x1
z0 -> z2 ; z0 -> z3
z1 -> z2 ; z1 -> z3
z3 -> x0 ; z3 -> z5
z4 -> z5
z5 -> x1
latent z0, z1, z2, z3, z4, z5
"""

TREE_GRAPH = """\
# two mixture pairs feeding a single observation
z0 ; z1 ; z2 ; z3 ; z4 ; z5 ; x0
z0 -> z1 ; z0 -> z4 ; z1 -> z4
z2 -> z3 ; z2 -> z5 ; z3 -> z5
z4 -> x0 ; z5 -> x0
latent z0, z1, z2, z3, z4, z5
"""

PROTEIN_GRAPH = """\
# cellular signaling network over 11 phosphorylated human proteins
plcg ; pip3 ; pip2 ; pkc ; pka ; raf ; mek ; erk ; jnk ; p38 ; akt
plcg -> pip3 ; plcg -> pip2 ; plcg -> pkc
pip3 -> pip2 ; pip3 -> akt
pip2 -> pkc
pkc -> pka ; pkc -> raf ; pkc -> mek ; pkc -> jnk ; pkc -> p38
pka -> raf ; pka -> mek ; pka -> erk ; pka -> jnk ; pka -> p38 ; pka -> akt
raf -> mek
mek -> erk
erk -> akt
"""

GMM2_MEANS = np.array([[1.0, 1.0], [-1.0, -1.0]])
GMM8_MEANS = np.array([
    [0.0, 1.5], [1.0, 1.0], [1.5, 0.0], [1.0, -1.0],
    [0.0, -1.5], [-1.0, -1.0], [-1.5, 0.0], [-1.0, 1.0],
])


def _normal_logpdf(x, mu, sd):
    return -0.5 * ((x - mu) / sd) ** 2 - np.log(sd) - 0.5 * LOG_2PI


def _laplace_logpdf(x, loc, scale_):
    return -np.abs(x - loc) / scale_ - np.log(2.0 * scale_)


def _gmm_logpdf(pair: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Exact log-density of an equal-weight, identity-covariance 2-D mixture."""
    d2 = ((pair[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    comp = -0.5 * d2 - LOG_2PI - np.log(len(means))
    m = comp.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(comp - m).sum(axis=1, keepdims=True))).ravel()


# taped building blocks ------------------------------------------------------

def _t_normal(x, mu, sd: float):
    resid = ad.sub(x, mu)
    return ad.shift(ad.scale(ad.mul(resid, resid), -0.5 / sd**2),
                    -float(np.log(sd)) - 0.5 * LOG_2PI)


def _t_normal_const_mean(x, mu: float, sd: float):
    resid = ad.shift(x, -mu)
    return ad.shift(ad.scale(ad.mul(resid, resid), -0.5 / sd**2),
                    -float(np.log(sd)) - 0.5 * LOG_2PI)


def _t_laplace(x, loc: float, scale_: float):
    return ad.shift(ad.scale(ABS.apply(ad.shift(x, -loc)), -1.0 / scale_),
                    -float(np.log(2.0 * scale_)))


def _t_gmm(a, b, means: np.ndarray):
    comps = []
    for ma, mb in means:
        da, db = ad.shift(a, -float(ma)), ad.shift(b, -float(mb))
        quad = ad.scale(ad.add(ad.mul(da, da), ad.mul(db, db)), -0.5)
        comps.append(ad.shift(quad, -LOG_2PI - float(np.log(len(means)))))
    stacked = comps[0]
    for c in comps[1:]:
        stacked = ad.concat_cols(stacked, c)
    return ad.logsumexp_rows(stacked)


def _t_max(a, b):
    return ad.scale(ad.add(ad.add(a, b), ABS.apply(ad.sub(a, b))), 0.5)


def _t_min(a, b):
    return ad.scale(ad.sub(ad.add(a, b), ABS.apply(ad.sub(a, b))), 0.5)


class ArithmeticCircuitModel:
    """Heavy-tailed base variables linked through products and tanh."""

    name = "arithmetic-circuit"
    graph_text = ARITHMETIC_CIRCUIT_GRAPH

    def graph(self) -> DagGraph:
        return parse_graph(self.graph_text)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z0 = rng.laplace(5.0, 1.0, n)
        z1 = rng.laplace(-2.0, 1.0, n)
        z2 = rng.normal(np.tanh(z0 + z1 - 2.8), 0.1)
        z3 = rng.normal(z0 * z1, 0.1)
        z4 = rng.normal(7.0, 2.0, n)
        z5 = rng.normal(np.tanh(z3 + z4), 0.1)
        x0 = rng.normal(z3, 0.1)
        x1 = rng.normal(z5, 0.1)
        return np.column_stack([z0, z1, z2, z3, z4, z5, x0, x1])

    def logp(self, x: np.ndarray) -> np.ndarray:
        z0, z1, z2, z3, z4, z5, x0, x1 = x.T
        return (
            _laplace_logpdf(z0, 5.0, 1.0)
            + _laplace_logpdf(z1, -2.0, 1.0)
            + _normal_logpdf(z2, np.tanh(z0 + z1 - 2.8), 0.1)
            + _normal_logpdf(z3, z0 * z1, 0.1)
            + _normal_logpdf(z4, 7.0, 2.0)
            + _normal_logpdf(z5, np.tanh(z3 + z4), 0.1)
            + _normal_logpdf(x0, z3, 0.1)
            + _normal_logpdf(x1, z5, 0.1)
        )

    def logp_taped(self, x: ad.Tensor2) -> ad.Tensor2:
        c = [ad.slice_cols(x, j, j + 1) for j in range(8)]
        terms = [
            _t_laplace(c[0], 5.0, 1.0),
            _t_laplace(c[1], -2.0, 1.0),
            _t_normal(c[2], TANH.apply(ad.shift(ad.add(c[0], c[1]), -2.8)), 0.1),
            _t_normal(c[3], ad.mul(c[0], c[1]), 0.1),
            _t_normal_const_mean(c[4], 7.0, 2.0),
            _t_normal(c[5], TANH.apply(ad.add(c[3], c[4])), 0.1),
            _t_normal(c[6], c[3], 0.1),
            _t_normal(c[7], c[5], 0.1),
        ]
        out = terms[0]
        for t in terms[1:]:
            out = ad.add(out, t)
        return out


class TreeModel:
    """Two mixture pairs whose extrema drive a single noisy observation."""

    name = "tree"
    graph_text = TREE_GRAPH

    def graph(self) -> DagGraph:
        return parse_graph(self.graph_text)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z01 = GMM2_MEANS[rng.integers(0, 2, n)] + rng.normal(size=(n, 2))
        z23 = GMM8_MEANS[rng.integers(0, 8, n)] + rng.normal(size=(n, 2))
        z4 = rng.normal(np.maximum(z01[:, 0], z01[:, 1]), 1.0)
        z5 = rng.normal(np.minimum(z23[:, 0], z23[:, 1]), 1.0)
        w = z4 + z5
        x0 = rng.normal(0.5 * (np.sin(w) + np.cos(w)), 1.0)
        return np.column_stack([z01, z23, z4, z5, x0])

    def logp(self, x: np.ndarray) -> np.ndarray:
        z0, z1, z2, z3, z4, z5, x0 = x.T
        w = z4 + z5
        return (
            _gmm_logpdf(x[:, 0:2], GMM2_MEANS)
            + _gmm_logpdf(x[:, 2:4], GMM8_MEANS)
            + _normal_logpdf(z4, np.maximum(z0, z1), 1.0)
            + _normal_logpdf(z5, np.minimum(z2, z3), 1.0)
            + _normal_logpdf(x0, 0.5 * (np.sin(w) + np.cos(w)), 1.0)
        )

    def logp_taped(self, x: ad.Tensor2) -> ad.Tensor2:
        c = [ad.slice_cols(x, j, j + 1) for j in range(7)]
        w = ad.add(c[4], c[5])
        mean_x0 = ad.scale(ad.add(SIN.apply(w), COS.apply(w)), 0.5)
        terms = [
            _t_gmm(c[0], c[1], GMM2_MEANS),
            _t_gmm(c[2], c[3], GMM8_MEANS),
            _t_normal(c[4], _t_max(c[0], c[1]), 1.0),
            _t_normal(c[5], _t_min(c[2], c[3]), 1.0),
            _t_normal(c[6], mean_x0, 1.0),
        ]
        out = terms[0]
        for t in terms[1:]:
            out = ad.add(out, t)
        return out


SYNTHETIC_MODELS = {
    "arithmetic-circuit": ArithmeticCircuitModel(),
    "tree": TreeModel(),
}
_ALIASES = {"arith": "arithmetic-circuit", "arithmetic_circuit": "arithmetic-circuit"}


def resolve_model_name(name: str) -> str:
    key = _ALIASES.get(name, name)
    if key not in SYNTHETIC_MODELS:
        raise KeyError(f"unknown synthetic dataset {name!r}; "
                       f"choose from {sorted(SYNTHETIC_MODELS)}")
    return key


class DataError(ValueError):
    pass


@dataclass
class DatasetBundle:
    """Train/test matrices in a fixed column order, optionally standardized.

    When the bundle is standardized, both splits and the joint density are
    expressed in standardized coordinates (z-scores of the train split).
    """

    name: str
    train: np.ndarray
    test: np.ndarray
    graph: DagGraph
    model: object | None = None
    standardization: tuple[np.ndarray, np.ndarray] | None = None
    notes: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.graph.num_nodes

    @property
    def has_joint(self) -> bool:
        return self.model is not None

    @property
    def observed_indices(self) -> tuple[int, ...]:
        return tuple(self.graph.index(n) for n in self.graph.observed_nodes)

    @property
    def latent_indices(self) -> tuple[int, ...]:
        return tuple(self.graph.index(n) for n in self.graph.latent_nodes)

    def observed_columns(self, split: np.ndarray) -> np.ndarray:
        return split[:, list(self.observed_indices)]

    def _require_joint(self):
        if self.model is None:
            raise DataError(f"dataset {self.name!r} has no exact joint density")

    def joint_logp(self, values: np.ndarray) -> np.ndarray:
        """Exact joint log-density of full rows, in the bundle's scale."""
        self._require_joint()
        if self.standardization is None:
            return self.model.logp(values)
        mean, std = self.standardization
        return self.model.logp(values * std + mean) + float(np.log(std).sum())

    def joint_logp_taped(self, values: ad.Tensor2) -> ad.Tensor2:
        self._require_joint()
        if self.standardization is None:
            return self.model.logp_taped(values)
        mean, std = self.standardization
        n = values.rows
        tiled_std = ad.matmul(ad.const(np.ones((n, 1))), ad.const(std.reshape(1, -1)))
        raw = ad.add(ad.mul(values, tiled_std), ad.const(mean.reshape(1, -1)))
        return ad.shift(self.model.logp_taped(raw), float(np.log(std).sum()))

    def assemble_full(self, latents: np.ndarray, observed: np.ndarray) -> np.ndarray:
        """Interleave latent and observed columns back into graph order."""
        n = latents.shape[0]
        full = np.empty((n, self.dim))
        full[:, list(self.latent_indices)] = latents
        full[:, list(self.observed_indices)] = observed
        return full

    def conditional_joint_taped(self, latents: ad.Tensor2, observed: ad.Tensor2) -> ad.Tensor2:
        """Taped joint log p(x, z) from separate latent/observed tensors."""
        lat, obs = self.latent_indices, self.observed_indices
        cols = []
        for j in range(self.dim):
            if j in lat:
                k = lat.index(j)
                cols.append(ad.slice_cols(latents, k, k + 1))
            else:
                k = obs.index(j)
                cols.append(ad.slice_cols(observed, k, k + 1))
        full = cols[0]
        for c in cols[1:]:
            full = ad.concat_cols(full, c)
        return self.joint_logp_taped(full)


def standardize_bundle(bundle: DatasetBundle) -> DatasetBundle:
    """Z-score both splits with statistics from the train split."""
    if bundle.standardization is not None:
        return bundle
    mean = bundle.train.mean(axis=0)
    std = bundle.train.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    notes = dict(bundle.notes, standardized=True)
    return DatasetBundle(
        bundle.name,
        (bundle.train - mean) / std,
        (bundle.test - mean) / std,
        bundle.graph,
        model=bundle.model,
        standardization=(mean, std),
        notes=notes,
    )


def gen_synthetic(name: str, n_train: int, n_test: int, seed: int,
                   standardize: bool) -> DatasetBundle:
    if n_train <= 0 or n_test < 0:
        raise DataError("sample counts must be positive")
    model = SYNTHETIC_MODELS[resolve_model_name(name)]
    rng = np.random.default_rng(seed)
    bundle = DatasetBundle(
        model.name,
        model.sample(n_train, rng),
        model.sample(n_test, rng),
        model.graph(),
        model=model,
        notes={"seed": seed, "sigma_is_std": True, "gmm_identity_cov": True,
               "standardized": False},
    )
    return standardize_bundle(bundle) if standardize else bundle


def gen_arithmetic_circuit(n_train: int = 10_000, n_test: int = 5_000, seed: int = 0,
                           standardize: bool = False) -> DatasetBundle:
    return gen_synthetic("arithmetic-circuit", n_train, n_test, seed, standardize)


def gen_tree(n_train: int = 10_000, n_test: int = 5_000, seed: int = 0,
             standardize: bool = False) -> DatasetBundle:
    return gen_synthetic("tree", n_train, n_test, seed, standardize)


def write_csv(path, matrix: np.ndarray, names) -> None:
    """Full-precision CSV with one header row of node names."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(names) + "\n")
        for row in matrix:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_matrix_csv(path, graph: DagGraph) -> np.ndarray:
    """Read a CSV whose header names the graph's nodes in any order."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [n for n in graph.nodes if n not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        order = [header.index(n) for n in graph.nodes]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(row[k]) for k in order])
            except (ValueError, IndexError) as err:
                raise DataError(f"{path}: line {lineno}: {err}") from None
    return np.array(rows, dtype=np.float64).reshape(len(rows), graph.num_nodes)


def load_csv(path, graph: DagGraph, standardize: bool = True,
             n_train: int = 5000) -> DatasetBundle:
    """Single-file ingestion with a deterministic first-n/rest split."""
    data = read_matrix_csv(path, graph)
    if data.shape[0] <= n_train:
        raise DataError(
            f"{path}: {data.shape[0]} rows cannot provide {n_train} train rows "
            "plus a test split"
        )
    bundle = DatasetBundle(
        "csv", data[:n_train], data[n_train:], graph,
        notes={"source": str(path), "standardized": False},
    )
    return standardize_bundle(bundle) if standardize else bundle


def load_dataset_dir(dirpath, graph: DagGraph, standardize: bool = True,
                     model=None) -> DatasetBundle:
    """Load train.csv and test.csv written by the gen-data command."""
    import os

    train = read_matrix_csv(os.path.join(dirpath, "train.csv"), graph)
    test = read_matrix_csv(os.path.join(dirpath, "test.csv"), graph)
    name = getattr(model, "name", "csv")
    bundle = DatasetBundle(name, train, test, graph, model=model,
                           notes={"source": str(dirpath), "standardized": False})
    return standardize_bundle(bundle) if standardize else bundle

"""Masked, spectrally normalized residual flows.

Each block computes y = x + g(x (+) cond) where g is a small masked network
whose weight matrices are rescaled to spectral norm at most c < 1, making
the block invertible and its Jacobian diagonal strictly positive.  Because
the masks encode a DAG, the full Jacobian is triangular under a topological
permutation and the log-determinant is exactly the sum of log diagonals.

All forward functions run on Tensor2 values: under an active Tape they are
differentiable, otherwise they are plain numerics.  block_forward_np is a
lean numpy-only path for evaluation and inversion loops.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .activations import MISH_DERIV_MAX, SIGMOID, SOFTPLUS, TANH, mish_d1, softplus
from .graphs import DagGraph, invert_for_inference, parse_graph, render_graph
from .masks import MaskSet, masks_for_graph

LOG_2PI = float(np.log(2.0 * np.pi))
_TINY = 1e-30


def power_iterate(w: np.ndarray, u: np.ndarray, iters: int = 1):
    """Power-iteration estimate of the largest singular value of w.

    Returns (sigma, u_new, v).  sigma never exceeds the true norm.  A zero
    matrix yields sigma 0 and leaves u untouched.
    """
    for _ in range(iters):
        v = w.T @ u
        nv = np.linalg.norm(v)
        if nv < _TINY:
            return 0.0, u, np.zeros(w.shape[1])
        v = v / nv
        u_next = w @ v
        nu = np.linalg.norm(u_next)
        if nu < _TINY:
            return 0.0, u, v
        u = u_next / nu
    sigma = float(u @ (w @ v))
    return sigma, u, v


def spectral_normalize(w: np.ndarray, mask: np.ndarray, c: float, u: np.ndarray,
                       iters: int = 1):
    """Masked weight scaled to spectral norm <= c when the estimate exceeds c.

    Returns (effective weight, sigma estimate, updated u).  Scaling is
    conditional: matrices already inside the bound are returned unchanged.
    """
    if not 0.0 < c < 1.0:
        raise ValueError(f"lip bound c must be in (0, 1), got {c}")
    wm = w * mask
    sigma, u_new, _v = power_iterate(wm, u, iters)
    if sigma > c:
        return wm * (c / sigma), sigma, u_new
    return wm, sigma, u_new


@dataclass
class ResidualBlock:
    """One masked residual update with persistent power-iteration state."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    masks: MaskSet
    lip_bound: float
    power_u: list[np.ndarray]
    beta: np.ndarray  # (1, 1)

    @property
    def dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def conditioning_dim(self) -> int:
        return self.masks.conditioning_dim

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.weights[:-1])

    def refresh_power(self) -> None:
        """Re-anchor the power-iteration state at the exact top singular pair.

        Masking makes the weight matrices block-structured, so a persistent
        iterated u can end up with exactly zero mass in the block holding the
        current largest singular value (it decayed below machine precision
        while another block dominated); plain power iteration then never
        escapes and the spectral estimate silently tracks a smaller value.
        The refresh therefore uses an exact SVD of these small matrices and
        leaves u stationary at the true maximizer.
        """
        for l, w in enumerate(self.weights):
            wm = w * self.masks.matrices[l]
            left, svals, _ = np.linalg.svd(wm)
            if svals[0] < _TINY:
                continue
            u = left[:, 0]
            pivot = np.argmax(np.abs(u))
            if u[pivot] < 0.0:  # deterministic sign
                u = -u
            self.power_u[l] = u

    def effective_weights_np(self) -> list[np.ndarray]:
        """Current effective (masked, normalized) weights, state untouched."""
        out = []
        for l, w in enumerate(self.weights):
            eff, _sigma, _u = spectral_normalize(
                w, self.masks.matrices[l], self.lip_bound, self.power_u[l], iters=1
            )
            out.append(eff)
        return out


def _effective_weight_tensor(block: ResidualBlock, l: int, w_leaf: ad.Tensor2,
                             advance_power: bool) -> ad.Tensor2:
    """Taped effective weight. The normalization factor c/sigma is
    differentiated through sigma = u' W v with u', v held constant."""
    mask = block.masks.matrices[l]
    wm = ad.mul(w_leaf, ad.const(mask))
    sigma, u_new, v = power_iterate(wm.data, block.power_u[l], iters=1)
    if advance_power:
        block.power_u[l] = u_new
    if sigma <= block.lip_bound:
        return wm
    uv = np.outer(u_new, v)
    sigma_t = ad.sum_all(ad.mul(wm, ad.const(uv)))
    factor = ad.scale(ad.apply(sigma_t, lambda x: 1.0 / x, lambda x: -1.0 / x**2),
                      block.lip_bound)
    return ad.smul(wm, factor)


def _lipmish_forward(pre: ad.Tensor2, s: ad.Tensor2, want_deriv: bool):
    """Activation value and (optionally) its derivative, both on the tape."""
    u = ad.smul(pre, s)
    t = TANH.apply(SOFTPLUS.apply(u))
    act = ad.mul(ad.scale(pre, 1.0 / MISH_DERIV_MAX), t)
    if not want_deriv:
        return act, None
    one_minus_t2 = ad.shift(ad.neg(ad.mul(t, t)), 1.0)
    inner = ad.mul(u, ad.mul(SIGMOID.apply(u), one_minus_t2))
    deriv = ad.scale(ad.add(t, inner), 1.0 / MISH_DERIV_MAX)
    return act, deriv


def block_forward(block: ResidualBlock, x: ad.Tensor2, cond: ad.Tensor2 | None = None,
                  leaves: dict[str, ad.Tensor2] | None = None, prefix: str = "",
                  advance_power: bool = False, want_diag: bool = True):
    """One residual update: returns (y, diag) with diag[j] = 1 + dg_j/dx_j.

    ``leaves`` supplies trainable parameter tensors during training; without
    it the block's arrays are wrapped as constants.
    """
    d = block.dim
    if x.cols != d:
        raise ad.ShapeError(f"block expects {d} columns, got {x.cols}")
    if block.conditioning_dim:
        if cond is None or cond.cols != block.conditioning_dim:
            raise ad.ShapeError(
                f"block expects {block.conditioning_dim} conditioning columns"
            )
        h = ad.concat_cols(x, cond)
    else:
        if cond is not None and cond.cols:
            raise ad.ShapeError("unconditional block got conditioning input")
        h = x

    def leaf(name, arr):
        if leaves is not None:
            return leaves[prefix + name]
        return ad.const(arr)

    n_layers = len(block.weights)
    effs, derivs = [], []
    beta = leaf("beta", block.beta)
    s = SOFTPLUS.apply(beta)
    for l in range(n_layers):
        w_eff = _effective_weight_tensor(block, l, leaf(f"W{l}", block.weights[l]),
                                         advance_power)
        effs.append(w_eff)
        pre = ad.add(ad.matmul(h, ad.transpose(w_eff)), leaf(f"b{l}", block.biases[l]))
        if l < n_layers - 1:
            h, deriv = _lipmish_forward(pre, s, want_diag)
            derivs.append(deriv)
        else:
            h = pre
    y = ad.add(x, h)
    if not want_diag:
        return y, None

    first_latent = ad.slice_cols(effs[0], 0, d) if block.conditioning_dim else effs[0]
    if n_layers == 2:
        k = ad.mul(ad.transpose(effs[1]), first_latent)
        diag = ad.shift(ad.matmul(derivs[0], k), 1.0)
    else:
        # deeper blocks: dense per-sample Jacobian chain
        rows = []
        ones_row = ad.const(np.ones((1, d)))
        for i in range(x.rows):
            m = first_latent
            for l in range(n_layers - 1):
                dvec = ad.slice_rows(derivs[l], i, i + 1)
                m = ad.mul(ad.matmul(ad.transpose(dvec), ones_row), m)
                m = ad.matmul(effs[l + 1], m)
            rows.append(ad.diagonal(m))
        diag = rows[0]
        for r in rows[1:]:
            diag = ad.concat_rows(diag, r)
        diag = ad.shift(diag, 1.0)
    return y, diag


def block_forward_np(block: ResidualBlock, x: np.ndarray, cond: np.ndarray | None = None,
                     weffs: list[np.ndarray] | None = None, want_diag: bool = True):
    """Numpy-only forward pass for evaluation and inversion loops."""
    if weffs is None:
        weffs = block.effective_weights_np()
    d = block.dim
    if x.shape[1] != d:
        raise ad.ShapeError(f"block expects {d} columns, got {x.shape[1]}")
    if block.conditioning_dim:
        if cond is None or cond.shape[1] != block.conditioning_dim:
            raise ad.ShapeError(
                f"block expects {block.conditioning_dim} conditioning columns"
            )
        h = np.hstack([x, cond])
    else:
        if cond is not None and cond.shape[1]:
            raise ad.ShapeError("unconditional block got conditioning input")
        h = x
    s = softplus(block.beta[0, 0])
    n_layers = len(weffs)
    derivs = []
    for l in range(n_layers):
        pre = h @ weffs[l].T + block.biases[l]
        if l < n_layers - 1:
            u = s * pre
            t = np.tanh(softplus(u))
            h = (pre / MISH_DERIV_MAX) * t
            if want_diag:
                derivs.append(mish_d1(u) / MISH_DERIV_MAX)
        else:
            h = pre
    y = x + h
    if not want_diag:
        return y, None
    first_latent = weffs[0][:, :d]
    if n_layers == 2:
        diag = 1.0 + derivs[0] @ (weffs[1].T * first_latent)
    else:
        diag = np.empty((x.shape[0], d))
        for i in range(x.shape[0]):
            m = first_latent
            for l in range(n_layers - 1):
                m = weffs[l + 1] @ (derivs[l][i][:, None] * m)
            diag[i] = 1.0 + np.diag(m)
    return y, diag


@dataclass
class ResidualFlow:
    """Composition of residual blocks over one dependency graph.

    ``graph`` is the graph the masks encode: the data DAG for density
    flows, the inverted latent DAG for inference flows.
    """

    blocks: list[ResidualBlock]
    graph: DagGraph
    kind: str  # "density" or "inference"
    source_graph_text: str
    conditioning_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("density", "inference"):
            raise ValueError(f"unknown flow kind {self.kind!r}")
        dims = {b.dim for b in self.blocks}
        conds = {b.conditioning_dim for b in self.blocks}
        if len(self.blocks) < 1 or len(dims) != 1 or len(conds) != 1:
            raise ValueError("flow blocks must agree on dimensions")

    @property
    def dim(self) -> int:
        return self.blocks[0].dim

    @property
    def conditioning_dim(self) -> int:
        return self.blocks[0].conditioning_dim

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def lip_bound(self) -> float:
        return self.blocks[0].lip_bound

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for t, blk in enumerate(self.blocks):
            for l, w in enumerate(blk.weights):
                out[f"b{t}.W{l}"] = w
            for l, b in enumerate(blk.biases):
                out[f"b{t}.b{l}"] = b
            out[f"b{t}.beta"] = blk.beta
        return out

    def make_leaves(self) -> dict[str, ad.Tensor2]:
        return {k: ad.Tensor2(v, trainable=True) for k, v in self.parameter_arrays().items()}

    def refresh_power(self) -> None:
        for blk in self.blocks:
            blk.refresh_power()

    def count_parameters(self) -> int:
        """Trainable scalars: unmasked weight entries, biases, one beta per block."""
        total = 0
        for blk in self.blocks:
            total += sum(int(m.sum()) for m in blk.masks.matrices)
            total += sum(b.size for b in blk.biases)
            total += 1
        return total

    def with_lip_bound(self, c: float) -> "ResidualFlow":
        """Copy of the flow with a different spectral-norm cap on its weights."""
        blocks = [
            ResidualBlock([w.copy() for w in blk.weights],
                          [b.copy() for b in blk.biases],
                          blk.masks, c,
                          [u.copy() for u in blk.power_u],
                          blk.beta.copy())
            for blk in self.blocks
        ]
        out = ResidualFlow(blocks, self.graph, self.kind, self.source_graph_text,
                           self.conditioning_names)
        out.refresh_power()
        return out


def flow_forward(flow: ResidualFlow, x: ad.Tensor2, cond: ad.Tensor2 | None = None,
                 leaves: dict[str, ad.Tensor2] | None = None,
                 advance_power: bool = False, want_logdet: bool = True):
    """Normalizing-direction pass: returns (z, per-sample logdet column)."""
    z = x
    logdet = None
    for t, blk in enumerate(flow.blocks):
        z, diag = block_forward(blk, z, cond, leaves=leaves, prefix=f"b{t}.",
                                advance_power=advance_power, want_diag=want_logdet)
        if want_logdet:
            ld = ad.rowsum(ad.log(diag))
            logdet = ld if logdet is None else ad.add(logdet, ld)
    return z, logdet


def base_log_prob(z: ad.Tensor2) -> ad.Tensor2:
    """Standard-normal log-density of each row."""
    quad = ad.scale(ad.rowsum(ad.mul(z, z)), -0.5)
    return ad.shift(quad, -0.5 * z.cols * LOG_2PI)


def log_prob(flow: ResidualFlow, x: ad.Tensor2, cond: ad.Tensor2 | None = None,
             leaves: dict[str, ad.Tensor2] | None = None,
             advance_power: bool = False) -> ad.Tensor2:
    """Per-sample log p(x) under the flow via change of variables."""
    z, logdet = flow_forward(flow, x, cond, leaves=leaves, advance_power=advance_power)
    return ad.add(base_log_prob(z), logdet)


def flow_forward_np(flow: ResidualFlow, x: np.ndarray, cond: np.ndarray | None = None,
                    want_logdet: bool = True):
    z = np.asarray(x, dtype=np.float64)
    logdet = np.zeros(z.shape[0]) if want_logdet else None
    for blk in flow.blocks:
        z, diag = block_forward_np(blk, z, cond, want_diag=want_logdet)
        if want_logdet:
            logdet = logdet + np.log(diag).sum(axis=1)
    return z, logdet


def log_prob_np(flow: ResidualFlow, x: np.ndarray, cond: np.ndarray | None = None) -> np.ndarray:
    z, logdet = flow_forward_np(flow, x, cond)
    base = -0.5 * (z * z).sum(axis=1) - 0.5 * z.shape[1] * LOG_2PI
    return base + logdet


def _init_block(graph: DagGraph, hidden_widths, mask_seed: int, obs_count: int,
                c: float, rng: np.random.Generator, beta_init: float) -> ResidualBlock:
    masks = masks_for_graph(graph, hidden_widths, mask_seed, obs_count=obs_count)
    weights, biases, power_u = [], [], []
    for m in masks.matrices:
        fan_in = m.shape[1]
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=m.shape) * m
        weights.append(w)
        biases.append(np.zeros((1, m.shape[0])))
        u = rng.normal(size=m.shape[0])
        power_u.append(u / np.linalg.norm(u))
    return ResidualBlock(weights, biases, masks, c, power_u,
                         np.array([[float(beta_init)]]))


def _build(mask_graph: DagGraph, kind: str, source_text: str, conditioning: tuple[str, ...],
           n_blocks: int, hidden_widths, c: float, seed: int, beta_init: float) -> ResidualFlow:
    if isinstance(hidden_widths, int):
        hidden_widths = [hidden_widths]
    rng = np.random.default_rng(seed)
    mask_seeds = rng.integers(0, 2**31 - 1, size=n_blocks)
    blocks = [
        _init_block(mask_graph, hidden_widths, int(mask_seeds[t]), len(conditioning),
                    c, rng, beta_init)
        for t in range(n_blocks)
    ]
    flow = ResidualFlow(blocks, mask_graph, kind, source_text, conditioning)
    flow.refresh_power()
    return flow


def build_density_flow(graph: DagGraph, n_blocks: int, hidden_widths, c: float = 0.99,
                       seed: int = 0, beta_init: float = 0.5) -> ResidualFlow:
    """Flow over all graph variables for maximum-likelihood density estimation."""
    return _build(graph, "density", render_graph(graph), (), n_blocks, hidden_widths,
                  c, seed, beta_init)


def build_inference_flow(graph: DagGraph, n_blocks: int, hidden_widths, c: float = 0.99,
                         seed: int = 0, beta_init: float = 0.5) -> ResidualFlow:
    """Conditional flow over the latents of ``graph`` given its observed nodes."""
    inv = invert_for_inference(graph)
    return _build(inv.graph, "inference", render_graph(graph), inv.conditioning,
                  n_blocks, hidden_widths, c, seed, beta_init)


CHECKPOINT_VERSION = 1


def save_checkpoint(flow: ResidualFlow, path, extras: dict | None = None) -> None:
    """Versioned JSON checkpoint; masks are stored as (graph, widths, seed)."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": flow.kind,
        "source_graph": flow.source_graph_text,
        "lip_bound": flow.lip_bound,
        "conditioning_dim": flow.conditioning_dim,
        "blocks": [
            {
                "hidden_widths": list(blk.hidden_widths),
                "mask_seed": int(blk.masks.seed),
                "beta": float(blk.beta[0, 0]),
                "weights": [w.tolist() for w in blk.weights],
                "biases": [b.tolist() for b in blk.biases],
                "power_u": [u.tolist() for u in blk.power_u],
            }
            for blk in flow.blocks
        ],
        "extras": extras or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> tuple[ResidualFlow, dict]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    source = parse_graph(payload["source_graph"])
    kind = payload["kind"]
    if kind == "inference":
        inv = invert_for_inference(source)
        mask_graph, conditioning = inv.graph, inv.conditioning
    else:
        mask_graph, conditioning = source, ()
    c = payload["lip_bound"]
    blocks = []
    for spec in payload["blocks"]:
        masks = masks_for_graph(mask_graph, spec["hidden_widths"], spec["mask_seed"],
                                obs_count=len(conditioning))
        blocks.append(ResidualBlock(
            [np.array(w, dtype=np.float64) for w in spec["weights"]],
            [np.array(b, dtype=np.float64) for b in spec["biases"]],
            masks, c,
            [np.array(u, dtype=np.float64) for u in spec["power_u"]],
            np.array([[spec["beta"]]], dtype=np.float64),
        ))
    flow = ResidualFlow(blocks, mask_graph, kind, payload["source_graph"], conditioning)
    return flow, payload.get("extras", {})

"""Binary weight masks that encode a DAG's dependency structure.

Every network unit carries a set of variables: input unit i carries {i},
output unit j carries {j} union parents(j), and hidden units are randomly
assigned either a singleton {i} or a family {i} union parents(i).  A weight
from unit a to unit b survives masking only if b's set contains a's set, so
any surviving input-to-output path switches sets exactly once and output j
can only see {j} union parents(j).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import DagGraph


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class UnitLabel:
    """Variable set carried by one network unit."""

    kind: str  # "singleton" or "family"
    var: int
    members: frozenset[int]


def singleton_label(var: int) -> UnitLabel:
    return UnitLabel("singleton", var, frozenset((var,)))


def family_label(g: DagGraph, var: int) -> UnitLabel:
    members = g.family_indices(var)
    if members == frozenset((var,)):  # root: family collapses to the singleton
        return singleton_label(var)
    return UnitLabel("family", var, members)


@dataclass(frozen=True)
class MaskSet:
    """Per-layer 0/1 matrices plus the labels they were derived from.

    matrices[l] has shape (units in layer l+1, units in layer l).  When
    conditioning_dim > 0 the first layer has that many extra all-ones
    input columns which every unit may read.
    """

    matrices: tuple[np.ndarray, ...]
    layer_labels: tuple[tuple[UnitLabel, ...], ...]
    seed: int
    conditioning_dim: int = 0

    def __post_init__(self):
        for m in self.matrices:
            m.flags.writeable = False

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(len(layer) for layer in self.layer_labels[1:-1])


def assign_labels(
    g: DagGraph, hidden_widths: list[int] | tuple[int, ...], seed: int
) -> list[list[UnitLabel]]:
    """Random hidden-unit labels with guaranteed singleton coverage.

    Each unit draws uniformly from the 2D candidate sets (singletons and
    families).  Afterwards, any variable missing a singleton unit in a layer
    gets one by overwriting units round-robin from index 0, so a same-variable
    path exists through every layer.
    """
    d = g.num_nodes
    for width in hidden_widths:
        if width < d:
            raise MaskError(f"hidden width {width} < {d} variables; cannot cover singletons")
    candidates = [singleton_label(i) for i in range(d)] + [family_label(g, i) for i in range(d)]
    rng = np.random.default_rng(seed)
    layers: list[list[UnitLabel]] = []
    for width in hidden_widths:
        draw = rng.integers(0, 2 * d, size=width)
        labels = [candidates[k] for k in draw]
        pos = 0
        while True:
            covered = {lab.members for lab in labels}
            missing = [i for i in range(d) if frozenset((i,)) not in covered]
            if not missing:
                break
            labels[pos] = singleton_label(missing[0])
            pos += 1
        layers.append(labels)
    return layers


def _superset_mask(next_labels, prev_labels) -> np.ndarray:
    m = np.zeros((len(next_labels), len(prev_labels)))
    for j, nxt in enumerate(next_labels):
        for i, prv in enumerate(prev_labels):
            if prv.members <= nxt.members:
                m[j, i] = 1.0
    return m


def build_masks(g: DagGraph, labels: list[list[UnitLabel]], seed: int = 0) -> MaskSet:
    """Masks for one residual block from its hidden-layer label assignment."""
    d = g.num_nodes
    input_labels = tuple(singleton_label(i) for i in range(d))
    output_labels = tuple(family_label(g, j) for j in range(d))
    all_layers = [input_labels] + [tuple(layer) for layer in labels] + [output_labels]
    matrices = tuple(
        _superset_mask(all_layers[l + 1], all_layers[l]) for l in range(len(all_layers) - 1)
    )
    return MaskSet(matrices, tuple(all_layers), seed)


def conditional_masks(
    g_inv: DagGraph, obs_count: int, labels: list[list[UnitLabel]], seed: int = 0
) -> MaskSet:
    """Masks for a conditional block reading latents plus observations.

    The first layer gains obs_count all-ones columns: every unit may read
    every observation, while latent-to-latent connectivity still follows
    the superset rule on g_inv.
    """
    base = build_masks(g_inv, labels, seed)
    if obs_count == 0:
        return base
    first = base.matrices[0]
    with_cond = np.hstack([first, np.ones((first.shape[0], obs_count))])
    return MaskSet(
        (with_cond,) + base.matrices[1:], base.layer_labels, seed, conditioning_dim=obs_count
    )


def masks_for_graph(
    g: DagGraph,
    hidden_widths: list[int] | tuple[int, ...],
    seed: int,
    obs_count: int = 0,
) -> MaskSet:
    """Label assignment plus mask construction in one deterministic step."""
    labels = assign_labels(g, hidden_widths, seed)
    if obs_count:
        return conditional_masks(g, obs_count, labels, seed)
    return build_masks(g, labels, seed)


def reachable_inputs(masks: MaskSet) -> np.ndarray:
    """Boolean (outputs x inputs) matrix of surviving computational paths."""
    reach = masks.matrices[0] > 0
    for m in masks.matrices[1:]:
        reach = (m > 0).astype(np.int64) @ reach.astype(np.int64) > 0
    return reach

"""Directed acyclic dependency graphs over named variables.

A graph is described by a small text format: statements are separated by
newlines or ';', a bare ``name`` declares a node, ``a -> b`` declares an
edge (implicitly declaring endpoints on first use), ``latent a, b`` marks
nodes as latent, and ``#`` starts a comment.  Node roles default to
observed.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class GraphError(ValueError):
    """Invalid graph text or structure. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class DagGraph:
    """Immutable DAG over named variables with observed/latent roles."""

    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]
    latent: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        seen = set()
        for name in self.nodes:
            if not _NAME_RE.match(name):
                raise GraphError(f"invalid node name {name!r}")
            if name in seen:
                raise GraphError(f"duplicate node {name!r}")
            seen.add(name)
        for parent, child in self.edges:
            for end in (parent, child):
                if end not in seen:
                    raise GraphError(f"unknown endpoint {end!r}")
        if len(set(self.edges)) != len(self.edges):
            raise GraphError("duplicate edge")
        for name in self.latent:
            if name not in seen:
                raise GraphError(f"unknown latent node {name!r}")
        # acyclicity: Kahn's algorithm must consume every node
        order = _kahn(self.nodes, self.edges)
        if order is None:
            raise GraphError("cycle detected")

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def roles(self) -> dict[str, str]:
        return {n: ("latent" if n in self.latent else "observed") for n in self.nodes}

    @property
    def observed_nodes(self) -> tuple[str, ...]:
        return tuple(n for n in self.nodes if n not in self.latent)

    @property
    def latent_nodes(self) -> tuple[str, ...]:
        return tuple(n for n in self.nodes if n in self.latent)

    def index(self, name: str) -> int:
        return self._index[name]

    @cached_property
    def _index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.nodes)}

    def parents(self, name: str) -> tuple[str, ...]:
        return tuple(p for p, c in self.edges if c == name)

    def children(self, name: str) -> tuple[str, ...]:
        return tuple(c for p, c in self.edges if p == name)

    def parent_indices(self, j: int) -> tuple[int, ...]:
        name = self.nodes[j]
        return tuple(self._index[p] for p in self.parents(name))

    def family_indices(self, j: int) -> frozenset[int]:
        """Variable index j together with the indices of its parents."""
        return frozenset((j,) + self.parent_indices(j))

    def ancestors_or_self(self, j: int) -> frozenset[int]:
        """Transitive closure of the parent relation, including j itself."""
        out = {j}
        frontier = [j]
        while frontier:
            k = frontier.pop()
            for p in self.parent_indices(k):
                if p not in out:
                    out.add(p)
                    frontier.append(p)
        return frozenset(out)


@dataclass(frozen=True)
class TopoOrder:
    """Permutation of node indices where parents precede children."""

    permutation: tuple[int, ...]


@dataclass(frozen=True)
class InvertedGraph:
    """Latent-only DAG for inference plus the observed conditioning set."""

    graph: DagGraph
    conditioning: tuple[str, ...]


def _kahn(nodes, edges) -> list[str] | None:
    """Topological order with declaration-order tie-break, None on cycle."""
    indeg = {n: 0 for n in nodes}
    children: dict[str, list[str]] = {n: [] for n in nodes}
    for p, c in edges:
        indeg[c] += 1
        children[p].append(c)
    out: list[str] = []
    ready = [n for n in nodes if indeg[n] == 0]
    while ready:
        # pop the earliest-declared ready node
        nxt = min(ready, key=nodes.index)
        ready.remove(nxt)
        out.append(nxt)
        for c in children[nxt]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    return out if len(out) == len(nodes) else None


def parse_graph(text: str) -> DagGraph:
    """Parse graph text into a validated DagGraph.

    Raises GraphError with a 1-based line number on malformed statements,
    duplicate declarations, unknown names in latent lists, and cycles.
    """
    nodes: list[str] = []
    declared: set[str] = set()
    edges: list[tuple[str, str]] = []
    edge_lines: list[int] = []
    latent: list[str] = []

    def add_node(name: str, line: int, implicit: bool):
        if not _NAME_RE.match(name):
            raise GraphError(f"invalid node name {name!r}", line)
        if name in declared:
            if not implicit:
                raise GraphError(f"duplicate node {name!r}", line)
            return
        declared.add(name)
        nodes.append(name)

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        for stmt in line.split(";"):
            stmt = stmt.strip()
            if not stmt:
                continue
            if "->" in stmt:
                parts = [p.strip() for p in stmt.split("->")]
                if len(parts) != 2 or not all(parts):
                    raise GraphError(f"malformed edge {stmt!r}", lineno)
                parent, child = parts
                add_node(parent, lineno, implicit=True)
                add_node(child, lineno, implicit=True)
                if (parent, child) in edges:
                    raise GraphError(f"duplicate edge {parent} -> {child}", lineno)
                edges.append((parent, child))
                edge_lines.append(lineno)
            elif stmt.startswith("latent ") or stmt == "latent":
                names = [n.strip() for n in stmt[len("latent"):].split(",")]
                if not names or not all(names):
                    raise GraphError(f"malformed latent declaration {stmt!r}", lineno)
                for name in names:
                    if name not in declared:
                        raise GraphError(f"unknown endpoint {name!r} in latent declaration", lineno)
                    latent.append(name)
            elif _NAME_RE.match(stmt):
                add_node(stmt, lineno, implicit=False)
            else:
                raise GraphError(f"malformed statement {stmt!r}", lineno)

    if _kahn(tuple(nodes), tuple(edges)) is None:
        # report the first edge that closes a cycle, given the edges before it
        for k, ((parent, child), lineno) in enumerate(zip(edges, edge_lines)):
            if _reaches(child, parent, edges[: k + 1]):
                raise GraphError(f"cycle detected at edge {parent} -> {child}", lineno)
        raise GraphError("cycle detected")

    return DagGraph(tuple(nodes), tuple(edges), frozenset(latent))


def _reaches(src: str, dst: str, edges) -> bool:
    frontier = [src]
    seen = {src}
    while frontier:
        u = frontier.pop()
        if u == dst:
            return True
        for p, c in edges:
            if p == u and c not in seen:
                seen.add(c)
                frontier.append(c)
    return False


def render_graph(g: DagGraph) -> str:
    """Serialize a graph so that parse_graph(render_graph(g)) == g."""
    lines = [" ; ".join(g.nodes)] if g.nodes else []
    for parent, child in g.edges:
        lines.append(f"{parent} -> {child}")
    latents = [n for n in g.nodes if n in g.latent]
    if latents:
        lines.append("latent " + ", ".join(latents))
    return "\n".join(lines) + "\n"


def topo_sort(g: DagGraph) -> TopoOrder:
    """Deterministic topological order; ties broken by declaration order."""
    order = _kahn(g.nodes, g.edges)
    assert order is not None  # DagGraph guarantees acyclicity
    return TopoOrder(tuple(g.index(n) for n in order))


def moral_neighbors(g: DagGraph, name: str) -> frozenset[str]:
    """Parents, children and co-parents of a node (its moral-graph links)."""
    out: set[str] = set(g.parents(name)) | set(g.children(name))
    for child in g.children(name):
        out.update(g.parents(child))
    out.discard(name)
    return frozenset(out)


def invert_for_inference(g: DagGraph) -> InvertedGraph:
    """Latent-only DAG whose conditionals can host the posterior.

    Moralizes the graph (marries co-parents), removes observed nodes, and
    orients the remaining links along the original topological order, which
    keeps the result acyclic.  Observed nodes become global conditioning
    inputs.  This may be denser than a minimal faithful inversion but never
    drops a dependency that moralization exposes.
    """
    latents = g.latent_nodes
    if not latents:
        raise GraphError("no latent nodes to invert for")
    topo = topo_sort(g)
    rank = {g.nodes[i]: pos for pos, i in enumerate(topo.permutation)}
    latent_set = set(latents)
    edges: list[tuple[str, str]] = []
    for v in latents:
        for u in moral_neighbors(g, v):
            if u in latent_set and rank[u] < rank[v]:
                edges.append((u, v))
    edges.sort(key=lambda e: (latents.index(e[1]), latents.index(e[0])))
    inv = DagGraph(latents, tuple(edges), frozenset(latents))
    return InvertedGraph(inv, g.observed_nodes)

"""Directed intersection graph and the neighbour sets used by masked attention."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

DIRECTIONS = ("forward", "backward", "global")


class GraphLoadError(ValueError):
    pass


@dataclass(frozen=True)
class IntersectionGraph:
    n: int
    edges: tuple = ()
    labels: tuple = ()

    def __post_init__(self):
        if self.n < 1:
            raise GraphLoadError(f"graph needs at least one node, got n={self.n}")
        edges = tuple((int(s), int(d)) for s, d in self.edges)
        seen = set()
        for s, d in edges:
            if not (0 <= s < self.n and 0 <= d < self.n):
                raise GraphLoadError(f"edge [{s}, {d}] has a node index outside [0, {self.n})")
            if s == d:
                raise GraphLoadError(f"edge [{s}, {d}] is a self-loop; self-loops are implicit")
            if (s, d) in seen:
                raise GraphLoadError(f"duplicate edge [{s}, {d}]")
            seen.add((s, d))
        object.__setattr__(self, "edges", edges)
        labels = tuple(str(x) for x in self.labels)
        if labels and len(labels) != self.n:
            raise GraphLoadError(f"{len(labels)} labels given for {self.n} nodes")
        object.__setattr__(self, "labels", labels)

    def transpose(self):
        return IntersectionGraph(self.n, tuple((d, s) for s, d in self.edges), self.labels)

    def relabel(self, perm):
        """Graph with node ``i`` renamed to ``perm[i]``."""
        perm = [int(p) for p in perm]
        labels = ()
        if self.labels:
            inv = np.argsort(perm)
            labels = tuple(self.labels[i] for i in inv)
        return IntersectionGraph(self.n, tuple((perm[s], perm[d]) for s, d in self.edges), labels)

    def to_json(self):
        doc = {"n": self.n, "edges": [list(e) for e in self.edges]}
        if self.labels:
            doc["labels"] = list(self.labels)
        return doc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


@dataclass(frozen=True)
class DirectionalAdjacency:
    direction: str
    neighbor_sets: tuple = field(default=())

    @property
    def n(self):
        return len(self.neighbor_sets)

    def mask(self):
        """Boolean (N, N) array, True where j is *not* a permitted neighbour of i."""
        blocked = np.ones((self.n, self.n), dtype=bool)
        for i, nbrs in enumerate(self.neighbor_sets):
            blocked[i, sorted(nbrs)] = False
        return blocked


def load_graph(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise GraphLoadError(f"{path}: no such graph file") from None
    except json.JSONDecodeError as exc:
        raise GraphLoadError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or "n" not in doc:
        raise GraphLoadError(f"{path}: expected an object with keys 'n' and 'edges'")
    try:
        return IntersectionGraph(int(doc["n"]), tuple(map(tuple, doc.get("edges", []))),
                                 tuple(doc.get("labels", [])))
    except GraphLoadError as exc:
        raise GraphLoadError(f"{path}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise GraphLoadError(f"{path}: malformed edge list ({exc})") from None


def default_graph():
    """The bundled 6-intersection network (a best-effort layout, overridable)."""
    ref = resources.files("mpgat") / "data" / "intersections6.json"
    return load_graph(ref)


def path_graph(n):
    return IntersectionGraph(n, tuple((i, i + 1) for i in range(n - 1)))


def build_adjacency(g, direction):
    """Neighbour sets N_i: in-neighbours (forward), out-neighbours (backward) or all nodes.

    Every set contains i itself.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if direction == "global":
        full = frozenset(range(g.n))
        return DirectionalAdjacency(direction, tuple(full for _ in range(g.n)))
    sets = [{i} for i in range(g.n)]
    for s, d in g.edges:
        if direction == "forward":
            sets[d].add(s)
        else:
            sets[s].add(d)
    return DirectionalAdjacency(direction, tuple(frozenset(x) for x in sets))

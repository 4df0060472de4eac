"""Conflict graphs, on-off state classification and independent sets.

Links are indexed ``0..K-1`` in the Python API; JSON files and the CLI use
1-based ids.  An on-off state is either a 0/1 sequence of length K or an
integer bitmask whose bit ``k`` is ``x_k``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numba import njit

from .errors import CapacityError, ConfigError, DimensionError

DEFAULT_ENUM_CAP = 20


@dataclass(frozen=True)
class ConflictGraph:
    num_links: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if int(self.num_links) < 1:
            raise ConfigError(f"num_links must be positive, got {self.num_links}")
        object.__setattr__(self, "num_links", int(self.num_links))
        norm = set()
        for e in self.edges:
            i, j = (int(v) for v in e)
            if i == j:
                raise ConfigError(f"self-loop on link {i}")
            if not (0 <= i < self.num_links and 0 <= j < self.num_links):
                raise ConfigError(f"edge ({i}, {j}) out of range for K={self.num_links}")
            norm.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(norm))

    @classmethod
    def from_edges(cls, num_links: int, edges: Iterable[Sequence[int]], one_based=False):
        off = 1 if one_based else 0
        return cls(num_links, frozenset((i - off, j - off) for i, j in edges))

    @property
    def K(self) -> int:
        return self.num_links

    def adjacent(self, j: int, k: int) -> bool:
        return (min(j, k), max(j, k)) in self.edges

    @cached_property
    def neighbor_masks(self) -> np.ndarray:
        masks = np.zeros(self.num_links, dtype=np.int64)
        for i, j in self.edges:
            masks[i] |= 1 << j
            masks[j] |= 1 << i
        return masks

    @cached_property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_links, self.num_links), dtype=bool)
        for i, j in self.edges:
            a[i, j] = a[j, i] = True
        return a

    def neighbors(self, k: int) -> list[int]:
        return [j for j in range(self.num_links) if self.adjacent(j, k)]

    def is_subgraph_of(self, other: "ConflictGraph") -> bool:
        return self.num_links == other.num_links and self.edges <= other.edges

    def relabel(self, perm: Sequence[int]) -> "ConflictGraph":
        """Graph with link ``k`` renamed ``perm[k]``."""
        return ConflictGraph(self.num_links, frozenset((perm[i], perm[j]) for i, j in self.edges))

    # -- serialization ---------------------------------------------------

    def to_json(self) -> dict:
        return {"num_links": self.num_links,
                "edges": [[i + 1, j + 1] for i, j in sorted(self.edges)]}

    @classmethod
    def from_json(cls, data: dict) -> "ConflictGraph":
        if "num_links" not in data or "edges" not in data:
            raise ConfigError("graph JSON needs 'num_links' and 'edges'")
        K = data["num_links"]
        seen = set()
        for e in data["edges"]:
            if len(e) != 2:
                raise ConfigError(f"malformed edge {e!r}")
            i, j = int(e[0]), int(e[1])
            if i == j:
                raise ConfigError(f"self-loop on link {i}")
            if not (1 <= i <= K and 1 <= j <= K):
                raise ConfigError(f"edge {e!r} out of range 1..{K}")
            seen.add((i, j))
        # an explicitly listed reverse pair must not disagree with anything,
        # so symmetry holds by construction once pairs are unordered
        return cls.from_edges(K, seen, one_based=True)

    @classmethod
    def load(cls, path) -> "ConflictGraph":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


# -- on-off states -------------------------------------------------------

def to_mask(x, K: int | None = None) -> int:
    """Bitmask of an on-off state given as a 0/1 sequence (or already an int)."""
    if isinstance(x, (int, np.integer)):
        return int(x)
    bits = list(x)
    if K is not None and len(bits) != K:
        raise DimensionError(f"state has length {len(bits)}, expected {K}")
    m = 0
    for k, b in enumerate(bits):
        if b:
            m |= 1 << k
    return m


def to_bits(mask: int, K: int) -> tuple[int, ...]:
    return tuple((mask >> k) & 1 for k in range(K))


def mask_links(mask: int) -> list[int]:
    out = []
    k = 0
    while mask:
        if mask & 1:
            out.append(k)
        mask >>= 1
        k += 1
    return out


@dataclass(frozen=True)
class Classification:
    components: tuple[frozenset, ...]
    successful: frozenset
    colliding: frozenset
    collision_number: int


def _components(g: ConflictGraph, active: Iterable[int]) -> list[frozenset]:
    active = sorted(active)
    left = set(active)
    comps = []
    for start in active:
        if start not in left:
            continue
        comp, stack = {start}, [start]
        left.discard(start)
        while stack:
            u = stack.pop()
            for v in sorted(left):
                if g.adjacent(u, v):
                    left.discard(v)
                    comp.add(v)
                    stack.append(v)
        comps.append(frozenset(comp))
    return comps


def classify(g: ConflictGraph, x) -> Classification:
    """Split the active links of ``x`` into successful and colliding sets."""
    if isinstance(x, (int, np.integer)):
        if x < 0 or x >> g.num_links:
            raise DimensionError(f"mask {x} has bits beyond K={g.num_links}")
        active = mask_links(int(x))
    else:
        bits = list(x)
        if len(bits) != g.num_links:
            raise DimensionError(f"state has length {len(bits)}, expected {g.num_links}")
        active = [k for k, b in enumerate(bits) if b]
    comps = _components(g, active)
    succ = frozenset(k for c in comps if len(c) == 1 for k in c)
    coll = frozenset(k for c in comps if len(c) > 1 for k in c)
    return Classification(tuple(comps), succ, coll, sum(1 for c in comps if len(c) > 1))


# -- vectorized tables over all 2^K states -------------------------------

@njit(cache=True)
def _bit_index(b):
    k = 0
    while (b >> k) != 1:
        k += 1
    return k


@njit(cache=True)
def _classify_all(K, nbr):
    n = 1 << K
    succ = np.zeros(n, dtype=np.int64)
    h = np.zeros(n, dtype=np.int64)
    for x in range(n):
        rem = x
        s = 0
        hc = 0
        while rem:
            low = rem & -rem
            comp = low
            frontier = low
            while frontier:
                b = frontier & -frontier
                frontier ^= b
                new = nbr[_bit_index(b)] & rem & ~comp
                comp |= new
                frontier |= new
            rem &= ~comp
            if comp == low:
                s |= low
            else:
                hc += 1
        succ[x] = s
        h[x] = hc
    return succ, h


def check_enum_cap(K: int, cap: int | None = None):
    cap = DEFAULT_ENUM_CAP if cap is None else cap
    if K > cap:
        raise CapacityError("number of links K", K, cap)


_TABLE_CACHE: dict = {}


def state_tables(g: ConflictGraph, cap: int | None = None):
    """``(success_mask, collision_number)`` arrays indexed by on-off bitmask.

    Cached per graph; the arrays are read-only.
    """
    check_enum_cap(g.num_links, cap)
    key = (g.num_links, g.edges)
    hit = _TABLE_CACHE.get(key)
    if hit is None:
        succ, h = _classify_all(g.num_links, g.neighbor_masks)
        succ.setflags(write=False)
        h.setflags(write=False)
        if len(_TABLE_CACHE) > 32:
            _TABLE_CACHE.clear()
        hit = _TABLE_CACHE[key] = (succ, h)
    return hit


def bit_matrix(masks: np.ndarray, K: int) -> np.ndarray:
    """Boolean ``(len(masks), K)`` matrix with entry ``[i, k] = bit k of masks[i]``."""
    return ((masks[:, None] >> np.arange(K)) & 1).astype(bool)


def independent_sets(g: ConflictGraph, cap: int | None = None) -> list[tuple[int, ...]]:
    """Every independent set (empty and non-maximal included) as a 0/1 tuple."""
    return [to_bits(m, g.num_links) for m in independent_set_masks(g, cap)]


def independent_set_masks(g: ConflictGraph, cap: int | None = None) -> np.ndarray:
    check_enum_cap(g.num_links, cap)
    masks = np.arange(1 << g.num_links, dtype=np.int64)
    ok = np.ones(masks.shape, dtype=bool)
    for i, j in g.edges:
        ok &= ~(((masks >> i) & 1).astype(bool) & ((masks >> j) & 1).astype(bool))
    return masks[ok]


def maximal_independent_set_masks(g: ConflictGraph, cap: int | None = None) -> list[int]:
    sets = independent_set_masks(g, cap)
    nbr = g.neighbor_masks
    full = (1 << g.num_links) - 1
    out = []
    for m in sets.tolist():
        blocked = m
        for k in mask_links(m):
            blocked |= int(nbr[k])
        if blocked == full:
            out.append(m)
    return out


# -- preset topologies ---------------------------------------------------

def edgeless(K: int) -> ConflictGraph:
    return ConflictGraph(K)


def complete(K: int) -> ConflictGraph:
    return ConflictGraph(K, frozenset((i, j) for i in range(K) for j in range(i + 1, K)))


def path(K: int) -> ConflictGraph:
    return ConflictGraph(K, frozenset((i, i + 1) for i in range(K - 1)))


def line(K: int, hops: int) -> ConflictGraph:
    """Line of K links where each link conflicts with ``hops`` links on each side."""
    return ConflictGraph(K, frozenset((i, j) for i in range(K)
                                      for j in range(i + 1, min(K, i + hops + 1))))


def lattice(rows: int, cols: int) -> ConflictGraph:
    """2-D grid; each link conflicts with its 4 nearest neighbours."""
    e = set()
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols:
                e.add((k, k + 1))
            if r + 1 < rows:
                e.add((k, k + cols))
    return ConflictGraph(rows * cols, frozenset(e))


# Seven-link evaluation topology.  Edges 1-2, 1-4, 2-3, 2-4, 3-4, 5-6, 6-7
# are forced by requiring {1,3,5}, {2,5,7}, {4,6}, {2,6}, {1,3,6} to be
# maximal independent sets.  3-7 and 4-5 are the extra pairs whose analytical
# link-3 access delay tracks the reference delay-vs-load values.
SEVEN_LINK_EDGES = ((1, 2), (1, 4), (2, 3), (2, 4), (3, 4), (5, 6), (6, 7))
SEVEN_LINK_EXTRA = ((3, 7), (4, 5))
SEVEN_LINK_LAMBDA_BAR = (0.4, 0.4, 0.4, 0.2, 0.4, 0.6, 0.2)


def seven_link() -> ConflictGraph:
    return ConflictGraph.from_edges(7, SEVEN_LINK_EDGES + SEVEN_LINK_EXTRA, one_based=True)


PRESETS = {
    "seven_link": seven_link,
    "line6_2hop": lambda: line(6, 2),
    "line16_2hop": lambda: line(16, 2),
    "lattice5x5": lambda: lattice(5, 5),
    "path3": lambda: path(3),
    "complete2": lambda: complete(2),
    "single": lambda: edgeless(1),
}

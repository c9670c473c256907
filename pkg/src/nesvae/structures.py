"""Combinatorial structure families, exact MAP solvers and enumeration.

A structure is a 0/1 indicator vector over the canonical edge order of a
graph (or over category indices).  Each family provides a validity
predicate, an exact maximum-score solver, exhaustive enumeration for small
instances (the oracle the solvers are tested against) and exact counting.

Tie-breaking is deterministic everywhere: candidates are scanned in
canonical (lowest-index-first) order and replaced only on a strictly better
score, so equal-score instances always reproduce the same structure.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (
    DimensionError,
    EmptyInputError,
    EnumerationCapError,
    NoArborescenceError,
    NoSpanningTreeError,
    UnsupportedFamilyError,
)

SPANNING_TREE = "spanning_tree"
ARBORESCENCE = "arborescence"
PROJECTIVE_TREE = "projective_tree"
EDGE_SUBSET = "edge_subset"
CATEGORICAL = "categorical"

FAMILY_KINDS = (SPANNING_TREE, ARBORESCENCE, PROJECTIVE_TREE, EDGE_SUBSET,
                CATEGORICAL)

DEFAULT_ENUMERATION_CAP = 1_000_000


@dataclass(frozen=True)
class Graph:
    """Vertex count plus an ordered edge list.

    The position of an edge in `edges` is its canonical coordinate: score
    vectors and structure indicators are indexed the same way.  Directed
    graphs interpret (u, v) as the arc u -> v.
    """

    n: int
    edges: tuple[tuple[int, int], ...]
    directed: bool = False
    root: int | None = None

    def __post_init__(self):
        for u, v in self.edges:
            if u == v:
                raise DimensionError(f"self-loop ({u}, {v}) not allowed")
            if not (0 <= u < self.n and 0 <= v < self.n):
                raise DimensionError(f"edge ({u}, {v}) out of range for n={self.n}")

    @property
    def m(self) -> int:
        return len(self.edges)

    def edge_index(self) -> dict[tuple[int, int], int]:
        return {e: i for i, e in enumerate(self.edges)}


@dataclass(frozen=True)
class StructureFamily:
    """Which combinatorial family an indicator vector belongs to."""

    kind: str
    num_categories: int | None = None
    subset_size: int | None = None
    single_root: bool = False

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise UnsupportedFamilyError(f"unknown family kind {self.kind!r}")
        if self.kind == CATEGORICAL and (self.num_categories is None
                                         or self.num_categories < 1):
            raise DimensionError("categorical family needs num_categories >= 1")
        if self.kind == EDGE_SUBSET and (self.subset_size is None
                                         or self.subset_size < 0):
            raise DimensionError("edge_subset family needs subset_size >= 0")


def spanning_tree_family() -> StructureFamily:
    return StructureFamily(SPANNING_TREE)


def arborescence_family() -> StructureFamily:
    return StructureFamily(ARBORESCENCE)


def projective_family(single_root: bool = False) -> StructureFamily:
    return StructureFamily(PROJECTIVE_TREE, single_root=single_root)


def edge_subset_family(subset_size: int) -> StructureFamily:
    return StructureFamily(EDGE_SUBSET, subset_size=subset_size)


def categorical_family(k: int) -> StructureFamily:
    return StructureFamily(CATEGORICAL, num_categories=k)


def complete_graph(n: int) -> Graph:
    """Undirected complete graph; edges ordered (u, v) with u < v."""
    edges = tuple((u, v) for u in range(n) for v in range(u + 1, n))
    return Graph(n, edges, directed=False)


def complete_digraph(n: int, root: int = 0) -> Graph:
    """All arcs except into the root and self-loops, ordered by (u, v)."""
    edges = tuple((u, v) for u in range(n) for v in range(n)
                  if u != v and v != root)
    return Graph(n, edges, directed=True, root=root)


def parsing_graph(sentence_len: int) -> Graph:
    """Dependency graph for a sentence: vertex 0 is the artificial root.

    Arcs (head, modifier) run over all heads 0..n and modifiers 1..n,
    ordered by (head, modifier).
    """
    if sentence_len < 1:
        raise EmptyInputError("sentence must contain at least one word")
    n = sentence_len
    edges = tuple((h, m) for h in range(n + 1) for m in range(1, n + 1)
                  if h != m)
    return Graph(n + 1, edges, directed=True, root=0)


def indicator_length(family: StructureFamily, graph: Graph | None) -> int:
    if family.kind == CATEGORICAL:
        return family.num_categories
    if graph is None:
        raise DimensionError(f"family {family.kind} needs a graph")
    return graph.m


def structure_score(z: np.ndarray, scores: np.ndarray) -> float:
    return float(np.dot(np.asarray(z, dtype=np.float64), scores))


def _check_scores(graph: Graph, scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (graph.m,):
        raise DimensionError(
            f"expected {graph.m} scores, got shape {scores.shape}")
    return scores


# ---------------------------------------------------------------------------
# Union-find, shared by Kruskal and the validity predicate


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[ra] = rb
        return True


# ---------------------------------------------------------------------------
# MAP solvers


def kruskal_mst(graph: Graph, scores: np.ndarray) -> np.ndarray:
    """Maximum-score spanning tree of an undirected graph.

    Edges are taken greedily in (score descending, canonical index
    ascending) order.  Raises NoSpanningTreeError if the graph is
    disconnected.
    """
    if graph.directed:
        raise UnsupportedFamilyError("kruskal_mst needs an undirected graph")
    scores = _check_scores(graph, scores)
    order = sorted(range(graph.m), key=lambda i: (-scores[i], i))
    uf = _UnionFind(graph.n)
    z = np.zeros(graph.m, dtype=np.int8)
    taken = 0
    for i in order:
        u, v = graph.edges[i]
        if uf.union(u, v):
            z[i] = 1
            taken += 1
            if taken == graph.n - 1:
                return z
    raise NoSpanningTreeError(
        f"graph with {graph.n} vertices is disconnected")


def cle_arborescence(graph: Graph, scores: np.ndarray) -> np.ndarray:
    """Maximum-score spanning arborescence rooted at graph.root.

    Chu-Liu-Edmonds with recursive cycle contraction.  Raises
    NoArborescenceError when some vertex is unreachable from the root.
    """
    if not graph.directed or graph.root is None:
        raise UnsupportedFamilyError(
            "cle_arborescence needs a directed graph with a root")
    scores = _check_scores(graph, scores)
    root = graph.root

    reach = {root}
    frontier = [root]
    adj: dict[int, list[int]] = {v: [] for v in range(graph.n)}
    for u, v in graph.edges:
        adj[u].append(v)
    while frontier:
        u = frontier.pop()
        for v in adj[u]:
            if v not in reach:
                reach.add(v)
                frontier.append(v)
    if len(reach) != graph.n:
        missing = sorted(set(range(graph.n)) - reach)
        raise NoArborescenceError(
            f"vertices {missing} unreachable from root {root}")

    # arcs are (u, v, weight, payload); payload is the original edge index
    # at the bottom level and the enclosed lower-level arc after contraction.
    arcs = [(u, v, scores[i], i) for i, (u, v) in enumerate(graph.edges)
            if v != root]
    chosen = _cle_solve(set(range(graph.n)), arcs, root, graph.n)

    z = np.zeros(graph.m, dtype=np.int8)
    for arc in chosen:
        payload = arc[3]
        while not isinstance(payload, int):
            payload = payload[3]
        z[payload] = 1
    return z


def _cle_solve(nodes: set[int], arcs: list, root: int, next_id: int) -> list:
    """Return the chosen arc objects of one contraction level."""
    best_in: dict[int, tuple] = {}
    for arc in arcs:
        _, v, w, _ = arc
        if v == root or v not in nodes:
            continue
        cur = best_in.get(v)
        if cur is None or w > cur[2]:
            best_in[v] = arc
    for v in nodes:
        if v != root and v not in best_in:
            raise NoArborescenceError(f"no incoming arc for vertex {v}")

    cycle = _find_cycle(best_in, root)
    if cycle is None:
        return list(best_in.values())

    cid = next_id
    new_nodes = (nodes - cycle) | {cid}
    new_arcs = []
    for arc in arcs:
        u, v, w, _ = arc
        if u in cycle and v in cycle:
            continue
        if v in cycle:
            new_arcs.append((u, cid, w - best_in[v][2], arc))
        elif u in cycle:
            new_arcs.append((cid, v, w, arc))
        else:
            new_arcs.append((u, v, w, arc))

    chosen_above = _cle_solve(new_nodes, new_arcs, root, next_id + 1)
    result = []
    entering = None
    for arc in chosen_above:
        inner = arc[3]
        if arc[1] == cid:
            entering = inner
        result.append(inner)
    # keep the cycle's own best arcs except the one displaced by the arc
    # chosen to enter the contracted node
    displaced = entering[1]
    for v in cycle:
        if v != displaced:
            result.append(best_in[v])
    return result


def _find_cycle(best_in: dict[int, tuple], root: int) -> set[int] | None:
    color: dict[int, int] = {}
    for start in best_in:
        if color.get(start):
            continue
        path = []
        v = start
        while v != root and color.get(v, 0) == 0:
            color[v] = 1
            path.append(v)
            v = best_in[v][0]
        if v != root and color.get(v) == 1:
            return set(path[path.index(v):])
        for u in path:
            color[u] = 2
    return None


def eisner_parse(sentence_len: int, scores: np.ndarray,
                 single_root: bool = False) -> np.ndarray:
    """Maximum-score projective dependency tree.

    Scores index the canonical arcs of parsing_graph(sentence_len).  The
    artificial root may head several words unless single_root is set.
    Raises EmptyInputError for an empty sentence.
    """
    if sentence_len < 1:
        raise EmptyInputError("cannot parse an empty sentence")
    graph = parsing_graph(sentence_len)
    scores = _check_scores(graph, scores)
    smat = np.full((sentence_len + 1, sentence_len + 1), -np.inf)
    for i, (h, m) in enumerate(graph.edges):
        smat[h, m] = scores[i]

    if not single_root:
        arcs, _ = _eisner_decode(sentence_len, smat)
    else:
        best = None
        for c in range(1, sentence_len + 1):
            constrained = smat.copy()
            constrained[0, :] = -np.inf
            constrained[0, c] = smat[0, c]
            cand = _eisner_decode(sentence_len, constrained)
            if best is None or cand[1] > best[1]:
                best = cand
        arcs = best[0]

    index = graph.edge_index()
    z = np.zeros(graph.m, dtype=np.int8)
    for arc in arcs:
        z[index[arc]] = 1
    return z


def _eisner_decode(n: int, smat: np.ndarray):
    """First-order projective chart; returns (arcs, total score)."""
    NEG = -np.inf
    # [i][j]: complete/incomplete spans; direction R means i heads, L means j
    comp_r = np.full((n + 1, n + 1), NEG)
    comp_l = np.full((n + 1, n + 1), NEG)
    inc_r = np.full((n + 1, n + 1), NEG)
    inc_l = np.full((n + 1, n + 1), NEG)
    bp_cr = np.zeros((n + 1, n + 1), dtype=np.int64)
    bp_cl = np.zeros((n + 1, n + 1), dtype=np.int64)
    bp_ir = np.zeros((n + 1, n + 1), dtype=np.int64)
    bp_il = np.zeros((n + 1, n + 1), dtype=np.int64)
    for i in range(n + 1):
        comp_r[i, i] = 0.0
        comp_l[i, i] = 0.0

    for span in range(1, n + 1):
        for i in range(0, n + 1 - span):
            j = i + span
            # attach arcs across the split: j -> i (left) or i -> j (right)
            best_l, best_r = NEG, NEG
            arg_l, arg_r = i, i
            for k in range(i, j):
                base = comp_r[i, k] + comp_l[k + 1, j]
                if i > 0 and base + smat[j, i] > best_l:
                    best_l = base + smat[j, i]
                    arg_l = k
                if base + smat[i, j] > best_r:
                    best_r = base + smat[i, j]
                    arg_r = k
            inc_l[i, j], bp_il[i, j] = best_l, arg_l
            inc_r[i, j], bp_ir[i, j] = best_r, arg_r

            best_l, best_r = NEG, NEG
            arg_l, arg_r = i, i + 1
            for k in range(i, j):
                cand = comp_l[i, k] + inc_l[k, j]
                if cand > best_l:
                    best_l = cand
                    arg_l = k
            for k in range(i + 1, j + 1):
                cand = inc_r[i, k] + comp_r[k, j]
                if cand > best_r:
                    best_r = cand
                    arg_r = k
            comp_l[i, j], bp_cl[i, j] = best_l, arg_l
            comp_r[i, j], bp_cr[i, j] = best_r, arg_r

    arcs: list[tuple[int, int]] = []

    def recover(i, j, right, complete):
        if i == j:
            return
        if complete:
            if right:
                k = bp_cr[i, j]
                arcs_stack.append((i, k, True, False))
                arcs_stack.append((k, j, True, True))
            else:
                k = bp_cl[i, j]
                arcs_stack.append((i, k, False, True))
                arcs_stack.append((k, j, False, False))
        else:
            if right:
                arcs.append((i, j))
            else:
                arcs.append((j, i))
            k = bp_ir[i, j] if right else bp_il[i, j]
            arcs_stack.append((i, k, True, True))
            arcs_stack.append((k + 1, j, False, True))

    arcs_stack = [(0, n, True, True)]
    while arcs_stack:
        recover(*arcs_stack.pop())
    return sorted(arcs), float(comp_r[0, n])


def map_solve(family: StructureFamily, graph: Graph | None,
              scores: np.ndarray) -> np.ndarray:
    """Dispatch to the family's exact maximum-score solver."""
    if family.kind == SPANNING_TREE:
        return kruskal_mst(graph, scores)
    if family.kind == ARBORESCENCE:
        return cle_arborescence(graph, scores)
    if family.kind == PROJECTIVE_TREE:
        return eisner_parse(graph.n - 1, scores, family.single_root)
    if family.kind == EDGE_SUBSET:
        scores = _check_scores(graph, scores)
        order = sorted(range(graph.m), key=lambda i: (-scores[i], i))
        z = np.zeros(graph.m, dtype=np.int8)
        z[order[:family.subset_size]] = 1
        return z
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (family.num_categories,):
        raise DimensionError(
            f"expected {family.num_categories} scores, got {scores.shape}")
    z = np.zeros(family.num_categories, dtype=np.int8)
    z[int(np.argmax(scores))] = 1
    return z


# ---------------------------------------------------------------------------
# Validity


def validate_structure(family: StructureFamily, graph: Graph | None,
                       z: np.ndarray) -> bool:
    """True iff z satisfies the family's validity predicate."""
    z = np.asarray(z)
    if z.shape != (indicator_length(family, graph),):
        return False
    if not np.isin(z, (0, 1)).all():
        return False
    selected = [i for i in range(len(z)) if z[i] == 1]

    if family.kind == CATEGORICAL:
        return len(selected) == 1

    if family.kind == EDGE_SUBSET:
        return len(selected) == family.subset_size

    if family.kind == SPANNING_TREE:
        if len(selected) != graph.n - 1:
            return False
        uf = _UnionFind(graph.n)
        for i in selected:
            u, v = graph.edges[i]
            if not uf.union(u, v):
                return False
        return True

    if family.kind == ARBORESCENCE:
        return _valid_rooted_tree(graph, selected) is not None

    # projective dependency tree
    parents = _valid_rooted_tree(graph, selected)
    if parents is None:
        return False
    if family.single_root:
        root_children = sum(1 for i in selected if graph.edges[i][0] == 0)
        if root_children != 1:
            return False
    return _is_projective(graph.n, parents)


def _valid_rooted_tree(graph: Graph, selected: list[int]) -> list | None:
    """Parent array if the arcs form an arborescence at graph.root."""
    root = graph.root
    if len(selected) != graph.n - 1:
        return None
    parent = [-1] * graph.n
    for i in selected:
        u, v = graph.edges[i]
        if v == root or parent[v] != -1:
            return None
        parent[v] = u
    children: dict[int, list[int]] = {v: [] for v in range(graph.n)}
    for v in range(graph.n):
        if v != root:
            if parent[v] == -1:
                return None
            children[parent[v]].append(v)
    seen = 0
    stack = [root]
    visited = [False] * graph.n
    visited[root] = True
    while stack:
        u = stack.pop()
        seen += 1
        for v in children[u]:
            if not visited[v]:
                visited[v] = True
                stack.append(v)
    return parent if seen == graph.n else None


def _is_projective(n_vertices: int, parent: list[int]) -> bool:
    """Every subtree must cover a contiguous interval of positions."""
    children: dict[int, list[int]] = {v: [] for v in range(n_vertices)}
    for v, p in enumerate(parent):
        if p != -1:
            children[p].append(v)

    lo = list(range(n_vertices))
    hi = list(range(n_vertices))
    order = []
    stack = [(0, False)]
    while stack:
        v, done = stack.pop()
        if done:
            order.append(v)
            continue
        stack.append((v, True))
        for c in children[v]:
            stack.append((c, False))
    for v in order:
        size = 1
        for c in children[v]:
            lo[v] = min(lo[v], lo[c])
            hi[v] = max(hi[v], hi[c])
            size += hi[c] - lo[c] + 1
        if hi[v] - lo[v] + 1 != size:
            return False
    return True


# ---------------------------------------------------------------------------
# Enumeration and counting


def count_structures(family: StructureFamily, graph: Graph | None) -> int:
    """Exact number of valid structures, as a Python integer."""
    if family.kind == CATEGORICAL:
        return family.num_categories
    if family.kind == EDGE_SUBSET:
        return math.comb(graph.m, family.subset_size)
    if family.kind == SPANNING_TREE:
        if graph.m == graph.n * (graph.n - 1) // 2:
            return max(graph.n ** (graph.n - 2), 1)
        return _matrix_tree_count(graph)
    if family.kind == ARBORESCENCE:
        return _directed_matrix_tree_count(graph)
    n_words = graph.n - 1
    if family.single_root:
        counts = _projective_forest_counts(n_words)
        return sum(counts[i] * counts[n_words - 1 - i]
                   for i in range(n_words))
    return _projective_forest_counts(n_words)[n_words]


def _matrix_tree_count(graph: Graph) -> int:
    if graph.n == 1:
        return 1
    lap = np.zeros((graph.n, graph.n))
    for u, v in graph.edges:
        lap[u, u] += 1
        lap[v, v] += 1
        lap[u, v] -= 1
        lap[v, u] -= 1
    det = np.linalg.det(lap[1:, 1:])
    return int(round(det))


def _directed_matrix_tree_count(graph: Graph) -> int:
    if graph.n == 1:
        return 1
    root = graph.root
    lap = np.zeros((graph.n, graph.n))
    for u, v in graph.edges:
        lap[v, v] += 1
        lap[u, v] -= 1
    keep = [v for v in range(graph.n) if v != root]
    det = np.linalg.det(lap[np.ix_(keep, keep)])
    return int(round(det))


@lru_cache(maxsize=None)
def _projective_forest_counts(n: int) -> tuple[int, ...]:
    """counts[L] = projective forests tiling an interval of L words."""
    counts = [1]
    blocks = [0]
    for length in range(1, n + 1):
        blocks.append(sum(counts[i] * counts[length - 1 - i]
                          for i in range(length)))
        counts.append(sum(blocks[s] * counts[length - s]
                          for s in range(1, length + 1)))
    return tuple(counts)


def enumerate_structures(family: StructureFamily, graph: Graph | None,
                         cap: int = DEFAULT_ENUMERATION_CAP) -> list[np.ndarray]:
    """Exhaustive, duplicate-free list of all valid indicator vectors.

    Raises EnumerationCapError when the family holds more than `cap`
    structures; large instances must use the MAP/sampling paths instead.
    """
    total = count_structures(family, graph)
    if total > cap:
        raise EnumerationCapError(
            f"family has {total} structures, cap is {cap}")

    if family.kind == CATEGORICAL:
        return [row for row in np.eye(family.num_categories, dtype=np.int8)]

    if family.kind == EDGE_SUBSET:
        out = []
        for combo in itertools.combinations(range(graph.m),
                                            family.subset_size):
            z = np.zeros(graph.m, dtype=np.int8)
            z[list(combo)] = 1
            out.append(z)
        return out

    if family.kind == SPANNING_TREE:
        out = []
        for combo in itertools.combinations(range(graph.m), graph.n - 1):
            uf = _UnionFind(graph.n)
            if all(uf.union(*graph.edges[i]) for i in combo):
                z = np.zeros(graph.m, dtype=np.int8)
                z[list(combo)] = 1
                out.append(z)
        return out

    if family.kind == ARBORESCENCE:
        in_arcs: list[list[int]] = [[] for _ in range(graph.n)]
        for i, (_, v) in enumerate(graph.edges):
            if v != graph.root:
                in_arcs[v].append(i)
        non_root = [v for v in range(graph.n) if v != graph.root]
        out = []
        for choice in itertools.product(*(in_arcs[v] for v in non_root)):
            z = np.zeros(graph.m, dtype=np.int8)
            z[list(choice)] = 1
            if _valid_rooted_tree(graph, list(choice)) is not None:
                out.append(z)
        return out

    return _enumerate_projective(graph, family.single_root)


def _enumerate_projective(graph: Graph, single_root: bool) -> list[np.ndarray]:
    n = graph.n - 1
    index = graph.edge_index()

    def subtrees(p: int, q: int, h: int) -> list[tuple]:
        out = []
        for left in forests(p, h - 1):
            for right in forests(h + 1, q):
                arcs = tuple((h, bh) for bh, _ in left + right)
                inner = tuple(a for _, ba in left + right for a in ba)
                out.append(arcs + inner)
        return out

    @lru_cache(maxsize=None)
    def forests(p: int, q: int) -> tuple:
        """All ((block_head, block_arcs), ...) tilings of positions p..q."""
        if p > q:
            return ((),)
        out = []
        for split in range(p, q + 1):
            for h in range(p, split + 1):
                for sub in subtrees(p, split, h):
                    for rest in forests(split + 1, q):
                        out.append(((h, sub),) + rest)
        return tuple(out)

    structures = []
    for blocks in forests(1, n):
        if single_root and len(blocks) != 1:
            continue
        arcs = [(0, bh) for bh, _ in blocks]
        for _, block_arcs in blocks:
            arcs.extend(block_arcs)
        z = np.zeros(graph.m, dtype=np.int8)
        for arc in arcs:
            z[index[arc]] = 1
        structures.append(z)
    forests.cache_clear()
    return structures


# ---------------------------------------------------------------------------
# Line-oriented serialization


def graph_to_text(graph: Graph, kind: str) -> str:
    root = -1 if graph.root is None else graph.root
    lines = [f"{graph.n} {graph.m} {kind} {root}"]
    lines.extend(f"{u} {v}" for u, v in graph.edges)
    return "\n".join(lines) + "\n"


def graph_from_text(text: str) -> tuple[Graph, str]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DimensionError("empty graph text")
    head = lines[0].split()
    if len(head) != 4:
        raise DimensionError(f"bad graph header {lines[0]!r}")
    n, m, kind, root = int(head[0]), int(head[1]), head[2], int(head[3])
    if len(lines) - 1 != m:
        raise DimensionError(f"expected {m} edge lines, got {len(lines) - 1}")
    edges = tuple(tuple(int(t) for t in ln.split()) for ln in lines[1:])
    directed = kind in (ARBORESCENCE, PROJECTIVE_TREE)
    return Graph(n, edges, directed=directed,
                 root=None if root < 0 else root), kind


def scores_to_text(scores: np.ndarray) -> str:
    return "\n".join(repr(float(s)) for s in scores) + "\n"


def scores_from_text(text: str) -> np.ndarray:
    return np.array([float(ln) for ln in text.splitlines() if ln.strip()],
                    dtype=np.float64)

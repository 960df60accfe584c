"""Iteration-nest fusion, reduction/broadcast handling and splits."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .errors import LoomfuseError
from .inference import RAP, DataflowDAG, find_cycle
from .nests import GroupGraph, InestDAG, Leaf, Loop, Nest, calls_of, is_empty


class _Unfusable:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "UNFUSABLE"

    def __bool__(self) -> bool:
        return False


UNFUSABLE = _Unfusable()


def classify_rap(rap: RAP, dag: DataflowDAG | None = None) -> str:
    """'reduction' drops an input dimension, 'broadcast' widens a lower-rank input."""
    if not rap.in_terms or not rap.out_terms:
        return "pointwise"
    out_dims = {d for t in rap.out_terms for d in t.dims}
    if any(d not in out_dims for t in rap.in_terms for d in t.dims):
        return "reduction"
    if any(set(t.dims) < out_dims for t in rap.in_terms):
        return "broadcast"
    return "pointwise"


def _rank(nest: Nest, order: tuple[str, ...]) -> int:
    if isinstance(nest, Leaf):
        return -1
    return len(order) - 1 - order.index(nest.var)


def _merge_leaves(a: tuple[int, ...], b: tuple[int, ...], gg: GroupGraph) -> tuple[int, ...]:
    items = list(dict.fromkeys(a + b))
    pos = {g: k for k, g in enumerate(items)}
    indeg = {g: 0 for g in items}
    succ = {g: [h for h in items if h in gg.reach[g]] for g in items}
    for g in items:
        for h in succ[g]:
            indeg[h] += 1
    heap = [(pos[g], g) for g in items if indeg[g] == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        _, g = heapq.heappop(heap)
        out.append(g)
        for h in succ[g]:
            indeg[h] -= 1
            if indeg[h] == 0:
                heapq.heappush(heap, (pos[h], h))
    return tuple(out)


def _fuse(A: Nest, B: Nest, gg: GroupGraph):
    if is_empty(A):
        return B
    if is_empty(B):
        return A
    order = gg.rs.loop_order
    diff = _rank(A, order) - _rank(B, order)
    if diff == 0:
        if isinstance(A, Leaf):
            return Leaf(_merge_leaves(A.calls, B.calls, gg))
        if A.var != B.var or A.range != B.range:
            return UNFUSABLE
        pa, sa, ea = (calls_of(p) for p in A.phases())
        pb, sb, eb = (calls_of(p) for p in B.phases())
        if not (gg.le(pa, sb) and gg.le(pb, sa) and gg.le(sa, eb) and gg.le(sb, ea)):
            return UNFUSABLE
        parts = [_fuse(x, y, gg) for x, y in zip(A.phases(), B.phases())]
        if any(p is UNFUSABLE for p in parts):
            return UNFUSABLE
        return Loop(A.var, A.range, *parts)
    if diff > 0:
        A, B = B, A
    # A is the lower-ranked nest; it lands in B's prologue or epilogue.
    all_a = calls_of(A)
    pb, sb, eb = (calls_of(p) for p in B.phases())
    if gg.le(all_a, sb + eb):
        pro = _fuse(A, B.prologue, gg)
        if pro is not UNFUSABLE:
            return Loop(B.var, B.range, pro, B.steady, B.epilogue)
    if gg.le(pb + sb, all_a):
        epi = _fuse(B.epilogue, A, gg)
        if epi is not UNFUSABLE:
            return Loop(B.var, B.range, B.prologue, B.steady, epi)
    return UNFUSABLE


def _positions(nest: Nest, prefix=()) -> dict[int, tuple]:
    """Map each group to its path: ((loop id, var, phase), ...) + (leaf index,)."""
    out = {}
    if isinstance(nest, Leaf):
        for k, g in enumerate(nest.calls):
            out[g] = prefix + (k,)
        return out
    for ph, child in enumerate(nest.phases()):
        out.update(_positions(child, prefix + ((id(nest), nest.var, ph),)))
    return out


def order_violations(nest: Nest, gg: GroupGraph) -> list[tuple[int, int, str]]:
    """Dataflow edges whose execution order the nest does not respect."""
    pos = _positions(nest)
    bad = []
    for (gp, gc), terms in gg.edge_terms.items():
        if gp not in pos or gc not in pos:
            continue
        a, b = pos[gp], pos[gc]
        ok = None
        for x, y in zip(a, b):
            if isinstance(x, int) or isinstance(y, int):
                ok = isinstance(x, int) and isinstance(y, int) and x < y
                break
            if x[2] != y[2]:
                ok = x[2] < y[2]
                break
            if x[2] == 1 and any(x[1] not in t.dims for t in terms):
                ok = False  # reduced value consumed inside the loop that reduces it
                break
        if not ok:
            bad.append((gp, gc, "order"))
    return bad


def fuse_inest(A: Nest, B: Nest, gg: GroupGraph):
    """Fuse two iteration nests; returns the fused nest or UNFUSABLE."""
    out = _fuse(A, B, gg)
    if out is UNFUSABLE or order_violations(out, gg):
        return UNFUSABLE
    return out


@dataclass(frozen=True)
class SplitCut:
    edges: frozenset[tuple[int, int]]
    upstream: frozenset[int]
    downstream: frozenset[int]
    reason: str = ""
    crossing: tuple[tuple[int, int], ...] = ()  # group-level producer/consumer pairs cut


def _crossing(g: InestDAG, gg: GroupGraph, cut) -> tuple[tuple[int, int], ...]:
    out = set()
    for a, b in cut:
        src, dst = set(calls_of(g.vertices[a])), set(calls_of(g.vertices[b]))
        out |= {e for e in gg.edge_terms if e[0] in src and e[1] in dst}
    return tuple(sorted(out))


@dataclass
class FusionResult:
    dag: InestDAG
    splits: list[SplitCut] = field(default_factory=list)
    steps: int = 0


def _reach(succ: dict[int, set[int]], start: int) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        v = stack.pop()
        for w in succ[v]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return seen


def _merge(g: InestDAG, u: int, v: int, nest: Nest) -> InestDAG:
    vertices = {k: n for k, n in g.vertices.items() if k != u}
    vertices[v] = nest
    edges: dict[tuple[int, int], frozenset] = {}
    severed = set()
    for (a, b), terms in g.edges.items():
        a2, b2 = (v if a == u else a), (v if b == u else b)
        if a2 == b2:
            continue
        edges[a2, b2] = edges.get((a2, b2), frozenset()) | terms
        if (a, b) in g.severed:
            severed.add((a2, b2))
    return InestDAG(vertices, edges, frozenset(severed))


def _creates_cycle(g: InestDAG, u: int, v: int) -> bool:
    succ = g.succ()
    return any(v in _reach(succ, w) for w in succ[u] if w != v)


def fuse_inest_dag(g: InestDAG, gg: GroupGraph, check: bool = False) -> FusionResult:
    order = g.topo_order()
    index = {v: k for k, v in enumerate(order)}
    splits: list[SplitCut] = []
    steps = 0
    for vert in order:
        if vert not in g.vertices:
            continue
        progressed = True
        while progressed:
            progressed = False
            incoming = sorted(
                ((u, terms) for (u, w), terms in g.edges.items() if w == vert and (u, w) not in g.severed),
                key=lambda e: (index[e[0]], sorted(map(str, e[1]))))
            for u, _ in incoming:
                fused = UNFUSABLE
                if not _creates_cycle(g, u, vert):
                    fused = fuse_inest(g.vertices[u], g.vertices[vert], gg)
                if fused is UNFUSABLE:
                    down = _reach(g.succ(), vert)
                    cut = frozenset(e for e in g.edges if e[0] not in down and e[1] in down)
                    g = InestDAG(g.vertices, g.edges, g.severed | cut)
                    splits.append(SplitCut(cut, frozenset(set(g.vertices) - down), frozenset(down),
                                           f"vertex {u} cannot fuse into {vert}",
                                           _crossing(g, gg, cut)))
                else:
                    g = _merge(g, u, vert, fused)
                    steps += 1
                    if check and find_cycle(g.succ()):
                        raise LoomfuseError("fusion step introduced a cycle")
                    progressed = True
                    break
    # unrelated nests (no path either way) may share a loop as well
    changed = True
    while changed:
        changed = False
        succ = g.succ()
        reach = {v: _reach(succ, v) for v in g.vertices}
        topo = g.topo_order()
        for a_i, a in enumerate(topo):
            for b in topo[a_i + 1:]:
                if b in reach[a] or a in reach[b]:
                    continue
                fused = fuse_inest(g.vertices[a], g.vertices[b], gg)
                if fused is not UNFUSABLE:
                    g = _merge(g, a, b, fused)
                    steps += 1
                    changed = True
                    break
            if changed:
                break
    if check and find_cycle(g.succ()):
        raise LoomfuseError("fusion introduced a cycle")
    return FusionResult(g, splits, steps)


def detect_concave_split(g: InestDAG, gg: GroupGraph) -> list[SplitCut]:
    """One cut per reduction whose result flows back up into a broadcast."""
    dag = gg.dag
    owner_vertex = {grp: v for v, nest in g.vertices.items() for grp in calls_of(nest)}
    succ = g.succ()
    cuts = []
    for grp in gg.groups:
        rap = dag.rap(grp.members[0])
        if classify_rap(rap) != "reduction":
            continue
        reduced_rank = max(t.rank for t in rap.in_terms)
        witnesses = [h for h in gg.reach[grp.id]
                     if classify_rap(dag.rap(gg.group(h).members[0])) == "broadcast"
                     and max(t.rank for t in dag.rap(gg.group(h).members[0]).out_terms) >= reduced_rank]
        if not witnesses:
            continue
        down: set[int] = set()
        for h in witnesses:
            down |= _reach(succ, owner_vertex[h])
        if owner_vertex[grp.id] in down:
            continue
        edges = frozenset(e for e in g.edges if e[0] not in down and e[1] in down)
        cuts.append(SplitCut(edges, frozenset(set(g.vertices) - down), frozenset(down),
                             f"{rap.name} -> " + ", ".join(sorted(gg.group(h).name for h in witnesses)),
                             _crossing(g, gg, edges)))
    return cuts

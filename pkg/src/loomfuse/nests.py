"""Callsite grouping, iteration nests and the initial iteration-nest DAG."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Union

from .errors import CycleError, LoomfuseError
from .inference import ConcreteTerm, DataflowDAG, find_cycle, reachable_from, space_dims, topo_sort
from .rulespec import RuleSet


@dataclass(frozen=True)
class CallsiteGroup:
    id: int
    kind: str
    name: str
    signature: tuple
    members: tuple[int, ...]
    dims: tuple[str, ...]
    disps: tuple[tuple[int, ...], ...]  # one displacement vector per member, aligned with dims

    def span(self, dim: str) -> tuple[int, int]:
        """(min, max) displacement along ``dim``."""
        k = self.dims.index(dim)
        values = [d[k] for d in self.disps]
        return min(values), max(values)


def _signature(rap) -> tuple:
    def rel(term: ConcreteTerm) -> tuple:
        return (term.identifier, term.tags, term.dims,
                tuple(o - rap.displacement(d) for d, o in zip(term.dims, term.offsets)))

    return (rap.kind, rap.name, rap.axiom, rap.goal,
            tuple(zip(rap.in_params, map(rel, rap.in_terms))),
            tuple(zip(rap.out_params, map(rel, rap.out_terms))))


def _make_group(gid: int, dag: DataflowDAG, members: list[int]) -> CallsiteGroup:
    rs = dag.rs
    first = dag.rap(members[0])
    dims = space_dims(rs, [t for m in members for t in dag.rap(m).terms])
    disps = tuple(tuple(dag.rap(m).displacement(d) for d in dims) for m in members)
    return CallsiteGroup(gid, first.kind, first.name, _signature(first), tuple(members), dims, disps)


def _quotient(dag: DataflowDAG, groups: list[list[int]]) -> dict[int, set[int]]:
    owner = {m: g for g, ms in enumerate(groups) for m in ms}
    succ: dict[int, set[int]] = {g: set() for g in range(len(groups))}
    for p, c, _ in dag.edges:
        if owner[p] != owner[c]:
            succ[owner[p]].add(owner[c])
    return succ


def group_callsites(dag: DataflowDAG) -> list[CallsiteGroup]:
    """Merge callsites that differ only by spatial displacement."""
    buckets: dict[tuple, list[int]] = {}
    for rid in sorted(r.id for r in dag.raps):
        buckets.setdefault(_signature(dag.rap(rid)), []).append(rid)
    groups = sorted(buckets.values(), key=lambda ms: ms[0])
    while True:
        succ = _quotient(dag, groups)
        cycle = find_cycle(succ)
        if not cycle:
            break
        # degrade: split the first merged group on the cycle into singletons
        victim = next((g for g in cycle if len(groups[g]) > 1), None)
        if victim is None:
            raise CycleError("dataflow graph is cyclic", cycle)
        ms = groups.pop(victim)
        groups.extend([m] for m in ms)
        groups.sort(key=lambda g: g[0])
    return [_make_group(i, dag, ms) for i, ms in enumerate(groups)]


@dataclass
class GroupGraph:
    """Group-level quotient of the dataflow DAG with cached reachability."""

    dag: DataflowDAG
    groups: list[CallsiteGroup]
    owner: dict[int, int] = field(default_factory=dict)
    succ: dict[int, set[int]] = field(default_factory=dict)
    edge_terms: dict[tuple[int, int], set[ConcreteTerm]] = field(default_factory=dict)

    def __post_init__(self):
        self.owner = {m: g.id for g in self.groups for m in g.members}
        self.succ = {g.id: set() for g in self.groups}
        self.edge_terms = defaultdict(set)
        self.internal: list[tuple[int, int, ConcreteTerm]] = []
        for p, c, t in self.dag.edges:
            gp, gc = self.owner[p], self.owner[c]
            if gp != gc:
                self.succ[gp].add(gc)
                self.edge_terms[gp, gc].add(t)
            else:
                self.internal.append((p, c, t))
        self.order = topo_sort(self.succ)
        self.position = {g: k for k, g in enumerate(self.order)}
        self.reach = {g: frozenset(reachable_from(self.succ, [g])) for g in self.succ}

    @property
    def rs(self) -> RuleSet:
        return self.dag.rs

    def group(self, gid: int) -> CallsiteGroup:
        return self.groups[gid]

    def le(self, R, S) -> bool:
        """dataflow_le on group sets: no member of S reaches a member of R."""
        R = set(R)
        return not any(self.reach[s] & R for s in S)


# -- iteration nests ---------------------------------------------------------

@dataclass(frozen=True)
class Leaf:
    calls: tuple[int, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.calls)


@dataclass(frozen=True)
class Loop:
    var: str
    range: tuple[int, int, int]
    prologue: "Nest"
    steady: "Nest"
    epilogue: "Nest"

    def phases(self) -> tuple["Nest", "Nest", "Nest"]:
        return (self.prologue, self.steady, self.epilogue)


Nest = Union[Leaf, Loop]
EMPTY = Leaf()


def is_empty(nest: Nest) -> bool:
    return isinstance(nest, Leaf) and not nest.calls


def calls_of(nest: Nest) -> list[int]:
    if isinstance(nest, Leaf):
        return list(nest.calls)
    return [c for ph in nest.phases() for c in calls_of(ph)]


def is_perfect(nest: Nest) -> bool:
    if isinstance(nest, Leaf):
        return True
    return is_empty(nest.prologue) and is_empty(nest.epilogue) and is_perfect(nest.steady)


def depth(nest: Nest) -> int:
    if isinstance(nest, Leaf):
        return 0
    return 1 + max(depth(ph) for ph in nest.phases())


def loop_vars(nest: Nest) -> list[str]:
    out = []
    while isinstance(nest, Loop):
        out.append(nest.var)
        nest = nest.steady
    return out


def perfect_nest(dims, ranges: dict, calls: tuple[int, ...]) -> Nest:
    nest: Nest = Leaf(tuple(calls))
    for d in reversed(list(dims)):
        nest = Loop(d, tuple(ranges[d]), EMPTY, nest, EMPTY)
    return nest


def permute_perfect(nest: Nest, order) -> Nest:
    if not is_perfect(nest):
        raise LoomfuseError("only perfect iteration nests can be permuted")
    ranges = {}
    cur = nest
    while isinstance(cur, Loop):
        ranges[cur.var] = cur.range
        cur = cur.steady
    missing = set(ranges) - set(order)
    if missing:
        raise LoomfuseError(f"loop order lacks {sorted(missing)}")
    return perfect_nest([v for v in order if v in ranges], ranges, cur.calls)


def irank(nest: Nest, rs_or_order) -> int:
    """Rank of the outermost loop identifier (innermost variable has rank 0)."""
    if isinstance(nest, Leaf):
        raise LoomfuseError("irank is undefined for a leaf body")
    order = rs_or_order.loop_order if isinstance(rs_or_order, RuleSet) else tuple(rs_or_order)
    return len(order) - 1 - order.index(nest.var)


def trip_points(nest: Nest) -> list[tuple[tuple[str, int], ...]]:
    """Enumerate (var, value) tuples visited by the steady chain of a perfect nest."""
    if isinstance(nest, Leaf):
        return [()]
    lo, hi, st = nest.range
    inner = trip_points(nest.steady)
    return [((nest.var, v),) + rest for v in range(lo, hi, st) for rest in inner]


@dataclass
class InestDAG:
    vertices: dict[int, Nest]
    edges: dict[tuple[int, int], frozenset[ConcreteTerm]]
    severed: frozenset[tuple[int, int]] = frozenset()

    def succ(self) -> dict[int, set[int]]:
        out: dict[int, set[int]] = {v: set() for v in self.vertices}
        for u, v in self.edges:
            out[u].add(v)
        return out

    def topo_order(self) -> list[int]:
        return topo_sort(self.succ())

    def leaf_groups(self) -> list[int]:
        return [g for v in self.vertices.values() for g in calls_of(v)]


def build_inest_dag(dag: DataflowDAG, groups: list[CallsiteGroup], rs: RuleSet | None = None) -> InestDAG:
    rs = rs or dag.rs
    gg = groups if isinstance(groups, GroupGraph) else GroupGraph(dag, groups)
    vertices = {g.id: perfect_nest(g.dims, rs.ranges, (g.id,)) for g in gg.groups}
    edges = {k: frozenset(v) for k, v in gg.edge_terms.items()}
    out = InestDAG(vertices, edges)
    find = find_cycle(out.succ())
    if find:
        raise CycleError("iteration-nest DAG is cyclic (grouping precondition violated)", find)
    return out

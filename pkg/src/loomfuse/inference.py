"""Backward-chaining inference from goals to axioms and the dataflow DAG."""
from __future__ import annotations

import difflib
import heapq
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

from .errors import CycleError, InferenceError
from .rulespec import KernelRule, RuleSet, TermPattern

DEFAULT_DEPTH_CAP = 64


@dataclass(frozen=True)
class ConcreteTerm:
    identifier: str
    tags: tuple[str, ...]
    dims: tuple[str, ...]
    offsets: tuple[int, ...]

    @property
    def var(self) -> tuple[str, tuple[str, ...]]:
        return (self.identifier, self.tags)

    @property
    def rank(self) -> int:
        return len(self.dims)

    def offset(self, dim: str) -> int:
        return self.offsets[self.dims.index(dim)]

    def __str__(self) -> str:
        subs = []
        for d, o in zip(self.dims, self.offsets):
            subs.append(f"[{d}{'+' if o > 0 else ''}{o if o else ''}]")
        s = self.identifier + "".join(subs)
        for tag in reversed(self.tags):
            s = f"{tag}({s})"
        return s


def var_name(var: tuple[str, tuple[str, ...]]) -> str:
    ident, tags = var
    return "_".join((*tags, ident))


@dataclass(eq=False)
class RAP:
    id: int
    kind: str  # "kernel" | "load" | "store"
    name: str
    binding: tuple[tuple[str, object], ...]
    in_terms: tuple[ConcreteTerm, ...]
    out_terms: tuple[ConcreteTerm, ...]
    in_params: tuple[str, ...] = ()
    out_params: tuple[str, ...] = ()
    kernel: KernelRule | None = field(default=None, repr=False)
    axiom: int | None = None
    goal: int | None = None

    def __hash__(self) -> int:
        return hash(self.id)

    @property
    def terms(self) -> tuple[ConcreteTerm, ...]:
        return self.in_terms + self.out_terms

    def displacement(self, dim: str) -> int:
        for key, value in self.binding:
            if key == dim + "?":
                return value
        for t in self.terms:
            if dim in t.dims:
                return t.offset(dim)
        return 0

    def label(self) -> str:
        disp = ",".join(f"{k}{'+' if v > 0 else ''}{v if v else ''}"
                        for k, v in self.binding if isinstance(v, int))
        return f"{self.name}({disp})" if disp else self.name


def unify(pattern: TermPattern, term: ConcreteTerm, binding: dict | None = None) -> dict | None:
    """Match a pattern against a concrete term; returns the extended binding."""
    if pattern.tags != term.tags or pattern.dims != term.dims:
        return None
    b = dict(binding or {})
    if pattern.ident_free:
        key = pattern.identifier + "?"
        if b.setdefault(key, term.identifier) != term.identifier:
            return None
    elif pattern.identifier != term.identifier:
        return None
    for sub, off in zip(pattern.subscripts, term.offsets):
        if sub.free:
            value = off - sub.displacement
            if b.setdefault(sub.iter_var + "?", value) != value:
                return None
        elif sub.displacement != off:
            return None
    return b


def instantiate(pattern: TermPattern, binding: dict) -> ConcreteTerm:
    ident = binding[pattern.identifier + "?"] if pattern.ident_free else pattern.identifier
    offsets = tuple((binding.get(s.iter_var + "?", 0) if s.free else 0) + s.displacement
                    for s in pattern.subscripts)
    return ConcreteTerm(ident, pattern.tags, pattern.dims, offsets)


def goal_term(pattern: TermPattern) -> ConcreteTerm:
    return ConcreteTerm(pattern.identifier, pattern.tags, pattern.dims,
                        tuple(s.displacement for s in pattern.subscripts))


@dataclass
class InferenceDAG:
    """Terms as vertices, rule applications (RAPs) as edges."""

    rs: RuleSet
    terms: list[ConcreteTerm]
    raps: list[RAP]
    producer: dict[ConcreteTerm, int]
    consumers: dict[ConcreteTerm, list[int]]

    @property
    def load_terms(self) -> list[ConcreteTerm]:
        return [r.out_terms[0] for r in self.raps if r.kind == "load"]


def infer_idag(rs: RuleSet, depth_cap: int = DEFAULT_DEPTH_CAP) -> InferenceDAG:
    raps: list[RAP] = []
    producer: dict[ConcreteTerm, int] = {}
    consumers: dict[ConcreteTerm, list[int]] = defaultdict(list)
    terms: list[ConcreteTerm] = []
    by_key: dict[tuple, RAP] = {}
    in_progress: set[ConcreteTerm] = set()

    def note(term: ConcreteTerm) -> None:
        if term not in producer and term not in consumers:
            terms.append(term)

    def demand(term: ConcreteTerm, depth: int, chain: tuple[str, ...]) -> None:
        if term in producer:
            return
        if term in in_progress:
            raise InferenceError(f"cyclic derivation: {' <- '.join(chain + (str(term),))}")
        if depth > depth_cap:
            raise InferenceError(
                f"derivation deeper than {depth_cap} while producing {term} "
                "(self-referential rules?)")
        for ax_index, ax in enumerate(rs.axioms):
            b = unify(ax.term, term)
            if b is not None:
                rap = RAP(len(raps), "load", "load", tuple(sorted(b.items())), (), (term,),
                          (), ("out",), axiom=ax_index)
                raps.append(rap)
                note(term)
                producer[term] = rap.id
                return
        matches = []
        for k in rs.kernels:
            for pname, pat in k.outputs.items():
                b = unify(pat, term)
                if b is not None:
                    matches.append((k, pname, b))
        if not matches:
            raise InferenceError(f"no rule produces term {term}" + _nearest(rs, term))
        if len(matches) > 1:
            names = ", ".join(m[0].name for m in matches)
            raise InferenceError(f"multiple producers for {term}: {names}")
        kernel, _, b = matches[0]
        for pat in kernel.outputs.values():
            for sub in pat.subscripts:
                if sub.free and sub.iter_var + "?" not in b:
                    b[sub.iter_var + "?"] = 0
            if pat.ident_free and pat.identifier + "?" not in b:
                raise InferenceError(f"kernel '{kernel.name}' leaves '{pat.identifier}?' unbound")
        for pat in kernel.inputs.values():
            for sub in pat.subscripts:
                if sub.free:
                    b.setdefault(sub.iter_var + "?", 0)
            if pat.ident_free and pat.identifier + "?" not in b:
                raise InferenceError(f"kernel '{kernel.name}' leaves '{pat.identifier}?' unbound")
        key = (kernel.name, tuple(sorted(b.items())))
        rap = by_key.get(key)
        if rap is None:
            in_params = tuple(p for p in kernel.params if p in kernel.inputs)
            out_params = tuple(p for p in kernel.params if p in kernel.outputs)
            outs = tuple(instantiate(kernel.outputs[p], b) for p in out_params)
            ins = tuple(instantiate(kernel.inputs[p], b) for p in in_params)
            rap = RAP(len(raps), "kernel", kernel.name, key[1], ins, outs, in_params, out_params, kernel)
            by_key[key] = rap
            raps.append(rap)
            for t in outs:
                if t in producer:
                    raise InferenceError(f"term {t} produced twice")
                note(t)
                producer[t] = rap.id
            in_progress.add(term)
            try:
                for t in ins:
                    note(t)
                    consumers[t].append(rap.id)
                    demand(t, depth + 1, chain + (str(term),))
            finally:
                in_progress.discard(term)

    for g_index, goal in enumerate(rs.goals):
        term = goal_term(goal.term)
        demand(term, 0, ())
        rap = RAP(len(raps), "store", "store", (), (term,), (), ("in",), (), goal=g_index)
        raps.append(rap)
        consumers[term].append(rap.id)
    return InferenceDAG(rs, terms, raps, producer, dict(consumers))


def _nearest(rs: RuleSet, term: ConcreteTerm) -> str:
    known = [str(p) for k in rs.kernels for p in k.outputs.values()]
    known += [str(ax.term) for ax in rs.axioms]
    close = difflib.get_close_matches(str(term), known, n=3, cutoff=0.3)
    return f" (nearest candidates: {', '.join(close)})" if close else ""


@dataclass
class DataflowDAG:
    """RAPs as vertices, exchanged terms as edges."""

    rs: RuleSet
    raps: list[RAP]
    edges: list[tuple[int, int, ConcreteTerm]]
    succ: dict[int, set[int]] = field(default_factory=dict)
    pred: dict[int, set[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.succ = {r.id: set() for r in self.raps}
        self.pred = {r.id: set() for r in self.raps}
        for p, c, _ in self.edges:
            self.succ[p].add(c)
            self.pred[c].add(p)
        self._reach: dict[int, frozenset[int]] = {}

    def rap(self, rid: int) -> RAP:
        return self.raps[rid]

    def topo_order(self) -> list[int]:
        return topo_sort(self.succ, key=lambda v: v)

    def reachable(self, rid: int) -> frozenset[int]:
        """Vertices reachable from ``rid`` by at least one edge."""
        if rid not in self._reach:
            self._reach[rid] = frozenset(reachable_from(self.succ, [rid]))
        return self._reach[rid]


def topo_sort(succ: dict, key=None) -> list:
    """Kahn's algorithm; ties broken by ``key``.  Raises CycleError."""
    key = key or (lambda v: v)
    indeg = {v: 0 for v in succ}
    for v, outs in succ.items():
        for w in outs:
            indeg[w] += 1
    heap = [(key(v), v) for v, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        _, v = heapq.heappop(heap)
        out.append(v)
        for w in succ[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(heap, (key(w), w))
    if len(out) != len(indeg):
        raise CycleError("graph has a cycle", find_cycle(succ))
    return out


def find_cycle(succ: dict) -> list:
    color: dict = {}
    stack: list = []

    def visit(v) -> list | None:
        color[v] = 1
        stack.append(v)
        for w in sorted(succ[v], key=repr):
            if color.get(w) == 1:
                return stack[stack.index(w):] + [w]
            if w not in color:
                found = visit(w)
                if found:
                    return found
        stack.pop()
        color[v] = 2
        return None

    for v in sorted(succ, key=repr):
        if v not in color:
            found = visit(v)
            if found:
                return found
    return []


def reachable_from(succ: dict, starts: Iterable) -> set:
    seen: set = set()
    stack = [w for s in starts for w in succ[s]]
    while stack:
        v = stack.pop()
        if v not in seen:
            seen.add(v)
            stack.extend(succ[v])
    return seen


def rap_dual(idag: InferenceDAG) -> DataflowDAG:
    edges = []
    for term in idag.terms:
        p = idag.producer.get(term)
        for c in idag.consumers.get(term, []):
            edges.append((p, c, term))
    dag = DataflowDAG(idag.rs, list(idag.raps), edges)
    try:
        dag.topo_order()
    except CycleError as exc:
        names = " -> ".join(dag.rap(v).label() for v in exc.witness)
        raise CycleError(f"dataflow cycle: {names}", exc.witness) from None
    return dag


@dataclass(frozen=True)
class IterationSpace:
    dims: tuple[str, ...]
    ranges: tuple[tuple[int, int, int], ...]

    def __len__(self) -> int:
        return len(self.dims)


def space_dims(rs: RuleSet, terms: Iterable[ConcreteTerm]) -> tuple[str, ...]:
    used = {d for t in terms for d in t.dims}
    return tuple(v for v in rs.loop_order if v in used)


def iteration_space_of(rap: RAP, dag: DataflowDAG) -> IterationSpace:
    dims = space_dims(dag.rs, rap.terms)
    return IterationSpace(dims, tuple(dag.rs.ranges[d] for d in dims))


def dataflow_le(R: Iterable[int], S: Iterable[int], dag: DataflowDAG) -> bool:
    """True when every vertex of R can be ordered before every vertex of S."""
    R = set(R)
    return not any(dag.reachable(s) & R for s in S)


def build_dataflow(rs: RuleSet) -> DataflowDAG:
    return rap_dual(infer_idag(rs))

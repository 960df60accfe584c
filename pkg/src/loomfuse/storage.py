"""Variable storage analysis: extents, liveness regions, reuse order and contraction."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace

from .errors import LoweringError
from .inference import var_name
from .nests import GroupGraph, InestDAG, Leaf

CTYPE_BYTES = {"double": 8, "float": 4, "int": 4, "long": 8, "unsigned": 4, "char": 1,
               "int32_t": 4, "uint32_t": 4, "int64_t": 8, "uint64_t": 8, "short": 2}


# -- placement of groups inside the fused nests ------------------------------

@dataclass(frozen=True)
class Place:
    vertex: int
    loops: tuple[tuple[str, tuple, int], ...]  # (var, node key, phase) from outermost
    leaf: tuple[int, ...]

    def node(self, var: str):
        for v, key, ph in self.loops:
            if v == var and ph == 1:
                return key
        return None


def group_places(fused: InestDAG) -> dict[int, Place]:
    out: dict[int, Place] = {}

    def walk(nest, vertex, path, loops):
        if isinstance(nest, Leaf):
            for k, g in enumerate(nest.calls):
                out[g] = Place(vertex, loops, path + (k,))
            return
        for ph, child in enumerate(nest.phases()):
            walk(child, vertex, path + (ph,), loops + ((nest.var, (vertex, path), ph),))

    for v, nest in fused.vertices.items():
        walk(nest, v, (), ())
    return out


def leads(gg: GroupGraph) -> dict[int, dict[str, int]]:
    """Per group and dimension, the largest member displacement (cells)."""
    return {g.id: {d: g.span(d)[1] for d in g.dims} for g in gg.groups}


# -- variables ---------------------------------------------------------------

@dataclass
class VarInfo:
    var: tuple
    dims: tuple[str, ...]
    produced: set = field(default_factory=set)  # offset vectors written
    refs: set = field(default_factory=set)  # offset vectors read
    producers: set = field(default_factory=set)
    consumers: set = field(default_factory=set)
    axiom: int | None = None
    goals: list = field(default_factory=list)
    ctype: str = "double"

    @property
    def name(self) -> str:
        return var_name(self.var)

    def offsets(self):
        return self.produced | self.refs


def collect_vars(gg: GroupGraph) -> dict[tuple, VarInfo]:
    dag = gg.dag
    out: dict[tuple, VarInfo] = {}

    def info(term) -> VarInfo:
        v = out.get(term.var)
        if v is None:
            v = out[term.var] = VarInfo(term.var, term.dims)
        return v

    for rap in dag.raps:
        g = gg.owner[rap.id]
        for t, p in zip(rap.out_terms, rap.out_params or ("out",) * len(rap.out_terms)):
            v = info(t)
            v.produced.add(t.offsets)
            v.producers.add(g)
            if rap.kind == "load":
                v.axiom = rap.axiom
                v.ctype = dag.rs.axioms[rap.axiom].buffer.ctype
            elif rap.kernel is not None:
                v.ctype = rap.kernel.declaration.param(p).ctype
        for t in rap.in_terms:
            v = info(t)
            v.refs.add(t.offsets)
            v.consumers.add(g)
            if rap.kind == "store":
                v.goals.append(rap.goal)
    return out


def accumulator_pairs(gg: GroupGraph) -> dict[tuple, tuple]:
    """Map accumulator-input variables onto the variable they accumulate into."""
    pairs = {}
    for rap in gg.dag.raps:
        k = rap.kernel
        if k is None or not k.accumulator:
            continue
        if len(rap.out_terms) != 1:
            raise LoweringError(f"accumulating kernel '{k.name}' must have exactly one output")
        acc = rap.in_terms[rap.in_params.index(k.accumulator)]
        out = rap.out_terms[0]
        if acc.dims != out.dims or acc.offsets != out.offsets:
            raise LoweringError(f"accumulator of '{k.name}' must match its output position")
        if pairs.setdefault(acc.var, out.var) != out.var:
            raise LoweringError(f"accumulator {var_name(acc.var)} feeds two reductions")
    return pairs


def buffer_extents(rs, dims, offsets) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Lower bounds and extents (cells) of the box covering ``offsets`` swept over the ranges."""
    lbs, exts = [], []
    for k, d in enumerate(dims):
        lo, hi, st = rs.ranges[d]
        last = lo + (rs.trips(d) - 1) * st
        mn = min(o[k] for o in offsets)
        mx = max(o[k] for o in offsets)
        lbs.append(lo + mn)
        exts.append(last + mx - (lo + mn) + 1)
    return tuple(lbs), tuple(exts)


# -- reuse -------------------------------------------------------------------

@dataclass(frozen=True)
class ReuseGraph:
    var: tuple
    nodes: tuple[tuple[int, ...], ...]
    edges: frozenset
    path: tuple[tuple[int, ...], ...]


def reuse_graph(var, refs, dims, loop_order) -> ReuseGraph:
    """References ordered by reuse: an edge a -> b when a sees a value before b does."""
    perm = [dims.index(d) for d in loop_order if d in dims]
    key = lambda o: tuple(o[p] for p in perm)  # noqa: E731
    nodes = tuple(sorted(set(refs), key=key, reverse=True))
    edges = frozenset((a, b) for a in nodes for b in nodes if key(a) > key(b))
    succ = defaultdict(list)
    for a, b in edges:
        succ[a].append(b)
    best: dict = {}

    def longest(n):
        if n not in best:
            tails = [longest(m) for m in succ[n]]
            best[n] = (n,) + max(tails, key=len, default=())
        return best[n]

    path = max((longest(n) for n in nodes), key=len, default=())
    return ReuseGraph(var, nodes, edges, path)


# -- descriptors -------------------------------------------------------------

@dataclass(frozen=True)
class Scheme:
    kind: str  # full | inner_circular | outer_rotate | vector_expanded
    span: int = 0
    rows: int = 0
    dim: str | None = None  # rotating / circular dimension
    vl: int = 1

    @property
    def size(self) -> int:
        return self.span + self.vl if self.kind == "vector_expanded" else self.span

    def __str__(self) -> str:
        if self.kind == "inner_circular":
            return f"inner_circular({self.span})"
        if self.kind == "outer_rotate":
            return f"outer_rotate({self.rows} rows of {self.dim})"
        if self.kind == "vector_expanded":
            return f"vector_expanded({self.span}, VL={self.vl})"
        return "full"


FULL = Scheme("full")


@dataclass(frozen=True)
class Region:
    vertices: tuple[int, ...]
    loops: tuple[str, ...] = ()

    def __str__(self) -> str:
        if len(self.vertices) > 1:
            return "top-level (spans nests " + ",".join(map(str, self.vertices)) + ")"
        if not self.loops:
            return f"nest {self.vertices[0]}"
        return f"nest {self.vertices[0]} inside " + ">".join(self.loops)


@dataclass(frozen=True)
class StorageDescriptor:
    identifier: str
    vars: tuple
    kind: str  # intermediate | view | direct | alias_temp
    dims: tuple[str, ...]
    ctype: str
    lb: tuple[int, ...]
    extents: tuple[int, ...]
    scheme: Scheme = FULL
    enclosing: Region | None = None
    writer_lead: tuple[int, ...] = ()
    candidate: Scheme = FULL
    external: str | None = None
    alias_copies: frozenset = frozenset()

    def shape(self, rs) -> tuple[int, ...]:
        """Concrete allocation shape, one entry per dimension."""
        s = self.scheme
        if s.kind == "full":
            return self.extents
        k = self.dims.index(s.dim)
        if s.kind == "outer_rotate":
            return (1,) * k + (s.rows,) + self.extents[k + 1:]
        return (1,) * k + (s.size,)

    def elements(self, rs) -> int:
        n = 1
        for e in self.shape(rs):
            n *= e
        return n


def contract(dims, offsets, same_node: dict, rs) -> Scheme:
    """Rolling-buffer scheme for a variable given which dimensions stay in one loop.

    ``same_node[d]`` says whether every producer and consumer runs in the same loop
    instance for dimension ``d``.
    """
    if not dims:
        return FULL
    spans = []
    for k, d in enumerate(dims):
        st = rs.ranges[d][2]
        vals = [o[k] for o in offsets]
        spans.append((max(vals) - min(vals)) // st + 1)
    inner = len(dims) - 1
    if all(same_node[d] for d in dims) and all(s == 1 for s in spans[:inner]):
        return Scheme("inner_circular", span=spans[inner], dim=dims[inner])
    wide = [k for k in range(inner) if spans[k] > 1]
    if len(wide) == 1:
        r = wide[0]
        if all(same_node[d] for d in dims[:r + 1]) and all(s == 1 for s in spans[:r]):
            return Scheme("outer_rotate", span=spans[r], rows=spans[r], dim=dims[r])
    return FULL


def vector_expand(sd: StorageDescriptor, vl: int) -> StorageDescriptor:
    if sd.scheme.kind != "inner_circular" or vl <= 1:
        return sd
    return replace(sd, scheme=replace(sd.scheme, kind="vector_expanded", vl=vl))


def enclosing_region(groups, places: dict[int, Place], dims, scheme: Scheme) -> Region:
    verts = tuple(sorted({places[g].vertex for g in groups}))
    if len(verts) > 1:
        return Region(verts)
    common = None
    for g in groups:
        loops = places[g].loops
        if common is None:
            common = list(loops)
        else:
            n = 0
            while n < min(len(common), len(loops)) and common[n] == loops[n]:
                n += 1
            common = common[:n]
    out = []
    for var, _, ph in common or ():
        if ph != 1 or var not in dims:
            break
        if scheme.kind == "full" or scheme.dim == var:
            break
        out.append(var)
    return Region(verts, tuple(out))


@dataclass
class Footprint:
    terms: dict  # monomial (tuple of dims) -> coefficient

    def __str__(self) -> str:
        def mono(m):
            return "*".join(f"N_{d}" for d in m)

        parts = []
        for m in sorted(self.terms, key=lambda m: -len(m)):
            c = self.terms[m]
            if not c:
                continue
            if not m:
                parts.append(str(c))
            else:
                parts.append(mono(m) if c == 1 else f"{c}*{mono(m)}")
        return " + ".join(parts) or "0"


@dataclass
class AliasPlan:
    input: str
    output: str
    var: tuple
    temp: str
    offsets: frozenset


@dataclass
class ExternalInfo:
    name: str
    ctype: str
    dims: tuple[str, ...]  # layout order
    lb: dict
    extent: dict
    role: str  # input | output | inout


@dataclass
class StoragePlan:
    descriptors: dict  # storage key -> StorageDescriptor
    storage_of: dict  # var -> storage key
    externals: dict
    alias_plans: list
    footprint: Footprint
    full_footprint: Footprint
    vars: dict
    reuse: dict

    def descriptor(self, var) -> StorageDescriptor:
        return self.descriptors[self.storage_of[var]]

    def by_name(self, identifier: str) -> StorageDescriptor:
        for sd in self.descriptors.values():
            if sd.identifier == identifier:
                return sd
        raise KeyError(identifier)


def _externals(rs, infos) -> dict:
    ext: dict[str, ExternalInfo] = {}

    def add(buf, dims, offsets, role):
        lbs, exts = buffer_extents(rs, dims, offsets)
        if len(buf.dims) != len(dims) or set(buf.dims) != set(dims):
            raise LoweringError(f"external '{buf.name}' subscripts do not match its term")
        cur = ext.get(buf.name)
        lb = dict(zip(dims, lbs))
        ex = {d: lb[d] + e for d, e in zip(dims, exts)}  # exclusive upper bound
        if cur is not None:
            for d in dims:
                lo = min(cur.lb[d], lb[d])
                up = max(cur.lb[d] + cur.extent[d], ex[d])
                cur.lb[d], cur.extent[d] = lo, up - lo
            cur.role = "inout" if cur.role != role else role
            return
        ext[buf.name] = ExternalInfo(buf.name, buf.ctype, buf.dims, lb,
                                     {d: ex[d] - lb[d] for d in dims}, role)

    for info in infos.values():
        if info.axiom is not None:
            add(rs.axioms[info.axiom].buffer, info.dims, info.produced, "input")
        for gi in info.goals:
            add(rs.goals[gi].buffer, info.dims, {(0,) * len(info.dims)}, "output")
    # aliased buffers share one allocation
    for a, b in rs.aliases:
        if a in ext and b in ext:
            ea, eb = ext[a], ext[b]
            for d in ea.dims:
                lo = min(ea.lb[d], eb.lb[d])
                up = max(ea.lb[d] + ea.extent[d], eb.lb[d] + eb.extent[d])
                for e in (ea, eb):
                    e.lb[d], e.extent[d] = lo, up - lo
            ea.role = eb.role = "inout"
    return ext


def _unique(name: str, taken: set) -> str:
    while name in taken:
        name += "_"
    taken.add(name)
    return name


def plan_storage(gg: GroupGraph, fused: InestDAG, vector_length: int | None = None,
                 contraction: bool = True) -> StoragePlan:
    rs = gg.rs
    vl = rs.vector_length if vector_length is None else vector_length
    infos = collect_vars(gg)
    places = group_places(fused)
    glead = leads(gg)
    pairs = accumulator_pairs(gg)
    externals = _externals(rs, infos)
    taken = set(externals) | {k.declaration.function for k in rs.kernels}
    aliased_inputs = {}
    for a, b in rs.aliases:
        for x, y in ((a, b), (b, a)):
            aliased_inputs[x] = y
    chains = alias_chain(rs, gg.dag)

    # group variables that must share storage (accumulator input with its result)
    root = {v: pairs.get(v, v) for v in infos}
    members = defaultdict(list)
    for v in infos:
        members[root[v]].append(v)

    descriptors: dict = {}
    storage_of: dict = {}
    reuse: dict = {}
    alias_plans: list = []
    for key, vs in sorted(members.items(), key=lambda kv: var_name(kv[0])):
        base = infos[key]
        dims = base.dims
        offsets = set().union(*(infos[v].offsets() for v in vs))
        refs = set().union(*(infos[v].refs for v in vs))
        groups = set().union(*(infos[v].producers | infos[v].consumers for v in vs))
        lbs, exts = buffer_extents(rs, dims, offsets) if dims else ((), ())
        same = {d: len({places[g].node(d) for g in groups}) == 1
                and places[next(iter(groups))].node(d) is not None for d in dims}
        candidate = contract(dims, offsets, same, rs)
        reuse[key] = reuse_graph(key, refs or offsets, dims, rs.loop_order)
        writer = tuple(max(o[k] for o in offsets) for k in range(len(dims)))
        axiom = next((infos[v].axiom for v in vs if infos[v].axiom is not None), None)
        goals = [g for v in vs for g in infos[v].goals]
        kind = "intermediate"
        external = None
        if axiom is not None:
            ext = rs.axioms[axiom].buffer.name
            if ext in aliased_inputs and len(vs) == 1:
                kind = "alias_temp"
                temp = _unique(base.name + "__tmp", taken)
                offs = chains.get((ext, aliased_inputs[ext]), frozenset())
                if offs:
                    alias_plans.append(AliasPlan(ext, aliased_inputs[ext], key, temp, offs))
            elif len(vs) == 1:
                kind, external = "view", ext
        elif goals and len(vs) == 1 and len(set(goals)) >= 1:
            gbox = {(0,) * len(dims)}
            if offsets == gbox or not dims:
                kind, external = "direct", rs.goals[goals[0]].buffer.name
        if kind in ("view", "direct"):
            ident = external
            scheme = FULL
        else:
            ident = temp if kind == "alias_temp" else _unique(base.name, taken)
            scheme = candidate if contraction else FULL
            if scheme.kind == "inner_circular":
                scheme = vector_expand_scheme(scheme, vl)
        region = enclosing_region(groups, places, dims, scheme)
        sd = StorageDescriptor(ident, tuple(vs), kind, dims, base.ctype, lbs, exts, scheme, region,
                               writer, candidate, external,
                               offs if kind == "alias_temp" else frozenset())
        descriptors[key] = sd
        for v in vs:
            storage_of[v] = key
    plan = StoragePlan(descriptors, storage_of, externals, alias_plans,
                       Footprint({}), Footprint({}), infos, reuse)
    plan.footprint = footprint(plan, rs)
    plan.full_footprint = footprint(plan, rs, contracted=False)
    _check_alias_order(plan, gg, places, glead, aliased_inputs)
    return plan


def alias_chain(rs, dag) -> dict:
    """Input offsets to copy aside before an aliased output overwrites them.

    Keyed by (input buffer, output buffer).  A pair is listed only when the output
    depends on the input; a cell read at offset o is clobbered first when o <=lex w
    for some written offset w.
    """
    axiom_bufs = {a.buffer.name for a in rs.axioms}
    out = {}
    for a, b in sorted(rs.aliases):
        src, dst = (a, b) if a in axiom_bufs else (b, a)
        loads = [r for r in dag.raps if r.kind == "load" and rs.axioms[r.axiom].buffer.name == src]
        stores = [r for r in dag.raps if r.kind == "store" and rs.goals[r.goal].buffer.name == dst]
        chained = [r for r in loads if any(w.id in dag.reachable(r.id) for w in stores)]
        if not chained:
            continue
        dims = chained[0].out_terms[0].dims
        writes = [_lex_key(w.in_terms[0].offsets, dims, rs.loop_order) for w in stores]
        last = max(writes)
        out[src, dst] = frozenset(t.offsets for r in chained for t in r.out_terms
                                  if _lex_key(t.offsets, dims, rs.loop_order) <= last)
    return out


def vector_expand_scheme(scheme: Scheme, vl: int) -> Scheme:
    if scheme.kind != "inner_circular" or vl <= 1:
        return scheme
    return replace(scheme, kind="vector_expanded", vl=vl)


def _zero(dims):
    return (0,) * len(dims)


def _lex_key(o, dims, order):
    return tuple(o[dims.index(d)] for d in order if d in dims)


def _check_alias_order(plan: StoragePlan, gg: GroupGraph, places, glead, partner) -> None:
    """In-place updates are safe only if every input cell is read before it is overwritten."""
    rs = gg.rs
    for var, sd in plan.descriptors.items():
        if sd.kind != "alias_temp":
            continue
        ext = rs.axioms[plan.vars[var].axiom].buffer.name
        loads = plan.vars[var].producers
        out_vars = [v for v, info in plan.vars.items()
                    if any(rs.goals[g].buffer.name == partner[ext] for g in info.goals)]
        writers = set()
        for v in out_vars:
            sd = plan.descriptor(v)
            writers |= plan.vars[v].producers if sd.kind == "direct" else plan.vars[v].consumers
        for lg in loads:
            for wg in writers:
                pl, pw = places[lg], places[wg]
                if pl.vertex != pw.vertex:
                    if pl.vertex in gg.reach.get(pw.vertex, ()):
                        raise LoweringError(f"aliased input '{ext}' is read after it is overwritten")
                    continue
                shared = []
                for d in rs.loop_order:
                    nl, nw = pl.node(d), pw.node(d)
                    if nl is None or nl != nw:
                        break
                    shared.append(d)
                lead_l = tuple(glead[lg].get(d, 0) for d in shared)
                lead_w = tuple(glead[wg].get(d, 0) for d in shared)
                if lead_l < lead_w:
                    raise LoweringError(
                        f"in-place update of '{partner[ext]}' would overwrite cells of '{ext}' "
                        "before they are read; drop the alias")


def footprint(plan: StoragePlan, rs, contracted: bool = True) -> Footprint:
    terms: dict = defaultdict(int)
    seen = set()
    for e in plan.externals.values():
        group = frozenset({e.name} | {b for a, b in rs.aliases if a == e.name}
                          | {a for a, b in rs.aliases if b == e.name})
        if group & seen:
            continue
        seen |= group
        terms[tuple(d for d in rs.loop_order if d in e.dims)] += 1
    for sd in plan.descriptors.values():
        if sd.kind in ("view", "direct"):
            continue
        s = sd.scheme if contracted else FULL
        if s.kind == "full":
            terms[sd.dims] += 1
        elif s.kind == "outer_rotate":
            k = sd.dims.index(s.dim)
            terms[sd.dims[k + 1:]] += s.rows
        else:
            terms[()] += s.size
    return Footprint(dict(terms))


def footprint_bytes(plan: StoragePlan, rs) -> int:
    total = 0
    for sd in plan.descriptors.values():
        if sd.kind in ("view", "direct"):
            continue
        total += sd.elements(rs) * CTYPE_BYTES.get(sd.ctype.split()[-1], 8)
    return total

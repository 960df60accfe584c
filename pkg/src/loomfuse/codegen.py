"""Lowering of fused nests to a schedule IR, and C/C++/DOT emission."""
from __future__ import annotations

import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .errors import LoweringError
from .inference import DataflowDAG
from .nests import GroupGraph, InestDAG, Leaf, calls_of
from .storage import ExternalInfo, StorageDescriptor, StoragePlan, group_places


# -- schedule IR --------------------------------------------------------------

@dataclass(frozen=True)
class Access:
    storage: str
    dims: tuple[str, ...]
    offsets: tuple[int, ...]  # cell offset from the loop variable of each dim

    def cells(self, env: dict) -> tuple[int, ...]:
        return tuple(env[d] + c for d, c in zip(self.dims, self.offsets))


@dataclass
class Call:
    group: int
    kernel: object
    args: tuple[Access, ...]
    guards: tuple[tuple[str, int], ...] = ()
    label: str = ""


@dataclass
class Assign:
    group: int
    dst: Access
    src: Access
    guards: tuple[tuple[str, int], ...] = ()
    label: str = ""


@dataclass
class For:
    var: str
    start: int
    stop: int
    step: int
    body: list
    rotates: list = field(default_factory=list)  # outer_rotate buffers, rotated after each trip
    shifts: list = field(default_factory=list)  # (identifier, writer cell offset) for vector buffers
    resets: list = field(default_factory=list)  # vector buffer bases reset before the loop


@dataclass
class ScheduleIR:
    name: str
    rs: object
    externals: list[ExternalInfo]
    buffers: list[StorageDescriptor]
    body: list
    plan: StoragePlan
    nests: int = 1
    function: str = ""

    def storage(self, name: str):
        for e in self.externals:
            if e.name == name:
                return e
        for b in self.buffers:
            if b.identifier == name:
                return b
        raise KeyError(name)

    def walk(self):
        stack = list(reversed(self.body))
        while stack:
            s = stack.pop()
            yield s
            if isinstance(s, For):
                stack.extend(reversed(s.body))


def lower(gg: GroupGraph, fused: InestDAG, plan: StoragePlan, name: str | None = None) -> ScheduleIR:
    rs = gg.rs
    dag: DataflowDAG = gg.dag
    places = group_places(fused)
    _check_strides(gg)

    rotates: dict = {}
    shifts: dict = {}
    for key, sd in plan.descriptors.items():
        s = sd.scheme
        if s.kind not in ("outer_rotate", "vector_expanded"):
            continue
        writer = next(iter(sorted(plan.vars[sd.vars[0]].producers | plan.vars[sd.vars[-1]].producers)))
        node = places[writer].node(s.dim)
        if s.kind == "outer_rotate":
            rotates.setdefault(node, []).append(sd.identifier)
        else:
            lead = sd.writer_lead[sd.dims.index(s.dim)]
            shifts.setdefault(node, []).append((sd.identifier, lead))

    def storage_name(var) -> str:
        return plan.descriptor(var).identifier

    def access(term, rap, grp) -> Access:
        offs = tuple(grp.span(d)[1] + term.offset(d) - rap.displacement(d) for d in term.dims)
        return Access(storage_name(term.var), term.dims, offs)

    def ext_access(ext_name, term, rap, grp) -> Access:
        acc = access(term, rap, grp)
        return Access(ext_name, acc.dims, acc.offsets)

    def group_stmt(gid: int):
        grp = gg.group(gid)
        rap = dag.rap(grp.members[0])
        guards = []
        for d in grp.dims:
            lo, _, st = rs.ranges[d]
            mn, mx = grp.span(d)
            guards.append((d, lo - (mx - mn)))
        guards = tuple(guards)
        if rap.kind == "load":
            term = rap.out_terms[0]
            sd = plan.descriptor(term.var)
            if sd.kind != "alias_temp":
                return None
            src = ext_access(rs.axioms[rap.axiom].buffer.name, term, rap, grp)
            return Assign(gid, access(term, rap, grp), src, guards, f"copy {term.var[0]} before overwrite")
        if rap.kind == "store":
            term = rap.in_terms[0]
            sd = plan.descriptor(term.var)
            ext = rs.goals[rap.goal].buffer.name
            if sd.kind == "direct" and sd.external == ext:
                return None
            return Assign(gid, ext_access(ext, term, rap, grp), access(term, rap, grp), guards,
                          f"store {ext}")
        args = []
        k = rap.kernel
        terms = dict(zip(rap.in_params, rap.in_terms)) | dict(zip(rap.out_params, rap.out_terms))
        for p in k.params:
            args.append(access(terms[p], rap, grp))
        return Call(gid, k, tuple(args), guards, rap.label())

    def lower_nest(nest, vertex, path, enclosing: dict) -> list:
        if isinstance(nest, Leaf):
            out = []
            for g in nest.calls:
                s = group_stmt(g)
                if s is None:
                    continue
                # drop guards that the enclosing loop start already satisfies
                s.guards = tuple((d, v) for d, v in s.guards if v > enclosing[d])
                out.append(s)
            return out
        lo, hi, st = nest.range
        spans = [(gg.group(g).span(nest.var)[1] - gg.group(g).span(nest.var)[0])
                 for g in calls_of(nest.steady) if group_stmt(g) is not None]
        start = lo - max(spans, default=0)
        key = (vertex, path)
        pro = lower_nest(nest.prologue, vertex, path + (0,), enclosing)
        steady = lower_nest(nest.steady, vertex, path + (1,), {**enclosing, nest.var: start})
        epi = lower_nest(nest.epilogue, vertex, path + (2,), enclosing)
        loop = For(nest.var, start, hi, st, steady,
                   rotates=rotates.get(key, []), shifts=shifts.get(key, []),
                   resets=[n for n, _ in shifts.get(key, [])])
        return pro + [loop] + epi

    body = []
    for v in fused.topo_order():
        body.extend(lower_nest(fused.vertices[v], v, (), {}))
    externals = list(plan.externals.values())
    buffers = [sd for sd in plan.descriptors.values() if sd.kind in ("intermediate", "alias_temp")]
    stem = re.sub(r"[^\w.-]", "_", name or rs.name)
    return ScheduleIR(stem, rs, externals, buffers, body, plan, len(fused.vertices),
                      function_name(rs, name))


def function_name(rs, name: str | None = None) -> str:
    """C identifier for the generated entry point, clear of kernel names."""
    base = re.sub(r"\W", "_", name or rs.name) or "kernel"
    if base[0].isdigit():
        base = "_" + base
    taken = {k.declaration.function for k in rs.kernels} | {a.buffer.name for a in rs.axioms} \
        | {g.buffer.name for g in rs.goals}
    if base in taken:
        base += "_fused"
    return base


def _check_strides(gg: GroupGraph) -> None:
    rs = gg.rs
    for d, (lo, hi, st) in rs.ranges.items():
        if st <= 0:
            raise LoweringError(f"range of '{d}' must have a positive stride")
    for g in gg.groups:
        for d in g.dims:
            st = rs.ranges[d][2]
            if any(x[g.dims.index(d)] % st for x in g.disps):
                raise LoweringError(f"displacement of {g.name} along '{d}' is not a multiple of its stride")
    for rap in gg.dag.raps:
        for t in rap.terms:
            for d, o in zip(t.dims, t.offsets):
                if o % rs.ranges[d][2]:
                    raise LoweringError(f"offset of {t} is not a multiple of the stride of '{d}'")


# -- indexing shared by the interpreter and the C emitter ---------------------

def row_slot(sd: StorageDescriptor, offset: int, rs) -> int:
    """Row-pointer index for an access at ``offset`` cells along the rotating dimension."""
    s = sd.scheme
    k = sd.dims.index(s.dim)
    st = rs.ranges[s.dim][2]
    return (offset - sd.writer_lead[k]) // st + s.rows - 1


# -- C / C++ emission ----------------------------------------------------------

def _flat(terms: list[str], shape: list[int]) -> str:
    expr = ""
    for t, n in zip(terms, shape):
        if expr:
            head = expr if re.fullmatch(r"\w+", expr) else f"({expr})"
            expr = f"{head} * {n} + {t}"
        else:
            expr = t
    return expr or "0"


def _lin(var: str, c: int) -> str:
    if c == 0:
        return var
    return f"{var} + {c}" if c > 0 else f"{var} - {-c}"


class _Emitter:
    def __init__(self, ir: ScheduleIR, backend: str):
        self.ir = ir
        self.rs = ir.rs
        self.backend = backend
        self.lines: list[str] = []
        self.ind = 1

    def emit(self, s: str = "") -> None:
        self.lines.append("    " * self.ind + s if s else "")

    def index(self, acc: Access) -> str:
        st = self.ir.storage(acc.storage)
        off = dict(zip(acc.dims, acc.offsets))
        if isinstance(st, ExternalInfo):
            terms = [_lin(d, off[d] - st.lb[d]) for d in st.dims]
            return f"{st.name}[{_flat(terms, [st.extent[d] for d in st.dims])}]"
        s = st.scheme
        lb = dict(zip(st.dims, st.lb))

        def rel(d):
            step = self.rs.ranges[d][2]
            e = _lin(d, off[d] - lb[d])
            return f"({e})" if step == 1 else f"({e}) / {step}"

        if s.kind == "full":
            terms = [_lin(d, off[d] - lb[d]) for d in st.dims]
            return f"{st.identifier}[{_flat(terms, list(st.extents))}]"
        if s.kind == "inner_circular":
            return f"{st.identifier}[{rel(s.dim)} % {s.span}]"
        if s.kind == "vector_expanded":
            return f"{st.identifier}[{rel(s.dim)} - {st.identifier}__base]"
        k = st.dims.index(s.dim)
        slot = row_slot(st, off[s.dim], self.rs)
        inner = st.dims[k + 1:]
        terms = [_lin(d, off[d] - lb[d]) for d in inner]
        return f"{st.identifier}__r[{slot}][{_flat(terms, list(st.extents[k + 1:]))}]"

    def arg(self, kernel, pname: str, acc: Access) -> str:
        p = kernel.declaration.param(pname)
        ref = self.index(acc)
        return "&" + ref if p.passing == "pointer" else ref

    def stmt(self, s) -> None:
        guard = " && ".join(f"{d} >= {v}" for d, v in getattr(s, "guards", ()))
        if guard:
            self.emit(f"if ({guard})")
            self.ind += 1
        if isinstance(s, Call):
            args = ", ".join(self.arg(s.kernel, p, a) for p, a in zip(s.kernel.params, s.args))
            self.emit(f"{s.kernel.declaration.function}({args}); /* {s.label} */")
        elif isinstance(s, Assign):
            self.emit(f"{self.index(s.dst)} = {self.index(s.src)}; /* {s.label} */")
        else:
            self.loop(s)
        if guard:
            self.ind -= 1

    def loop(self, f: For) -> None:
        for name in f.resets:
            self.emit(f"{name}__base = 0;")
        self.emit(f"for (int {f.var} = {f.start}; {f.var} < {f.stop}; {f.var} += {f.step}) {{")
        self.ind += 1
        for name, lead in f.shifts:
            sd = self.ir.storage(name)
            s = sd.scheme
            k = sd.dims.index(s.dim)
            q = f"({_lin(f.var, lead - sd.lb[k])})"
            if f.step != 1:
                q = f"{q} / {f.step}"
            self.emit(f"if ({q} - {name}__base == {s.size}) {{")
            self.emit(f"    memmove({name}, {name} + {s.vl}, sizeof({sd.ctype}) * {s.span});")
            self.emit(f"    {name}__base += {s.vl};")
            self.emit("}")
        for s in f.body:
            self.stmt(s)
        for name in f.rotates:
            sd = self.ir.storage(name)
            rows = sd.scheme.rows
            self.emit(f"{{ {sd.ctype} *t_ = {name}__r[0];")
            for r in range(rows - 1):
                self.emit(f"  {name}__r[{r}] = {name}__r[{r + 1}];")
            self.emit(f"  {name}__r[{rows - 1}] = t_; }}")
        self.ind -= 1
        self.emit("}")

    def signature(self) -> str:
        params = ", ".join(f"{e.ctype} *{e.name}" for e in self.ir.externals)
        return f"void {self.ir.function}({params or 'void'})"

    def declarations(self) -> None:
        for sd in self.ir.buffers:
            s = sd.scheme
            n = sd.elements(self.rs)
            if s.kind in ("inner_circular", "vector_expanded") or not sd.dims:
                self.emit(f"{sd.ctype} {sd.identifier}[{n}];")
                if s.kind == "vector_expanded":
                    self.emit(f"int {sd.identifier}__base = 0;")
                continue
            cast = f"({sd.ctype} *)" if self.backend == "cxx" else ""
            self.emit(f"{sd.ctype} *{sd.identifier} = {cast}malloc(sizeof({sd.ctype}) * {n});")
            if s.kind == "outer_rotate":
                row = n // s.rows
                self.emit(f"{sd.ctype} *{sd.identifier}__r[{s.rows}];")
                for r in range(s.rows):
                    self.emit(f"{sd.identifier}__r[{r}] = {sd.identifier} + {r * row};")

    def frees(self) -> None:
        for sd in self.ir.buffers:
            if sd.scheme.kind in ("full", "outer_rotate") and sd.dims:
                self.emit(f"free({sd.identifier});")


def emit_source(ir: ScheduleIR, backend: str = "c99") -> tuple[str, str]:
    """Return (source, header) text for the schedule."""
    if backend not in ("c99", "cxx"):
        raise LoweringError(f"unknown backend '{backend}'")
    em = _Emitter(ir, backend)
    protos = [k.declaration.text.rstrip(";") + ";" for k in ir.rs.kernels]
    head = [f"/* Generated by loomfuse from '{ir.name}'. */"]
    ext_notes = [f"/*   {e.ctype} {e.name}: " + " x ".join(f"{d}[{e.lb[d]}, {e.lb[d] + e.extent[d]})"
                                                         for d in e.dims) + f" ({e.role}) */"
                 for e in ir.externals]
    guard = "LOOMFUSE_" + re.sub(r"\W", "_", ir.name).upper() + "_H"
    header = "\n".join(head + [f"#ifndef {guard}", f"#define {guard}", "",
                               "/* External buffers (row-major, index = cell - lower bound): */",
                               *ext_notes, "", *protos, "", em.signature() + ";", "",
                               f"#endif /* {guard} */", ""])
    incl = ["#include <cstdlib>", "#include <cstring>"] if backend == "cxx" else \
        ["#include <stdlib.h>", "#include <string.h>"]
    if backend == "cxx":
        incl.append("using std::malloc; using std::free; using std::memmove;")
    em.lines = head + incl + [f'#include "{ir.name}.h"', "", em.signature(), "{"]
    em.declarations()
    for s in ir.body:
        em.stmt(s)
    em.frees()
    em.lines.append("}")
    return "\n".join(em.lines) + "\n", header


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit(ir: ScheduleIR, outdir, backend: str = "c99") -> list[Path]:
    src, hdr = emit_source(ir, backend)
    outdir = Path(outdir)
    ext = ".cpp" if backend == "cxx" else ".c"
    paths = [outdir / f"{ir.name}{ext}", outdir / f"{ir.name}.h"]
    atomic_write(paths[0], src)
    atomic_write(paths[1], hdr)
    return paths


# -- DOT ---------------------------------------------------------------------

def _q(s: str) -> str:
    return '"' + str(s).replace('"', r"\"") + '"'


def dot_dataflow(dag: DataflowDAG) -> str:
    lines = ["digraph dataflow {", "  node [shape=box];"]
    for r in dag.raps:
        lines.append(f"  r{r.id} [label={_q(r.label())}];")
    for p, c, t in dag.edges:
        lines.append(f"  r{p} -> r{c} [label={_q(t)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _nest_label(nest, gg: GroupGraph) -> str:
    if isinstance(nest, Leaf):
        return "; ".join(gg.group(g).name for g in nest.calls)
    parts = []
    for tag, ph in zip(("pro", "steady", "epi"), nest.phases()):
        if calls_of(ph):
            parts.append(f"{tag}: {_nest_label(ph, gg)}")
    return f"{nest.var}{{ " + " | ".join(parts) + " }"


def dot_inest(g: InestDAG, gg: GroupGraph, title: str = "inest") -> str:
    lines = [f"digraph {title} {{", "  node [shape=box];"]
    for v, nest in g.vertices.items():
        lines.append(f"  n{v} [label={_q(_nest_label(nest, gg))}];")
    for (a, b), terms in g.edges.items():
        style = ", style=dashed, color=red" if (a, b) in g.severed else ""
        lines.append(f"  n{a} -> n{b} [label={_q(', '.join(sorted(map(str, terms))))}{style}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def dot_reuse(plan: StoragePlan) -> str:
    lines = ["digraph reuse {", "  node [shape=ellipse];"]
    for key, rg in plan.reuse.items():
        name = plan.descriptors[key].identifier
        lines.append(f"  subgraph {_q('cluster_' + name)} {{ label={_q(name)};")
        ids = {n: f"{_q(name + str(n))}" for n in rg.nodes}
        for n in rg.nodes:
            lines.append(f"    {ids[n]} [label={_q(n)}];")
        on_path = set(zip(rg.path, rg.path[1:]))
        for a, b in sorted(rg.edges):
            attr = " [color=orange, penwidth=2]" if (a, b) in on_path else " [color=gray]"
            lines.append(f"    {ids[a]} -> {ids[b]}{attr};")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"

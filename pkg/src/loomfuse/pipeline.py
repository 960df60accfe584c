"""End-to-end driver: rule file to schedule, plus the analysis report."""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .codegen import ScheduleIR, lower
from .errors import SpecError
from .fusion import FusionResult, SplitCut, detect_concave_split, fuse_inest_dag
from .inference import DataflowDAG, InferenceDAG, infer_idag, rap_dual, var_name
from .nests import GroupGraph, InestDAG, build_inest_dag, group_callsites
from .rulespec import RuleSet, parse_spec, validate_rules
from .storage import StoragePlan, footprint_bytes, plan_storage

FIXTURES = ("copy", "laplace3", "laplace3_inplace", "laplace5", "normalization", "cosmo", "hydro")


def fixture_text(name: str) -> str:
    return (resources.files("loomfuse") / "fixtures" / f"{name}.lf").read_text()


def load_fixture(name: str) -> RuleSet:
    return parse_spec(fixture_text(name), name)


@dataclass
class Program:
    rs: RuleSet
    idag: InferenceDAG
    dag: DataflowDAG
    gg: GroupGraph
    inest: InestDAG
    fusion: FusionResult
    concave: list[SplitCut]
    plan: StoragePlan
    ir: ScheduleIR

    @property
    def nests(self) -> int:
        return len(self.fusion.dag.vertices)


def compile_rules(rs: RuleSet, vector_length: int | None = None, contraction: bool = True,
                  check: bool = False) -> Program:
    diags = validate_rules(rs)
    if diags:
        raise SpecError("invalid rule file:\n" + "\n".join(f"  {d}" for d in diags), diags)
    idag = infer_idag(rs)
    dag = rap_dual(idag)
    gg = GroupGraph(dag, group_callsites(dag))
    inest = build_inest_dag(dag, gg)
    concave = detect_concave_split(inest, gg)
    fusion = fuse_inest_dag(inest, gg, check=check)
    plan = plan_storage(gg, fusion.dag, vector_length, contraction)
    ir = lower(gg, fusion.dag, plan)
    return Program(rs, idag, dag, gg, inest, fusion, concave, plan, ir)


def compile_spec(source, name: str | None = None, **kw) -> Program:
    """Compile rule-file text or a path."""
    if isinstance(source, Path):
        return compile_rules(parse_spec(source.read_text(), name or source.stem), **kw)
    return compile_rules(parse_spec(source, name), **kw)


def report_pipeline(p: Program) -> dict:
    gg = p.gg
    splits = []
    for cut in p.fusion.splits:
        edges = sorted(f"{_gname(p, a)} -> {_gname(p, b)}" for a, b in cut.crossing)
        splits.append({"edges": edges, "reason": cut.reason})
    storage = []
    for sd in p.plan.descriptors.values():
        storage.append({
            "identifier": sd.identifier,
            "variables": [var_name(v) for v in sd.vars],
            "kind": sd.kind,
            "region": str(sd.enclosing),
            "scheme": str(sd.scheme),
            "candidate": str(sd.candidate),
            "extents": list(sd.extents),
            "elements": sd.elements(p.rs) if sd.kind in ("intermediate", "alias_temp") else 0,
            "depth": _depth(sd),
        })
    return {
        "name": p.rs.name,
        "raps": len(p.dag.raps),
        "groups": len(gg.groups),
        "nests": p.nests,
        "splits": splits,
        "concave": [c.reason for c in p.concave],
        "storage": storage,
        "footprint": str(p.plan.footprint),
        "footprint_full": str(p.plan.full_footprint),
        "intermediate_bytes": footprint_bytes(p.plan, p.rs),
    }


def _depth(sd) -> str:
    s = sd.scheme
    if sd.kind not in ("intermediate", "alias_temp"):
        return ""
    if s.kind == "outer_rotate":
        return f"{s.rows} rows"
    if s.kind == "inner_circular":
        return f"{s.span}"
    if s.kind == "vector_expanded":
        return f"{s.span} (+{s.vl} for vectors)"
    return ""


def _gname(p: Program, gid: int) -> str:
    grp = p.gg.group(gid)
    if grp.kind == "kernel":
        return grp.name
    rap = p.dag.rap(grp.members[0])
    return f"{grp.kind} {var_name((rap.out_terms or rap.in_terms)[0].var)}"


def format_report(rep: dict, storage: bool = True) -> str:
    lines = [f"{rep['name']}: raps: {rep['raps']}; groups: {rep['groups']}",
             f"nests: {rep['nests']}; splits: {len(rep['splits'])}"]
    for s in rep["splits"]:
        lines.append(f"  split: {'; '.join(s['edges'])}")
    for c in rep["concave"]:
        lines.append(f"  concave dataflow: {c}")
    if storage:
        rows = [("identifier", "kind", "region", "scheme", "extents", "elements")]
        for s in rep["storage"]:
            scheme = s["scheme"]
            if s["kind"] == "view":
                scheme += f" (terminal; contractible as {s['candidate']})"
            rows.append((s["identifier"], s["kind"], s["region"], scheme,
                         "x".join(map(str, s["extents"])) or "scalar", str(s["elements"])))
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        for r in rows:
            lines.append("  " + "  ".join(x.ljust(w) for x, w in zip(r, widths)).rstrip())
        rolling = [f"{s['identifier']}: {s['depth']}" for s in rep["storage"] if s["depth"]]
        if rolling:
            lines.append("rolling buffers: " + ", ".join(rolling))
        lines.append(f"footprint: O({rep['footprint']})  (uncontracted: O({rep['footprint_full']}))")
        lines.append(f"intermediate bytes: {rep['intermediate_bytes']}")
    return "\n".join(lines)

import os
import shutil
import subprocess
from pathlib import Path

import pytest

from loomfuse.codegen import (Access, Assign, Call, For, ScheduleIR, dot_dataflow, dot_inest, dot_reuse, emit,
                              emit_source, function_name, row_slot)
from loomfuse.errors import LoweringError
from loomfuse.inference import DataflowDAG
from loomfuse.nests import is_perfect
from loomfuse.oracle import kernel_definitions_c
from loomfuse.pipeline import FIXTURES, compile_rules, load_fixture
from loomfuse.rulespec import RuleSet
from loomfuse.storage import ExternalInfo

GOLDEN = Path(__file__).parent / "golden"


def calls(ir):
    return [s for s in ir.walk() if isinstance(s, Call)]


def test_laplace_structure(programs):
    ir = programs["laplace5"].ir
    assert ir.nests == 1 and len(ir.body) == 1
    (call,) = calls(ir)
    k = call.kernel
    assert len([p for p in k.params if p in k.inputs]) == 5
    assert len([p for p in k.params if p in k.outputs]) == 1
    outer = ir.body[0]
    assert (outer.var, outer.start, outer.stop) == ("j", 1, 7)
    assert outer.body[0].var == "i" and outer.body[0].body == [call]
    assert call.guards == ()


def test_copy_is_one_assignment(programs):
    ir = programs["copy"].ir
    stmts = list(ir.walk())
    assert [type(s) for s in stmts] == [For, For, Assign]


def test_normalization_two_nests_share_norm(programs):
    p = programs["normalization"]
    ir = p.ir
    assert ir.nests == 2
    loops = [s for s in ir.body if isinstance(s, For)]
    assert len(loops) == 2
    norm = p.plan.by_name("norm_u")
    assert len(norm.enclosing.vertices) == 2
    src, _ = emit_source(ir)
    first_loop = src.index("for (int j")
    assert src.index("double norm_u[1];") < first_loop


def test_phase_fidelity(programs):
    for name, p in programs.items():
        nests = list(p.fusion.dag.vertices.values())
        if all(is_perfect(n) for n in nests):
            assert all(isinstance(s, For) for s in p.ir.body), name
            for top in p.ir.body:
                f = top
                while isinstance(f.body[0], For):
                    assert len(f.body) == 1, name
                    f = f.body[0]
    body = programs["normalization"].ir.body
    assert [type(s).__name__ for s in body] == ["Call", "For", "Call", "For"]
    assert body[0].kernel.name == "norm_init" and body[2].kernel.name == "norm_root"


def test_golden_laplace5(programs):
    src, hdr = emit_source(programs["laplace5"].ir)
    assert src == (GOLDEN / "laplace5.c").read_text()
    assert hdr == (GOLDEN / "laplace5.h").read_text()


def test_empty_program():
    rs = RuleSet([], [], [], ("i",), {"i": (0, 1, 1)}, name="empty")
    ir = ScheduleIR("empty", rs, [], [], [], None, 0, "empty")
    src, hdr = emit_source(ir)
    assert src.startswith("/* Generated by loomfuse from 'empty'. */")
    assert "void empty(void)" in src and "for" not in src
    assert dot_dataflow(DataflowDAG(rs, [], [])) == "digraph dataflow {\n  node [shape=box];\n}\n"


def test_cosmo_buffers_match_report(programs):
    p = programs["cosmo"]
    src, _ = emit_source(p.ir)
    assert "double flx_u[2];" in src
    assert "double *fly_u__r[2];" in src
    assert "double *lap_u__r[3];" in src
    assert p.plan.by_name("fly_u").scheme.rows == 2 and p.plan.by_name("lap_u").scheme.rows == 3


@pytest.mark.parametrize("name", FIXTURES)
def test_deterministic(name):
    a = emit_source(compile_rules(load_fixture(name)).ir)
    b = emit_source(compile_rules(load_fixture(name)).ir)
    assert a == b


def _bounds(stmts, env, out):
    for s in stmts:
        if isinstance(s, For):
            last = s.start + (s.stop - 1 - s.start) // s.step * s.step
            _bounds(s.body, {**env, s.var: (s.start, last)}, out)
            continue
        local = dict(env)
        for d, v in s.guards:
            lo, hi = local[d]
            local[d] = (max(lo, v), hi)
        if any(lo > hi for lo, hi in local.values()):
            continue
        accs = s.args if isinstance(s, Call) else (s.dst, s.src)
        for a in accs:
            out.append((a, {d: (local[d][0] + c, local[d][1] + c) for d, c in zip(a.dims, a.offsets)}))


@pytest.mark.parametrize("name", FIXTURES)
@pytest.mark.parametrize("vl", [1, 4])
def test_index_safety(name, vl):
    p = compile_rules(load_fixture(name), vector_length=vl)
    accesses = []
    _bounds(p.ir.body, {}, accesses)
    assert accesses
    for acc, box in accesses:
        st = p.ir.storage(acc.storage)
        if isinstance(st, ExternalInfo):
            for d in st.dims:
                assert st.lb[d] <= box[d][0] and box[d][1] < st.lb[d] + st.extent[d], (acc, box)
            continue
        lb = dict(zip(st.dims, st.lb))
        ext = dict(zip(st.dims, st.extents))
        s = st.scheme
        for d in st.dims:
            assert lb[d] <= box[d][0] and box[d][1] < lb[d] + ext[d], (acc, box)
        if s.kind == "outer_rotate":
            assert 0 <= row_slot(st, acc.offsets[acc.dims.index(s.dim)], p.rs) < s.rows


def test_function_name_avoids_kernels():
    rs = load_fixture("laplace5")
    assert function_name(rs) == "laplace5_fused"
    assert function_name(load_fixture("cosmo")) == "cosmo"
    assert function_name(rs, "3d-run") == "_3d_run"


def test_unknown_backend(programs):
    with pytest.raises(LoweringError):
        emit_source(programs["copy"].ir, "fortran")


def test_emit_writes_files(tmp_path, programs):
    paths = emit(programs["laplace5"].ir, tmp_path / "out")
    assert [p.name for p in paths] == ["laplace5.c", "laplace5.h"]
    assert not [p for p in (tmp_path / "out").iterdir() if p.suffix == ".tmp"]
    cxx = emit(programs["laplace5"].ir, tmp_path / "cxx", "cxx")
    assert cxx[0].suffix == ".cpp" and "<cstdlib>" in cxx[0].read_text()


def test_dot_outputs(programs):
    p = programs["laplace5"]
    text = dot_dataflow(p.dag)
    assert text.count("->") == 6 and text.count("[label=") == 7 + 6
    reuse = dot_reuse(p.plan)
    assert reuse.count("->") >= 4
    assert "digraph" in dot_inest(p.fusion.dag, p.gg, "fused")


def _compiler(name):
    env = os.environ.get("LOOMFUSE_CC") if name == "cc" else os.environ.get("LOOMFUSE_CXX")
    return env or shutil.which("gcc" if name == "cc" else "g++")


@pytest.mark.parametrize("name", FIXTURES)
@pytest.mark.parametrize("backend", ["c99", "cxx"])
def test_compiles_cleanly(tmp_path, name, backend):
    cc = _compiler("cc" if backend == "c99" else "cxx")
    if not cc:
        pytest.skip("no C compiler configured")
    p = compile_rules(load_fixture(name))
    src, _ = emit(p.ir, tmp_path, backend)
    defs = tmp_path / ("kernels.c" if backend == "c99" else "kernels.cpp")
    defs.write_text(f'#include "{p.ir.name}.h"\n' + kernel_definitions_c(p.rs))
    std = ["-std=c99"] if backend == "c99" else ["-std=c++11"]
    for k, unit in enumerate((src, defs)):
        res = subprocess.run([cc, *std, "-Wall", "-Werror", "-I", str(tmp_path), "-c", str(unit),
                              "-o", str(tmp_path / f"u{k}.o")], capture_output=True, text=True)
        assert res.returncode == 0, res.stderr

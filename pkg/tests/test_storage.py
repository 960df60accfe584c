import itertools

import pytest
from hypothesis import given, settings, strategies as st

from loomfuse.errors import LoweringError
from loomfuse.oracle import make_inputs, run_schedule
from loomfuse.pipeline import FIXTURES, compile_rules, compile_spec, load_fixture
from loomfuse.randspec import random_spec
from loomfuse.rulespec import parse_spec
from loomfuse.storage import (FULL, Scheme, alias_chain, buffer_extents, contract, footprint_bytes, reuse_graph,
                              vector_expand_scheme)

from helpers import LAPLACE3, chain, independent_pair


def test_extents():
    rs = load_fixture("laplace5")
    n = rs.trips("i")
    stencil = [(0, 0), (0, 1), (0, -1), (1, 0), (-1, 0)]
    lbs, exts = buffer_extents(rs, ("j", "i"), stencil)
    assert exts == (n + 2, n + 2) and lbs == (0, 0)
    assert buffer_extents(rs, ("j", "i"), [(0, 0)])[1] == (rs.trips("j"), n)


def test_extent_matches_touched_cells():
    rs = parse_spec(LAPLACE3.replace("i: [1, 11]", "i: [0, 10]"))
    offs = [(-1,), (0,), (2,)]
    touched = {i + o for i in range(0, 10) for (o,) in offs}
    lbs, exts = buffer_extents(rs, ("i",), offs)
    assert exts == (len(touched),) == (13,)
    assert lbs == (min(touched),)


def test_reuse_paths():
    five = [(0, 0), (0, 1), (0, -1), (1, 0), (-1, 0)]
    g = reuse_graph("cell", five, ("j", "i"), ("j", "i"))
    assert g.path == ((1, 0), (0, 1), (0, 0), (0, -1), (-1, 0))
    assert reuse_graph("u", [(1,), (0,), (-1,)], ("i",), ("i",)).path == ((1,), (0,), (-1,))
    assert reuse_graph("u", [(0,)], ("i",), ("i",)).path == ((0,),)


@settings(max_examples=100, deadline=None)
@given(st.sets(st.tuples(st.integers(-3, 3), st.integers(-3, 3)), min_size=1, max_size=9),
       st.sampled_from([("j", "i"), ("i", "j")]))
def test_reuse_is_total_order(refs, order):
    g = reuse_graph("q", refs, ("j", "i"), order)
    n = len(refs)
    assert len(g.edges) == n * (n - 1) // 2
    assert sorted(g.path) == sorted(refs)
    assert all((a, b) in g.edges for a, b in zip(g.path, g.path[1:]))


def test_fixture_schemes(programs):
    lap3 = programs["laplace3"].plan.by_name("lap_u")
    assert lap3.scheme == Scheme("inner_circular", span=3, dim="i")
    cell = programs["laplace5"].plan.by_name("g_cell")
    assert cell.kind == "view" and cell.scheme == FULL
    assert cell.candidate.kind == "outer_rotate" and cell.candidate.rows == 3 and cell.candidate.dim == "j"
    cosmo = programs["cosmo"].plan
    assert cosmo.by_name("flx_u").scheme.size == 2
    assert cosmo.by_name("fly_u").scheme.rows == 2
    assert cosmo.by_name("lap_u").scheme.rows == 3
    assert cosmo.footprint.terms == {("k", "j", "i"): 2, ("i",): 5, (): 2}
    assert str(cosmo.footprint) == "2*N_k*N_j*N_i + 5*N_i + 2"


def test_regions(programs):
    cosmo = programs["cosmo"].plan
    assert cosmo.by_name("lap_u").enclosing.loops == ("k",)
    norm = programs["normalization"].plan
    assert len(norm.by_name("norm_u").enclosing.vertices) == 2
    assert len(norm.by_name("nsum_u").enclosing.vertices) == 1
    lap = programs["laplace3"].plan.by_name("lap_u").enclosing
    assert len(lap.vertices) == 1


def test_contract_rules():
    rs = load_fixture("cosmo")
    dims = ("k", "j", "i")
    same = dict.fromkeys(dims, True)
    assert contract(dims, [(0, 0, 0), (0, 0, 1)], same, rs).kind == "inner_circular"
    assert contract(dims, [(0, 1, 0), (0, 0, 0), (0, -1, 0)], same, rs).rows == 3
    assert contract(dims, [(1, 0, 0), (0, 0, 0)], same, rs).kind == "outer_rotate"
    assert contract(dims, [(1, 1, 0), (0, 0, 0)], same, rs) == FULL
    assert contract(dims, [(0, 0, 0)], {**same, "k": False}, rs) == FULL
    assert contract((), [()], {}, rs) == FULL


def _simulate(span, vl, steps=32):
    """Rolling buffer of the expanded size vs an unlimited array.

    A writer appends one cell per iteration and readers look span cells back.
    The buffer moves its newest span cells down by vl when the next write would
    run off the end, which happens once per vl iterations.
    """
    size = vector_expand_scheme(Scheme("inner_circular", span=span, dim="i"), vl).size
    buf = [None] * size
    base = shifts = 0
    truth = {}
    for q in range(steps * vl):
        if q - base >= size:
            buf[:size - vl] = buf[vl:]
            base += vl
            shifts += 1
        truth[q] = 1000 + q
        buf[q - base] = truth[q]
        for cell in range(max(0, q - span + 1), q + 1):
            if not 0 <= cell - base < size or buf[cell - base] != truth[cell]:
                return size, False, shifts
    return size, True, shifts


def test_vector_expansion_sizes():
    assert _simulate(3, 4)[:2] == (7, True)
    assert _simulate(5, 8)[:2] == (13, True)
    assert vector_expand_scheme(Scheme("inner_circular", span=3, dim="i"), 1).size == 3
    assert vector_expand_scheme(FULL, 4) == FULL


@pytest.mark.parametrize("span,vl", list(itertools.product([1, 2, 3, 5], [2, 4, 8])))
def test_expanded_buffer_suffices(span, vl):
    size, ok, shifts = _simulate(span, vl)
    assert ok and size == span + vl
    assert shifts == (32 * vl - size + vl - 1) // vl  # one move per vl iterations


def test_alias_chain_in_place():
    p = compile_rules(load_fixture("laplace3_inplace"))
    assert alias_chain(p.rs, p.dag) == {("g_in", "g_out"): frozenset({(0,), (-1,)})}
    # trip-by-trip oracle: a read is clobbered when its cell was written at or before its trip
    lo, hi, _ = p.rs.ranges["i"]
    written, clobbered = set(), set()
    for t in range(lo, hi):
        for o in (-1, 0, 1):
            if t + o in written or t + o == t:
                clobbered.add((o,))
        written.add(t)
    assert clobbered == {(0,), (-1,)}
    assert p.plan.by_name("u__tmp").alias_copies == clobbered


def test_alias_chain_empty_cases(programs):
    p = programs["laplace3"]
    assert alias_chain(p.rs, p.dag) == {} and p.plan.alias_plans == []
    text = independent_pair().replace("i: [1, 5]", "i: [1, 5]\n  aliases: [[g_b, g_oa]]")
    text = text.replace("b[j?][i?-1]", "b[j?][i?+1]")
    q = compile_spec(text)
    assert alias_chain(q.rs, q.dag) == {} and q.plan.alias_plans == []


def test_unsafe_alias_rejected():
    text = independent_pair().replace("i: [1, 5]", "i: [1, 5]\n  aliases: [[g_b, g_oa]]")
    with pytest.raises(LoweringError, match="overwrite"):
        compile_spec(text)


def test_footprint_monotone_fixtures(programs):
    for p in programs.values():
        full = compile_rules(p.rs, contraction=False)
        assert footprint_bytes(p.plan, p.rs) <= footprint_bytes(full.plan, p.rs)
        for key, sd in p.plan.descriptors.items():
            other = full.plan.descriptors[key]
            assert sd.elements(p.rs) <= other.elements(p.rs)
            if sd.scheme == FULL:
                assert sd.elements(p.rs) == other.elements(p.rs)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 1_000_000))
def test_footprint_monotone_random(seed):
    rs = parse_spec(random_spec(seed))
    a, b = compile_rules(rs), compile_rules(rs, contraction=False)
    assert footprint_bytes(a.plan, rs) <= footprint_bytes(b.plan, rs)
    for key, sd in a.plan.descriptors.items():
        assert sd.elements(rs) <= b.plan.descriptors[key].elements(rs)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.lists(st.integers(-2, 2), min_size=1, max_size=4, unique=True),
       st.integers(1, 16), st.sampled_from([1, 4, 8]))
def test_contraction_matches_unbounded_arrays(n, offsets, trips, vl):
    rs = parse_spec(chain(n, tuple(offsets), trips))
    rolled = compile_rules(rs, vector_length=vl)
    flat = compile_rules(rs, contraction=False)
    inputs = make_inputs(flat.ir.externals, "hash", trips, rs)
    got = run_schedule(rolled.ir, inputs, "hash")
    want = run_schedule(flat.ir, inputs, "hash")
    assert got.keys() == want.keys()
    assert all((got[k] == want[k]).all() for k in got)


@pytest.mark.parametrize("size", [1, 5, 16])
def test_contraction_2d_up_to_16(size):
    for rs in (parse_spec(chain(3, (-1, 0, 1))), load_fixture("laplace5"), load_fixture("cosmo")):
        rs.ranges = {d: (lo, lo + size * st, st) for d, (lo, hi, st) in rs.ranges.items()}
        rolled, flat = compile_rules(rs), compile_rules(rs, contraction=False)
        inputs = make_inputs(flat.ir.externals, "hash", size, rs)
        got, want = run_schedule(rolled.ir, inputs, "hash"), run_schedule(flat.ir, inputs, "hash")
        assert all((got[k] == want[k]).all() for k in want)

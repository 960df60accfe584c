import pytest
import yaml
from hypothesis import given, settings, strategies as st

from loomfuse.errors import SpecError
from loomfuse.pipeline import FIXTURES, fixture_text
from loomfuse.randspec import random_spec
from loomfuse.rulespec import format_spec, parse_spec, parse_term, validate_rules

from helpers import LAPLACE3


def test_laplace5_listing():
    rs = parse_spec(fixture_text("laplace5"))
    assert [k.name for k in rs.kernels] == ["laplace"]
    k = rs.kernels[0]
    assert len(k.inputs) == 5 and len(k.outputs) == 1
    assert [a.buffer.name for a in rs.axioms] == ["g_cell"]
    assert len(rs.goals) == 1
    assert rs.loop_order == ("j", "i")
    assert k.params == ("n", "e", "s", "w", "c", "o")
    assert validate_rules(rs) == []


def test_copy_has_no_kernels():
    rs = parse_spec(fixture_text("copy"))
    assert rs.kernels == []
    assert rs.axioms[0].term.identifier == rs.goals[0].term.identifier == "a"


def test_normalization_kernels():
    rs = parse_spec(fixture_text("normalization"))
    assert len(rs.kernels) == 5
    assert sum(k.associative for k in rs.kernels) == 1


def test_term_syntax():
    t = parse_term("laplace(q?[j?-1][i?])")
    assert t.identifier == "q" and t.ident_free and t.tags == ("laplace",)
    assert [(s.iter_var, s.displacement) for s in t.subscripts] == [("j", -1), ("i", 0)]
    assert str(t) == "laplace(q?[j?-1][i?])"


@pytest.mark.parametrize("bad", ["q[i*2]", "q[i+j]", "q[", "q[2]"])
def test_non_affine_subscripts_rejected(bad):
    with pytest.raises(SpecError):
        parse_term(bad)


def _mutate(text, old, new):
    assert old in text
    return text.replace(old, new, 1)


@pytest.mark.parametrize("old,new,needle", [
    ("i?-1]", "k?-1]", "k"),
    ("      c : q?[i?]", "      c : q?[i?][i?]", "repeated"),
    ("  ranges:\n    i: [1, 11]", "  ranges:\n    i: [1, 11, 0]", "stride"),
])
def test_parse_errors(old, new, needle):
    with pytest.raises(SpecError) as err:
        parse_spec(_mutate(LAPLACE3, old, new))
    assert needle in str(err.value)


def test_rank_mismatch():
    text = fixture_text("cosmo").replace(
        "double g_u[k?][j?][i?] => u[k?][j?][i?]",
        "double g_u[k?][j?][i?] => u[k?][j?][i?]\n    double g_v[k?][j?] => u[k?][j?]")
    with pytest.raises(SpecError, match="rank mismatch"):
        parse_spec(text)


def test_syntax_error_has_position():
    with pytest.raises(SpecError) as err:
        parse_spec("kernels: [\n  oops")
    assert err.value.diagnostics and err.value.diagnostics[0].line is not None


def test_duplicate_kernel():
    text = LAPLACE3.replace("globals:", """  lap:
    declaration: void lap3(double c, double *o);
    inputs: |
      c : q?[i?]
    outputs: |
      o : lap(q?[i?])
globals:""")
    with pytest.raises(SpecError, match="duplicate"):
        parse_spec(text)


def test_multiple_producers():
    text = LAPLACE3.replace("globals:", """  lap2:
    declaration: void lap2(double c, double *o);
    inputs: |
      c : q?[i?]
    outputs: |
      o : lap(q?[i?])
globals:""")
    diags = validate_rules(parse_spec(text))
    assert len(diags) == 1 and "multiple producers" in diags[0].message


def test_unbound_output_variable():
    text = LAPLACE3.replace("      o : lap(q?[i?])", "      o : lap(q?[i?][k?])")
    text = text.replace("loop-order: [i]", "loop-order: [i]\n  vector-length: 1")
    with pytest.raises(SpecError):
        parse_spec(text)  # k is not an iteration variable at all
    text = LAPLACE3.replace("      o : lap(q?[i?])", "      o : lap(r?[i?])")
    diags = validate_rules(parse_spec(text))
    assert diags and all("unbound" in d.message for d in diags)
    assert any("'r?'" in d.message for d in diags)


@pytest.mark.parametrize("name", FIXTURES)
def test_round_trip_fixtures(name):
    rs = parse_spec(fixture_text(name), name)
    assert parse_spec(format_spec(rs)) == rs


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_round_trip_random(seed):
    rs = parse_spec(random_spec(seed))
    assert parse_spec(format_spec(rs)) == rs


@settings(max_examples=80, deadline=None)
@given(st.integers(0, len(LAPLACE3) - 1), st.sampled_from(["", "[", "]", "?", ":", "\n", "x"]))
def test_corrupt_input_never_crashes(pos, junk):
    text = LAPLACE3[:pos] + junk + LAPLACE3[pos + 1:]
    try:
        rs = parse_spec(text)
    except SpecError as e:
        assert e.diagnostics
        assert all(d.line is not None for d in e.diagnostics)
    else:
        for d in validate_rules(rs):
            assert d.line is not None


def test_yaml_layout_is_plain_yaml():
    doc = yaml.safe_load(fixture_text("cosmo"))
    assert set(doc) == {"kernels", "globals", "config"}

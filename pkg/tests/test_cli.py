import json
import subprocess
import sys

import pytest

from loomfuse.cli import STAGES, dot_for, main
from loomfuse.codegen import emit_source
from loomfuse.pipeline import FIXTURES, compile_rules, fixture_text, load_fixture


@pytest.fixture
def spec(tmp_path):
    def write(name, text=None):
        path = tmp_path / f"{name}.lf"
        path.write_text(text if text is not None else fixture_text(name))
        return path
    return write


def test_generate(spec, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["generate", str(spec("laplace5")), "--backend", "c99", "-o", str(out)]) == 0
    assert (out / "laplace5.c").exists() and (out / "laplace5.h").exists()
    assert "laplace5.c" in capsys.readouterr().out


def test_dump_dataflow(spec, capsys):
    assert main(["dump", str(spec("laplace5")), "--dump", "dataflow"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("digraph dataflow {") and text.count("->") == 6


def test_verify(spec, capsys):
    assert main(["verify", str(spec("normalization")), "--trials", "50"]) == 0
    assert capsys.readouterr().out.startswith("ok: 50 trial(s)")
    assert main(["verify", str(spec("cosmo")), "--mode", "expr", "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["ok"] is True


def test_report(spec, capsys):
    assert main(["report", str(spec("normalization")), "--explain-splits"]) == 0
    text = capsys.readouterr().out
    assert "nests: 2; splits: 1" in text
    assert "norm_root -> normalize" in text
    assert main(["report", str(spec("laplace5"))]) == 0
    assert "nests: 1; splits: 0" in capsys.readouterr().out
    assert main(["report", str(spec("cosmo"))]) == 0
    text = capsys.readouterr().out
    assert "fly_u: 2 rows" in text and "lap_u: 3 rows" in text and "flx_u: 2" in text
    assert "footprint: O(2*N_k*N_j*N_i + 5*N_i + 2)" in text


def test_report_json_is_reproducible(spec, capsys):
    path = str(spec("hydro"))
    main(["report", path, "--json"])
    first = capsys.readouterr().out
    main(["report", path, "--json"])
    assert capsys.readouterr().out == first
    assert json.loads(first)["nests"] == 1


def test_errors(spec, tmp_path, capsys):
    assert main(["report", str(tmp_path / "missing.lf")]) == 1
    bad = fixture_text("laplace3").replace("w : q?[i?-1]", "w : q?[k?-1]")
    assert main(["report", str(spec("bad", bad))]) == 1
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["verify", str(spec("copy")), "--trials", "0"])


def test_mismatch_exit_code(spec, monkeypatch):
    import loomfuse.cli as cli
    from loomfuse.oracle import CheckReport, Mismatch

    def failing(*a, **k):
        return CheckReport("hash", 1, 0, 0.0, [Mismatch(0, "g_out", (1,), 1, 2)])

    monkeypatch.setattr(cli, "differential_check", failing)
    assert main(["verify", str(spec("copy"))]) == 2


@pytest.mark.parametrize("name", FIXTURES)
def test_dump_is_pure(name):
    plain = emit_source(compile_rules(load_fixture(name)).ir)
    p = compile_rules(load_fixture(name))
    dots = [dot_for(p, s) for s in STAGES]
    assert emit_source(p.ir) == plain
    assert [dot_for(p, s) for s in STAGES] == dots


def test_generate_with_dumps_matches_plain(spec, tmp_path, capsys):
    path = str(spec("cosmo"))
    main(["generate", path, "-o", str(tmp_path / "a")])
    main(["generate", path, "-o", str(tmp_path / "b"), "--dump", "fused", "--dump", "reuse",
          "--report", "storage"])
    assert (tmp_path / "a" / "cosmo.c").read_text() == (tmp_path / "b" / "cosmo.c").read_text()
    assert (tmp_path / "b" / "cosmo.fused.dot").exists()


def test_console_entry_point(spec):
    res = subprocess.run([sys.executable, "-m", "loomfuse.cli", "report", str(spec("copy"))],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "nests: 1" in res.stdout

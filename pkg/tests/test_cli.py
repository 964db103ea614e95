import json
import subprocess
import sys

import numpy as np
import pytest

from tsds.cli import run
from tsds.store import read_binary


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert run(["synth", "--dim", "8", "--components", "3", "--per-component", "300",
                "--normalize", "--seed", "5", "--out", str(d / "c.tsem"),
                "--queries-out", str(d / "q.tsem"), "--queries", "12"]) == 0
    return d


def lines(path):
    return [json.loads(x) for x in open(path).read().splitlines()]


def select_args(corpus, out, *extra):
    return ["select", "--candidates", str(corpus / "c.tsem"), "--queries", str(corpus / "q.tsem"),
            "--prefetch", "200", "--kde-neighbors", "200", "--out", str(out), *extra]


class TestSelect:
    def test_typical_invocation(self, corpus, tmp_path):
        out = tmp_path / "p.jsonl"
        code = run(["select", "--candidates", str(corpus / "c.tsem"), "--queries",
                    str(corpus / "q.tsem"), "--regularizer", "kde", "--alpha", "0.6", "--c", "5",
                    "--h", "0.1", "--prefetch", "800", "--kde-neighbors", "500", "--out", str(out)])
        assert code == 0
        recs = lines(out)
        head = recs[0]
        for key in ("M", "N", "regularizer", "alpha", "c", "h", "s_star", "truncated",
                    "assumption_violated", "config"):
            assert key in head
        assert head["config"]["seed"] == 0
        probs = [r["p"] for r in recs[1:]]
        assert probs == sorted(probs, reverse=True)
        assert abs(sum(probs) - 1) < 1e-9

    def test_alpha_out_of_range(self, corpus, tmp_path, capsys):
        assert run(select_args(corpus, tmp_path / "p.jsonl", "--alpha", "1.5")) == 1
        err = capsys.readouterr().err
        assert "--alpha" in err and "[0, 1]" in err
        assert not (tmp_path / "p.jsonl").exists()

    def test_unknown_flag(self, corpus, tmp_path):
        assert run(select_args(corpus, tmp_path / "p.jsonl", "--bogus", "1")) == 1

    def test_missing_file(self, tmp_path):
        assert run(["select", "--candidates", str(tmp_path / "nope.tsem"), "--queries",
                    str(tmp_path / "nope.tsem")]) == 1

    def test_runtime_failure(self, corpus, tmp_path, capsys):
        bad = tmp_path / "bad.tsem"
        bad.write_bytes(b"XXXX" + bytes(40))
        code = run(["select", "--candidates", str(bad), "--queries", str(corpus / "q.tsem")])
        assert code == 2 and "bad magic" in capsys.readouterr().err

    def test_prefetch_above_count(self, corpus, tmp_path):
        assert run(select_args(corpus, tmp_path / "p.jsonl", "--prefetch", "5000")) == 1

    def test_default_h_follows_normalization(self, corpus, tmp_path):
        run(select_args(corpus, tmp_path / "p.jsonl"))
        assert lines(tmp_path / "p.jsonl")[0]["h"] == 0.1

    def test_deterministic_and_thread_independent(self, corpus, tmp_path):
        a, b, c = tmp_path / "a.jsonl", tmp_path / "b.jsonl", tmp_path / "c.jsonl"
        args = ("--mode", "two_stage", "--partitions", "6", "--coarse-fetch", "300", "--seed", "3")
        assert run(select_args(corpus, a, *args)) == 0
        assert run(select_args(corpus, b, *args)) == 0
        assert run(select_args(corpus, c, *args, "--threads", "3")) == 0
        assert a.read_bytes() == b.read_bytes()
        # the thread count is not part of the resolved config, so bytes match too
        assert a.read_bytes() == c.read_bytes()

    def test_prebuilt_index(self, corpus, tmp_path):
        idx = tmp_path / "i.tsix"
        assert run(["index", "--candidates", str(corpus / "c.tsem"), "--mode", "two_stage",
                    "--partitions", "6", "--coarse-fetch", "300", "--out", str(idx)]) == 0
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        run(select_args(corpus, a, "--index", str(idx)))
        run(select_args(corpus, b, "--mode", "two_stage", "--partitions", "6",
                        "--coarse-fetch", "300"))
        assert lines(a)[1:] == lines(b)[1:]

    def test_densities_and_figure(self, corpus, tmp_path):
        rho, fig = tmp_path / "rho.jsonl", tmp_path / "p.png"
        assert run(select_args(corpus, tmp_path / "p.jsonl", "--densities-out", str(rho),
                               "--figure", str(fig))) == 0
        recs = lines(rho)
        assert recs and all(r["rho"] >= 1 for r in recs)
        assert fig.read_bytes()[:4] == b"\x89PNG"

    @pytest.mark.parametrize("reg", ["uniform", "tv"])
    def test_other_regularizers(self, corpus, tmp_path, reg):
        out = tmp_path / "p.jsonl"
        assert run(select_args(corpus, out, "--regularizer", reg)) == 0
        head = lines(out)[0]
        assert head["regularizer"] == reg
        assert ("K" in head) == (reg == "uniform")


class TestSample:
    @pytest.fixture
    def assignment(self, corpus, tmp_path):
        out = tmp_path / "p.jsonl"
        run(select_args(corpus, out))
        return out

    def test_records(self, assignment, tmp_path):
        out = tmp_path / "s.jsonl"
        assert run(["sample", "--assignment", str(assignment), "--n", "50", "--epochs", "2",
                    "--seed", "4", "--out", str(out)]) == 0
        recs = lines(out)
        assert recs[0]["config"]["seed"] == 4
        draws = recs[1:]
        assert len(draws) == 100
        assert [r["ordinal"] for r in draws[:50]] == list(range(50))
        support = {r["id"] for r in lines(assignment)[1:]}
        assert {r["id"] for r in draws} <= support

    def test_deterministic(self, assignment, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for out in (a, b):
            run(["sample", "--assignment", str(assignment), "--n", "30", "--epochs", "3",
                 "--seed", "9", "--out", str(out)])
        assert a.read_bytes() == b.read_bytes()

    def test_compact_fixed(self, assignment, tmp_path):
        out = tmp_path / "s.jsonl"
        run(["sample", "--assignment", str(assignment), "--n", "10", "--epochs", "3", "--fixed",
             "--compact", "--out", str(out)])
        recs = lines(out)[1:]
        assert len(recs) == 3 and recs[0]["ids"] == recs[1]["ids"] == recs[2]["ids"]

    def test_bad_n(self, assignment):
        assert run(["sample", "--assignment", str(assignment), "--n", "0"]) == 1


class TestVerify:
    def test_stream(self, tmp_path):
        out, fig = tmp_path / "v.jsonl", tmp_path / "v.png"
        code = run(["verify", "--m", "2", "--n", "6", "--trials", "50", "--regularizer", "tv",
                    "--out", str(out), "--figure", str(fig)])
        assert code == 0
        recs = lines(out)
        assert recs[0]["config"]["trials"] == 50
        reports = recs[1:-1]
        assert len(reports) == 50
        for r in reports:
            assert {"closed_form_objective", "oracle_objective", "gap", "mc_violations",
                    "pass"} <= set(r)
            assert r["pass"]
        assert recs[-1]["summary"]["failures"] == 0
        assert fig.exists()

    def test_cap(self):
        assert run(["verify", "--m", "20", "--n", "20", "--trials", "1"]) == 1


class TestOtherCommands:
    def test_ingest(self, tmp_path):
        src = tmp_path / "e.jsonl"
        src.write_text('{"id": 5, "vec": [3, 4]}\n{"id": 6, "vec": [0, 2]}\n')
        assert run(["ingest", "--input", str(src), "--out", str(tmp_path / "e.tsem"),
                    "--normalize"]) == 0
        es = read_binary(tmp_path / "e.tsem")
        assert es.normalized and es.ids.tolist() == [5, 6]
        np.testing.assert_allclose(es.vectors[0], [0.6, 0.8], atol=1e-7)

    def test_ingest_bad_dimension(self, tmp_path, capsys):
        src = tmp_path / "e.jsonl"
        src.write_text('{"id": 5, "vec": [3, 4]}\n{"id": 6, "vec": [0, 2, 1]}\n')
        assert run(["ingest", "--input", str(src), "--out", str(tmp_path / "e.tsem")]) == 2
        assert "line 2" in capsys.readouterr().err

    def test_synth_deterministic(self, tmp_path):
        for name in ("a", "b"):
            run(["synth", "--dim", "4", "--per-component", "10", "--seed", "2",
                 "--out", str(tmp_path / f"{name}.tsem")])
        assert (tmp_path / "a.tsem").read_bytes() == (tmp_path / "b.tsem").read_bytes()

    def test_bench_dup_json_and_csv(self, corpus, tmp_path):
        base = ["bench-dup", "--candidates", str(corpus / "c.tsem"), "--queries",
                str(corpus / "q.tsem"), "--regularizers", "uniform,kde", "--prefetch", "300",
                "--kde-neighbors", "300", "--fraction", "0.01", "--factor", "5"]
        assert run(base + ["--out", str(tmp_path / "b.json"), "--figure", str(tmp_path / "b.png")]) == 0
        doc = json.loads((tmp_path / "b.json").read_text())
        assert [r["regularizer"] for r in doc["reports"]] == ["uniform", "kde"]
        assert doc["config"]["factor"] == 5
        assert run(base + ["--csv", "--out", str(tmp_path / "b.csv")]) == 0
        rows = (tmp_path / "b.csv").read_text().splitlines()
        assert rows[0].startswith("# ") and rows[1].startswith("regularizer,")
        assert len(rows) == 4

    def test_bench_dup_bad_regularizer(self, corpus):
        assert run(["bench-dup", "--candidates", str(corpus / "c.tsem"), "--queries",
                    str(corpus / "q.tsem"), "--regularizers", "uniform,l2"]) == 1

    def test_log_env(self, corpus, tmp_path):
        env = {"TSDS_LOG": "INFO", "PATH": "/usr/bin:/bin"}
        res = subprocess.run([sys.executable, "-m", "tsds", *select_args(corpus, tmp_path / "p.jsonl")],
                             capture_output=True, text=True, env=env)
        assert res.returncode == 0
        assert "INFO" in res.stderr

    def test_warnings_do_not_change_exit_code(self, corpus, tmp_path, capsys):
        # alpha=0 forces the neighborhood to the prefetch limit
        code = run(select_args(corpus, tmp_path / "p.jsonl", "--regularizer", "uniform",
                               "--alpha", "0", "--log-level", "WARNING"))
        assert code == 0
        assert "prefetch" in capsys.readouterr().err

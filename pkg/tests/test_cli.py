import csv
import json
import os
import subprocess
import sys

import pytest

from saltformer.cli import build_parser, resolve, run
from saltformer.jets import Jet, read_jets, write_jets


def files_under(path):
    return sorted(str(p.relative_to(path)) for p in path.rglob("*") if p.is_file())


@pytest.fixture
def trained(tmp_path_factory):
    """A tiny trained checkpoint plus its data file."""
    root = tmp_path_factory.mktemp("trained")
    assert run(["gen-data", "--out", str(root / "data"), "--n-jets", "120", "--seed", "3"]) == 0
    assert run(["train", "--out", str(root / "run"), "--n", "16", "--n-jets", "150", "--phases", "32:2"]) == 0
    return root


class TestFlops:
    def test_prints_reference_total(self, capsys):
        assert run(["flops", "--variant", "salt", "--n", "150", "--p", "4", "--filters", "1,3,5"]) == 0
        assert capsys.readouterr().out.splitlines()[0] == "739,918"

    def test_writes_cost_and_scaling(self, tmp_path, capsys):
        assert run(["flops", "--n", "150", "--out", str(tmp_path), "--n-list", "150,16,32"]) == 0
        cost = json.loads((tmp_path / "cost.json").read_text())
        assert cost["flops"] == 739_918
        rows = list(csv.reader((tmp_path / "flops_scaling.csv").open()))
        assert [r[0] for r in rows[1:]] == ["16", "32", "150"]
        assert files_under(tmp_path) == ["cost.json", "flops_scaling.csv"]

    def test_ablation_flags(self, capsys):
        assert run(["flops", "--n", "150", "--no-conv"]) == 0
        assert capsys.readouterr().out.splitlines()[0] == "552,718"


class TestSort:
    def test_singleton_unchanged(self, tmp_path):
        src = tmp_path / "one.jsonl"
        write_jets(src, [Jet([[5.0, 0.1, -0.2]], label=1)])
        assert run(["sort", "--key", "kt", "--data", str(src), "--out", str(tmp_path / "o")]) == 0
        assert (tmp_path / "o" / "sorted.jsonl").read_bytes() == src.read_bytes()

    def test_pad_and_sort(self, tmp_path):
        src = tmp_path / "jets.jsonl"
        write_jets(src, [Jet([[2.0, 0.1, 0.0], [9.0, 0.0, 0.01], [4.0, 0.3, 0.0]])])
        assert run(["sort", "--sort", "pt", "--pad", "--n", "5", "--data", str(src), "--out", str(tmp_path / "o")]) == 0
        (jet,) = read_jets(tmp_path / "o" / "sorted.jsonl")
        assert jet.particles[:, 0].tolist() == [9.0, 4.0, 2.0, 0.0, 0.0]


class TestPipeline:
    def test_gen_data_idempotent(self, tmp_path):
        for name in ("a", "b"):
            assert run(["gen-data", "--out", str(tmp_path / name), "--n-jets", "40", "--seed", "2"]) == 0
        assert (tmp_path / "a" / "jets.jsonl").read_bytes() == (tmp_path / "b" / "jets.jsonl").read_bytes()

    def test_gen_data_classes(self, tmp_path):
        assert run(["gen-data", "--out", str(tmp_path), "--n-jets", "30", "--classes", "3"]) == 0
        assert sorted({j.label for j in read_jets(tmp_path / "jets.jsonl")}) == [0, 1, 2]

    def test_train_with_config_is_deterministic(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n": 16, "n_jets": 120, "phases": [[32, 2]], "filters": [1, 3]}))
        for name in ("a", "b"):
            assert run(["train", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()
        summary = json.loads((tmp_path / "a" / "summary.json").read_text())
        assert summary["config"]["n"] == 16 and summary["config"]["filters"] == [1, 3]
        assert files_under(tmp_path / "a") == ["history.csv", "model.ckpt", "summary.json"]

    def test_eval_outputs(self, trained, tmp_path):
        ckpt = str(trained / "run" / "model.ckpt")
        data = str(trained / "data" / "jets.jsonl")
        assert run(["eval", "--checkpoint", ckpt, "--data", data, "--out", str(tmp_path / "e")]) == 0
        report = json.loads((tmp_path / "e" / "report.json").read_text())
        assert 0 <= report["accuracy"] <= 1 and report["n"] == 120
        with (tmp_path / "e" / "scores.csv").open() as fh:
            assert next(csv.reader(fh)) == ["jet_id", "label", "score_0", "score_1"]

    def test_binned_eval(self, trained, tmp_path):
        ckpt = str(trained / "run" / "model.ckpt")
        data = str(trained / "data" / "jets.jsonl")
        args = ["binned-eval", "--checkpoint", ckpt, "--data", data, "--out", str(tmp_path), "--bins", "0,10,16"]
        assert run(args) == 0
        rows = list(csv.DictReader((tmp_path / "binned_accuracy.csv").open()))
        assert sum(int(r["count"]) for r in rows) == 120

    def test_dump_attn(self, trained, tmp_path):
        ckpt = str(trained / "run" / "model.ckpt")
        data = str(trained / "data" / "jets.jsonl")
        assert run(["dump-attn", "--checkpoint", ckpt, "--data", data, "--out", str(tmp_path), "--jet", "4"]) == 0
        files = files_under(tmp_path)
        assert len(files) == 4 * 3
        with (tmp_path / "layer0_head0_post_softmax.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 1 + 16 and len(rows[0]) == 1 + 4

    def test_bench(self, tmp_path, capsys):
        assert run(["bench", "--n", "16", "--batch", "8", "--dtype", "f32", "--out", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "bench.json").read_text())["reps"] == 30


class TestErrors:
    def test_unknown_flag_names_it(self, capsys):
        assert run(["flops", "--bogus"]) == 1
        assert "--bogus" in capsys.readouterr().err

    def test_no_command(self, capsys):
        assert run([]) == 1

    def test_missing_out(self, tmp_path):
        assert run(["gen-data"]) == 1

    def test_missing_data_file(self, tmp_path):
        assert run(["sort", "--data", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 2

    def test_malformed_data(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"particles": [[1, 2, 3]], "label": 0}\nnot json\n')
        assert run(["sort", "--data", str(bad), "--out", str(tmp_path / "o")]) == 2
        assert "line 2" in capsys.readouterr().err

    def test_bad_model_config(self):
        assert run(["flops", "--n", "2", "--p", "4"]) == 2

    def test_bench_contract(self):
        assert run(["bench", "--n", "16", "--reps", "0"]) == 2

    def test_bad_thread_env(self, monkeypatch):
        monkeypatch.setenv("SALT_THREADS", "zero")
        assert run(["flops"]) == 1

    def test_bad_config_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("[1, 2]")
        assert run(["flops", "--config", str(cfg)]) == 1


class TestConfigLayering:
    def test_flag_beats_file_beats_default(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n": 64, "p": 2}))
        opts = resolve(build_parser().parse_args(["flops", "--config", str(cfg), "--n", "8"]))
        assert (opts["n"], opts["p"], opts["layers"]) == (8, 2, 1)

    def test_writes_only_under_out(self, tmp_path, monkeypatch):
        work = tmp_path / "cwd"
        work.mkdir()
        monkeypatch.chdir(work)
        assert run(["gen-data", "--out", str(tmp_path / "o"), "--n-jets", "20"]) == 0
        assert run(["flops"]) == 0
        assert files_under(work) == []
        assert files_under(tmp_path) == ["o/jets.jsonl"]


def test_module_entry_point():
    env = dict(os.environ, SALT_THREADS="1")
    out = subprocess.run([sys.executable, "-m", "saltformer.cli", "flops", "--n", "16"],
                         capture_output=True, text=True, env=env)
    assert out.returncode == 0
    assert out.stdout.splitlines()[0] == "79,566"

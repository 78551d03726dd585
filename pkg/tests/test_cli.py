"""End-to-end tests of the command-line harness."""

import json

import numpy as np
import pandas as pd
import pytest

from main import cli_main, parse_override

SUBCOMMANDS = ["bench", "errors", "detect", "forward", "grid", "synth"]


@pytest.fixture
def synth_files(tmp_path):
    weights, inputs = tmp_path / "m.vitw", tmp_path / "x.npy"
    assert cli_main(["synth", "--out", str(weights), "--input-out", str(inputs)]) == 0
    return str(weights), str(inputs)


class TestUsage:
    def test_help(self, capsys):
        assert cli_main(["--help"]) == 0

    @pytest.mark.parametrize("command", SUBCOMMANDS)
    def test_subcommand_help(self, command, capsys):
        assert cli_main([command, "--help"]) == 0
        assert "--out" in capsys.readouterr().out

    def test_unknown_subcommand(self):
        assert cli_main(["plot"]) == 2

    def test_unknown_flag(self):
        assert cli_main(["errors", "--n", "4", "--d", "2", "--s-list", "2", "--out", "e.csv", "--bogus"]) == 2

    def test_bad_override(self):
        assert cli_main(["forward", "--weights", "m", "--input", "x", "--override", "x:fna"]) == 2

    @pytest.mark.parametrize("text,expected", [
        ("3:skip", (3, "skip", ())),
        ("2:fna:reuse", (2, "fna", ("reuse",))),
        ("1:type1-sink:5,9", (1, "type1-sink", (frozenset({5, 9}),))),
    ])
    def test_parse_override(self, text, expected):
        assert parse_override(text) == expected


class TestCommands:
    def test_bench_csv(self, tmp_path):
        out = tmp_path / "b.csv"
        code = cli_main(["bench", "--lengths", "256,512", "--batch", "2", "--impls", "exact,fna:64",
                         "--head-dim", "8", "--trials", "1", "--warmups", "0", "--out", str(out)])
        assert code == 0
        frame = pd.read_csv(out)
        assert len(frame) == 4
        assert list(frame["impl"]) == ["exact", "fna:64", "exact", "fna:64"]

    def test_errors_csv_is_deterministic(self, tmp_path):
        args = ["errors", "--n", "16", "--d", "4", "--heads", "2", "--s-list", "4,17", "--seeds", "3"]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert cli_main(args + ["--out", str(a)]) == 0
        assert cli_main(args + ["--out", str(b)]) == 0
        text = a.read_text(encoding="utf-8")
        assert text.splitlines()[0] == "s,seed,frob_err,maxabs_err"
        assert len(text.splitlines()) == 7
        assert a.read_bytes() == b.read_bytes()

    def test_errors_strategy_changes_landmarks(self, tmp_path):
        args = ["errors", "--n", "16", "--d", "4", "--s-list", "4,17", "--seeds", "2"]
        fps, uniform = tmp_path / "f.csv", tmp_path / "u.csv"
        assert cli_main(args + ["--out", str(fps)]) == 0
        assert cli_main(args + ["--strategy", "uniform", "--out", str(uniform)]) == 0
        a, b = pd.read_csv(fps), pd.read_csv(uniform)
        assert len(b) == 4
        assert not np.allclose(a[a.s == 4].frob_err, b[b.s == 4].frob_err)
        assert (b[b.s == 17].frob_err <= 1e-4).all()

    def test_errors_rejects_unknown_strategy(self, tmp_path):
        assert cli_main(["errors", "--n", "8", "--d", "4", "--s-list", "2", "--strategy", "random",
                         "--out", str(tmp_path / "e.csv")]) == 2

    def test_detect_iterative(self, tmp_path, synth_files):
        weights, inputs = synth_files
        out = tmp_path / "r.json"
        assert cli_main(["detect", "--weights", weights, "--input", inputs, "--lm", "1", "--ld", "2",
                         "--mode", "iterative", "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["sinks"] == [5, 9, 2]
        assert report["converged"] is True

    def test_detect_one_pass(self, tmp_path, synth_files):
        weights, inputs = synth_files
        out = tmp_path / "r.json"
        assert cli_main(["detect", "--weights", weights, "--input", inputs, "--ld", "2",
                         "--mode", "one-pass", "--out", str(out)]) == 0
        assert json.loads(out.read_text())["sinks"] == [5]

    def test_grid_rows(self, tmp_path, synth_files):
        weights, inputs = synth_files
        out = tmp_path / "g.csv"
        assert cli_main(["grid", "--weights", weights, "--input", inputs, "--s", "4",
                         "--lm", "1", "--ld", "2", "--out", str(out)]) == 0
        assert len(pd.read_csv(out)) == 27

    def test_forward_with_overrides(self, tmp_path, synth_files):
        weights, inputs = synth_files
        out, trace = tmp_path / "y.npy", tmp_path / "t.csv"
        assert cli_main(["forward", "--weights", weights, "--input", inputs,
                         "--override", "3:fna:4", "--override", "4:fna:reuse",
                         "--out", str(out), "--trace-out", str(trace)]) == 0
        assert np.load(out).shape == (17, 16)
        frame = pd.read_csv(trace)
        assert list(frame.columns) == ["layer", "token", "norm"]
        assert len(frame) == 5 * 17

    def test_forward_json_trace(self, tmp_path, synth_files):
        weights, inputs = synth_files
        trace = tmp_path / "t.json"
        assert cli_main(["forward", "--weights", weights, "--input", inputs,
                         "--override", "1:type1-mask:5", "--attention-layers", "2",
                         "--trace-out", str(trace)]) == 0
        data = json.loads(trace.read_text())
        assert set(data["attention"]) == {"2"}

    def test_synth_from_spec_file(self, tmp_path):
        spec = tmp_path / "s.json"
        spec.write_text(json.dumps({"planted": [3], "num_tokens": 9, "num_layers": 4}))
        assert cli_main(["synth", "--spec", str(spec), "--out", str(tmp_path / "m.vitw")]) == 0

    def test_missing_weights_is_runtime_error(self, tmp_path):
        np.save(tmp_path / "x.npy", np.zeros((3, 16), dtype=np.float32))
        code = cli_main(["detect", "--weights", str(tmp_path / "none.vitw"),
                         "--input", str(tmp_path / "x.npy"), "--out", str(tmp_path / "r.json")])
        assert code == 1

    def test_override_out_of_range_is_runtime_error(self, tmp_path, synth_files):
        weights, inputs = synth_files
        assert cli_main(["forward", "--weights", weights, "--input", inputs,
                         "--override", "9:skip"]) == 1

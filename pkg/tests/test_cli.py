import json
import subprocess
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from collapse_lab import cli
from collapse_lab.checkpoint import CheckpointError, dumps_state, loads_state, load_state
from collapse_lab.config import ConfigError, parse_config, parse_lr_schedule
from collapse_lab.data import gen_separable, load_csv
from collapse_lab.svg import Panel, Series, render
from collapse_lab.training import HyperParams, init_state, run_flow

GOLDEN = Path(__file__).parent / "golden" / "metrics_header.csv"
SVG_NS = "{http://www.w3.org/2000/svg}"

SMALL = """
data.q = 3
data.d = 5
data.m = 4
data.m_test = 10
model.p = 4
model.N = 64
hyper.beta_inv = 1e-3
hyper.eta = 1.0
schedule.stage1_steps = 60
schedule.stage2_steps = 90
schedule.log_every = 30
theory_checks.kernel_probes = 256
"""


def write_cfg(tmp_path, extra="", name="c.cfg"):
    """SMALL with `extra` lines overriding or adding keys."""
    entries = {}
    for line in (SMALL + extra).splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    entries.setdefault("outputs.dir", str(tmp_path / "out"))
    path = tmp_path / name
    path.write_text("".join(f"{k} = {v}\n" for k, v in entries.items()))
    return path


def run_cli(args, capsys):
    code = cli.main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


class TestConfig:
    def test_defaults(self):
        cfg = parse_config("")
        assert cfg.data.q == 3 and cfg.algorithm.kind == "two_stage" and cfg.hyper.lambda_rho is None

    def test_types_and_comments(self):
        cfg = parse_config("hyper.beta_inv = 1e-2  # temperature\nmodel.trunc_R = 7\nschedule.batch = none\n"
                           "outputs.emit_svg = no\n")
        assert cfg.hyper.beta_inv == 0.01 and cfg.model.trunc_R == 7.0
        assert cfg.schedule.batch is None and cfg.outputs.emit_svg is False
        assert cfg.explicit == ("hyper.beta_inv", "model.trunc_R", "schedule.batch", "outputs.emit_svg")

    @pytest.mark.parametrize("text,key", [("hyper.betainv = 1", "hyper.betainv"), ("foo.bar = 1", "foo.bar"),
                                          ("model.p = x", "model.p"), ("model.p = 2\nmodel.p = 3", "model.p"),
                                          ("algorithm.kind = sgd", "algorithm.kind"),
                                          ("schedule.lr_schedule = 0-1", "schedule.lr_schedule")])
    def test_strict_errors_name_key(self, text, key):
        with pytest.raises(ConfigError) as exc:
            parse_config(text)
        assert exc.value.key == key

    def test_missing_equals(self):
        with pytest.raises(ConfigError) as exc:
            parse_config("\nmodel.p 3")
        assert exc.value.line == 2

    def test_lr_schedule(self):
        assert parse_lr_schedule("500:0.01, 0:0.001") == ((0, 0.001), (500, 0.01))


class TestSvg:
    def test_valid_and_counts(self):
        svg = render([Panel("a", [Series("x", [0, 1, 2], [1.0, 2.0, 3.0]), Series("y", [0, 1], [3.0, 1.0])]),
                      Panel("b", [Series("z", [0, 1], [0.5, 0.25], std=[0.1, 0.1])], log_y=True)])
        root = ET.fromstring(svg.split("\n", 1)[1])
        assert len(root.findall(f".//{SVG_NS}polyline")) == 3
        assert len(root.findall(f".//{SVG_NS}polygon")) == 1

    def test_log_drops_nonpositive(self):
        svg = render([Panel("a", [Series("x", [0, 1, 2, 3], [1.0, 0.0, 2.0, 3.0])], log_y=True)])
        root = ET.fromstring(svg.split("\n", 1)[1])
        assert len(root.findall(f".//{SVG_NS}polyline")) == 2  # split around the dropped point

    def test_empty_panel(self):
        svg = render([Panel("a", [Series("x", [], [])])])
        assert "no data" in svg

    def test_escapes_labels(self):
        svg = render([Panel("<&>", [Series("a<b", [0, 1], [1, 2])])])
        ET.fromstring(svg.split("\n", 1)[1])


class TestCheckpoint:
    def test_round_trip_exact(self):
        ds, _ = gen_separable(3, 5, 3, 0.2)
        h = HyperParams(seed=9)
        st = init_state(ds, 4, 10, h)
        run_flow(st, ds, h, 5, 5, diagnostics=False)
        back = loads_state(dumps_state(st))
        np.testing.assert_array_equal(back.cloud.A, st.cloud.A)
        np.testing.assert_array_equal(back.cloud.U, st.cloud.U)
        np.testing.assert_array_equal(back.head.W, st.head.W)
        np.testing.assert_array_equal(back.W_init, st.W_init)
        assert back.rng_state == st.rng_state and back.head.gamma == st.head.gamma

    def test_resume_matches_uninterrupted(self):
        ds, _ = gen_separable(3, 5, 3, 0.2)
        h = HyperParams(seed=2, beta_inv=1e-2, batch=3)
        a = init_state(ds, 4, 10, h)
        run_flow(a, ds, h, 20, 20, diagnostics=False)
        b = loads_state(dumps_state(a))
        run_flow(a, ds, h, 20, 20, diagnostics=False)
        run_flow(b, ds, h, 20, 20, diagnostics=False)
        np.testing.assert_array_equal(a.cloud.A, b.cloud.A)

    @pytest.mark.parametrize("text", ["", "other 1\n", "collapse-lab-state 9\n", "collapse-lab-state 1\nstep x\n"])
    def test_rejects(self, text):
        with pytest.raises(CheckpointError):
            loads_state(text)

    def test_truncated(self):
        ds, _ = gen_separable(3, 5, 3, 0.2)
        text = dumps_state(init_state(ds, 4, 10, HyperParams()))
        with pytest.raises(CheckpointError):
            loads_state(text[: len(text) // 2])


class TestRun:
    def test_artifacts_rows_and_header(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        code, out, err = run_cli(["run", cfg], capsys)
        assert code == 0, err
        outdir = tmp_path / "out"
        for name in cli.ARTIFACTS:
            assert (outdir / name).exists()
        lines = (outdir / "metrics.csv").read_text().splitlines()
        assert lines[0] == GOLDEN.read_text().strip()
        assert len(lines) - 1 == 60 // 30 + 90 // 30
        summary = json.loads((outdir / "summary.json").read_text())
        assert summary["epochs"] == 150.0 and summary["theory"]["violations"] == []
        assert summary["theory"]["test_bound"]["finite"] is True
        assert 0.0 <= summary["test_error"] <= 1.0
        assert json.loads(out)["status"] == "ok"

    def test_help_documents_columns(self, capsys):
        with pytest.raises(SystemExit):
            cli.main(["--help"])
        text = capsys.readouterr().out
        pos = [text.index("  " + c + " ") for c in GOLDEN.read_text().strip().split(",")]
        assert pos == sorted(pos)

    def test_svg_renders_all_series(self, tmp_path, capsys):
        run_cli(["run", write_cfg(tmp_path)], capsys)
        svg = (tmp_path / "out" / "curves.svg").read_text()
        root = ET.fromstring(svg.split("\n", 1)[1])
        titles = [t.text for t in root.iter(f"{SVG_NS}title")]
        assert sorted(set(titles)) == sorted(["L_n", "L_reg", "NC1", "eps_S", "NB"])

    def test_byte_identical_rerun_any_workers(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        run_cli(["run", cfg, "--out", tmp_path / "a"], capsys)
        run_cli(["run", cfg, "--out", tmp_path / "b", "--workers", "3"], capsys)
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert (tmp_path / "a" / "state.txt").read_bytes() == (tmp_path / "b" / "state.txt").read_bytes()

    def test_seed_changes_run(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        run_cli(["run", cfg, "--out", tmp_path / "a"], capsys)
        run_cli(["run", cfg, "--out", tmp_path / "b", "--seed", "5"], capsys)
        assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_joint_flow(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "algorithm.kind = joint_flow\nschedule.steps = 40\nschedule.log_every = 20\n"
                                  "theory_checks.enabled = theorem31,lemma34\n")
        assert run_cli(["run", cfg], capsys)[0] == 0
        assert len((tmp_path / "out" / "metrics.csv").read_text().splitlines()) == 3

    def test_unknown_key(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "hyper.temperature = 1\n")
        code, _, err = run_cli(["run", cfg], capsys)
        payload = json.loads(err)
        assert code == 2 and payload["status"] == "config error" and payload["key"] == "hyper.temperature"

    def test_divergence_reports_step(self, tmp_path, capsys):
        path = write_cfg(tmp_path, "hyper.lambda_rho = 10\nhyper.eta = 1e9\n")
        code, _, err = run_cli(["run", path], capsys)
        payload = json.loads(err)
        assert code == 4 and payload["status"] == "divergence" and payload["step"] >= 1

    def test_data_error(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "data.tau = 0.9\n")
        code, _, err = run_cli(["run", cfg], capsys)
        assert code == 3 and "tau < 1/sqrt(q)" in json.loads(err)["message"]

    def test_missing_config(self, tmp_path, capsys):
        code, _, err = run_cli(["run", tmp_path / "nope.cfg"], capsys)
        assert code == 2 and json.loads(err)["status"] == "config error"

    def test_csv_source(self, tmp_path, capsys):
        ds, _ = gen_separable(3, 5, 4, 0.2, seed=3)
        assert run_cli(["gen-data", "q=3", "d=5", "m=4", "seed=3", "--out", tmp_path / "tr.csv"], capsys)[0] == 0
        np.testing.assert_array_equal(load_csv(tmp_path / "tr.csv", 3).X, ds.X)
        cfg = write_cfg(tmp_path, f"data.source = csv\ndata.path = {tmp_path / 'tr.csv'}\n"
                                  "theory_checks.enabled = theorem31,lemma34,kernel\n")
        code, _, err = run_cli(["run", cfg], capsys)
        assert code == 0, err
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["test_error"] is None


class TestCheckCommand:
    def test_check_saved_state(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        run_cli(["run", cfg], capsys)
        code, out, _ = run_cli(["check", cfg], capsys)
        rep = json.loads(out)
        assert code == 0 and rep["violations"] == [] and rep["state"]["step"] == 150
        assert (tmp_path / "out" / "check.json").exists()

    def test_check_mismatched_state(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        run_cli(["run", cfg], capsys)
        other = write_cfg(tmp_path, "data.d = 6\n", name="o.cfg")
        code, _, err = run_cli(["check", other, "--state", tmp_path / "out" / "state.txt"], capsys)
        assert code == 5 and json.loads(err)["status"] == "checkpoint error"

    def test_state_file_loads(self, tmp_path, capsys):
        run_cli(["run", write_cfg(tmp_path)], capsys)
        assert load_state(tmp_path / "out" / "state.txt").cloud.N == 64


class TestGenData:
    def test_stdout(self, capsys):
        code, out, _ = run_cli(["gen-data", "q=2", "d=3", "m=2"], capsys)
        assert code == 0 and len(out.splitlines()) == 4

    def test_bad_key(self, capsys):
        code, _, err = run_cli(["gen-data", "k=3"], capsys)
        assert code == 2 and json.loads(err)["key"] == "k"


class TestRepro:
    def test_two_seeds(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "algorithm.kind = joint_flow\nschedule.steps = 60\nschedule.batch = 4\n"
                                  "schedule.lr_schedule = 0:0.2,30:1.0\nhyper.beta_inv = 0\n"
                                  "theory_checks.enabled = lemma34\n")
        code, out, err = run_cli(["repro", cfg, "--seeds", "2"], capsys)
        assert code == 0, err
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert len(summary["final_nb"]) == 2
        assert summary["final_nb_mean"] == pytest.approx(np.mean(summary["final_nb"]))
        assert (tmp_path / "out" / "seed_0" / "metrics.csv").exists()
        assert (tmp_path / "out" / "seed_1" / "metrics.csv").exists()
        seed_summary = json.loads((tmp_path / "out" / "seed_0" / "summary.json").read_text())
        assert seed_summary["hyper_resolved"]["lambda_rho"] == 1e-4
        root = ET.fromstring((tmp_path / "out" / "fig1.svg").read_text().split("\n", 1)[1])
        assert len(root.findall(f".//{SVG_NS}polyline")) == 3
        assert len(root.findall(f".//{SVG_NS}polygon")) == 3

    def test_needs_two_phase_schedule(self, tmp_path, capsys):
        code, _, err = run_cli(["repro", write_cfg(tmp_path)], capsys)
        assert code == 2 and json.loads(err)["key"] == "schedule.lr_schedule"


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "collapse_lab.cli", "gen-data", "q=2", "d=2", "m=1"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and len(res.stdout.splitlines()) == 2

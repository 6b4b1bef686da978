import json

import numpy as np
import pytest

from zfit import cli
from zfit.circuit import parse_circuit
from zfit.cli import main, split_top_level
from zfit.spectrum import write_spectrum_csv


@pytest.fixture
def spectrum_file(tmp_path):
    m = parse_circuit("R1-[P2,R3]")
    path = tmp_path / "s.csv"
    write_spectrum_csv(path, m.impedance([3.0, 2e-5, 0.85, 800.0], np.logspace(-3, 6, 64)))
    return path


def run_fit(capsys, *argv):
    assert main(["fit", *argv]) == 0
    return json.loads(capsys.readouterr().out)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestFit:
    def test_noiseless_converges(self, spectrum_file, capsys):
        out = run_fit(capsys, str(spectrum_file), "--circuit", "R1-[P2,R3]", "--loss", "x2")
        assert out["converged"] is True
        assert out["best_params"]["R3"] == pytest.approx(800.0, rel=1e-4)
        assert out["config"]["seed"] == 0

    def test_log_b_token_accepted(self, spectrum_file, capsys):
        assert run_fit(capsys, str(spectrum_file), "--circuit", "R1-[P2,R3]", "--loss", "log-b")["loss"] == "log-b"

    def test_logb_rejected_with_token_list(self, spectrum_file, capsys):
        assert main(["fit", str(spectrum_file), "--circuit", "R1-[P2,R3]", "--loss", "logb"]) == 1
        assert "uw, x2, pw, b, log-b, log-bw" in capsys.readouterr().err

    def test_max_restarts_in_metadata(self, spectrum_file, capsys):
        out = run_fit(capsys, str(spectrum_file), "--circuit", "R1-[P2,R3]", "--max-restarts", "1")
        assert out["options"]["max_restarts"] == 1
        assert out["restarts_used"] == 1

    def test_seed_from_environment(self, spectrum_file, capsys, monkeypatch):
        monkeypatch.setenv("ZFIT_SEED", "11")
        assert run_fit(capsys, str(spectrum_file), "--circuit", "R1-[P2,R3]")["options"]["rng_seed"] == 11
        assert run_fit(capsys, str(spectrum_file), "--circuit", "R1-[P2,R3]", "--seed", "4")["options"]["rng_seed"] == 4

    def test_config_file_and_override(self, spectrum_file, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"max_restarts": 3, "chi2_threshold": 0.5}))
        out = run_fit(capsys, str(spectrum_file), "--circuit", "R1-[P2,R3]", "--config", str(cfg), "--max-restarts", "2")
        assert out["options"]["max_restarts"] == 2
        assert out["options"]["chi2_threshold"] == 0.5

    def test_basinhop_mode(self, spectrum_file, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"hop_count": 2}))
        out = run_fit(capsys, str(spectrum_file), "--circuit", "R1-[P2,R3]", "--global", "basinhop", "--config", str(cfg))
        assert out["method"] == "basinhop"
        assert out["restarts_used"] == 2


class TestExitCodes:
    def test_usage_errors(self, spectrum_file, tmp_path):
        assert main([]) == 1
        assert main(["frobnicate"]) == 1
        assert main(["fit", str(spectrum_file)]) == 1
        assert main(["fit", str(spectrum_file), "--circuit", "R1-["]) == 1
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"no_such_key": 1}))
        assert main(["fit", str(spectrum_file), "--circuit", "R1", "--config", str(bad)]) == 1
        assert main(["generate"]) == 1

    def test_io_errors(self, tmp_path):
        assert main(["fit", str(tmp_path / "missing.csv"), "--circuit", "R1"]) == 2
        junk = tmp_path / "junk.csv"
        junk.write_text("a,b\n1,2\n")
        assert main(["fit", str(junk), "--circuit", "R1"]) == 2
        assert main(["bench", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 2

    def test_internal_error(self, spectrum_file, monkeypatch):
        def broken(*a, **k):
            raise RuntimeError("boom")

        monkeypatch.setattr(cli, "fit_multistart", broken)
        assert main(["fit", str(spectrum_file), "--circuit", "R1-[P2,R3]"]) == 3

    def test_help(self):
        assert main(["--help"]) == 0


class TestGenerate:
    def test_same_seed_identical_trees(self, tmp_path):
        for name in ("a", "b"):
            assert main(["generate", "--out", str(tmp_path / name), "--seed", "7", "--spectra-per-circuit", "2"]) == 0
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert len(a) == 13 and a == b

    def test_single_circuit(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path), "--circuits", "R1-[P2,R3]-P4", "--spectra-per-circuit", "3"]) == 0
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert {e["circuit"] for e in man["spectra"]} == {"R1-[P2,R3]-P4"}
        assert len(man["spectra"]) == 3

    def test_circuit_list_splits_at_top_level(self):
        assert split_top_level("R1-[P2,R3],L1-R2") == ["R1-[P2,R3]", "L1-R2"]
        assert split_top_level(" R1 ") == ["R1"]

    def test_flags_reach_manifest(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path), "--circuits", "R1-C2", "--spectra-per-circuit", "1",
                     "--noise-sigma", "0", "--points-per-decade", "3"]) == 0
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert man["config"]["noise_sigma_rel"] == 0
        assert man["config"]["points_per_decade"] == 3


class TestBench:
    def test_two_loss_paired_and_canonical(self, tmp_path):
        data = tmp_path / "data"
        assert main(["generate", "--out", str(data), "--circuits", "R1-[P2,R3]", "--spectra-per-circuit", "3"]) == 0
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            argv = ["bench", str(data), "--out", str(out), "--losses", "x2,log-b", "--paired", "--canonical",
                    "--max-restarts", "3"]
            assert main(argv) == 0
            outs.append(out)
        rows = (outs[0] / "convergence.csv").read_text().splitlines()
        assert rows[0] == "loss,count,rate"
        assert [r.split(",")[0] for r in rows[1:]] == ["x2", "log-b"]
        for name in ("convergence.csv", "summary.csv", "mape.csv", "radar.csv", "retention.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
        body = json.loads((outs[0] / "report.json").read_text())
        assert body["run_config"]["losses"] == ["x2", "log-b"]
        assert body["provenance"]["options"]["paired"] is True

    def test_basinhop_emits_same_tables(self, tmp_path):
        data = tmp_path / "data"
        assert main(["generate", "--out", str(data), "--circuits", "R1-[R2,C3]", "--spectra-per-circuit", "1"]) == 0
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"hop_count": 2}))
        out = tmp_path / "bh"
        assert main(["bench", str(data), "--out", str(out), "--losses", "x2,pw", "--global", "basinhop",
                     "--config", str(cfg)]) == 0
        for name in ("convergence.csv", "summary.csv", "mape.csv", "radar.csv"):
            assert (out / name).exists()
        assert json.loads((out / "report.json").read_text())["provenance"]["method"] == "basinhop"

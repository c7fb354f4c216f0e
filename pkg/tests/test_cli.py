import json
import os
import subprocess
import sys

import numpy as np
import pytest

from epbloch import io as eio
from epbloch.bloch import ep3_locus
from epbloch.cli import main

EP3 = ep3_locus(0.1)[0]


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def run_json(argv, capsys):
    code, out, err = run(argv, capsys)
    return code, json.loads(out)


class TestSimulate:
    def test_smoke(self, capsys):
        code, out, _ = run(["simulate", "--gamma", "0.1", "--delta", "0", "--eps", "0.01", "--n", "2000"], capsys)
        lines = out.splitlines()
        assert code == 0 and lines[1] == "t,value" and len(lines) == 2002
        assert "config=" in lines[0] and "gamma=0.10000000000000001" in lines[0]

    def test_noisy_output_is_byte_identical(self, tmp_path):
        paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for p in paths:
            argv = ["simulate", "--gamma", "0.1", "--delta", "0.02", "--eps", "0.03", "--noise", "1e-4", "--seed", "7"]
            assert main(argv + ["--out", str(p)]) == 0
        assert paths[0].read_bytes() == paths[1].read_bytes()
        other = tmp_path / "c.csv"
        main(["simulate", "--gamma", "0.1", "--delta", "0.02", "--eps", "0.03", "--noise", "1e-4", "--seed", "8", "--out", str(other)])
        assert other.read_bytes() != paths[0].read_bytes()

    def test_rates(self, capsys):
        code, out, _ = run(["simulate", "--kappa-down", "0.06", "--kappa-up", "0.04", "--dephasing", "0.03", "--n", "5"], capsys)
        assert code == 0 and "gamma=0.07" in out.splitlines()[0]

    def test_conflicting_gamma(self, capsys):
        code, _, err = run(["simulate", "--gamma", "0.2", "--kappa-down", "0.1", "--n", "5"], capsys)
        assert code == 2 and "conflicts" in err

    def test_missing_gamma(self, capsys):
        assert run(["simulate", "--n", "5"], capsys)[0] == 2

    def test_bad_flag_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--gamma", "abc"])
        assert exc.value.code == 2


class TestInvert:
    def _simulate(self, tmp_path, delta, eps, extra=()):
        path = tmp_path / "s.csv"
        argv = ["simulate", "--gamma", "0.1", "--delta", repr(delta), "--eps", repr(eps), "--out", str(path), *extra]
        assert main(argv) == 0
        return path

    def test_three_simple_modes(self, tmp_path, capsys):
        path = self._simulate(tmp_path, 0.03, 0.04)
        code, rep = run_json(["invert", str(path)], capsys)
        assert code == 0 and [m["multiplicity"] for m in rep["modes"]] == [1, 1, 1]
        assert rep["residual_rms"] < 1e-9 and rep["config"]["extended"] is False

    def test_extended_at_ep2(self, tmp_path, capsys):
        path = self._simulate(tmp_path, 1.021073946073554e-3, 0.01)
        code, rep = run_json(["invert", str(path), "--extended"], capsys)
        assert code == 0 and sorted(m["multiplicity"] for m in rep["modes"]) == [1, 2]

    def test_extended_at_ep3(self, tmp_path, capsys):
        path = self._simulate(tmp_path, EP3.detuning, EP3.drive)
        code, rep = run_json(["invert", str(path), "--extended"], capsys)
        assert code == 0 and [m["multiplicity"] for m in rep["modes"]] == [3]

    def test_too_short(self, tmp_path, capsys):
        path = self._simulate(tmp_path, 0.03, 0.04, ["--n", "5"])
        code, out, err = run(["invert", str(path)], capsys)
        assert code == 2 and out == "" and "error" in err

    def test_missing_file(self, tmp_path, capsys):
        assert run(["invert", str(tmp_path / "none.csv")], capsys)[0] == 2


class TestMap:
    argv = ["map", "--delta-range", "-0.03", "0.03", "--eps-range", "0.0", "0.04", "--steps", "13", "9"]

    def test_triangle(self, capsys):
        code, out, _ = run(self.argv, capsys)
        lines = out.splitlines()
        assert code == 0 and lines[0].startswith("# config=") and len(lines) == 2 + 13 * 9
        for line in lines[2:]:
            d, e, *_, region = line.split(",")
            d, e = float(d), float(e)
            ev = np.linalg.eigvals(np.array([[-0.05, d, 0], [-d, -0.05, e], [0, -e, -0.1]]))
            if region != "degenerate":
                assert (region == "all-real") == (np.max(np.abs(ev.imag)) < 1e-9)

    def test_threads_env_does_not_change_output(self, capsys, monkeypatch):
        monkeypatch.setenv("EPBLOCH_THREADS", "1")
        one = run(self.argv, capsys)[1]
        monkeypatch.setenv("EPBLOCH_THREADS", "3")
        three = run(self.argv, capsys)[1]
        assert one == three

    def test_ep3_row(self, capsys):
        d, e = repr(EP3.detuning), repr(EP3.drive)
        code, out, _ = run(["map", "--delta-range", d, "1", "--eps-range", e, "1", "--steps", "1", "1"], capsys)
        assert code == 0 and out.splitlines()[2].endswith(",degenerate")

    @pytest.mark.parametrize("rng", [["0.1", "0.1"], ["0.2", "0.1"]])
    def test_empty_range(self, rng, capsys):
        assert run(["map", "--delta-range", *rng], capsys)[0] == 2


class TestScanEP2:
    def test_oracle(self, capsys):
        code, rep = run_json(["scan-ep2"], capsys)
        assert code == 0 and rep["found"] and rep["order"] == 2
        assert abs(rep["location"]["delta"] - 1.021073946073554e-3) < 1e-12


class TestFindEP3:
    def test_rootsearch(self, capsys):
        code, rep = run_json(["find-ep3", "--gamma", "0.1", "--method", "rootsearch", "--mode", "oracle"], capsys)
        assert code == 0 and rep["status"] == "converged"
        assert abs(rep["location"]["delta"] - 9.6225e-3) < 1e-7
        assert abs(rep["location"]["delta"] - EP3.detuning) < 1e-10
        assert abs(rep["location"]["eps"] - EP3.drive) < 1e-10

    def test_valley_with_trace(self, tmp_path, capsys):
        trace = tmp_path / "trace.csv"
        code, rep = run_json(["find-ep3", "--method", "valley", "--trace", str(trace)], capsys)
        assert code == 0
        assert abs(rep["location"]["delta"] - EP3.detuning) < 1e-6
        rows = trace.read_text().splitlines()
        F = [float(r.split(",")[3]) for r in rows[1:]]
        assert len(F) > 2 and all(b > a for a, b in zip(F, F[1:]))

    def test_experimental(self, capsys):
        code, rep = run_json(["find-ep3", "--mode", "experimental"], capsys)
        assert code == 0
        assert abs(rep["location"]["delta"] - EP3.detuning) < 1e-4
        assert abs(rep["location"]["eps"] - EP3.drive) < 1e-4

    def test_non_convergence_exit_code(self, capsys):
        # a needle cone climbs the zero-detuning axis onto an EP2, not the cusp
        code, rep = run_json(["find-ep3", "--method", "valley", "--half-width", "1e-6"], capsys)
        assert code == 3 and rep["status"] == "ep2"

    def test_config_precedence(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"find-ep3": {"gamma": 1.0, "method": "valley"}}))
        code, rep = run_json(["find-ep3", "--config", str(cfg), "--method", "rootsearch"], capsys)
        assert code == 0 and rep["config"]["gamma"] == 1.0 and rep["config"]["method"] == "rootsearch"
        assert abs(rep["location"]["delta"] - ep3_locus(1.0)[0].detuning) < 1e-9

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"gama": 1.0}))
        assert run(["find-ep3", "--config", str(cfg)], capsys)[0] == 2


class TestEstimate:
    def test_oracle_shortcut(self, capsys):
        code, rep = run_json(["estimate", "--planted", "1.0", "0.5", "0.1", "--mode", "oracle"], capsys)
        assert code == 0
        assert max(rep["diagnostics"]["relative_error"].values()) < 1e-12

    def test_planted_end_to_end(self, capsys):
        code, rep = run_json(["estimate", "--planted", "1.0", "0.5", "0.1"], capsys)
        assert code == 0
        assert max(rep["diagnostics"]["relative_error"].values()) < 1e-4

    def test_measured(self, tmp_path, capsys):
        omega_s, mu = 1.0, 0.5
        nu, field = omega_s - EP3.detuning, EP3.drive / mu
        series = tmp_path / "s.csv"
        main(["simulate", "--gamma", "0.1", "--delta", repr(EP3.detuning), "--eps", repr(EP3.drive), "--out", str(series)])
        inv = tmp_path / "inv.json"
        main(["invert", str(series), "--out", str(inv)])
        code, rep = run_json(["estimate", "--nu", repr(nu), "--field", repr(field), "--inversion", str(inv)], capsys)
        assert code == 0
        assert abs(rep["omega_s"] - omega_s) < 1e-6 and abs(rep["mu"] - mu) < 1e-5 and abs(rep["gamma"] - 0.1) < 1e-6

    def test_missing_field(self, tmp_path, capsys):
        code, _, err = run(["estimate", "--nu", "1.0", "--inversion", str(tmp_path / "x.json")], capsys)
        assert code == 2 and "--field" in err


def test_console_entry_points(tmp_path):
    env = {**os.environ, "EPBLOCH_THREADS": "1"}
    argv = ["scan-ep2", "--steps", "11"]
    a = subprocess.run([sys.executable, "-m", "epbloch", *argv], capture_output=True, text=True, env=env)
    assert a.returncode == 0
    assert eio.ep_report_from_dict(json.loads(a.stdout)).found
    b = subprocess.run(["epbloch", *argv], capture_output=True, text=True, env=env)
    assert b.returncode == 0 and b.stdout == a.stdout

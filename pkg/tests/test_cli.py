import hashlib
import json

import numpy as np
import pytest

import spatdisagg as sd
from spatdisagg.cli import EXIT_CONVERGENCE, EXIT_INPUT, EXIT_OK, EXIT_USAGE, main


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_simulate(out, seed=7, k=3, T=12):
    return main(
        [
            "simulate", "--k", str(k), "--T", str(T), "--rho", "0.25", "--phi", "0.5",
            "--beta", "1,10", "--sigma", "0.1", "--seed", str(seed), "--out", str(out),
        ]
    )


class TestSimulate:
    def test_writes_all_outputs(self, tmp_path):
        assert run_simulate(tmp_path / "a") == EXIT_OK
        out = tmp_path / "a"
        for name in ("covariates.csv", "aggregate.csv", "y_true.csv", "W.csv", "manifest.json"):
            assert (out / name).exists(), name
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "simulate"
        assert manifest["seed"] == 7
        assert manifest["tool_version"] == sd.__version__

    def test_deterministic_outputs(self, tmp_path):
        run_simulate(tmp_path / "a")
        run_simulate(tmp_path / "b")
        for name in ("covariates.csv", "aggregate.csv", "y_true.csv", "W.csv"):
            assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name), name

    def test_rho_outside_unit_interval_is_usage_error(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--k", "3", "--T", "8", "--rho", "1.2", "--phi", "0",
                  "--out", str(tmp_path)])
        assert exc.value.code == 2
        assert "|value| must be < 1" in capsys.readouterr().err


class TestDisaggregate:
    def test_round_trip_from_simulate(self, tmp_path):
        sim = tmp_path / "sim"
        run_simulate(sim, seed=3, k=3, T=16)
        out = tmp_path / "run"
        code = main(
            [
                "disaggregate",
                "--covariates", str(sim / "covariates.csv"),
                "--aggregate", str(sim / "aggregate.csv"),
                "--weights-matrix", str(sim / "W.csv"),
                "--out", str(out),
            ]
        )
        assert code == EXIT_OK
        table = np.loadtxt(out / "disaggregation.csv", delimiter=",", skiprows=1)
        assert table.shape == (9 * 16, 10)
        # coherence surfaced in diagnostics
        diag = json.loads((out / "diagnostics.json").read_text())
        agg = np.loadtxt(sim / "aggregate.csv", delimiter=",", skiprows=1)[:, 1]
        assert diag["coherence_residual"] <= 1e-8 * max(1, np.abs(agg).max())
        fit = json.loads((out / "fit.json").read_text())
        assert "rho" in fit["params"]
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["input_digests"]) == 3

    def test_missing_aggregate_file(self, tmp_path):
        sim = tmp_path / "sim"
        run_simulate(sim, seed=1)
        code = main(
            [
                "disaggregate",
                "--covariates", str(sim / "covariates.csv"),
                "--aggregate", str(tmp_path / "nope.csv"),
                "--weights-matrix", str(sim / "W.csv"),
                "--out", str(tmp_path / "run"),
            ]
        )
        assert code == EXIT_INPUT

    def test_pca_component_selection_logged(self, tmp_path):
        """Six covariates with a planted 3-factor structure select 3 components."""
        rng = np.random.default_rng(0)
        n, T = 4, 30
        regions = [f"r{i}" for i in range(n)]
        latent = rng.normal(size=(n * T, 3)) * np.array([2.0, 1.5, 1.2])
        mixing = np.linalg.qr(rng.normal(size=(6, 3)))[0].T  # orthonormal rows
        X = latent @ mixing + 0.01 * rng.normal(size=(n * T, 6))
        lines = ["region,period,variable,value"]
        for t in range(T):
            for i, region in enumerate(regions):
                for v in range(6):
                    lines.append(f"{region},{t + 1},v{v},{X[t * n + i, v]:.9f}")
        (tmp_path / "cov.csv").write_text("\n".join(lines) + "\n")
        totals = 40 + rng.normal(size=T)
        (tmp_path / "agg.csv").write_text(
            "period,total\n" + "\n".join(f"{t + 1},{totals[t]:.9f}" for t in range(T)) + "\n"
        )
        (tmp_path / "edges.csv").write_text("i,j\n1,2\n2,3\n3,4\n4,1\n1,3\n")
        out = tmp_path / "run"
        code = main(
            [
                "disaggregate",
                "--covariates", str(tmp_path / "cov.csv"),
                "--aggregate", str(tmp_path / "agg.csv"),
                "--weights-edges", str(tmp_path / "edges.csv"),
                "--pca", "--pca-threshold", "95",
                "--out", str(out),
            ]
        )
        assert code == EXIT_OK
        diag = json.loads((out / "diagnostics.json").read_text())
        assert diag["pca"]["n_components"] == 3

    def test_anchored_run_reports_coherence_and_cells(self, tmp_path):
        sim = tmp_path / "sim"
        run_simulate(sim, seed=9, k=3, T=10)
        truth = np.loadtxt(sim / "y_true.csv", delimiter=",", skiprows=1)
        first = truth[truth[:, 1] == 1]  # all regions at period 1
        anchors = tmp_path / "anchors.csv"
        anchors.write_text(
            "region,period,value\n"
            + "\n".join(f"{int(r)},{int(p)},{v:.15g}" for r, p, v in first)
            + "\n"
        )
        out = tmp_path / "run"
        code = main(
            [
                "disaggregate",
                "--covariates", str(sim / "covariates.csv"),
                "--aggregate", str(sim / "aggregate.csv"),
                "--weights-matrix", str(sim / "W.csv"),
                "--anchors", str(anchors),
                "--out", str(out),
            ]
        )
        assert code == EXIT_OK
        diag = json.loads((out / "diagnostics.json").read_text())
        assert diag["anchored_cells"] == 9
        agg = np.loadtxt(sim / "aggregate.csv", delimiter=",", skiprows=1)[:, 1]
        assert diag["coherence_residual"] <= 1e-8 * max(1, np.abs(agg).max())
        # anchored cells reproduced in the written panel
        table = np.loadtxt(out / "disaggregation.csv", delimiter=",", skiprows=1)
        got_first = table[table[:, 1] == 1][:, 2]
        np.testing.assert_allclose(got_first, first[:, 2], rtol=1e-8)

    def test_gower_weights_path(self, tmp_path):
        sim = tmp_path / "sim"
        run_simulate(sim, seed=5, k=2, T=12)
        indicators = tmp_path / "ind.csv"
        indicators.write_text(
            "region,num:a,num:b,cat:c\n1,0.1,5,x\n2,0.4,3,x\n3,0.9,1,y\n4,0.6,2,y\n"
        )
        out = tmp_path / "run"
        code = main(
            [
                "disaggregate",
                "--covariates", str(sim / "covariates.csv"),
                "--aggregate", str(sim / "aggregate.csv"),
                "--gower", str(indicators),
                "--out", str(out),
            ]
        )
        assert code == EXIT_OK

    def test_mean_uncertainty_widens_intervals(self, tmp_path):
        sim = tmp_path / "sim"
        run_simulate(sim, seed=4, k=3, T=16)
        common = [
            "disaggregate",
            "--covariates", str(sim / "covariates.csv"),
            "--aggregate", str(sim / "aggregate.csv"),
            "--weights-matrix", str(sim / "W.csv"),
        ]
        assert main(common + ["--out", str(tmp_path / "plain")]) == EXIT_OK
        assert main(common + ["--mean-uncertainty", "--out", str(tmp_path / "wide")]) == EXIT_OK
        plain = np.loadtxt(tmp_path / "plain" / "disaggregation.csv", delimiter=",", skiprows=1)
        wide = np.loadtxt(tmp_path / "wide" / "disaggregation.csv", delimiter=",", skiprows=1)
        assert np.all(wide[:, 3] >= plain[:, 3] - 1e-12)  # var column
        assert wide[:, 3].mean() > plain[:, 3].mean()


class TestSweep:
    def write_config(self, path, n="4", reps=1):
        path.write_text(
            f"n = {n}\nT = 12\nrho = 0, 0.25\nphi = 0\nbeta0 = 1\n"
            f"beta1 = 20\nsigma = 0.1\nreplications = {reps}\nbase_seed = 5\n"
        )

    def test_runs_and_summaries(self, tmp_path):
        cfg = tmp_path / "grid.cfg"
        self.write_config(cfg, reps=2)
        out = tmp_path / "out"
        assert main(["sweep", "--config", str(cfg), "--jobs", "1", "--out", str(out)]) == EXIT_OK
        lines = (out / "runs.csv").read_text().strip().splitlines()
        assert lines[0].startswith("n,T,rho,phi,beta1,sigma,seed,ratio,category")
        assert len(lines) == 1 + 4
        assert (out / "summary_by_category.csv").exists()
        assert (out / "summary_by_cell.csv").exists()

    def test_jobs_flag_matches_serial(self, tmp_path):
        cfg = tmp_path / "grid.cfg"
        self.write_config(cfg, reps=1)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        main(["sweep", "--config", str(cfg), "--jobs", "1", "--out", str(out1)])
        main(["sweep", "--config", str(cfg), "--jobs", "2", "--out", str(out2)])
        assert digest(out1 / "runs.csv") == digest(out2 / "runs.csv")

    def test_chi2_as_written_changes_metric(self, tmp_path):
        cfg = tmp_path / "grid.cfg"
        self.write_config(cfg, reps=1)
        out_sq, out_lit = tmp_path / "sq", tmp_path / "lit"
        main(["sweep", "--config", str(cfg), "--jobs", "1", "--out", str(out_sq)])
        main(["sweep", "--config", str(cfg), "--jobs", "1", "--chi2-as-written", "--out", str(out_lit)])
        import pandas as pd

        sq = pd.read_csv(out_sq / "runs.csv")["chi2"]
        lit = pd.read_csv(out_lit / "runs.csv")["chi2"]
        assert np.all(sq >= 0)
        assert not np.allclose(sq, lit)

    def test_jobs_env_var_default(self, tmp_path, monkeypatch):
        cfg = tmp_path / "grid.cfg"
        self.write_config(cfg, reps=1)
        monkeypatch.setenv("SPATDISAGG_JOBS", "2")
        out = tmp_path / "o"
        assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
        assert (out / "runs.csv").exists()

    def test_empty_grid_is_usage_error(self, tmp_path):
        cfg = tmp_path / "grid.cfg"
        cfg.write_text("# nothing\n")
        assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_USAGE

    def test_missing_config_file_is_input_error(self, tmp_path):
        assert main(
            ["sweep", "--config", str(tmp_path / "absent.cfg"), "--out", str(tmp_path / "o")]
        ) == EXIT_INPUT

    def test_strict_flag_with_failures(self, tmp_path, monkeypatch):
        cfg = tmp_path / "grid.cfg"
        self.write_config(cfg, reps=1)

        from spatdisagg import simulation

        def boom(spec, anchors=None, config=None, chi2_squared=True):
            record = simulation.RunRecord(spec=spec)
            record.error = "fit: synthetic failure"
            return record

        monkeypatch.setattr(simulation, "run_scenario", boom)
        out = tmp_path / "o"
        code = main(["sweep", "--config", str(cfg), "--jobs", "1", "--strict", "--out", str(out)])
        assert code == EXIT_CONVERGENCE
        manifest = json.loads((out / "manifest.json").read_text())
        assert any("failed" in w for w in manifest["warnings"])

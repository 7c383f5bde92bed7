import json
import subprocess
import sys
import textwrap

import pytest

from dissipative_smp.cli import EXIT_CHECKS, EXIT_ERROR, EXIT_OK, main

TINY = textwrap.dedent("""\
    [model]
    name = "lq_scalar"
    params = { a = -1.0, sigma0 = 0.5, sigma_u = 0.5 }

    [grid]
    T = 2.0
    h = 0.02
    r = 0.5
    tail_tolerance = 0.4

    [run]
    paths = 400
    seed = 5

    [control]
    kind = "riccati"

    [spike]
    t0 = 0.5
    epsilon = 0.2
    v = [1.0]
    eps = [0.4, 0.2, 0.1, 0.05]

    [second_adjoint]
    times = [0.5, 1.0]

    [smp]
    times = [0.5, 1.0]
    control_low = -1.0
    control_high = 1.0
    control_points = 9

    [probe]
    p_values = [0.5, 1.0]
    samples = 2000
    grid_points = 201

    [output]
    export_paths = 3
    """)

OUTPUTS = {
    "probe": ["monotonicity.csv", "discount_constants.csv", "discount.csv"],
    "simulate": ["paths.csv", "moments.csv", "cost.csv"],
    "orders": ["orders.csv"],
    "adjoint": ["adjoint_paths.csv", "adjoint_fit.csv", "identities.csv"],
    "second-adjoint": ["second_adjoint.csv", "spike_duality.csv"],
    "smp-check": ["smp_report.csv", "smp_summary.txt"],
}


def run_cli(tmp_path, sub, text=TINY, name="out", extra=()):
    cfg = tmp_path / "c.toml"
    cfg.write_text(text)
    out = tmp_path / name
    code = main([sub, "--config", str(cfg), "--out", str(out), *extra])
    manifest = json.loads((out / "manifest.json").read_text()) if (out / "manifest.json").exists() else None
    return code, out, manifest


class TestSubcommands:
    @pytest.mark.parametrize("sub", sorted(OUTPUTS))
    def test_writes_artifacts(self, tmp_path, sub):
        code, out, manifest = run_cli(tmp_path, sub)
        assert code == EXIT_OK
        for name in OUTPUTS[sub]:
            assert (out / name).stat().st_size > 0
        assert (out / "config.toml").read_text() == TINY
        assert manifest["status"] == "ok" and manifest["subcommand"] == sub
        assert manifest["seed"] == 5 and manifest["workers"] == 1
        assert set(OUTPUTS[sub]) <= set(manifest["artifacts"])
        assert "numpy" in manifest["versions"]

    def test_probe_has_half_moment(self, tmp_path):
        _, out, _ = run_cli(tmp_path, "probe")
        rows = (out / "discount_constants.csv").read_text().splitlines()
        assert rows[0] == "p,c_p"
        assert any(row.startswith("0.5,") for row in rows[1:])

    def test_reference_grid_is_satisfied(self, tmp_path):
        text = TINY.replace('kind = "riccati"', 'kind = "constant"\nvalue = [0.0]')
        text = text.replace("control_low = -1.0\ncontrol_high = 1.0\ncontrol_points = 9", "controls = [[0.0]]")
        code, out, _ = run_cli(tmp_path, "smp-check", text)
        assert code == EXIT_OK
        rows = (out / "smp_report.csv").read_text().splitlines()[1:]
        assert rows and all(row.endswith(",satisfied") for row in rows)
        assert all(row.split(",")[2] == "0" for row in rows)

    def test_seed_override(self, tmp_path):
        _, _, manifest = run_cli(tmp_path, "simulate", extra=("--seed-override", "9"))
        assert manifest["seed"] == 9

    def test_auto_discount_in_manifest(self, tmp_path):
        text = TINY.replace("r = 0.5", 'r = "auto"').replace("T = 2.0\n", "")
        text = text.replace("lq_scalar", "logistic").replace("a = -1.0, sigma0 = 0.5, sigma_u = 0.5", "sigma0 = 0.2")
        text = text.replace('kind = "riccati"', 'kind = "constant"')
        code, _, manifest = run_cli(tmp_path, "simulate", text)
        assert code == EXIT_OK
        assert manifest["config"]["grid"]["r"] == "auto"
        assert manifest["config"]["grid"]["r_resolved"] > 0


class TestReproducibility:
    @pytest.mark.parametrize("sub", ["simulate", "smp-check", "second-adjoint"])
    def test_rerun_and_workers_are_byte_identical(self, tmp_path, sub):
        _, a, _ = run_cli(tmp_path, sub, name="a")
        _, b, _ = run_cli(tmp_path, sub, name="b")
        _, c, _ = run_cli(tmp_path, sub, name="c", extra=("--workers", "2"))
        for name in OUTPUTS[sub]:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name
            assert (a / name).read_bytes() == (c / name).read_bytes(), name


class TestFailures:
    def test_config_error(self, tmp_path, capsys):
        code, _, manifest = run_cli(tmp_path, "simulate", TINY + "\n[run]\nwokers = 2\n")
        assert code == EXIT_ERROR
        assert manifest["status"] == "failed" and manifest["stage"] == "config"
        assert "run" in manifest["error"]
        assert "error [config]" in capsys.readouterr().err

    def test_pipeline_error(self, tmp_path):
        text = TINY.replace("t0 = 0.5", "t0 = 5.0")
        code, _, manifest = run_cli(tmp_path, "orders", text)
        assert code == EXIT_ERROR
        assert manifest["status"] == "failed" and manifest["stage"] == "orders"
        assert manifest["error"].startswith("SpikeOutsideHorizon")

    def test_oracle_needs_lq(self, tmp_path):
        text = TINY.replace("lq_scalar", "logistic").replace("a = -1.0, sigma0 = 0.5, sigma_u = 0.5", "")
        text = text.replace('kind = "riccati"', 'kind = "constant"')
        code, _, manifest = run_cli(tmp_path, "oracle-lq", text)
        assert code == EXIT_ERROR and manifest["status"] == "failed"

    def test_usage_errors(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["simulate"])
        assert info.value.code == 2
        code, _, _ = run_cli(tmp_path, "simulate", extra=("--workers", "0"))
        assert code == 2

    def test_exit_codes_distinct(self):
        assert len({EXIT_OK, EXIT_ERROR, EXIT_CHECKS, 2}) == 4

    def test_console_entry(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text(TINY)
        proc = subprocess.run([sys.executable, "-m", "dissipative_smp.cli", "probe", "--config", str(cfg),
                               "--out", str(tmp_path / "o")], capture_output=True, text=True)
        assert proc.returncode == 0 and "recommended r" in proc.stdout


class TestOracle:
    def test_oracle_writes_report(self, tmp_path):
        text = TINY.replace("[output]", "[oracle]\ncost_h = 0.4\ncost_halvings = 2\n\n[output]")
        code, out, manifest = run_cli(tmp_path, "oracle-lq", text)
        assert code in (EXIT_OK, EXIT_CHECKS)
        rows = (out / "oracle_lq.csv").read_text().splitlines()
        assert rows[0] == "check,value,target,tolerance,passed"
        passed = all(row.endswith(",1") for row in rows[1:])
        assert (code == EXIT_OK) == passed
        assert manifest["status"] == ("ok" if passed else "checks_failed")
        for name in ("smp_optimal.csv", "smp_zero.csv", "second_adjoint.csv", "identities.csv", "spike_duality.csv"):
            assert (out / name).exists()

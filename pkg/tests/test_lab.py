"""Configuration handling, the study runners, the CLI, and determinism."""

import json

import numpy as np
import pytest

from twoscale.cli import cli_main
from twoscale.control import ConstantLaw, PiecewiseConstantLaw, effective_drift, evaluate_family_perturbed, PayoffSpec
from twoscale.errors import ConfigError, FamilyMismatchError
from twoscale.gibbs import GibbsFactory
from twoscale.lab import (
    ExperimentConfig,
    limit_values_for_family,
    run_convergence_study,
    run_entropy_table,
    run_quasi_optimality,
    run_report,
    run_value_ordering,
)
from twoscale.sde import BrownianStore, TwoScaleSpec, integrate_effective_ode


def small_cfg(**overrides):
    base = {
        "problem": {"name": "quadratic", "dim": 1},
        "potential": {"gamma": 0.5, "beta": 1.0},
        "dynamics": {"epsilons": [0.1, 0.03], "T": 1.0, "x0": 1.0, "y0": 0.0},
        "mc": {"n_paths": 100, "seed": 7},
        "laws": {"constants": [0.0, 1.0], "bang_bang_switches": 2, "thresholds": 2},
        "payoff": {"orientation": "min", "terminal": "phi_clamped"},
    }
    for section, vals in overrides.items():
        base.setdefault(section, {}).update(vals)
    return ExperimentConfig.from_dict(base)


def write_toml(path, text):
    path.write_text(text)
    return str(path)


SMALL_TOML = """
[problem]
name = "quadratic"
dim = 1

[dynamics]
epsilons = [0.1, 0.03]

[mc]
n_paths = 80
seed = 3

[laws]
constants = [0.0, 1.0]
bang_bang_switches = 2

[thresholds]
e_min_max = 1.0
"""


class TestConfig:
    def test_defaults_are_valid(self):
        cfg = ExperimentConfig.from_dict({})
        assert cfg["potential"]["gamma"] == 0.5
        assert cfg.config_hash() == ExperimentConfig.from_dict({}).config_hash()

    def test_unknown_keys_are_hard_errors(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            ExperimentConfig.from_dict({"dynamics": {"epsilon": [0.1]}})
        with pytest.raises(ConfigError, match="unknown config keys"):
            ExperimentConfig.from_dict({"mystery": {}})

    def test_epsilons_must_decrease(self):
        with pytest.raises(ConfigError, match="decreasing"):
            ExperimentConfig.from_dict({"dynamics": {"epsilons": [0.01, 0.1]}})
        with pytest.raises(ConfigError, match="decreasing"):
            ExperimentConfig.from_dict({"dynamics": {"epsilons": [0.1, 0.1]}})

    def test_inadmissible_gamma_rejected(self):
        with pytest.raises(ConfigError, match="gamma"):
            ExperimentConfig.from_dict({"potential": {"gamma": 2.0}})

    def test_budget_guard_refuses_oversized_study(self):
        cfg = small_cfg(budget={"max_drift_evals": 1000.0})
        with pytest.raises(ConfigError, match="budget"):
            run_convergence_study(cfg)

    def test_hash_tracks_content(self):
        a = small_cfg()
        b = small_cfg(mc={"seed": 8, "n_paths": 100})
        assert a.config_hash() != b.config_hash()


class TestConvergenceStudy:
    def test_requires_vanishing_slow_noise(self):
        cfg = small_cfg(dynamics={"sigma": "constant"})
        with pytest.raises(ConfigError, match="sigma"):
            run_convergence_study(cfg)

    def test_small_ladder_decreases(self, tmp_path):
        cfg = small_cfg(thresholds={"e_min_max": 1.0})
        report = run_convergence_study(cfg, out_dir=tmp_path)
        assert report.passed
        metrics = [r.metric for r in report.rows]
        assert metrics[0] > metrics[1]
        assert 0.5 < report.decay_exponent < 1.5
        csv = (tmp_path / "convergence.csv").read_text().splitlines()
        assert csv[2] == "epsilon,y0,metric,std_err"

    def test_zero_control_reference(self):
        # u = 0 on both sides: the metric vanishes identically.
        pot = small_cfg().potential()
        factory = GibbsFactory(pot)
        fbar = effective_drift(pot, factory)
        law = ConstantLaw(0.0)
        ref = integrate_effective_ode(pot, fbar, law, 1.0, 1.0, n_steps=100)
        from twoscale.sde import integrate_two_scale

        spec = TwoScaleSpec(pot, 0.05)
        bundle = integrate_two_scale(spec, law, 1.0, 0.0, 1.0, 8, BrownianStore(0, 1, 1.0))
        ref_on = np.interp(bundle.times, ref.times, ref.x_paths[0, :, 0])
        metric = np.trapezoid((bundle.x_paths[:, :, 0] - ref_on) ** 2, bundle.times, axis=1)
        assert np.all(metric == 0.0)


class TestValueOrdering:
    def test_family_mismatch_refused(self):
        cfg = small_cfg()
        with pytest.raises(FamilyMismatchError):
            run_value_ordering(cfg, limit_family=[ConstantLaw(0.5)])

    def test_reparametrized_limit_matches_direct_integration(self, quad_pot):
        """The gradient-flow clock gives the same values as direct RK4."""
        factory = GibbsFactory(quad_pot)
        prob = quad_pot.problem
        terminal = lambda x: np.atleast_1d(prob.eval(np.asarray(x, dtype=float)))
        laws = [PiecewiseConstantLaw([0.3], [1.0, 0.0]), PiecewiseConstantLaw([0.6], [0.0, 1.0])]
        fast = limit_values_for_family(quad_pot, factory, laws, 1.5, 1.0, terminal)
        fbar = effective_drift(quad_pot, factory)
        for law, est in zip(laws, fast):
            direct = integrate_effective_ode(quad_pot, fbar, law, 1.5, 1.0)
            v = float(terminal(direct.x_paths[0, -1, :])[0])
            # direct RK4 loses an O(h) increment at the control jump; the
            # clock value integrates the schedule exactly
            np.testing.assert_allclose(est.mean, v, atol=2e-4)

    def test_ordering_small(self, tmp_path):
        cfg = small_cfg(dynamics={"epsilons": [0.02]}, mc={"n_paths": 150, "seed": 5})
        report = run_value_ordering(cfg, out_dir=tmp_path, clamped_terminal=False)
        assert report.passed
        assert report.effective.mean <= report.limit.mean + 1e-12
        lines = (tmp_path / "value.csv").read_text().splitlines()
        kinds = {line.split(",")[2] for line in lines[3:]}
        assert kinds == {"perturbed", "limit", "effective"}


class TestQuasiOptimality:
    def test_unbounded_terminal_refused(self):
        cfg = small_cfg(payoff={"terminal": "phi"})
        with pytest.raises(ConfigError, match="bounded"):
            run_quasi_optimality(cfg)

    def test_small_run_gap_controlled(self, tmp_path):
        cfg = small_cfg(dynamics={"epsilons": [0.05, 0.02]}, mc={"n_paths": 120, "seed": 9})
        report = run_quasi_optimality(cfg, out_dir=tmp_path)
        assert report.passed
        final = report.rows[-1]
        assert final.gap <= 2 * final.combined_se + 1e-2

    def test_stationary_symmetric_start_gap_zero(self):
        """x0 = 0 on the flat problem: value and realization agree exactly."""
        cfg = ExperimentConfig.from_dict(
            {
                "problem": {"name": "zero", "dim": 1},
                "potential": {"gamma": 1.0, "beta": 1.0},
                "dynamics": {"epsilons": [0.05], "T": 1.0, "x0": 0.0, "y0": 0.0},
                "mc": {"n_paths": 60, "seed": 2},
                "laws": {"constants": [0.0, 1.0], "bang_bang_switches": 1, "thresholds": 1},
                "payoff": {"orientation": "min", "terminal": "phi"},
            }
        )
        report = run_quasi_optimality(cfg)
        assert abs(report.rows[-1].gap) <= 2 * report.rows[-1].combined_se + 1e-12

    def test_mc_error_scaling(self, quad_pot):
        """4x the paths roughly halves the reported standard error."""
        spec = TwoScaleSpec(quad_pot, 0.02)
        prob = quad_pot.problem
        payoff_spec = PayoffSpec(T=1.0, terminal=lambda x, y: np.atleast_1d(prob.eval(x)), orientation="min")
        se = {}
        for n in (200, 800):
            est = evaluate_family_perturbed(
                spec, payoff_spec, 1.0, 0.0, [ConstantLaw(1.0)], n, BrownianStore(4, 1, 1.0)
            )[0]
            se[n] = est.std_err
        assert 0.3 <= se[800] / se[200] <= 0.7


class TestEntropyAndReport:
    def test_entropy_table_zero_problem_all_zero_gradient(self, tmp_path):
        cfg = ExperimentConfig.from_dict(
            {"problem": {"name": "zero"}, "potential": {"gamma": 1.0}}
        )
        rows = run_entropy_table(cfg, out_dir=tmp_path)
        assert all(abs(r["grad"]) <= 1e-12 for r in rows)
        assert (tmp_path / "entropy.csv").exists()

    def test_report_is_pure(self, tmp_path):
        cfg = small_cfg(thresholds={"e_min_max": 1.0})
        run_convergence_study(cfg, out_dir=tmp_path)
        first = run_report(tmp_path)
        blob1 = (tmp_path / "report.json").read_bytes()
        second = run_report(tmp_path)
        blob2 = (tmp_path / "report.json").read_bytes()
        assert first == second
        assert blob1 == blob2
        assert first["studies"]["convergence"]["passed"] is True


class TestCli:
    def test_exit_zero_and_outputs(self, tmp_path):
        config = write_toml(tmp_path / "cfg.toml", SMALL_TOML)
        code = cli_main(["converge", "--config", config, "--out", str(tmp_path / "out"), "--quiet"])
        assert code == 0
        assert (tmp_path / "out" / "convergence.csv").exists()
        assert (tmp_path / "out" / "convergence_summary.json").exists()
        summary = json.loads((tmp_path / "out" / "convergence_summary.json").read_text())
        assert summary["passed"] is True
        assert "runtime_s" in summary

    def test_exit_two_on_config_error(self, tmp_path):
        assert cli_main(["converge", "--config", str(tmp_path / "missing.toml")]) == 2
        bad = write_toml(tmp_path / "bad.toml", "[dynamics]\nepsilons = [0.1, 0.2]\n")
        assert cli_main(["converge", "--config", bad]) == 2
        unknown = write_toml(tmp_path / "unknown.toml", "[dynamics]\nepsilonz = [0.1]\n")
        assert cli_main(["converge", "--config", unknown]) == 2

    def test_exit_one_on_failed_assertion(self, tmp_path):
        text = SMALL_TOML.replace("e_min_max = 1.0", "e_min_max = 1e-12")
        config = write_toml(tmp_path / "cfg.toml", text)
        assert cli_main(["converge", "--config", config, "--out", str(tmp_path / "o"), "--quiet"]) == 1

    def test_seed_override_changes_hash_stamp(self, tmp_path):
        config = write_toml(tmp_path / "cfg.toml", SMALL_TOML)
        cli_main(["converge", "--config", config, "--out", str(tmp_path / "a"), "--quiet"])
        cli_main(["converge", "--config", config, "--seed", "99", "--out", str(tmp_path / "b"), "--quiet"])
        head_a = (tmp_path / "a" / "convergence.csv").read_text().splitlines()[1]
        head_b = (tmp_path / "b" / "convergence.csv").read_text().splitlines()[1]
        assert head_a != head_b and "seed=99" in head_b

    def test_rerun_byte_identical_and_thread_independent(self, tmp_path):
        config = write_toml(tmp_path / "cfg.toml", SMALL_TOML)
        cli_main(["converge", "--config", config, "--out", str(tmp_path / "r1"), "--quiet"])
        cli_main(["converge", "--config", config, "--out", str(tmp_path / "r2"), "--quiet"])
        cli_main(["converge", "--config", config, "--out", str(tmp_path / "r8"), "--threads", "8", "--quiet"])
        ref = (tmp_path / "r1" / "convergence.csv").read_bytes()
        assert (tmp_path / "r2" / "convergence.csv").read_bytes() == ref
        assert (tmp_path / "r8" / "convergence.csv").read_bytes() == ref

    def test_hjb_cli_emits_error_table(self, tmp_path):
        config = write_toml(tmp_path / "cfg.toml", SMALL_TOML + '\n[hjb]\nn_x = 201\n')
        assert cli_main(["hjb", "--config", config, "--out", str(tmp_path / "h"), "--quiet"]) == 0
        lines = (tmp_path / "h" / "hjb_error.csv").read_text().splitlines()
        assert lines[2] == "n_x,max_err"
        assert lines[3].startswith("201,")
        assert float(lines[3].split(",")[1]) <= 1e-2

    def test_entropy_cli(self, tmp_path):
        config = write_toml(
            tmp_path / "zero.toml",
            '[problem]\nname = "zero"\n\n[potential]\ngamma = 1.0\n',
        )
        assert cli_main(["entropy", "--config", config, "--out", str(tmp_path / "e"), "--quiet"]) == 0
        lines = (tmp_path / "e" / "entropy.csv").read_text().splitlines()
        grads = [float(line.split(",")[2]) for line in lines[3:]]
        assert all(abs(g) <= 1e-12 for g in grads)

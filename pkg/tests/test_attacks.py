import json

import numpy as np
import pytest

from conftest import linear_params, rand_contractive_params
from deqrb import attacks, model, numkit, solver
from deqrb.attacks import AttackConfig
from deqrb.defenses import DefenseStrategy
from deqrb.gradients import BackwardConfig, GradientSource
from deqrb.solver import SolverConfig


@pytest.fixture
def small_model():
    rng = numkit.make_rng(40)
    return rand_contractive_params(rng, 6, 4, 2, 0.6)


SCFG = SolverConfig(method="broyden", max_iters=6)
BCFG = BackwardConfig(method="picard", max_iters=8)


def cfg_with(source=None, **kw):
    base = dict(epsilon=0.08, step=0.02, steps=5)
    base.update(kw)
    if source is not None:
        base["source"] = source
    return AttackConfig(**base)


class TestPgdAttack:
    def test_zero_radius_is_identity(self, small_model):
        x = np.full(4, 0.5)
        result = attacks.pgd_attack(small_model, x, 0, cfg_with(epsilon=0.0), SCFG, BCFG)
        assert np.array_equal(result.x_adv, x)

    def test_single_step_moves_by_step_size(self):
        # W = 0 with a uniform injection: dL/dx = 0.5 * dLdz on every
        # coordinate, and dLdz > 0 for label 1, < 0 for label 0
        p = linear_params([[0.0]], [0.0], U=[[0.5, 0.5]], V=[[1.0], [-1.0]], r=[0.0, 0.0])
        x = np.full(2, 0.5)
        up = attacks.pgd_attack(p, x, 1, cfg_with(steps=1, epsilon=0.05, step=0.02),
                                SCFG, BCFG)
        assert np.allclose(up.x_adv, x + 0.02, atol=1e-15)
        down = attacks.pgd_attack(p, x, 0, cfg_with(steps=1, epsilon=0.05, step=0.02),
                                  SCFG, BCFG)
        assert np.allclose(down.x_adv, x - 0.02, atol=1e-15)

    def test_step_capped_by_epsilon(self, small_model):
        x = np.full(4, 0.5)
        result = attacks.pgd_attack(
            small_model, x, 0, cfg_with(steps=3, epsilon=0.03, step=0.05), SCFG, BCFG
        )
        assert np.max(np.abs(result.x_adv - x)) <= 0.03 + 1e-12

    def test_default_budget_matches_standard_pgd10(self):
        cfg = AttackConfig()
        assert cfg.epsilon == 8.0 / 255.0
        assert cfg.step == 2.0 / 255.0
        assert cfg.steps == 10

    def test_projection_and_box_hold(self, small_model):
        rng = numkit.make_rng(41)
        for _ in range(5):
            x = rng.uniform(0.0, 1.0, 4)
            result = attacks.pgd_attack(
                small_model, x, 1, cfg_with(random_start=True), SCFG, BCFG, rng=rng
            )
            assert np.max(np.abs(result.x_adv - x)) <= 0.08 + 1e-12
            assert np.min(result.x_adv) >= -1e-12 and np.max(result.x_adv) <= 1.0 + 1e-12

    def test_deterministic_under_seed(self, small_model):
        x = np.full(4, 0.4)
        outs = []
        for _ in range(2):
            rng = numkit.make_rng(99)
            outs.append(attacks.pgd_attack(
                small_model, x, 0, cfg_with(random_start=True), SCFG, BCFG, rng=rng
            ).x_adv)
        assert np.array_equal(outs[0], outs[1])

    def test_random_start_requires_rng(self, small_model):
        with pytest.raises(ValueError):
            attacks.pgd_attack(small_model, np.full(4, 0.5), 0,
                               cfg_with(random_start=True), SCFG, BCFG)

    def test_divergence_counts_as_zero_gradient(self):
        p = linear_params([[1e160]], [1.0], U=[[1.0]])
        x = np.array([0.5])
        result = attacks.pgd_attack(p, x, 0, cfg_with(steps=4), SCFG, BCFG)
        assert result.diverged_steps == 4
        assert np.array_equal(result.x_adv, x)  # sign(0) steps never move

    def test_every_source_kind_runs_through_the_loop(self, small_model):
        sources = [
            GradientSource.exact_final(),
            GradientSource.phantom_final(k=3, damping=0.5),
            GradientSource.unrolled_intermediate(n=2, k=1, damping=1.0),
            GradientSource.adjoint_intermediate(n=3, beta=0.5),
            GradientSource.adjoint_ensemble(beta=0.5),
            GradientSource.unrolled_ensemble(k=1, damping=1.0),
        ]
        x = np.full(4, 0.5)
        for src in sources:
            result = attacks.pgd_attack(small_model, x, 1, cfg_with(source=src), SCFG, BCFG)
            assert result.diverged_steps == 0
            assert np.max(np.abs(result.x_adv - x)) <= 0.08 + 1e-12


class TestEvaluateRobustness:
    def test_zero_radius_robust_equals_clean(self, small_model):
        rng = numkit.make_rng(42)
        X = rng.uniform(0.0, 1.0, (12, 4))
        y = rng.integers(0, 2, 12)
        rep = attacks.evaluate_robustness(
            small_model, X, y, cfg_with(epsilon=0.0), DefenseStrategy.final(), SCFG, BCFG
        )
        assert rep.clean_accuracy == rep.robust_accuracy
        for rec in rep.records:
            assert rec.clean_correct == rec.robust_correct
            assert np.max(np.abs(rec.delta)) == 0.0

    def test_untrained_model_near_chance(self, small_model):
        rng = numkit.make_rng(43)
        X = rng.uniform(0.0, 1.0, (60, 4))
        y = rng.integers(0, 2, 60)
        rep = attacks.evaluate_robustness(
            small_model, X, y, cfg_with(epsilon=0.0), DefenseStrategy.final(), SCFG, BCFG
        )
        assert 0.2 <= rep.clean_accuracy <= 0.8

    def test_empty_set_rejected(self, small_model):
        with pytest.raises(ValueError):
            attacks.evaluate_robustness(
                small_model, np.zeros((0, 4)), np.zeros(0), cfg_with(),
                DefenseStrategy.final(), SCFG, BCFG,
            )

    def test_perturbations_satisfy_contract(self, small_model):
        rng = numkit.make_rng(44)
        X = rng.uniform(0.0, 1.0, (8, 4))
        y = rng.integers(0, 2, 8)
        cfg = cfg_with(source=GradientSource.phantom_final(k=2, damping=0.5))
        rep = attacks.evaluate_robustness(
            small_model, X, y, cfg, DefenseStrategy.ensemble(), SCFG, BCFG
        )
        for rec, x in zip(rep.records, X):
            assert np.max(np.abs(rec.delta)) <= cfg.epsilon + 1e-12
            assert np.all(x + rec.delta >= -1e-12) and np.all(x + rec.delta <= 1.0 + 1e-12)


class TestPerStateRobustness:
    def test_zero_radius_equals_clean_per_state(self, small_model):
        rng = numkit.make_rng(45)
        X = rng.uniform(0.0, 1.0, (10, 4))
        y = rng.integers(0, 2, 10)
        accs = attacks.per_state_robustness(
            small_model, X, y, cfg_with(epsilon=0.0), SCFG, BCFG
        )
        assert accs.shape == (SCFG.max_iters + 2,)
        clean = np.zeros(SCFG.max_iters + 2)
        for x, yy in zip(X, y):
            trace = solver.solve(small_model, x, SCFG)
            for n, z in enumerate(trace.states):
                clean[n] += model.predict(small_model, z) == yy
            clean[-1] += model.predict(
                small_model, solver.extended_state(small_model, trace, x)) == yy
        assert np.array_equal(accs, clean / len(X))

    def test_state_independent_layer_ties_after_first_step(self):
        rng = numkit.make_rng(46)
        p = rand_contractive_params(rng, 4, 3, 2, 0.5)
        p.W[:] = 0.0
        X = rng.uniform(0.0, 1.0, (10, 3))
        y = rng.integers(0, 2, 10)
        accs = attacks.per_state_robustness(p, X, y, cfg_with(), SCFG, BCFG)
        assert len(set(accs[1:].tolist())) == 1  # z_1..z_N and extended all equal


class TestRandomSearchProbe:
    def test_zero_radius_unchanged(self, small_model):
        x = np.full(4, 0.5)
        out = attacks.random_search_probe(
            small_model, x, 0, 0.0, 10, 0.5, numkit.make_rng(0), SCFG
        )
        assert np.array_equal(out.x_adv, x)

    def test_flat_loss_never_accepts(self):
        p = linear_params([[0.5]], [0.2], U=[[1.0]])
        p.V[:] = 0.0  # constant ln 2 loss everywhere
        x = np.array([0.5])
        out = attacks.random_search_probe(p, x, 0, 0.1, 1, 1.0, numkit.make_rng(1), SCFG)
        assert out.accepted_losses == []
        trace = solver.solve(p, out.x_adv, SCFG)
        loss, _, _ = model.readout_loss(p, trace.final_state, 0)
        assert abs(loss - np.log(2.0)) < 1e-12

    def test_accepted_losses_monotone(self, small_model):
        rng = numkit.make_rng(2)
        x = rng.uniform(0.2, 0.8, 4)
        out = attacks.random_search_probe(small_model, x, 1, 0.15, 80, 0.5, rng, SCFG)
        assert all(b > a for a, b in zip(out.accepted_losses, out.accepted_losses[1:]))
        assert out.queries_used == 80

    def test_ball_and_box_respected(self, small_model):
        rng = numkit.make_rng(3)
        x = rng.uniform(0.0, 1.0, 4)
        out = attacks.random_search_probe(small_model, x, 0, 0.2, 40, 0.25, rng, SCFG)
        assert np.max(np.abs(out.x_adv - x)) <= 0.2 + 1e-12
        assert np.min(out.x_adv) >= 0.0 and np.max(out.x_adv) <= 1.0

    def test_parameter_validation(self, small_model):
        x = np.full(4, 0.5)
        with pytest.raises(ValueError):
            attacks.random_search_probe(small_model, x, 0, 0.1, 0, 0.5,
                                        numkit.make_rng(0), SCFG)
        with pytest.raises(ValueError):
            attacks.random_search_probe(small_model, x, 0, 0.1, 5, 0.0,
                                        numkit.make_rng(0), SCFG)


class TestReportExport:
    def _tiny_report(self, small_model):
        rng = numkit.make_rng(47)
        X = rng.uniform(0.0, 1.0, (4, 4))
        y = rng.integers(0, 2, 4)
        return attacks.evaluate_robustness(
            small_model, X, y, cfg_with(), DefenseStrategy.final(), SCFG, BCFG
        )

    def test_csv_columns(self, small_model, tmp_path):
        rep = self._tiny_report(small_model)
        path = tmp_path / "reports.csv"
        attacks.write_reports_csv([rep], path)
        lines = path.read_bytes().decode("utf-8").strip().split("\r\n")
        assert lines[0] == ("example_id,clean_correct,robust_correct,defense,source,"
                            "epsilon,steps,diverged_steps")
        assert len(lines) == 5

    def test_summary_json(self, small_model, tmp_path):
        rep = self._tiny_report(small_model)
        path = tmp_path / "summary.json"
        attacks.write_summary_json([rep], path)
        doc = json.loads(path.read_text())
        key = f"{rep.defense}|{rep.source}"
        assert doc[key]["robust_accuracy"] == rep.robust_accuracy
        assert doc[key]["examples"] == 4


class TestAttackConfigValidation:
    def test_bad_epsilon(self):
        with pytest.raises(ValueError):
            AttackConfig(epsilon=-0.1)

    def test_bad_step(self):
        with pytest.raises(ValueError):
            AttackConfig(step=0.0)

    def test_bad_steps(self):
        with pytest.raises(ValueError):
            AttackConfig(steps=0)

    def test_bad_box(self):
        with pytest.raises(ValueError):
            AttackConfig(box=(1.0, 0.0))

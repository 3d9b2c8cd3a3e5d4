from dataclasses import replace

import numpy as np
import pytest

from conftest import fd_param_grad, linear_params, rand_contractive_params, rel_err
from deqrb import datasets, gradients, model, numkit, solver, training
from deqrb.attacks import AttackConfig
from deqrb.gradients import BackwardConfig, GradientSource
from deqrb.model import ModelDims
from deqrb.solver import SolverConfig
from deqrb.training import AdamConfig, TrainConfig, TrainingDivergence, ready_made_source

SCFG = SolverConfig(method="broyden", max_iters=6)
BCFG = BackwardConfig(method="picard", max_iters=8)


def blob_data(n=160, seed=3):
    return datasets.gen_synthetic("blobs", n, 0.08, 2, seed=seed)


def train_cfg(**kw):
    base = dict(
        mode="standard", grad_mode="unrolling", k=3, damping=0.5, epochs=8,
        batch_size=32, adam=AdamConfig(lr=5e-3), seed=17,
        attack=AttackConfig(epsilon=0.05, step=0.02, steps=3,
                            source=GradientSource.phantom_final(k=3, damping=0.5)),
        spectral_iters=20,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_zero_epochs_returns_initial_params(self):
        data = blob_data()
        p0 = model.init_params(ModelDims(8, 2, 2), "tanh", numkit.make_rng(0))
        best, log = training.train(p0, data, train_cfg(epochs=0), SCFG, BCFG)
        for name, arr in p0.tensors().items():
            assert np.array_equal(arr, getattr(best, name))
        assert log.rows == []

    def test_learns_separable_blobs(self):
        data = blob_data()
        p0 = model.init_params(ModelDims(8, 2, 2), "tanh", numkit.make_rng(1))
        best, log = training.train(p0, data, train_cfg(epochs=25), SCFG, BCFG)
        assert max(r.dev_clean_acc for r in log.rows) > 0.95

    def test_exact_mode_learns_too(self):
        data = blob_data()
        p0 = model.init_params(ModelDims(6, 2, 2), "tanh", numkit.make_rng(2))
        best, log = training.train(
            p0, data, train_cfg(grad_mode="exact", epochs=25), SCFG, BCFG
        )
        assert max(r.dev_clean_acc for r in log.rows) > 0.95

    def test_zero_radius_pgd_at_identical_to_standard(self):
        data = blob_data()
        p0 = model.init_params(ModelDims(6, 2, 2), "tanh", numkit.make_rng(3))
        zero_attack = AttackConfig(epsilon=0.0, step=0.02, steps=3,
                                   source=GradientSource.phantom_final(k=3, damping=0.5))
        runs = {}
        for mode in ("standard", "pgd_at"):
            cfg = train_cfg(mode=mode, epochs=4, attack=zero_attack)
            runs[mode] = training.train(p0, data, cfg, SCFG, BCFG)
        p_std, log_std = runs["standard"]
        p_at, log_at = runs["pgd_at"]
        for name in ("W", "U", "b", "V", "r"):
            assert np.array_equal(getattr(p_std, name), getattr(p_at, name))
        assert log_std.rows == log_at.rows

    def test_seed_determinism(self):
        data = blob_data()
        p0 = model.init_params(ModelDims(6, 2, 2), "tanh", numkit.make_rng(4))
        cfg = train_cfg(mode="pgd_at", epochs=3)
        a_params, a_log = training.train(p0, data, cfg, SCFG, BCFG)
        b_params, b_log = training.train(p0, data, cfg, SCFG, BCFG)
        for name in ("W", "U", "b", "V", "r"):
            assert np.array_equal(getattr(a_params, name), getattr(b_params, name))
        assert a_log.rows == b_log.rows

    def test_returns_best_dev_robust_checkpoint(self):
        data = blob_data()
        p0 = model.init_params(ModelDims(6, 2, 2), "tanh", numkit.make_rng(5))
        best, log = training.train(p0, data, train_cfg(epochs=6), SCFG, BCFG)
        best_robust = max(r.dev_robust_acc for r in log.rows)
        assert log.rows[log.best_epoch].dev_robust_acc == best_robust

    def test_persistent_divergence_aborts(self):
        data = blob_data(n=40)
        p0 = model.init_params(ModelDims(4, 2, 2), "identity", numkit.make_rng(6))
        p0.W *= 1e160 / np.max(np.abs(p0.W))
        with pytest.raises(TrainingDivergence):
            training.train(p0, data, train_cfg(epochs=1), SCFG, BCFG)

    def test_gradient_correctness_gate(self):
        # both training gradient modes pass a finite-difference check
        rng = numkit.make_rng(7)
        p = rand_contractive_params(rng, 4, 2, 2, 0.5)
        x = rng.uniform(0.2, 0.8, 2)
        deep_s = SolverConfig(method="picard", max_iters=300)
        deep_b = BackwardConfig(method="picard", max_iters=300)
        fwd = solver.solve_picard(p, x, deep_s)

        def converged_loss(q):
            t = solver.solve_picard(q, x, deep_s)
            return model.readout_loss(q, t.final_state, 1)[0]

        g = gradients.exact_param_grad(p, x, fwd, 1, deep_b)
        fd = fd_param_grad(converged_loss, p, 1e-6)
        for name in ("W", "U", "b", "V", "r"):
            assert rel_err(getattr(g, name), getattr(fd, name)) < 1e-4

        k, lam = 5, 0.5
        z0 = fwd.final_state

        def unrolled_loss(q):
            z = z0
            for _ in range(k):
                z = (1 - lam) * z + lam * model.layer_apply(q, z, x)
            return model.readout_loss(q, z, 1)[0]

        _, g_ph, _, _ = gradients.phantom_grads(p, x, z0, 1, k, lam)
        fd_ph = fd_param_grad(unrolled_loss, p, 1e-6)
        for name in ("W", "U", "b", "V", "r"):
            assert rel_err(getattr(g_ph, name), getattr(fd_ph, name)) < 1e-4

    def test_ready_made_source_mapping(self):
        assert ready_made_source("exact", 5, 0.5) == GradientSource.exact_final()
        assert ready_made_source("unrolling", 5, 0.5) == GradientSource.phantom_final(5, 0.5)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            train_cfg(mode="trades")
        with pytest.raises(ValueError):
            train_cfg(grad_mode="neumann")
        with pytest.raises(ValueError):
            train_cfg(jac_reg_weight=-1.0)


class TestJacobianReg:
    def test_zero_weights_give_zero(self):
        p = linear_params([[0.0]], [0.0], U=[[1.0]])
        p.activation = "tanh"
        val, grad = training.jacobian_reg(p, np.zeros(1), np.zeros(1), 1, numkit.make_rng(0))
        assert val == 0.0
        assert grad.max_abs() == 0.0

    def test_scaled_identity_value(self):
        # unit slope at zero preactivation: ||w I||_F^2 / d = w^2 exactly
        w = 0.7
        d = 4
        p = model.LayerParams(
            W=w * np.eye(d), U=np.zeros((d, 2)), b=np.zeros(d),
            V=np.zeros((2, d)), r=np.zeros(2), activation="tanh",
        )
        val, _ = training.jacobian_reg(p, np.zeros(d), np.zeros(2), 3, numkit.make_rng(1))
        assert abs(val - w * w) < 1e-12

    def test_hutchinson_converges_to_dense_oracle(self):
        rng = numkit.make_rng(8)
        p = rand_contractive_params(rng, 5, 3, 2, 0.8)
        z = rng.standard_normal(5)
        x = rng.uniform(0.0, 1.0, 3)
        a = p.W @ z + p.U @ x + p.b
        s = 1.0 - np.tanh(a) ** 2
        dense = np.sum((s[:, None] * p.W) ** 2) / 5.0
        val, _ = training.jacobian_reg(p, z, x, 10_000, numkit.make_rng(9))
        assert abs(val - dense) / dense < 0.02

    def test_gradient_matches_finite_differences(self):
        rng = numkit.make_rng(10)
        p = rand_contractive_params(rng, 3, 2, 2, 0.7)
        z = rng.standard_normal(3)
        x = rng.uniform(0.0, 1.0, 2)
        seed = 123  # same probe vector on every evaluation

        def value(q):
            return training.jacobian_reg(q, z, x, 1, numkit.make_rng(seed))[0]

        _, grad = training.jacobian_reg(p, z, x, 1, numkit.make_rng(seed))
        fd = fd_param_grad(value, p, 1e-6, names=("W", "U", "b"))
        for name in ("W", "U", "b"):
            assert rel_err(getattr(grad, name), getattr(fd, name)) < 1e-5

    def test_gradient_step_decreases_dense_norm(self):
        rng = numkit.make_rng(11)
        p = rand_contractive_params(rng, 4, 2, 2, 0.9)
        z = rng.standard_normal(4)
        x = rng.uniform(0.0, 1.0, 2)

        def dense(q):
            a = q.W @ z + q.U @ x + q.b
            s = 1.0 - np.tanh(a) ** 2
            return np.sum((s[:, None] * q.W) ** 2) / 4.0

        _, grad = training.jacobian_reg(p, z, x, 200, numkit.make_rng(12))
        base = dense(p)
        decreased = False
        for eta in (1e-2, 1e-3, 1e-4):
            q = p.copy()
            for name, arr in q.tensors().items():
                arr -= eta * getattr(grad, name)
            if dense(q) < base:
                decreased = True
                break
        assert decreased

    def test_probe_count_validated(self):
        p = linear_params([[0.5]], [0.0])
        with pytest.raises(ValueError):
            training.jacobian_reg(p, np.zeros(1), np.zeros(1), 0, numkit.make_rng(0))


class TestSpectralTrace:
    def test_zero_weights(self):
        rng = numkit.make_rng(13)
        p = rand_contractive_params(rng, 4, 2, 2, 0.5)
        p.W[:] = 0.0
        X = rng.uniform(0.0, 1.0, (5, 2))
        assert training.spectral_trace(p, X, SCFG, 10, numkit.make_rng(0)) == 0.0

    def test_scaled_identity(self):
        p = linear_params(0.8 * np.eye(3), np.zeros(3), U=np.full((3, 2), 0.1))
        X = numkit.make_rng(14).uniform(0.0, 1.0, (4, 2))
        est = training.spectral_trace(p, X, SCFG, 30, numkit.make_rng(1))
        assert abs(est - 0.8) < 1e-6

    def test_empty_dev_set_rejected(self):
        p = linear_params([[0.5]], [0.0])
        with pytest.raises(ValueError):
            training.spectral_trace(p, np.zeros((0, 1)), SCFG, 10, numkit.make_rng(0))


class TestTrainLogCsv:
    def test_columns_and_rows(self, tmp_path):
        data = blob_data(n=60)
        p0 = model.init_params(ModelDims(4, 2, 2), "tanh", numkit.make_rng(15))
        _, log = training.train(p0, data, train_cfg(epochs=2), SCFG, BCFG)
        path = tmp_path / "trainlog.csv"
        log.write_csv(path)
        lines = path.read_bytes().decode("utf-8").strip().split("\r\n")
        assert lines[0] == "epoch,loss,clean_acc,robust_acc,spectral_radius,rel_error"
        assert len(lines) == 3

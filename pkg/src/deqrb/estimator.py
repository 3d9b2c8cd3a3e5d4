"""Scikit-learn estimator wrapper around the equilibrium classifier.

``DeqClassifier`` follows the fit/predict contract (get_params, clone
and cross-validation all work), so the model composes with pipelines
and model selection from the wider ecosystem. Features are min-max
scaled into the unit box on fit; adversarial training and attack radii
operate in those scaled units.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import attacks, defenses, model, numkit, solver, training
from .attacks import AttackConfig
from .datasets import Dataset
from .defenses import DefenseStrategy
from .gradients import BackwardConfig
from .model import ModelDims
from .solver import SolverConfig
from .training import AdamConfig, TrainConfig, ready_made_source


class DeqClassifier(BaseEstimator, ClassifierMixin):
    """Weight-tied equilibrium classifier with optional adversarial training.

    Parameters
    ----------
    state_dim : hidden equilibrium-state dimension.
    activation : "tanh" or "relu".
    solver_method : forward fixed-point solver, "broyden" or "picard".
    forward_iters, backward_iters : solver iteration budgets.
    grad_mode : "unrolling" (phantom gradient) or "exact" (implicit).
    unroll_steps, unroll_damping : phantom-gradient unroll settings.
    adversarial : train on PGD adversaries instead of clean inputs.
    epsilon, attack_step, attack_steps : PGD budget in scaled units.
    defense : state fed to the readout at predict time: "final",
        "early" (calibrated on the internal dev split) or "ensemble".
    dev_frac : fraction of the training data held out for calibration
        and checkpoint selection.
    """

    def __init__(
        self,
        state_dim: int = 16,
        activation: str = "tanh",
        solver_method: str = "broyden",
        forward_iters: int = 8,
        backward_iters: int = 7,
        grad_mode: str = "unrolling",
        unroll_steps: int = 5,
        unroll_damping: float = 0.5,
        adversarial: bool = False,
        epsilon: float = 8.0 / 255.0,
        attack_step: float = 2.0 / 255.0,
        attack_steps: int = 10,
        epochs: int = 30,
        batch_size: int = 32,
        learning_rate: float = 1e-3,
        jac_reg_weight: float = 0.0,
        defense: str = "final",
        dev_frac: float = 0.2,
        random_state: int = 0,
    ):
        self.state_dim = state_dim
        self.activation = activation
        self.solver_method = solver_method
        self.forward_iters = forward_iters
        self.backward_iters = backward_iters
        self.grad_mode = grad_mode
        self.unroll_steps = unroll_steps
        self.unroll_damping = unroll_damping
        self.adversarial = adversarial
        self.epsilon = epsilon
        self.attack_step = attack_step
        self.attack_steps = attack_steps
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.jac_reg_weight = jac_reg_weight
        self.defense = defense
        self.dev_frac = dev_frac
        self.random_state = random_state

    def _solver_config(self) -> SolverConfig:
        return SolverConfig(method=self.solver_method, max_iters=self.forward_iters)

    def _backward_config(self) -> BackwardConfig:
        return BackwardConfig(max_iters=self.backward_iters)

    def _scale(self, X: np.ndarray) -> np.ndarray:
        return np.clip((X - self.feature_min_) / self.feature_span_, 0.0, 1.0)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        self.feature_min_ = X.min(axis=0)
        span = X.max(axis=0) - self.feature_min_
        span[span == 0.0] = 1.0
        self.feature_span_ = span
        X01 = self._scale(X)

        rng = numkit.make_rng(numkit.derived_seed(self.random_state, "split"))
        perm = rng.permutation(len(X01))
        n_dev = max(1, int(round(len(X01) * self.dev_frac)))
        data = Dataset(
            inputs=X01, labels=y_enc,
            train_idx=np.sort(perm[n_dev:]), dev_idx=np.sort(perm[:n_dev]),
        )
        dims = ModelDims(d=self.state_dim, l=self.n_features_in_, c=len(self.classes_))
        p0 = model.init_params(
            dims, self.activation,
            numkit.make_rng(numkit.derived_seed(self.random_state, "init")),
        )
        attack = AttackConfig(
            epsilon=self.epsilon, step=self.attack_step, steps=self.attack_steps,
            source=ready_made_source(self.grad_mode, self.unroll_steps, self.unroll_damping),
        )
        tcfg = TrainConfig(
            mode="pgd_at" if self.adversarial else "standard",
            grad_mode=self.grad_mode,
            k=self.unroll_steps,
            damping=self.unroll_damping,
            epochs=self.epochs,
            batch_size=self.batch_size,
            adam=AdamConfig(lr=self.learning_rate),
            jac_reg_weight=self.jac_reg_weight,
            attack=attack,
            seed=numkit.derived_seed(self.random_state, "train"),
        )
        scfg, bcfg = self._solver_config(), self._backward_config()
        self.params_, self.train_log_ = training.train(p0, data, tcfg, scfg, bcfg)
        if self.defense == "early":
            X_dev, y_dev = data.split("dev")
            n_star = defenses.calibrate_early_exit(
                self.params_, X_dev, y_dev, attack, scfg, bcfg,
                rng=numkit.make_rng(numkit.derived_seed(self.random_state, "calibrate")),
            )
            self.defense_ = DefenseStrategy.early(n_star)
        else:
            self.defense_ = DefenseStrategy(kind=self.defense)
        return self

    def _defended_states(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"expected {self.n_features_in_} features, got {X.shape[1]}"
            )
        X01 = self._scale(X)
        scfg = self._solver_config()
        states = [
            defenses.defended_state(solver.solve(self.params_, x, scfg), self.defense_)
            for x in X01
        ]
        return np.stack(states)

    def decision_function(self, X) -> np.ndarray:
        states = self._defended_states(X)
        logit_rows = np.stack([model.logits(self.params_, z) for z in states])
        if logit_rows.shape[1] == 2:
            return logit_rows[:, 1] - logit_rows[:, 0]
        return logit_rows

    def predict_proba(self, X) -> np.ndarray:
        states = self._defended_states(X)
        return np.stack([model.softmax(model.logits(self.params_, z)) for z in states])

    def predict(self, X) -> np.ndarray:
        states = self._defended_states(X)
        idx = [model.predict(self.params_, z) for z in states]
        return self.classes_[idx]

    def attack_report(self, X, y, source=None) -> attacks.AttackReport:
        """Robust accuracy of the fitted model under PGD on (X, y)."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        y_enc = np.searchsorted(self.classes_, y)
        cfg = AttackConfig(
            epsilon=self.epsilon, step=self.attack_step, steps=self.attack_steps,
            source=source if source is not None
            else ready_made_source(self.grad_mode, self.unroll_steps, self.unroll_damping),
        )
        rng = numkit.make_rng(numkit.derived_seed(self.random_state, "attack"))
        return attacks.evaluate_robustness(
            self.params_, self._scale(X), y_enc, cfg, self.defense_,
            self._solver_config(), self._backward_config(), rng=rng,
        )

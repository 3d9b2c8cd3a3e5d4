"""Standard and adversarial (PGD-AT) training for the toy equilibrium model.

Training modes differ only in whether each batch's inputs are replaced
by PGD adversaries before the parameter update; gradient modes pick
between the exact implicit gradient and the unrolling phantom gradient.
The returned checkpoint is the one with the best development-set robust
accuracy under the configured ready-made attack. All randomness flows
from the config seed through purpose-separated generator streams, so a
zero-radius PGD-AT run is bit-identical to standard training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks, gradients, model, numkit, solver
from .attacks import AttackConfig
from .datasets import Dataset
from .gradients import BackwardConfig, GradientSource
from .model import LayerParams, ParamGrad
from .solver import SolverConfig, SolverDivergence


class TrainingDivergence(RuntimeError):
    """Raised when every example of an epoch hits solver divergence."""

    def __init__(self, message: str, log: "TrainLog | None" = None):
        super().__init__(message)
        self.log = log


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    mode: str = "standard"  # "standard" or "pgd_at"
    grad_mode: str = "unrolling"  # "exact" or "unrolling"
    k: int = 5
    damping: float = 0.5
    epochs: int = 30
    batch_size: int = 32
    adam: AdamConfig = field(default_factory=AdamConfig)
    jac_reg_weight: float = 0.0
    jac_reg_stop_epoch: int = 10**9
    jac_reg_probes: int = 1
    attack: AttackConfig = field(default_factory=AttackConfig)
    spectral_iters: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("standard", "pgd_at"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.grad_mode not in ("exact", "unrolling"):
            raise ValueError(f"unknown grad mode {self.grad_mode!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.jac_reg_weight < 0.0:
            raise ValueError("jac_reg_weight must be >= 0")


def ready_made_source(grad_mode: str, k: int, damping: float) -> GradientSource:
    """The training-time final-state gradient used for adversary generation."""
    if grad_mode == "exact":
        return GradientSource.exact_final()
    return GradientSource.phantom_final(k=k, damping=damping)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    dev_clean_acc: float
    dev_robust_acc: float
    spectral_radius: float
    mean_rel_error: float


@dataclass
class TrainLog:
    rows: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([
                "epoch", "loss", "clean_acc", "robust_acc", "spectral_radius", "rel_error",
            ])
            for row in self.rows:
                writer.writerow([
                    row.epoch,
                    format(row.train_loss, ".17g"),
                    format(row.dev_clean_acc, ".17g"),
                    format(row.dev_robust_acc, ".17g"),
                    format(row.spectral_radius, ".17g"),
                    format(row.mean_rel_error, ".17g"),
                ])


class AdamState:
    """Per-tensor Adam moments with bias correction."""

    def __init__(self, p: LayerParams, cfg: AdamConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {name: np.zeros_like(arr) for name, arr in p.tensors().items()}
        self.v = {name: np.zeros_like(arr) for name, arr in p.tensors().items()}

    def step(self, p: LayerParams, grad: ParamGrad) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, arr in p.tensors().items():
            g = getattr(grad, name)
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - c.beta1) * (g - m)
            v += (1.0 - c.beta2) * (g * g - v)
            arr -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def jacobian_reg(
    p: LayerParams,
    z: np.ndarray,
    x: np.ndarray,
    probes: int,
    rng: np.random.Generator,
) -> tuple[float, ParamGrad]:
    """Hutchinson estimate of ||df/dz||_F^2 / d and its parameter gradient.

    For Rademacher probes xi, E ||J^T xi||^2 = ||J||_F^2; the value and
    its analytic gradient are averaged over ``probes`` draws and scaled
    by 1/d to make the weight roughly dimension-independent.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    d = p.W.shape[0]
    a = p.W @ z + p.U @ x + p.b
    s = model._act_prime(a, p.activation)
    s2 = model._act_second(a, p.activation)
    value = 0.0
    grad = model.zero_grad(p)
    for _ in range(probes):
        xi = rng.integers(0, 2, size=d) * 2.0 - 1.0
        m = s * xi
        q = p.W.T @ m
        value += float(q @ q)
        # d/dW of q.q: explicit W term plus the preactivation path
        chain = (p.W @ q) * s2 * xi
        grad.W += 2.0 * (np.outer(m, q) + np.outer(chain, z))
        grad.U += 2.0 * np.outer(chain, x)
        grad.b += 2.0 * chain
    scale = 1.0 / (probes * d)
    grad.scale_(scale)
    return value * scale, grad


def spectral_trace(
    p: LayerParams,
    dev_inputs: np.ndarray,
    scfg: SolverConfig,
    iters: int,
    rng: np.random.Generator,
) -> float:
    """Mean spectral-radius estimate of df/dz at converged states on the dev set."""
    if len(dev_inputs) == 0:
        raise ValueError("empty dev set")
    d = p.W.shape[0]
    total = 0.0
    for x in dev_inputs:
        trace = solver.solve(p, x, scfg)
        z = trace.final_state
        total += numkit.power_iteration(
            lambda v: model.vjp_z(p, z, x, v), d, iters, rng
        )
    return total / len(dev_inputs)


def _example_grad(
    p: LayerParams,
    x: np.ndarray,
    y: int,
    cfg: TrainConfig,
    scfg: SolverConfig,
    bcfg: BackwardConfig,
) -> tuple[float, ParamGrad, np.ndarray]:
    """Loss, parameter gradient and final forward state for one example."""
    fwd = solver.solve(p, x, scfg)
    z = fwd.final_state
    if cfg.grad_mode == "exact":
        loss, _, _ = model.readout_loss(p, z, y)
        grad = gradients.exact_param_grad(p, x, fwd, y, bcfg)
    else:
        _, grad, loss, _ = gradients.phantom_grads(p, x, z, y, cfg.k, cfg.damping)
    return loss, grad, z


def _dev_metrics(
    p: LayerParams,
    dev_inputs: np.ndarray,
    dev_labels: np.ndarray,
    scfg: SolverConfig,
) -> tuple[float, float]:
    """Clean final-state accuracy and mean final relative error on the dev set."""
    correct = 0
    rel_sum = 0.0
    for x, y in zip(dev_inputs, dev_labels):
        try:
            trace = solver.solve(p, x, scfg)
        except SolverDivergence:
            rel_sum += float("inf")
            continue
        if model.predict(p, trace.final_state) == int(y):
            correct += 1
        rel_sum += trace.rel_errors[-1]
    return correct / len(dev_inputs), rel_sum / len(dev_inputs)


def train(
    p0: LayerParams,
    data: Dataset,
    cfg: TrainConfig,
    scfg: SolverConfig,
    bcfg: BackwardConfig,
) -> tuple[LayerParams, TrainLog]:
    """Optimize the model, tracking per-epoch metrics and the best checkpoint."""
    p = p0.copy()
    streams = np.random.SeedSequence(cfg.seed).spawn(5)
    shuffle_rng, attack_rng, eval_rng, jacreg_rng, spectral_rng = (
        np.random.default_rng(s) for s in streams
    )
    adam = AdamState(p, cfg.adam)
    log = TrainLog()
    X_tr = data.inputs[data.train_idx]
    y_tr = data.labels[data.train_idx]
    X_dev = data.inputs[data.dev_idx]
    y_dev = data.labels[data.dev_idx]
    best = p.copy()
    best_robust = -1.0
    craft = cfg.mode == "pgd_at" and cfg.attack.epsilon > 0.0

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(X_tr))
        losses: list[float] = []
        diverged = 0
        apply_jr = cfg.jac_reg_weight > 0.0 and epoch < cfg.jac_reg_stop_epoch
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grad_sum = model.zero_grad(p)
            n_ok = 0
            for i in batch:
                x, y = X_tr[i], int(y_tr[i])
                if craft:
                    x = attacks.pgd_attack(p, x, y, cfg.attack, scfg, bcfg, rng=attack_rng).x_adv
                try:
                    loss, grad, z = _example_grad(p, x, y, cfg, scfg, bcfg)
                    if apply_jr:
                        jr_val, jr_grad = jacobian_reg(p, z, x, cfg.jac_reg_probes, jacreg_rng)
                        loss += cfg.jac_reg_weight * jr_val
                        grad.add_(jr_grad, scale=cfg.jac_reg_weight)
                except SolverDivergence:
                    diverged += 1
                    continue
                grad_sum.add_(grad)
                losses.append(loss)
                n_ok += 1
            if n_ok > 0:
                grad_sum.scale_(1.0 / n_ok)
                adam.step(p, grad_sum)
        if diverged == len(order):
            raise TrainingDivergence(
                f"solver diverged on every example in epoch {epoch}", log
            )

        clean_acc, rel_err = _dev_metrics(p, X_dev, y_dev, scfg)
        if cfg.attack.epsilon > 0.0:
            from .defenses import DefenseStrategy

            report = attacks.evaluate_robustness(
                p, X_dev, y_dev, cfg.attack, DefenseStrategy.final(), scfg, bcfg, rng=eval_rng
            )
            robust_acc = report.robust_accuracy
        else:
            robust_acc = clean_acc
        radius = spectral_trace(p, X_dev, scfg, cfg.spectral_iters, spectral_rng)
        log.rows.append(EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            dev_clean_acc=clean_acc,
            dev_robust_acc=robust_acc,
            spectral_radius=radius,
            mean_rel_error=rel_err,
        ))
        if robust_acc > best_robust:
            best_robust = robust_acc
            best = p.copy()
            log.best_epoch = epoch
    return best, log

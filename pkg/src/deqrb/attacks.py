"""L-infinity PGD with pluggable gradient sources, plus a gradient-free probe.

The PGD loop is source-agnostic: it only sees a gradient callback, so
every estimator (exact, phantom, unrolled intermediate, adjoint flavors)
plugs in without special cases. Each step re-solves the forward pass at
the current adversarial input. A solver divergence during a step zeroes
that step's gradient and is flagged in the report instead of aborting.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import defenses, gradients, model, solver
from .defenses import DefenseStrategy
from .gradients import BackwardConfig, GradientSource
from .model import LayerParams
from .solver import SolverConfig, SolverDivergence

PROJECTION_TOL = 1e-12


@dataclass
class AttackConfig:
    epsilon: float = 8.0 / 255.0
    step: float = 2.0 / 255.0
    steps: int = 10
    random_start: bool = False
    box: tuple[float, float] = (0.0, 1.0)
    source: GradientSource = field(default_factory=GradientSource.exact_final)

    def __post_init__(self):
        if self.epsilon < 0.0:
            raise ValueError("epsilon must be >= 0")
        if self.step <= 0.0:
            raise ValueError("step must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        lo, hi = self.box
        if not lo < hi:
            raise ValueError("box must satisfy lo < hi")

    def with_source(self, source: GradientSource) -> "AttackConfig":
        return AttackConfig(
            epsilon=self.epsilon, step=self.step, steps=self.steps,
            random_start=self.random_start, box=self.box, source=source,
        )


@dataclass
class PgdResult:
    x_adv: np.ndarray
    diverged_steps: int = 0


@dataclass
class ProbeResult:
    x_adv: np.ndarray
    accepted_losses: list[float] = field(default_factory=list)
    queries_used: int = 0


@dataclass
class ExampleRecord:
    example_id: int
    clean_correct: bool
    robust_correct: bool
    diverged_steps: int
    delta: np.ndarray

    @property
    def attack_success(self) -> bool:
        return self.clean_correct and not self.robust_correct


@dataclass
class AttackReport:
    defense: str
    source: str
    epsilon: float
    steps: int
    records: list[ExampleRecord] = field(default_factory=list)

    @property
    def clean_accuracy(self) -> float:
        return sum(r.clean_correct for r in self.records) / len(self.records)

    @property
    def robust_accuracy(self) -> float:
        return sum(r.robust_correct for r in self.records) / len(self.records)


def _check_projection(x_adv: np.ndarray, x0: np.ndarray, cfg: AttackConfig) -> None:
    lo, hi = cfg.box
    assert np.all(np.abs(x_adv - x0) <= cfg.epsilon + PROJECTION_TOL), "epsilon ball violated"
    assert np.all(x_adv >= lo - PROJECTION_TOL) and np.all(x_adv <= hi + PROJECTION_TOL), \
        "box constraint violated"


def pgd_attack(
    p: LayerParams,
    x: np.ndarray,
    y: int,
    cfg: AttackConfig,
    scfg: SolverConfig,
    bcfg: BackwardConfig,
    rng: np.random.Generator | None = None,
) -> PgdResult:
    """Projected sign-gradient ascent inside the epsilon ball and box."""
    lo, hi = cfg.box
    x0 = np.asarray(x, dtype=np.float64)
    if cfg.random_start and cfg.epsilon > 0.0:
        if rng is None:
            raise ValueError("random_start requires an rng")
        x_adv = np.clip(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape), lo, hi)
    else:
        x_adv = x0.copy()
    diverged = 0
    for _ in range(cfg.steps):
        try:
            g = gradients.source_input_grad(p, x_adv, y, cfg.source, scfg, bcfg)
        except SolverDivergence:
            g = np.zeros_like(x_adv)
            diverged += 1
        x_adv = x_adv + cfg.step * np.sign(g)
        x_adv = np.clip(x_adv, x0 - cfg.epsilon, x0 + cfg.epsilon)
        x_adv = np.clip(x_adv, lo, hi)
        _check_projection(x_adv, x0, cfg)
    return PgdResult(x_adv=x_adv, diverged_steps=diverged)


def _classify(
    p: LayerParams, x: np.ndarray, defense: DefenseStrategy, scfg: SolverConfig
) -> int | None:
    """Predicted class at the defense's state, or None on solver divergence."""
    try:
        trace = solver.solve(p, x, scfg)
    except SolverDivergence:
        return None
    return model.predict(p, defenses.defended_state(trace, defense))


def evaluate_robustness(
    p: LayerParams,
    inputs: np.ndarray,
    labels: np.ndarray,
    cfg: AttackConfig,
    defense: DefenseStrategy,
    scfg: SolverConfig,
    bcfg: BackwardConfig,
    rng: np.random.Generator | None = None,
) -> AttackReport:
    """Attack every example under cfg and classify via the defense's state."""
    if len(inputs) == 0:
        raise ValueError("empty evaluation set")
    report = AttackReport(
        defense=defense.describe(), source=cfg.source.describe(),
        epsilon=cfg.epsilon, steps=cfg.steps,
    )
    for i, (x, y) in enumerate(zip(inputs, labels)):
        y = int(y)
        clean_pred = _classify(p, x, defense, scfg)
        result = pgd_attack(p, x, y, cfg, scfg, bcfg, rng=rng)
        adv_pred = _classify(p, result.x_adv, defense, scfg)
        report.records.append(ExampleRecord(
            example_id=i,
            clean_correct=clean_pred == y,
            robust_correct=adv_pred == y,
            diverged_steps=result.diverged_steps,
            delta=result.x_adv - np.asarray(x, dtype=np.float64),
        ))
    return report


def per_state_robustness(
    p: LayerParams,
    inputs: np.ndarray,
    labels: np.ndarray,
    cfg: AttackConfig,
    scfg: SolverConfig,
    bcfg: BackwardConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Robust accuracy of every trace state under a single attack config.

    Adversaries are crafted once per example with cfg.source; each state
    z_0..z_N of the resulting trace is classified through the shared
    readout, plus the extended state f(z_N; x) at the last index.
    """
    if len(inputs) == 0:
        raise ValueError("empty evaluation set")
    n_states = scfg.max_iters + 2  # z_0..z_N and the extended state
    correct = np.zeros(n_states)
    for x, y in zip(inputs, labels):
        y = int(y)
        result = pgd_attack(p, x, y, cfg, scfg, bcfg, rng=rng)
        try:
            trace = solver.solve(p, result.x_adv, scfg)
        except SolverDivergence:
            continue  # every state counts as incorrect
        for n, z in enumerate(trace.states):
            if model.predict(p, z) == y:
                correct[n] += 1
        z_ext = solver.extended_state(p, trace, result.x_adv)
        if model.predict(p, z_ext) == y:
            correct[-1] += 1
    return correct / len(inputs)


def random_search_probe(
    p: LayerParams,
    x: np.ndarray,
    y: int,
    epsilon: float,
    queries: int,
    patch_frac: float,
    rng: np.random.Generator,
    scfg: SolverConfig,
) -> ProbeResult:
    """Gradient-free loss-ascent probe over random coordinate blocks.

    Each query sets a random contiguous block of the perturbation to a
    random sign times epsilon and keeps the proposal iff the final-state
    loss strictly increases. Serves as an obfuscation detector: it needs
    no gradients, so it keeps working when gradient-based attacks break.
    """
    if queries < 1:
        raise ValueError("queries must be >= 1")
    if not 0.0 < patch_frac <= 1.0:
        raise ValueError("patch_frac must lie in (0, 1]")
    x0 = np.asarray(x, dtype=np.float64)
    if epsilon == 0.0:
        return ProbeResult(x_adv=x0.copy(), queries_used=0)
    lo, hi = 0.0, 1.0

    def loss_at(xp: np.ndarray) -> float:
        try:
            trace = solver.solve(p, xp, scfg)
            loss, _, _ = model.readout_loss(p, trace.final_state, y)
            return loss
        except SolverDivergence:
            return float("-inf")

    l = x0.shape[0]
    block = max(1, int(round(patch_frac * l)))
    delta = np.zeros_like(x0)
    best_loss = loss_at(x0)
    accepted: list[float] = []
    for _ in range(queries):
        start = int(rng.integers(0, l - block + 1))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        cand = delta.copy()
        cand[start:start + block] = sign * epsilon
        x_cand = np.clip(x0 + cand, lo, hi)
        cand_loss = loss_at(x_cand)
        if cand_loss > best_loss:
            delta = x_cand - x0
            best_loss = cand_loss
            accepted.append(cand_loss)
    return ProbeResult(
        x_adv=np.clip(x0 + delta, lo, hi),
        accepted_losses=accepted,
        queries_used=queries,
    )


# --- report export ---------------------------------------------------------------

def write_reports_csv(reports: list[AttackReport], path: str | Path) -> None:
    """Per-example rows for one or more attack evaluations."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "example_id", "clean_correct", "robust_correct",
            "defense", "source", "epsilon", "steps", "diverged_steps",
        ])
        for rep in reports:
            for rec in rep.records:
                writer.writerow([
                    rec.example_id, int(rec.clean_correct), int(rec.robust_correct),
                    rep.defense, rep.source,
                    format(rep.epsilon, ".17g"), rep.steps, rec.diverged_steps,
                ])


def write_summary_json(reports: list[AttackReport], path: str | Path) -> None:
    """Aggregate accuracies keyed by defense x source."""
    summary: dict[str, dict] = {}
    for rep in reports:
        summary[f"{rep.defense}|{rep.source}"] = {
            "defense": rep.defense,
            "source": rep.source,
            "epsilon": rep.epsilon,
            "steps": rep.steps,
            "clean_accuracy": rep.clean_accuracy,
            "robust_accuracy": rep.robust_accuracy,
            "examples": len(rep.records),
        }
    Path(path).write_text(json.dumps(summary, sort_keys=True, indent=2), encoding="utf-8")

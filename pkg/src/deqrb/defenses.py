"""Inference-time readout strategies: final state, early exit, state ensemble.

The early-exit index is calibrated once on a development set under the
ready-made attack and then frozen. The ensemble strategy averages the
states z_1..z_N (the zero start is excluded) and has a streaming form
that holds only a running sum and a counter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LayerParams
from .solver import ForwardTrace, SolverConfig

DEFENSE_KINDS = ("final", "early", "ensemble")


@dataclass(frozen=True)
class DefenseStrategy:
    kind: str
    n_star: int | None = None

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.kind == "early" and self.n_star is not None and self.n_star < 1:
            raise ValueError("early exit index must be >= 1")

    @property
    def calibrated(self) -> bool:
        return self.kind != "early" or self.n_star is not None

    @classmethod
    def final(cls) -> "DefenseStrategy":
        return cls(kind="final")

    @classmethod
    def early(cls, n_star: int | None = None) -> "DefenseStrategy":
        return cls(kind="early", n_star=n_star)

    @classmethod
    def ensemble(cls) -> "DefenseStrategy":
        return cls(kind="ensemble")

    def describe(self) -> str:
        if self.kind == "early" and self.n_star is not None:
            return f"early(n={self.n_star})"
        return self.kind

    def to_dict(self) -> dict:
        doc: dict = {"kind": self.kind}
        if self.n_star is not None:
            doc["n_star"] = self.n_star
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "DefenseStrategy":
        return cls(kind=doc["kind"], n_star=doc.get("n_star"))


def defended_state(trace: ForwardTrace, strategy: DefenseStrategy) -> np.ndarray:
    """The state fed to the readout head under the given strategy."""
    if strategy.kind == "final":
        return trace.final_state
    if strategy.kind == "early":
        if strategy.n_star is None:
            raise ValueError("early-exit defense used before calibration")
        if not 1 <= strategy.n_star < len(trace.states):
            raise ValueError(
                f"early exit index {strategy.n_star} outside trace of length {len(trace.states)}"
            )
        return trace.states[strategy.n_star]
    acc = StreamingEnsemble()
    for z in trace.states[1:]:
        acc.push(z)
    return acc.finish()


class StreamingEnsemble:
    """O(1)-memory running mean of pushed states."""

    def __init__(self):
        self._sum: np.ndarray | None = None
        self._count: int = 0

    def push(self, z: np.ndarray) -> None:
        if self._sum is None:
            self._sum = np.array(z, dtype=np.float64)
        else:
            self._sum += z
        self._count += 1

    def finish(self) -> np.ndarray:
        if self._count == 0:
            raise ValueError("finish() before any push")
        return self._sum / self._count


def streaming_ensemble() -> StreamingEnsemble:
    return StreamingEnsemble()


def calibrate_early_exit(
    p: LayerParams,
    dev_inputs: np.ndarray,
    dev_labels: np.ndarray,
    ready_made_cfg,
    scfg: SolverConfig,
    bcfg,
    rng: np.random.Generator | None = None,
) -> int:
    """Pick the most robust state index on the dev set under the ready-made attack.

    Returns the argmax-accuracy index over z_1..z_N, breaking ties toward
    the smallest n. The returned index is meant to be frozen for all
    test-time evaluation.
    """
    from . import attacks  # local import; attacks depends on this module

    if len(dev_inputs) == 0:
        raise ValueError("empty dev set")
    accs = attacks.per_state_robustness(
        p, dev_inputs, dev_labels, ready_made_cfg, scfg, bcfg, rng=rng
    )
    candidates = accs[1:scfg.max_iters + 1]  # z_1..z_N
    return int(np.argmax(candidates)) + 1

"""Fixed-point solvers for the forward pass with full trace recording.

Both solvers start from z_0 = 0 and run exactly ``max_iters`` steps (no
tolerance-based early exit), so trace indices line up across clean and
perturbed inputs and across models. Convergence is diagnosed afterwards
from the recorded relative errors rather than controlling the loop.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import model
from .model import LayerParams

# Relative threshold for the Broyden curvature denominator; updates with
# |dz . B dg| below guard * (|dz| |B dg| + tiny) are skipped.
DENOM_GUARD = 1e-12


class SolverDivergence(RuntimeError):
    """Raised when an iterate goes non-finite.

    ``trace`` carries the partial forward trace when a forward solve
    fails; ``partial`` carries the last finite iterate of a backward
    solve.
    """

    def __init__(self, message: str, trace: "ForwardTrace | None" = None, partial=None):
        super().__init__(message)
        self.trace = trace
        self.partial = partial


@dataclass
class SolverConfig:
    method: str = "broyden"  # "picard" or "broyden"
    max_iters: int = 8
    damping: float = 1.0  # Picard mixing factor in (0, 1]
    alpha: float = 1.0  # Broyden step size
    record_trace: bool = False  # keep per-step inverse-Jacobian snapshots

    def __post_init__(self):
        if self.method not in ("picard", "broyden"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")


@dataclass
class ForwardTrace:
    """Iterate history z_0..z_N plus residual diagnostics.

    ``residual_norms[n]`` is ||f(z_n; x) - z_n|| and ``rel_errors[n]`` the
    same divided by ||f(z_n; x)||, for every recorded state. For Broyden
    runs ``B_final`` holds the last inverse-Jacobian approximation and
    ``B_snapshots`` (when recorded) the matrix B_n used at each step n.
    """

    states: list[np.ndarray] = field(default_factory=list)
    residual_norms: list[float] = field(default_factory=list)
    rel_errors: list[float] = field(default_factory=list)
    B_final: np.ndarray | None = None
    B_snapshots: list[np.ndarray] | None = None
    skipped_updates: list[int] = field(default_factory=list)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1


def _rel_error_from(residual_norm: float, f_norm: float) -> float:
    if f_norm == 0.0:
        return 0.0 if residual_norm == 0.0 else float("inf")
    return residual_norm / f_norm


def relative_error(p: LayerParams, z: np.ndarray, x: np.ndarray) -> float:
    """||f(z; x) - z|| / ||f(z; x)||, the convergence diagnostic."""
    fz = model.layer_apply(p, z, x)
    return _rel_error_from(float(np.linalg.norm(fz - z)), float(np.linalg.norm(fz)))


def _record(trace: ForwardTrace, z: np.ndarray, g: np.ndarray) -> None:
    # g = f(z) - z, so f(z) = g + z
    trace.states.append(z)
    rnorm = float(np.linalg.norm(g))
    trace.residual_norms.append(rnorm)
    trace.rel_errors.append(_rel_error_from(rnorm, float(np.linalg.norm(g + z))))


def solve_picard(p: LayerParams, x: np.ndarray, cfg: SolverConfig) -> ForwardTrace:
    """Damped fixed-point iteration z <- (1 - lam) z + lam f(z; x)."""
    if cfg.method != "picard":
        raise ValueError("solve_picard requires cfg.method == 'picard'")
    lam = cfg.damping
    d = p.W.shape[0]
    trace = ForwardTrace()
    with np.errstate(over="ignore", invalid="ignore"):
        z = np.zeros(d)
        fz = model.layer_apply(p, z, x)
        _record(trace, z, fz - z)
        for n in range(cfg.max_iters):
            z = (1.0 - lam) * z + lam * fz
            if not np.all(np.isfinite(z)):
                raise SolverDivergence(f"picard iterate non-finite at step {n + 1}", trace)
            fz = model.layer_apply(p, z, x)
            if not np.all(np.isfinite(fz)):
                raise SolverDivergence(f"picard residual non-finite at step {n + 1}", trace)
            _record(trace, z, fz - z)
    return trace


def broyden_root(
    g: Callable[[np.ndarray], np.ndarray],
    z0: np.ndarray,
    alpha: float,
    max_iters: int,
    record_b: bool = False,
    on_step: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
) -> ForwardTrace:
    """Broyden's method on a residual g with B_0 = -I.

    Update rule per step n (z_0 given):

        z_{n+1} = z_n - alpha B_n g(z_n)
        B_{n+1} = B_n + (dz - B_n dg) (dz^T B_n) / (dz^T B_n dg)

    with a guarded skip when the curvature denominator degenerates.
    ``on_step(n, z_n, B_n)`` fires before each update, which lets a
    caller iterate a companion process against the same B_n.
    """
    d = z0.shape[0]
    trace = ForwardTrace()
    if record_b:
        trace.B_snapshots = []
    with np.errstate(over="ignore", invalid="ignore"):
        B = -np.eye(d)
        z = z0
        gz = g(z)
        _record(trace, z, gz)
        for n in range(max_iters):
            if on_step is not None:
                on_step(n, z, B)
            if record_b:
                trace.B_snapshots.append(B.copy())
            z_next = z - alpha * (B @ gz)
            if not np.all(np.isfinite(z_next)):
                trace.B_final = B
                raise SolverDivergence(f"broyden iterate non-finite at step {n + 1}", trace)
            g_next = g(z_next)
            if not np.all(np.isfinite(g_next)):
                trace.B_final = B
                raise SolverDivergence(f"broyden residual non-finite at step {n + 1}", trace)
            dz = z_next - z
            dg = g_next - gz
            Bdg = B @ dg
            denom = float(dz @ Bdg)
            guard = DENOM_GUARD * (np.linalg.norm(dz) * np.linalg.norm(Bdg) + 1e-300)
            if abs(denom) < guard:
                trace.skipped_updates.append(n)
            else:
                B = B + np.outer(dz - Bdg, B.T @ dz) / denom
            z, gz = z_next, g_next
            _record(trace, z, gz)
        trace.B_final = B
    return trace


def solve_broyden(p: LayerParams, x: np.ndarray, cfg: SolverConfig) -> ForwardTrace:
    """Broyden root-finding on g(z) = f(z; x) - z from z_0 = 0."""
    if cfg.method != "broyden":
        raise ValueError("solve_broyden requires cfg.method == 'broyden'")
    d = p.W.shape[0]

    def g(z: np.ndarray) -> np.ndarray:
        return model.layer_apply(p, z, x) - z

    return broyden_root(g, np.zeros(d), cfg.alpha, cfg.max_iters, record_b=cfg.record_trace)


def solve(p: LayerParams, x: np.ndarray, cfg: SolverConfig) -> ForwardTrace:
    """Dispatch on cfg.method."""
    if cfg.method == "picard":
        return solve_picard(p, x, cfg)
    return solve_broyden(p, x, cfg)


def extended_state(p: LayerParams, trace: ForwardTrace, x: np.ndarray) -> np.ndarray:
    """One further application of f to the final solver state."""
    if not trace.states:
        raise ValueError("empty trace")
    return model.layer_apply(p, trace.final_state, x)


def write_trace_csv(trace: ForwardTrace, path: str | Path) -> None:
    """Export (step, residual_norm, rel_error) rows for diagnostics."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "residual_norm", "rel_error"])
        for n, (rn, re) in enumerate(zip(trace.residual_norms, trace.rel_errors)):
            writer.writerow([n, format(rn, ".17g"), format(re, ".17g")])

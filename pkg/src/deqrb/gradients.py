"""Input- and parameter-gradient estimators for the equilibrium model.

Four families of input gradients are implemented:

* exact: solve the linear adjoint fixed point u = J_z^T u + dL/dz at the
  final forward state, then push u through J_x^T;
* phantom: backpropagate through k damped unroll steps taken from the
  final state;
* unrolled intermediates: the same unrolling started from an arbitrary
  recorded state z_n;
* simultaneous adjoint: adjoint iterates u_{n+1} = u_n - beta B_n v_n
  interleaved with the forward Broyden iterations, reusing the solver's
  inverse-Jacobian approximation B_n.

All of them reduce to plain reverse accumulation over the module-level
VJPs; there is no autodiff tape anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import model, solver
from .model import LayerParams, ParamGrad
from .solver import ForwardTrace, SolverConfig, SolverDivergence

SOURCE_KINDS = (
    "exact_final",
    "phantom_final",
    "unrolled_intermediate",
    "adjoint_intermediate",
    "adjoint_ensemble",
    "unrolled_ensemble",
)

_INDEXED_KINDS = ("unrolled_intermediate", "adjoint_intermediate")


@dataclass
class BackwardConfig:
    """Backward fixed-point solver settings (iteration budget is fixed)."""

    method: str = "picard"  # "picard" or "broyden"
    max_iters: int = 7

    def __post_init__(self):
        if self.method not in ("picard", "broyden"):
            raise ValueError(f"unknown backward method {self.method!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class AdjointTrace:
    """Adjoint iterates u_0..u_N and residuals v_0..v_{N-1}."""

    adjoints: list[np.ndarray] = field(default_factory=list)
    residuals: list[np.ndarray] = field(default_factory=list)
    beta: float = 0.5


@dataclass(frozen=True)
class GradientSource:
    """Closed description of which estimator feeds an attack.

    ``n`` indexes a forward state for the intermediate kinds, ``k`` and
    ``damping`` configure unrolling, ``beta`` the adjoint step size.
    """

    kind: str
    n: int | None = None
    k: int = 1
    damping: float = 1.0
    beta: float = 0.5

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"unknown gradient source kind {self.kind!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")
        if self.kind in _INDEXED_KINDS:
            if self.n is None or self.n < 0:
                raise ValueError(f"{self.kind} requires a state index n >= 0")

    @classmethod
    def exact_final(cls) -> "GradientSource":
        return cls(kind="exact_final")

    @classmethod
    def phantom_final(cls, k: int, damping: float = 1.0) -> "GradientSource":
        return cls(kind="phantom_final", k=k, damping=damping)

    @classmethod
    def unrolled_intermediate(cls, n: int, k: int = 1, damping: float = 1.0) -> "GradientSource":
        return cls(kind="unrolled_intermediate", n=n, k=k, damping=damping)

    @classmethod
    def adjoint_intermediate(cls, n: int, beta: float = 0.5) -> "GradientSource":
        return cls(kind="adjoint_intermediate", n=n, beta=beta)

    @classmethod
    def adjoint_ensemble(cls, beta: float = 0.5) -> "GradientSource":
        return cls(kind="adjoint_ensemble", beta=beta)

    @classmethod
    def unrolled_ensemble(cls, k: int = 1, damping: float = 1.0) -> "GradientSource":
        return cls(kind="unrolled_ensemble", k=k, damping=damping)

    def with_n(self, n: int) -> "GradientSource":
        return replace(self, n=n)

    def describe(self) -> str:
        """Canonical id used as a report / CSV key."""
        if self.kind == "exact_final":
            return "exact_final"
        if self.kind == "phantom_final":
            return f"phantom_final(k={self.k},lam={self.damping:g})"
        if self.kind == "unrolled_intermediate":
            return f"unrolled_intermediate(n={self.n},k={self.k},lam={self.damping:g})"
        if self.kind == "adjoint_intermediate":
            return f"adjoint_intermediate(n={self.n},beta={self.beta:g})"
        if self.kind == "adjoint_ensemble":
            return f"adjoint_ensemble(beta={self.beta:g})"
        return f"unrolled_ensemble(k={self.k},lam={self.damping:g})"

    def to_dict(self) -> dict:
        doc = {"kind": self.kind, "k": self.k, "damping": self.damping, "beta": self.beta}
        if self.n is not None:
            doc["n"] = self.n
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "GradientSource":
        return cls(**doc)


# --- exact implicit gradient --------------------------------------------------

def solve_adjoint(
    p: LayerParams, z: np.ndarray, x: np.ndarray, y: int, bcfg: BackwardConfig
) -> np.ndarray:
    """Solve u = J_z^T u + dL/dz at a fixed state by the configured solver."""
    _, dLdz, _ = model.readout_loss(p, z, y)
    if bcfg.method == "picard":
        u = np.zeros_like(z)
        with np.errstate(over="ignore", invalid="ignore"):
            for n in range(bcfg.max_iters):
                u_next = model.vjp_z(p, z, x, u) + dLdz
                if not np.all(np.isfinite(u_next)):
                    raise SolverDivergence(
                        f"backward iterate non-finite at step {n + 1}", partial=u
                    )
                u = u_next
        return u

    def residual(u: np.ndarray) -> np.ndarray:
        return model.vjp_z(p, z, x, u) + dLdz - u

    trace = solver.broyden_root(residual, np.zeros_like(z), 1.0, bcfg.max_iters)
    return trace.final_state


def exact_input_grad(
    p: LayerParams, x: np.ndarray, fwd: ForwardTrace, y: int, bcfg: BackwardConfig
) -> np.ndarray:
    """Implicit-function gradient of the loss with respect to x."""
    z = fwd.final_state
    u = solve_adjoint(p, z, x, y, bcfg)
    return model.vjp_x(p, z, x, u)


def exact_param_grad(
    p: LayerParams, x: np.ndarray, fwd: ForwardTrace, y: int, bcfg: BackwardConfig
) -> ParamGrad:
    """Implicit-function gradient with respect to every parameter tensor."""
    z = fwd.final_state
    u = solve_adjoint(p, z, x, y, bcfg)
    grad = model.vjp_theta(p, z, x, u)
    _, _, head = model.readout_loss(p, z, y)
    grad.V = head.V
    grad.r = head.r
    return grad


# --- unrolling (phantom) gradients --------------------------------------------

def phantom_grads(
    p: LayerParams,
    x: np.ndarray,
    z_start: np.ndarray,
    y: int,
    k: int,
    damping: float,
) -> tuple[np.ndarray, ParamGrad, float, np.ndarray]:
    """Backpropagate the loss through k damped unroll steps from z_start.

    Steps follow z_t = (1 - lam) z_{t-1} + lam f(z_{t-1}; x); the damped
    identity shortcut enters the reverse pass as the (1 - lam) term of
    the ubar recursion. Returns (input_grad, param_grad, loss, z_end)
    where z_start itself is treated as a constant.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    lam = damping
    states = [z_start]
    z = z_start
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(k):
            z = (1.0 - lam) * z + lam * model.layer_apply(p, z, x)
            if not np.all(np.isfinite(z)):
                raise SolverDivergence(f"unroll iterate non-finite at step {t + 1}")
            states.append(z)
    loss, dLdz, head = model.readout_loss(p, states[-1], y)
    grad = head  # V, r filled; W, U, b accumulate below
    gx = np.zeros(p.U.shape[1])
    ubar = dLdz
    for t in range(k, 0, -1):
        z_in = states[t - 1]
        gx += lam * model.vjp_x(p, z_in, x, ubar)
        grad.add_(model.vjp_theta(p, z_in, x, ubar), scale=lam)
        ubar = (1.0 - lam) * ubar + lam * model.vjp_z(p, z_in, x, ubar)
    return gx, grad, loss, states[-1]


def unrolled_intermediate_grad(
    p: LayerParams,
    x: np.ndarray,
    fwd: ForwardTrace,
    n: int,
    y: int,
    k: int,
    damping: float,
) -> np.ndarray:
    """Input gradient from unrolling the recorded forward state z_n."""
    if not 0 <= n < len(fwd.states):
        raise IndexError(f"state index {n} outside trace of length {len(fwd.states)}")
    gx, _, _, _ = phantom_grads(p, x, fwd.states[n], y, k, damping)
    return gx


# --- simultaneous adjoint ------------------------------------------------------

def simultaneous_adjoint(
    p: LayerParams,
    x: np.ndarray,
    y: int,
    cfg: SolverConfig,
    beta: float = 0.5,
) -> tuple[ForwardTrace, AdjointTrace]:
    """Interleave adjoint updates with the forward Broyden iterations.

    At each forward step n the residual v_n = J_z^T u_n + dL/dz(z_n) - u_n
    is formed at the current state and u_{n+1} = u_n - beta B_n v_n reuses
    the forward solver's inverse-Jacobian approximation. Starts from
    u_0 = 0; convergence of u_n is not required for attack use.
    """
    if cfg.method != "broyden":
        raise ValueError("simultaneous adjoint requires a Broyden forward solve")
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    d = p.W.shape[0]
    adjoints: list[np.ndarray] = [np.zeros(d)]
    residuals: list[np.ndarray] = []

    def g(z: np.ndarray) -> np.ndarray:
        return model.layer_apply(p, z, x) - z

    def on_step(n: int, z_n: np.ndarray, B_n: np.ndarray) -> None:
        u_n = adjoints[-1]
        _, dLdz, _ = model.readout_loss(p, z_n, y)
        v = model.vjp_z(p, z_n, x, u_n) + dLdz - u_n
        residuals.append(v)
        adjoints.append(u_n - beta * (B_n @ v))

    fwd = solver.broyden_root(
        g, np.zeros(d), cfg.alpha, cfg.max_iters, record_b=cfg.record_trace, on_step=on_step
    )
    return fwd, AdjointTrace(adjoints=adjoints, residuals=residuals, beta=beta)


def adjoint_intermediate_grad(
    p: LayerParams,
    x: np.ndarray,
    fwd: ForwardTrace,
    adj: AdjointTrace,
    n: int,
) -> np.ndarray:
    """Surrogate input gradient J_x^T u_n at the forward state z_n."""
    if not 0 <= n < len(fwd.states) or n >= len(adj.adjoints):
        raise IndexError(f"state index {n} outside traces")
    return model.vjp_x(p, fwd.states[n], x, adj.adjoints[n])


def ensemble_grad(per_state_grads: list[np.ndarray]) -> np.ndarray:
    """Elementwise mean of per-state gradients (sign-equivalent to the sum)."""
    if not per_state_grads:
        raise ValueError("ensemble over an empty gradient list")
    stacked = np.stack(per_state_grads)
    return stacked.mean(axis=0)


def adjoint_convergence_ratio(adj: AdjointTrace, u_star: np.ndarray) -> list[float]:
    """Successive error ratios ||u_{n+1} - u*|| / ||u_n - u*||.

    Entries whose denominator falls below 1e-14 are omitted.
    """
    errs = [float(np.linalg.norm(u - u_star)) for u in adj.adjoints]
    return [
        errs[n + 1] / errs[n]
        for n in range(len(errs) - 1)
        if errs[n] >= 1e-14
    ]


# --- dispatch -------------------------------------------------------------------

def source_input_grad(
    p: LayerParams,
    x: np.ndarray,
    y: int,
    source: GradientSource,
    scfg: SolverConfig,
    bcfg: BackwardConfig,
) -> np.ndarray:
    """Produce the input gradient described by ``source`` at input x.

    Runs the forward solve (and the simultaneous adjoint when the source
    demands it) from scratch; raises SolverDivergence when any involved
    iteration goes non-finite.
    """
    if source.kind in ("adjoint_intermediate", "adjoint_ensemble"):
        fwd, adj = simultaneous_adjoint(p, x, y, scfg, beta=source.beta)
        if source.kind == "adjoint_intermediate":
            return adjoint_intermediate_grad(p, x, fwd, adj, source.n)
        grads = [
            model.vjp_x(p, fwd.states[n], x, adj.adjoints[n])
            for n in range(1, len(fwd.states))
        ]
        return ensemble_grad(grads)
    fwd = solver.solve(p, x, scfg)
    if source.kind == "exact_final":
        return exact_input_grad(p, x, fwd, y, bcfg)
    if source.kind == "phantom_final":
        gx, _, _, _ = phantom_grads(p, x, fwd.final_state, y, source.k, source.damping)
        return gx
    if source.kind == "unrolled_intermediate":
        return unrolled_intermediate_grad(p, x, fwd, source.n, y, source.k, source.damping)
    # unrolled_ensemble: skip the degenerate zero start z_0
    grads = [
        unrolled_intermediate_grad(p, x, fwd, n, y, source.k, source.damping)
        for n in range(1, len(fwd.states))
    ]
    return ensemble_grad(grads)

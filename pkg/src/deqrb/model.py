"""Weight-tied input-injected layer with a linear softmax readout.

The layer family is ``f(z; x) = phi(W z + U x + b)`` with a shared
readout ``logits = V z + r`` and cross-entropy loss. All derivative
products are hand-derived vector-Jacobian products (VJPs): for a
standard Jacobian J of f with respect to one of its arguments, each
``vjp_*`` returns ``J^T u``. This one convention is used everywhere;
downstream fixed-point formulas are written against it.

Activations: ``tanh`` (default, smooth), ``relu`` (subgradient 0 at the
kink), and ``identity`` (exactly linear layers, used by closed-form
oracles).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numkit

ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass(frozen=True)
class ModelDims:
    """State, input and class-count dimensions (all >= 1)."""

    d: int
    l: int
    c: int

    def __post_init__(self):
        if min(self.d, self.l, self.c) < 1:
            raise ValueError(f"all dimensions must be >= 1, got {self}")


@dataclass
class LayerParams:
    """All trainable tensors of the layer plus the readout head."""

    W: np.ndarray  # (d, d) state-to-state weights
    U: np.ndarray  # (d, l) input injection
    b: np.ndarray  # (d,) bias
    V: np.ndarray  # (c, d) readout weights
    r: np.ndarray  # (c,) readout bias
    activation: str = "tanh"

    def __post_init__(self):
        d, l = self.W.shape[0], self.U.shape[1]
        c = self.V.shape[0]
        if self.W.shape != (d, d) or self.U.shape != (d, l):
            raise ValueError(f"inconsistent W/U shapes: {self.W.shape}, {self.U.shape}")
        if self.b.shape != (d,) or self.V.shape != (c, d) or self.r.shape != (c,):
            raise ValueError("inconsistent b/V/r shapes")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for name in ("W", "U", "b", "V", "r"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")

    @property
    def dims(self) -> ModelDims:
        return ModelDims(d=self.W.shape[0], l=self.U.shape[1], c=self.V.shape[0])

    def tensors(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "U": self.U, "b": self.b, "V": self.V, "r": self.r}

    def copy(self) -> "LayerParams":
        return LayerParams(
            W=self.W.copy(), U=self.U.copy(), b=self.b.copy(),
            V=self.V.copy(), r=self.r.copy(), activation=self.activation,
        )


@dataclass
class ParamGrad:
    """Gradients matching LayerParams field-for-field."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    V: np.ndarray
    r: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "U": self.U, "b": self.b, "V": self.V, "r": self.r}

    def add_(self, other: "ParamGrad", scale: float = 1.0) -> "ParamGrad":
        """In-place ``self += scale * other``."""
        for name, arr in self.tensors().items():
            o = getattr(other, name)
            if o.shape != arr.shape:
                raise ValueError(f"gradient shape mismatch on {name}")
            arr += scale * o
        return self

    def scale_(self, scale: float) -> "ParamGrad":
        for arr in self.tensors().values():
            arr *= scale
        return self

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(a))) if a.size else 0.0 for a in self.tensors().values())


def zero_grad(p: LayerParams) -> ParamGrad:
    return ParamGrad(
        W=np.zeros_like(p.W), U=np.zeros_like(p.U), b=np.zeros_like(p.b),
        V=np.zeros_like(p.V), r=np.zeros_like(p.r),
    )


def _act(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(a)
    if kind == "relu":
        return np.maximum(a, 0.0)
    return a


def _act_prime(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        t = np.tanh(a)
        return 1.0 - t * t
    if kind == "relu":
        # subgradient at the kink defined as 0
        return (a > 0.0).astype(np.float64)
    return np.ones_like(a)


def _act_second(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        t = np.tanh(a)
        return -2.0 * t * (1.0 - t * t)
    # relu and identity are piecewise linear
    return np.zeros_like(a)


def _preact(p: LayerParams, z: np.ndarray, x: np.ndarray) -> np.ndarray:
    d, l = p.W.shape[0], p.U.shape[1]
    if z.shape != (d,) or x.shape != (l,):
        raise ValueError(f"expected z ({d},) and x ({l},), got {z.shape}, {x.shape}")
    return p.W @ z + p.U @ x + p.b


def layer_apply(p: LayerParams, z: np.ndarray, x: np.ndarray) -> np.ndarray:
    """One application of the layer: phi(W z + U x + b)."""
    return _act(_preact(p, z, x), p.activation)


def vjp_z(p: LayerParams, z: np.ndarray, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """J_z^T u = W^T (phi'(a) * u) with a = W z + U x + b."""
    a = _preact(p, z, x)
    if u.shape != a.shape:
        raise ValueError(f"u has shape {u.shape}, expected {a.shape}")
    return p.W.T @ (_act_prime(a, p.activation) * u)


def vjp_x(p: LayerParams, z: np.ndarray, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """J_x^T u = U^T (phi'(a) * u)."""
    a = _preact(p, z, x)
    if u.shape != a.shape:
        raise ValueError(f"u has shape {u.shape}, expected {a.shape}")
    return p.U.T @ (_act_prime(a, p.activation) * u)


def vjp_theta(p: LayerParams, z: np.ndarray, x: np.ndarray, u: np.ndarray) -> ParamGrad:
    """Gradient of ``u . f(z; x)`` with respect to W, U, b.

    Readout fields stay zero; they receive gradients from the loss head
    directly (f does not depend on V or r).
    """
    a = _preact(p, z, x)
    if u.shape != a.shape:
        raise ValueError(f"u has shape {u.shape}, expected {a.shape}")
    su = _act_prime(a, p.activation) * u
    g = zero_grad(p)
    g.W = np.outer(su, z)
    g.U = np.outer(su, x)
    g.b = su
    return g


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits)
    e = np.exp(shifted)
    return e / np.sum(e)


def readout_loss(p: LayerParams, z: np.ndarray, y: int) -> tuple[float, np.ndarray, ParamGrad]:
    """Cross-entropy loss of the readout at state z.

    Returns ``(loss, dL/dz, head_grads)`` where head_grads fills only the
    V and r fields.
    """
    c = p.V.shape[0]
    if not 0 <= y < c:
        raise ValueError(f"label {y} out of range for {c} classes")
    logits = p.V @ z + p.r
    shifted = logits - np.max(logits)
    log_probs = shifted - np.log(np.sum(np.exp(shifted)))
    loss = -float(log_probs[y])
    probs = np.exp(log_probs)
    delta = probs.copy()
    delta[y] -= 1.0
    dLdz = p.V.T @ delta
    head = zero_grad(p)
    head.V = np.outer(delta, z)
    head.r = delta
    return loss, dLdz, head


def logits(p: LayerParams, z: np.ndarray) -> np.ndarray:
    return p.V @ z + p.r


def predict(p: LayerParams, z: np.ndarray) -> int:
    """Argmax class of the readout; ties break toward the lowest index."""
    return int(np.argmax(logits(p, z)))


def init_params(
    dims: ModelDims,
    activation: str = "tanh",
    rng: np.random.Generator | None = None,
    target_radius: float = 0.9,
    radius_iters: int = 100,
) -> LayerParams:
    """Random initialization with a contractive state-to-state map.

    W is sampled uniformly and rescaled so the power-iteration estimate
    of its dominant eigenvalue magnitude falls below ``target_radius``
    (phi' <= 1 for tanh/relu, so this bounds the layer Jacobian at the
    zero state).
    """
    rng = rng if rng is not None else numkit.make_rng(0)
    d, l, c = dims.d, dims.l, dims.c
    W = rng.uniform(-1.0, 1.0, size=(d, d)) / np.sqrt(d)
    est = numkit.power_iteration(lambda v: W.T @ v, d, radius_iters, rng)
    if est > target_radius:
        W *= target_radius / est
    U = rng.uniform(-1.0, 1.0, size=(d, l)) / np.sqrt(l)
    b = np.zeros(d)
    V = rng.uniform(-1.0, 1.0, size=(c, d)) / np.sqrt(d)
    r = np.zeros(c)
    return LayerParams(W=W, U=U, b=b, V=V, r=r, activation=activation)


# --- checkpoint serialization -------------------------------------------------

def _tensor_doc(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}


def _tensor_from_doc(doc: dict) -> np.ndarray:
    arr = np.array(doc["data"], dtype=np.float64)
    return arr.reshape(doc["shape"])


def save_checkpoint(p: LayerParams, path: str | Path, defense: dict | None = None) -> None:
    """Write the model as a single JSON document.

    Floats are serialized as round-trippable decimal literals, so
    ``load_checkpoint(save_checkpoint(p))`` is bit-exact. The optional
    ``defense`` dict ({kind, n_star}) persists a calibrated strategy.
    """
    dims = p.dims
    doc = {
        "dims": {"d": dims.d, "l": dims.l, "c": dims.c},
        "activation": p.activation,
        "tensors": {name: _tensor_doc(arr) for name, arr in p.tensors().items()},
    }
    if defense is not None:
        doc["defense"] = defense
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[LayerParams, dict | None]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    tensors = {name: _tensor_from_doc(t) for name, t in doc["tensors"].items()}
    p = LayerParams(activation=doc["activation"], **tensors)
    dims = doc["dims"]
    if (p.dims.d, p.dims.l, p.dims.c) != (dims["d"], dims["l"], dims["c"]):
        raise ValueError("checkpoint dims do not match tensor shapes")
    return p, doc.get("defense")

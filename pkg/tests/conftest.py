"""Shared construction and finite-difference helpers for the test suite."""

import numpy as np

from deqrb import model
from deqrb.model import LayerParams, ModelDims, ParamGrad


def central_diff(f, x, h=1e-6):
    """Central finite differences of a scalar function over a vector."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return grad


def perturb_param(p: LayerParams, name: str, flat_index: int, delta: float) -> LayerParams:
    q = p.copy()
    arr = getattr(q, name)
    arr.ravel()[flat_index] += delta
    return q


def fd_param_grad(f, p: LayerParams, h=1e-6, names=("W", "U", "b", "V", "r")) -> ParamGrad:
    """Central finite differences of a scalar function of the parameters."""
    grad = model.zero_grad(p)
    for name in names:
        out = getattr(grad, name)
        for i in range(out.size):
            hi = f(perturb_param(p, name, i, h))
            lo = f(perturb_param(p, name, i, -h))
            out.ravel()[i] = (hi - lo) / (2.0 * h)
    return grad


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)


def symmetric_with_radius(rng, d: int, radius: float) -> np.ndarray:
    """Normal (symmetric) matrix whose spectral radius is exactly ``radius``."""
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    vals = rng.uniform(-1.0, 1.0, d)
    vals[np.argmax(np.abs(vals))] = np.sign(vals[np.argmax(np.abs(vals))]) or 1.0
    vals = vals * radius / np.max(np.abs(vals))
    return (q * vals) @ q.T


def linear_params(A, c, U=None, V=None, r=None) -> LayerParams:
    """Exactly affine layer f(z; x) = A z + U x + c via the identity activation."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    d = A.shape[0]
    if U is None:
        U = np.zeros((d, 1))
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    if V is None:
        V = np.zeros((2, d))
        V[1, 0] = 1.0
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if r is None:
        r = np.zeros(V.shape[0])
    return LayerParams(W=A, U=U, b=c, V=V, r=np.asarray(r, dtype=np.float64),
                       activation="identity")


def rand_contractive_params(rng, d: int, l: int, c: int, radius: float,
                            activation: str = "tanh") -> LayerParams:
    """Random model whose W has exact spectral radius ``radius``."""
    W = rng.uniform(-1.0, 1.0, (d, d))
    eig = np.max(np.abs(np.linalg.eigvals(W)))
    W *= radius / eig
    return LayerParams(
        W=W,
        U=rng.uniform(-1.0, 1.0, (d, l)) / np.sqrt(l),
        b=rng.uniform(-0.3, 0.3, d),
        V=rng.uniform(-1.0, 1.0, (c, d)) / np.sqrt(d),
        r=rng.uniform(-0.1, 0.1, c),
        activation=activation,
    )

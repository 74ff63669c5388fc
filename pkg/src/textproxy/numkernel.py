"""Dense float64 numeric kernel with a backward companion per forward op.

Every forward operation here has a vector-Jacobian product (VJP) partner:
``backward(inputs, output_cotangent) -> input_cotangents``.  The kernel is
deliberately tiny -- matrix product, row softmax, cosine similarity and the
L2 norm are the only primitives the rest of the package needs.  All
operations are pure functions of their inputs and hold no state.
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyInput, ShapeMismatch, ZeroVector

# Norms below this are treated as exactly zero for direction purposes.
ZERO_NORM_THRESHOLD = 1e-30


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a (m x k) and b (k x n)."""
    a = _as_f64(a)
    b = _as_f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(
            f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    return a @ b


def matmul_vjp(
    a: np.ndarray, b: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Cotangents of both matmul operands given the output cotangent."""
    a = _as_f64(a)
    b = _as_f64(b)
    grad_out = _as_f64(grad_out)
    if grad_out.shape != (a.shape[0], b.shape[1]):
        raise ShapeMismatch(
            f"matmul cotangent has shape {grad_out.shape}, "
            f"expected {(a.shape[0], b.shape[1])}"
        )
    return grad_out @ b.T, a.T @ grad_out


def softmax_row(v: np.ndarray) -> np.ndarray:
    """Numerically stable softmax of a 1-D vector (max subtraction)."""
    v = _as_f64(v)
    if v.ndim != 1:
        raise ShapeMismatch(f"softmax_row expects a 1-D vector, got {v.ndim}-D")
    if v.size == 0:
        raise EmptyInput("softmax_row of an empty vector")
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_row_vjp(v: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Cotangent of the softmax input: y * (g - <g, y>)."""
    y = softmax_row(v)
    grad_out = _as_f64(grad_out)
    if grad_out.shape != y.shape:
        raise ShapeMismatch(
            f"softmax cotangent has shape {grad_out.shape}, expected {y.shape}"
        )
    return y * (grad_out - float(np.dot(grad_out, y)))


def l2_norm(a: np.ndarray) -> float:
    """Euclidean norm of a 1-D vector."""
    a = _as_f64(a)
    if a.ndim != 1:
        raise ShapeMismatch(f"l2_norm expects a 1-D vector, got {a.ndim}-D")
    return float(np.sqrt(np.dot(a, a)))


def l2_norm_vjp(a: np.ndarray, grad_out: float) -> np.ndarray:
    """Cotangent of l2_norm: g * a / |a|.  Undefined at the origin."""
    a = _as_f64(a)
    norm = l2_norm(a)
    if norm < ZERO_NORM_THRESHOLD:
        raise ZeroVector("l2_norm gradient is undefined at the zero vector")
    return (float(grad_out) / norm) * a


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two nonzero vectors, in [-1, 1].

    Exactly symmetric in its arguments: the dot product and the norm
    product are evaluated in argument-independent order.
    """
    a = _as_f64(a)
    b = _as_f64(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatch(
            f"cosine_sim expects matching 1-D vectors, got {a.shape} and {b.shape}"
        )
    na = l2_norm(a)
    nb = l2_norm(b)
    if na < ZERO_NORM_THRESHOLD or nb < ZERO_NORM_THRESHOLD:
        raise ZeroVector("cosine_sim of a (near-)zero vector")
    return float(np.dot(a, b) / (na * nb))


def cosine_sim_vjp(
    a: np.ndarray, b: np.ndarray, grad_out: float
) -> tuple[np.ndarray, np.ndarray]:
    """Cotangents of both cosine_sim arguments."""
    a = _as_f64(a)
    b = _as_f64(b)
    na = l2_norm(a)
    nb = l2_norm(b)
    if na < ZERO_NORM_THRESHOLD or nb < ZERO_NORM_THRESHOLD:
        raise ZeroVector("cosine_sim gradient of a (near-)zero vector")
    c = float(np.dot(a, b) / (na * nb))
    g = float(grad_out)
    grad_a = g * (b / (na * nb) - (c / (na * na)) * a)
    grad_b = g * (a / (na * nb) - (c / (nb * nb)) * b)
    return grad_a, grad_b

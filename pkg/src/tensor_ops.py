"""
Dense tensor helpers, the Adam optimizer and a finite-difference gradient checker.

Tensors are plain numpy float64 arrays. The reference kernels here use a fixed
left-to-right summation order so results are bit-reproducible.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable

import numpy as np

from src.errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

Tensor = np.ndarray


def as_tensor(values, name: str = "tensor") -> Tensor:
    """Convert to a contiguous float64 array and reject non-finite values."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ShapeError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def check_same_shape(a: Tensor, b: Tensor, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"Shape mismatch for {what}: {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product with a fixed summation order.

    c[i, j] accumulates a[i, k] * b[k, j] for k = 0, 1, ... starting from 0.0,
    which is exactly what a naive triple loop computes.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"Cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += np.outer(a[:, k], b[k, :])
    return out


@dataclass
class AdamState:
    """Moment estimates for one parameter tensor."""
    m: Tensor
    v: Tensor
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lr: float = 0.001

    @classmethod
    def for_param(cls, param: Tensor, lr: float = 0.001, beta1: float = 0.9,
                  beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros_like(param, dtype=np.float64),
                   v=np.zeros_like(param, dtype=np.float64),
                   t=0, beta1=beta1, beta2=beta2, epsilon=epsilon, lr=lr)


def adam_step(param: Tensor, grad: Tensor, state: AdamState) -> Tensor:
    """
    One bias-corrected Adam update.

    Args:
        param: Parameter tensor, updated in place
        grad: Gradient of the loss with respect to param
        state: Moment estimates for param, mutated in place

    Returns:
        The updated parameter tensor (same object as param)
    """
    if param.shape != grad.shape or param.shape != state.m.shape or param.shape != state.v.shape:
        raise ShapeError(
            f"Adam shapes disagree: param {param.shape}, grad {grad.shape}, "
            f"m {state.m.shape}, v {state.v.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("Adam received a non-finite gradient")

    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)

    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    param -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return param


@dataclass
class Adam:
    """Adam over a named parameter dictionary; one AdamState per entry."""
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    states: Dict[str, AdamState] = field(default_factory=dict)

    def step(self, params: Dict[str, Tensor], grads: Dict[str, Tensor]) -> None:
        # sorted so the update order never depends on dict construction
        for name in sorted(params):
            if name not in self.states:
                self.states[name] = AdamState.for_param(
                    params[name], lr=self.lr, beta1=self.beta1,
                    beta2=self.beta2, epsilon=self.epsilon)
            adam_step(params[name], grads[name], self.states[name])


def global_norm(grads: Iterable[Tensor]) -> float:
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def clip_grad_norm(grads: Dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most max_norm."""
    norm = global_norm(grads[name] for name in sorted(grads))
    if not np.isfinite(norm):
        raise NonFiniteError("Gradient norm is not finite")
    if norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] *= scale
    return norm


def grad_check(f: Callable[[Tensor], float], x: Tensor, analytic_grad: Tensor,
               h: float = 1e-5) -> float:
    """
    Compare an analytic gradient against central differences.

    Returns:
        max over elements of |analytic - numeric| / max(1, |analytic|)
    """
    x = np.array(x, dtype=np.float64)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    check_same_shape(x, analytic_grad, "grad_check input and gradient")

    flat = x.reshape(-1)
    flat_grad = analytic_grad.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        f_plus = f(x)
        flat[i] = original - h
        f_minus = f(x)
        flat[i] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"Function is not finite around element {i}")
        numeric = (f_plus - f_minus) / (2.0 * h)
        err = abs(flat_grad[i] - numeric) / max(1.0, abs(flat_grad[i]))
        worst = max(worst, err)
    return worst

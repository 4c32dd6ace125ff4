"""
Tensor kernel: float64 numpy arrays with forward ops and hand-written reverse rules.

Every primitive comes as a pair `op(...)` / `op_backward(...)`. The model graph is
small and fixed, so composites in `model.py` chain these rules explicitly instead of
recording a tape.
"""

import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NumericError, ShapeError, SpanError, TargetIndexError

logger = logging.getLogger(__name__)

Tensor = np.ndarray
GradRecord = Dict[str, np.ndarray]
ScalarFn = Callable[[Dict[str, np.ndarray]], Union[float, Tuple[float, GradRecord]]]


def as_tensor(values, shape: Optional[Sequence[int]] = None) -> Tensor:
    """Coerce to a float64 array, optionally reshaping to `shape`."""
    array = np.asarray(values, dtype=np.float64)
    if shape is not None:
        if int(np.prod(shape)) != array.size:
            raise ShapeError(f"cannot view {array.size} values as shape {tuple(shape)}")
        array = array.reshape(shape)
    return array


def check_finite(array: Tensor, what: str, step: Optional[int] = None):
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite values in {what}", step=step)


# -- softmax family ---------------------------------------------------------

def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    return np.exp(log_softmax(logits, axis=axis))


def softmax_cross_entropy(logits: Tensor, target: int) -> Tuple[float, Tensor]:
    """Cross-entropy of one logit vector against a class index.

    Returns the loss and the softmax probabilities; the gradient wrt the logits
    is `probs - onehot(target)`.
    """
    logits = as_tensor(logits)
    num_classes = logits.shape[-1]
    if logits.ndim != 1 or num_classes < 2:
        raise ShapeError(f"expected a logit vector with K >= 2, got shape {logits.shape}")
    if not 0 <= int(target) < num_classes:
        raise TargetIndexError(f"target {target} outside [0, {num_classes})")
    log_probs = log_softmax(logits)
    return float(-log_probs[int(target)]), np.exp(log_probs)


def softmax_cross_entropy_backward(probs: Tensor, target: int) -> Tensor:
    grad = probs.copy()
    grad[int(target)] -= 1.0
    return grad


def batch_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tuple[Tensor, Tensor]:
    """Per-row cross-entropy of B×K logits; returns (losses[B], probs[B×K])."""
    num_classes = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if np.any(targets < 0) or np.any(targets >= num_classes):
        raise TargetIndexError(f"targets outside [0, {num_classes})")
    log_probs = log_softmax(logits, axis=-1)
    rows = np.arange(logits.shape[0])
    return -log_probs[rows, targets], np.exp(log_probs)


def batch_cross_entropy_backward(probs: Tensor, targets: np.ndarray, weights: Tensor) -> Tensor:
    """Gradient of sum_b weights[b] * XE(logits_b, targets_b) wrt the logits."""
    grad = probs.copy()
    grad[np.arange(probs.shape[0]), targets] -= 1.0
    return grad * weights[:, None]


# -- dense primitives -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a @ b


def matmul_backward(a: Tensor, b: Tensor, grad_out: Tensor) -> Tuple[Tensor, Tensor]:
    return grad_out @ b.T, a.T @ grad_out


def add(a: Tensor, b: Tensor) -> Tensor:
    return a + b


def _unbroadcast(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add_backward(grad_out: Tensor, shape_a: Tuple[int, ...], shape_b: Tuple[int, ...]) -> Tuple[Tensor, Tensor]:
    return _unbroadcast(grad_out, shape_a), _unbroadcast(grad_out, shape_b)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return x @ weight + bias


def linear_backward(x: Tensor, weight: Tensor, grad_out: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns (dx, dW, db) for y = x @ W + b with x of shape (..., n_in)."""
    flat_x = x.reshape(-1, x.shape[-1])
    flat_g = grad_out.reshape(-1, grad_out.shape[-1])
    return grad_out @ weight.T, flat_x.T @ flat_g, flat_g.sum(axis=0)


def tanh(x: Tensor) -> Tensor:
    return np.tanh(x)


def tanh_backward(y: Tensor, grad_out: Tensor) -> Tensor:
    return grad_out * (1.0 - y * y)


def sigmoid(x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    decay = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + decay), decay / (1.0 + decay))


def sigmoid_backward(y: Tensor, grad_out: Tensor) -> Tensor:
    return grad_out * y * (1.0 - y)


def softplus(x: Tensor) -> Tensor:
    return np.logaddexp(0.0, x)


def binary_cross_entropy(logits: Tensor, targets: Tensor) -> Tuple[Tensor, Tensor]:
    """Elementwise -[t log sigmoid(x) + (1-t) log(1-sigmoid(x))]; returns (losses, d losses / d logits).

    Targets may be soft, in [0, 1].
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if np.any(targets < 0.0) or np.any(targets > 1.0):
        raise ValueError("binary targets must lie in [0, 1]")
    return softplus(logits) - targets * logits, sigmoid(logits) - targets


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    return np.concatenate(parts, axis=axis)


def concat_backward(grad_out: Tensor, sizes: Sequence[int], axis: int = -1) -> List[Tensor]:
    bounds = np.cumsum(sizes)[:-1]
    return np.split(grad_out, bounds, axis=axis)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    return table[ids]


def embedding_backward(ids: np.ndarray, grad_out: Tensor, num_rows: int) -> Tensor:
    grad = np.zeros((num_rows, grad_out.shape[-1]))
    np.add.at(grad, ids.reshape(-1), grad_out.reshape(-1, grad_out.shape[-1]))
    return grad


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], train: bool) -> Tuple[Tensor, Optional[Tensor]]:
    """Inverted dropout; identity (and no mask) outside train mode or at rate 0."""
    if not train or rate <= 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(mask: Optional[Tensor], grad_out: Tensor) -> Tensor:
    return grad_out if mask is None else grad_out * mask


# -- span pooling -----------------------------------------------------------

def _check_span(span: Tuple[int, int], length: int):
    start, end = int(span[0]), int(span[1])
    if start > end:
        raise SpanError(f"reversed span ({start}, {end})")
    if start < 0 or end >= length:
        raise SpanError(f"span ({start}, {end}) outside [0, {length})")


def span_mean(token_states: Tensor, span: Tuple[int, int]) -> Tensor:
    """Average of rows span[0]..span[1] (inclusive) of an L×d array."""
    _check_span(span, token_states.shape[0])
    return token_states[span[0]:span[1] + 1].mean(axis=0)


def span_mean_backward(shape: Tuple[int, int], span: Tuple[int, int], grad_out: Tensor) -> Tensor:
    grad = np.zeros(shape)
    grad[span[0]:span[1] + 1] = grad_out / (span[1] - span[0] + 1)
    return grad


def span_weights(length: int, starts: np.ndarray, ends: np.ndarray) -> Tensor:
    """B×L averaging weights: 1/(j-i+1) inside each span, 0 elsewhere."""
    starts = np.asarray(starts)
    ends = np.asarray(ends)
    if np.any(starts > ends) or np.any(starts < 0) or np.any(ends >= length):
        raise SpanError("span outside sequence or reversed")
    positions = np.arange(length)
    inside = (positions[None, :] >= starts[:, None]) & (positions[None, :] <= ends[:, None])
    return inside / (ends - starts + 1)[:, None]


def span_pool(states: Tensor, starts: np.ndarray, ends: np.ndarray) -> Tuple[Tensor, Tensor]:
    """Batched span_mean over B×L×d states; returns (pooled B×d, weights B×L)."""
    weights = span_weights(states.shape[1], starts, ends)
    return np.einsum('bl,bld->bd', weights, states), weights


def span_pool_backward(weights: Tensor, grad_out: Tensor) -> Tensor:
    return weights[:, :, None] * grad_out[:, None, :]


# -- gradient verification --------------------------------------------------

def _value_of(result) -> float:
    value = result[0] if isinstance(result, tuple) else result
    value = float(value)
    if not np.isfinite(value):
        raise NumericError("scalar function returned a non-finite value")
    return value


def finite_diff_check(scalar_fn: ScalarFn, params: Dict[str, Tensor], step: float = 1e-5,
                      coords_per_param: Optional[int] = None, seed: int = 0,
                      floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    `scalar_fn(params)` must return `(value, grads)` at the base point; grads
    missing for a parameter count as zeros. With `coords_per_param` set, a
    seeded random subset of coordinates of each parameter is checked.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    work = {name: np.array(value, dtype=np.float64, copy=True) for name, value in params.items()}
    result = scalar_fn(work)
    if not isinstance(result, tuple):
        raise ValueError("scalar_fn must return (value, grads) at the base point")
    _value_of(result)
    analytic = result[1]
    rng = np.random.default_rng(seed)

    worst = 0.0
    for name in sorted(work):
        array = work[name]
        grad = np.asarray(analytic.get(name, np.zeros_like(array)), dtype=np.float64)
        if grad.shape != array.shape:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, expected {array.shape}")
        flat = array.reshape(-1)
        coords: Iterable[int] = range(flat.size)
        if coords_per_param is not None and flat.size > coords_per_param:
            coords = np.sort(rng.choice(flat.size, size=coords_per_param, replace=False))
        for coord in coords:
            original = flat[coord]
            flat[coord] = original + step
            upper = _value_of(scalar_fn(work))
            flat[coord] = original - step
            lower = _value_of(scalar_fn(work))
            flat[coord] = original
            numeric = (upper - lower) / (2.0 * step)
            exact = grad.reshape(-1)[coord]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            if error > worst:
                worst = error
                logger.debug(f"finite_diff_check: {name}[{coord}] analytic={exact:.6e} numeric={numeric:.6e}")
    return worst

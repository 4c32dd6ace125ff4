"""
Implicit label transition: a constrained two-step logit flow.

    h' = h + u_eff * tanh(w.h + beta)        planar step, invertible when w.u_eff >= -1
    ĥ  = h'[0] * w' + h' with h'[0] zeroed   scale-shift step

u_eff reparameterizes u so the invertibility condition always holds, and w is
kept on the sphere ||w||^2 = c so the parameterization stays identifiable.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from . import tensorcore as tc
from .errors import ConstraintError, InversionError, ProjectionError, TargetIndexError

logger = logging.getLogger(__name__)

FLOW_PARAM_NAMES = ("u", "w", "beta", "w_prime")


@dataclass
class FrozenSchedule:
    """Which flow parameters the optimizer may move."""
    u: bool = False
    w: bool = False
    beta: bool = False
    w_prime: bool = False

    @classmethod
    def pretraining(cls) -> "FrozenSchedule":
        return cls(u=True, w=True, beta=True, w_prime=True)

    @classmethod
    def trainable(cls) -> "FrozenSchedule":
        return cls()

    def is_frozen(self, name: str) -> bool:
        return getattr(self, name)

    @property
    def identity(self) -> bool:
        return self.u and self.w and self.beta and self.w_prime


@dataclass
class FlowParams:
    u: np.ndarray
    w: np.ndarray
    beta: np.ndarray
    w_prime: np.ndarray
    norm_target: float = 1.0
    schedule: FrozenSchedule = field(default_factory=FrozenSchedule.trainable)

    @property
    def num_classes(self) -> int:
        return self.u.shape[0]

    def named_arrays(self) -> Dict[str, np.ndarray]:
        return {"u": self.u, "w": self.w, "beta": self.beta, "w_prime": self.w_prime}

    def trainable_names(self):
        return [name for name in FLOW_PARAM_NAMES if not self.schedule.is_frozen(name)]


def identity_flow(num_classes: int, norm_target: float = 1.0) -> FlowParams:
    """u=0, w=0, w'=e1, beta=0 with every flow parameter frozen."""
    w_prime = np.zeros(num_classes)
    w_prime[0] = 1.0
    return FlowParams(u=np.zeros(num_classes), w=np.zeros(num_classes), beta=np.array(0.0),
                      w_prime=w_prime, norm_target=norm_target, schedule=FrozenSchedule.pretraining())


def initial_w_prime(num_classes: int, epsilon: float, mode: str = "verbatim") -> np.ndarray:
    """w'[0] = 1-eps; the rest eps/(1-K) ("verbatim") or eps/(K-1) ("positive")."""
    w_prime = np.empty(num_classes)
    w_prime[0] = 1.0 - epsilon
    if mode == "verbatim":
        w_prime[1:] = epsilon / (1 - num_classes)
    elif mode == "positive":
        w_prime[1:] = epsilon / (num_classes - 1)
    else:
        raise ValueError(f"unknown w' init mode: {mode}")
    return w_prime


def random_w(num_classes: int, norm_target: float, rng: np.random.Generator, scale: float = 0.01) -> np.ndarray:
    w = rng.normal(0.0, scale, size=num_classes)
    while not np.any(w):
        w = rng.normal(0.0, scale, size=num_classes)
    return project_w(w, norm_target)


def init_flow(num_classes: int, epsilon: float, norm_target: float, rng: np.random.Generator,
              w_prime_init: str = "verbatim") -> FlowParams:
    """Flow for the alternating phase: u=0, beta=0, random w on the sphere, w' from epsilon."""
    return FlowParams(u=np.zeros(num_classes), w=random_w(num_classes, norm_target, rng),
                      beta=np.array(0.0), w_prime=initial_w_prime(num_classes, epsilon, w_prime_init),
                      norm_target=norm_target, schedule=FrozenSchedule.trainable())


# -- constraints ------------------------------------------------------------

def _softplus_shift(a: float) -> float:
    """m(a) = -1 + log(1 + e^a)."""
    return float(-1.0 + tc.softplus(a))


def constrain_u(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """u_eff = u + (m(w.u) - w.u) w / ||w||^2, so that w.u_eff = m(w.u) > -1."""
    norm_sq = float(w @ w)
    if norm_sq == 0.0:
        raise ConstraintError("w is all zero outside the frozen pretraining schedule")
    dot = float(w @ u)
    return u + (_softplus_shift(dot) - dot) * w / norm_sq


def constrain_u_backward(u: np.ndarray, w: np.ndarray, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norm_sq = float(w @ w)
    dot = float(w @ u)
    gap = _softplus_shift(dot) - dot
    gap_slope = float(tc.sigmoid(dot)) - 1.0
    along = float(w @ grad_out)
    grad_u = grad_out + (gap_slope * along / norm_sq) * w
    grad_w = (gap_slope * along / norm_sq) * u + (gap / norm_sq) * grad_out - (2.0 * gap * along / norm_sq ** 2) * w
    return grad_u, grad_w


def project_w(w: np.ndarray, norm_target: float) -> np.ndarray:
    """Rescale w onto ||w||^2 = norm_target."""
    norm = float(np.linalg.norm(w))
    if norm == 0.0:
        raise ProjectionError("cannot project an all-zero w")
    return w * (np.sqrt(norm_target) / norm)


def project_w_backward(w: np.ndarray, norm_target: float, grad_out: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(w))
    unit = w / norm
    return (np.sqrt(norm_target) / norm) * (grad_out - unit * float(unit @ grad_out))


def effective_parameters(flow: FlowParams) -> Tuple[np.ndarray, np.ndarray]:
    """(u_eff, w) actually used by the planar step."""
    if flow.schedule.u and flow.schedule.w:
        return flow.u, flow.w
    w = project_w(flow.w, flow.norm_target)
    return constrain_u(flow.u, w), w


def flow_diagnostics(flow: FlowParams) -> Tuple[float, float]:
    """(w.u_eff, ||w||^2) of the stored parameters."""
    u_eff, w = effective_parameters(flow)
    return float(w @ u_eff), float(flow.w @ flow.w)


# -- forward ----------------------------------------------------------------

def planar_step(h: np.ndarray, flow: FlowParams) -> np.ndarray:
    u_eff, w = effective_parameters(flow)
    activation = np.tanh(h @ w + flow.beta)
    return h + np.multiply.outer(activation, u_eff)


def scale_shift(h_prime: np.ndarray, w_prime: np.ndarray) -> np.ndarray:
    """ĥ = h'[0]·w' + h' with its first element set to zero."""
    offset = w_prime.copy()
    offset[0] -= 1.0
    return h_prime + np.multiply.outer(h_prime[..., 0], offset)


def invert_planar(h_prime: np.ndarray, flow: FlowParams, tolerance: float = 1e-12,
                  limit: float = 1e6) -> np.ndarray:
    """Numerical inverse of planar_step for one logit vector by bisection on a = w.h."""
    u_eff, w = effective_parameters(flow)
    slope = float(w @ u_eff)
    if slope < -1.0 - 1e-12:
        raise InversionError(f"w.u_eff = {slope:.6f} < -1: planar step is not monotone")
    beta = float(flow.beta)
    target = float(w @ h_prime)

    def residual(a: float) -> float:
        return a + slope * np.tanh(a + beta) - target

    spread = abs(slope) + 1.0
    low, high = target - spread, target + spread
    while residual(low) > 0 or residual(high) < 0:
        spread *= 2.0
        low, high = target - spread, target + spread
        if spread > limit:
            raise InversionError(f"no bracket for the planar inverse within |a| <= {limit:g}")
    for _ in range(400):
        middle = 0.5 * (low + high)
        if residual(middle) > 0:
            high = middle
        else:
            low = middle
        if high - low <= tolerance * max(1.0, abs(middle)):
            break
    root = 0.5 * (low + high)
    return h_prime - u_eff * np.tanh(root + beta)


# -- implicit loss ----------------------------------------------------------

def implicit_loss_batch(logits: np.ndarray, flow: FlowParams,
                        noisy: np.ndarray) -> Tuple[float, np.ndarray, Dict[str, np.ndarray], np.ndarray]:
    """Mean XE(ĥ, ŷ) over a batch.

    Returns (loss, dL/dlogits, flow grads for the unfrozen parameters, per-instance losses).
    Flow gradients are taken wrt the stored parameters, through the projection of w
    and the constraint on u.
    """
    noisy = np.asarray(noisy, dtype=np.int64)
    batch = logits.shape[0]
    frozen_identity = flow.schedule.u and flow.schedule.w
    u_eff, w = effective_parameters(flow)

    activation = np.tanh(logits @ w + flow.beta)
    shifted = logits + activation[:, None] * u_eff
    offset = flow.w_prime.copy()
    offset[0] -= 1.0
    ghost = shifted + shifted[:, 0:1] * offset

    losses, probs = tc.batch_cross_entropy(ghost, noisy)
    grad_ghost = tc.batch_cross_entropy_backward(probs, noisy, np.full(batch, 1.0 / batch))

    grad_w_prime = shifted[:, 0] @ grad_ghost
    grad_shifted = grad_ghost.copy()
    grad_shifted[:, 0] += grad_ghost @ offset
    grad_u_eff = activation @ grad_shifted
    grad_activation = (grad_shifted @ u_eff) * (1.0 - activation * activation)
    grad_logits = grad_shifted + grad_activation[:, None] * w
    grad_w_used = grad_activation @ logits
    grad_beta = np.array(grad_activation.sum())

    grads: Dict[str, np.ndarray] = {}
    if not frozen_identity:
        grad_u, grad_w_constraint = constrain_u_backward(flow.u, w, grad_u_eff)
        grads["u"] = grad_u
        grads["w"] = project_w_backward(flow.w, flow.norm_target, grad_w_used + grad_w_constraint)
    grads["beta"] = grad_beta
    grads["w_prime"] = grad_w_prime
    grads = {name: grad for name, grad in grads.items() if not flow.schedule.is_frozen(name)}
    return float(losses.mean()), grad_logits, grads, losses


def implicit_loss(h: np.ndarray, flow: FlowParams, noisy: int) -> Tuple[float, Dict[str, np.ndarray]]:
    """L_i for one logit vector; grads keyed 'h' plus the unfrozen flow parameters."""
    if not 0 <= int(noisy) < h.shape[-1]:
        raise TargetIndexError(f"observed label {noisy} outside [0, {h.shape[-1]})")
    loss, grad_logits, grads, _ = implicit_loss_batch(np.atleast_2d(h), flow, np.atleast_1d(int(noisy)))
    grads = dict(grads)
    grads["h"] = grad_logits[0]
    return loss, grads

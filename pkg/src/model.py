"""
Full model graph: encoder -> true-label head h and correctness head z -> losses.

The graph is fixed, so forward and reverse passes are chained by hand from the
tensorcore rules. Each objective returns gradients only for the parameters it
is allowed to move.
"""

import hashlib
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np

from . import tensorcore as tc
from .encoder import (EncoderCache, EncoderParams, FeatureMode, MarkedCorpus, Mode, encode_backward,
                      encode_batch, feature_size, init_encoder, xavier_uniform)
from .errors import ShapeError
from .flow import FlowParams, identity_flow, implicit_loss_batch
from .noisemodel import TransitionMatrix, e_step_batch, explicit_loss_batch, explicit_loss_mixed, init_transition

logger = logging.getLogger(__name__)

ENCODER_PREFIX = "encoder."
HEAD_PREFIX = "head."
FLOW_PREFIX = "flow."


class KeepWeighting(str, Enum):
    """What mixes the two terms of L_e during training."""
    PRIOR = "prior"
    POSTERIOR = "posterior"


@dataclass
class ModelParams:
    encoder: EncoderParams
    head_weight: np.ndarray    # F×K, produces h
    head_bias: np.ndarray      # K
    z_weight: np.ndarray       # F, produces the correctness logit
    z_bias: np.ndarray         # scalar
    flow: FlowParams
    transition: TransitionMatrix
    feature_mode: FeatureMode = FeatureMode.RELATIONAL

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[1]

    def named_arrays(self) -> Dict[str, np.ndarray]:
        """Optimizer-visible arrays. T is absent: only EM writes it."""
        arrays = {ENCODER_PREFIX + name: value for name, value in self.encoder.named_arrays().items()}
        arrays.update({
            HEAD_PREFIX + "weight": self.head_weight,
            HEAD_PREFIX + "bias": self.head_bias,
            HEAD_PREFIX + "z_weight": self.z_weight,
            HEAD_PREFIX + "z_bias": self.z_bias,
        })
        arrays.update({FLOW_PREFIX + name: value for name, value in self.flow.named_arrays().items()})
        return arrays

    def with_arrays(self, arrays: Dict[str, np.ndarray]) -> "ModelParams":
        """Copy of these params with the named arrays swapped in (missing names are kept)."""
        def pick(name, current):
            return arrays.get(name, current)

        encoder = EncoderParams(**{name: pick(ENCODER_PREFIX + name, value)
                                   for name, value in self.encoder.named_arrays().items()})
        flow = replace(self.flow, **{name: pick(FLOW_PREFIX + name, value)
                                     for name, value in self.flow.named_arrays().items()})
        return replace(
            self,
            encoder=encoder,
            head_weight=pick(HEAD_PREFIX + "weight", self.head_weight),
            head_bias=pick(HEAD_PREFIX + "bias", self.head_bias),
            z_weight=pick(HEAD_PREFIX + "z_weight", self.z_weight),
            z_bias=pick(HEAD_PREFIX + "z_bias", self.z_bias),
            flow=flow,
        )

    def copy(self) -> "ModelParams":
        copied = self.with_arrays({name: value.copy() for name, value in self.named_arrays().items()})
        return replace(copied, transition=self.transition.copy(),
                       flow=replace(copied.flow, schedule=replace(self.flow.schedule)))


def init_model(num_classes: int, vocab_size: int, rng: np.random.Generator, embed_dim: int = 32,
               feature_dim: int = 32, feature_mode: FeatureMode = FeatureMode.RELATIONAL,
               norm_target: float = 1.0) -> ModelParams:
    """Fresh parameters with the flow frozen at identity and T at its uniform start."""
    feature_mode = FeatureMode(feature_mode)
    width = feature_size(feature_dim, feature_mode)
    return ModelParams(
        encoder=init_encoder(vocab_size, embed_dim, feature_dim, rng),
        head_weight=xavier_uniform(rng, width, num_classes),
        head_bias=np.zeros(num_classes),
        z_weight=xavier_uniform(rng, width, 1)[:, 0].copy(),
        z_bias=np.array(0.0),
        flow=identity_flow(num_classes, norm_target),
        transition=init_transition(num_classes),
        feature_mode=feature_mode,
    )


def param_checksum(arrays: Dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for name in sorted(arrays):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arrays[name], dtype=np.float64).tobytes())
    return digest.hexdigest()


@dataclass
class ForwardPass:
    features: np.ndarray
    cache: EncoderCache
    logits: np.ndarray
    z_logits: np.ndarray
    noisy: np.ndarray


@dataclass
class ObjectiveResult:
    loss: float
    losses: np.ndarray
    valid: np.ndarray
    grads: Dict[str, np.ndarray]

    @property
    def skipped(self) -> int:
        return int((~self.valid).sum())


def forward(params: ModelParams, corpus: MarkedCorpus, indices: np.ndarray, mode: Mode = Mode.EVAL,
            rng: Optional[np.random.Generator] = None, dropout_rate: float = 0.0) -> ForwardPass:
    indices = np.asarray(indices, dtype=np.int64)
    features, cache = encode_batch(corpus, indices, params.encoder, mode, rng, dropout_rate, params.feature_mode)
    if features.shape[1] != params.head_weight.shape[0]:
        raise ShapeError(f"features of width {features.shape[1]} into a head expecting {params.head_weight.shape[0]}")
    if params.transition.num_classes != params.num_classes:
        raise ShapeError(f"head over {params.num_classes} classes, transition over {params.transition.num_classes}")
    logits = tc.linear(features, params.head_weight, params.head_bias)
    z_logits = features @ params.z_weight + params.z_bias
    return ForwardPass(features, cache, logits, z_logits, corpus.noisy[indices])


def _backward(params: ModelParams, state: ForwardPass, grad_logits: np.ndarray,
              grad_z: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    grad_features, grad_w, grad_b = tc.linear_backward(state.features, params.head_weight, grad_logits)
    grads = {HEAD_PREFIX + "weight": grad_w, HEAD_PREFIX + "bias": grad_b}
    if grad_z is not None:
        grad_features = grad_features + np.multiply.outer(grad_z, params.z_weight)
        grads[HEAD_PREFIX + "z_weight"] = state.features.T @ grad_z
        grads[HEAD_PREFIX + "z_bias"] = np.array(grad_z.sum())
    for name, grad in encode_backward(state.cache, params.encoder, grad_features).items():
        grads[ENCODER_PREFIX + name] = grad
    return grads


def xe_objective(params: ModelParams, corpus: MarkedCorpus, indices: np.ndarray, mode: Mode = Mode.TRAIN,
                 rng: Optional[np.random.Generator] = None, dropout_rate: float = 0.0) -> ObjectiveResult:
    """Mean cross-entropy of h against the observed labels."""
    state = forward(params, corpus, indices, mode, rng, dropout_rate)
    batch = state.logits.shape[0]
    losses, probs = tc.batch_cross_entropy(state.logits, state.noisy)
    grad_logits = tc.batch_cross_entropy_backward(probs, state.noisy, np.full(batch, 1.0 / batch))
    return ObjectiveResult(float(losses.mean()), losses, np.ones(batch, dtype=bool),
                           _backward(params, state, grad_logits))


def explicit_objective(params: ModelParams, corpus: MarkedCorpus, indices: np.ndarray, mode: Mode = Mode.TRAIN,
                       rng: Optional[np.random.Generator] = None, dropout_rate: float = 0.0,
                       weighting: KeepWeighting = KeepWeighting.PRIOR,
                       posterior: Optional[np.ndarray] = None) -> ObjectiveResult:
    """Mean L_e over the instances whose transition row is usable; T and the flow are constants.

    With PRIOR weighting the two terms of L_e are mixed by sigmoid(z) and the
    correctness head learns through L_e itself. With POSTERIOR weighting they are
    mixed by the E-step posterior p(z=1|ŷ,x), held constant, and the correctness
    head is fitted to that posterior by binary cross-entropy; both terms enter
    the loss. `posterior` overrides the one computed from this forward pass.
    """
    weighting = KeepWeighting(weighting)
    state = forward(params, corpus, indices, mode, rng, dropout_rate)
    if weighting == KeepWeighting.PRIOR:
        losses, grad_logits, grad_z, valid = explicit_loss_batch(state.logits, state.z_logits, state.noisy,
                                                                 params.transition)
    else:
        if posterior is None:
            batch = e_step_batch(tc.softmax(state.logits, axis=-1), tc.sigmoid(state.z_logits),
                                 params.transition, state.noisy)
            posterior, known = batch.p_correct, batch.valid
        else:
            posterior = np.asarray(posterior, dtype=np.float64)
            if posterior.shape != state.z_logits.shape:
                raise ShapeError(f"posterior of shape {posterior.shape} for a batch of {state.z_logits.shape[0]}")
            known = np.ones(posterior.shape[0], dtype=bool)
        losses, grad_logits, _, valid = explicit_loss_mixed(state.logits, posterior, state.noisy,
                                                            params.transition)
        z_losses, grad_z = tc.binary_cross_entropy(state.z_logits, posterior)
        valid = valid & known
        losses = np.where(valid, losses + z_losses, 0.0)
        grad_logits[~valid] = 0.0
        grad_z = np.where(valid, grad_z, 0.0)
    count = int(valid.sum())
    if count == 0:
        logger.warning("explicit_objective: every instance in the batch has a zero transition row")
        grads = {name: np.zeros_like(value) for name, value in params.named_arrays().items()
                 if not name.startswith(FLOW_PREFIX)}
        return ObjectiveResult(0.0, losses, valid, grads)
    scale = 1.0 / count
    grads = _backward(params, state, grad_logits * scale, grad_z * scale)
    return ObjectiveResult(float(losses.sum() * scale), losses, valid, grads)


def implicit_objective(params: ModelParams, corpus: MarkedCorpus, indices: np.ndarray, mode: Mode = Mode.TRAIN,
                       rng: Optional[np.random.Generator] = None, dropout_rate: float = 0.0) -> ObjectiveResult:
    """Mean L_i; flow gradients are included for the parameters its schedule leaves trainable."""
    state = forward(params, corpus, indices, mode, rng, dropout_rate)
    loss, grad_logits, flow_grads, losses = implicit_loss_batch(state.logits, params.flow, state.noisy)
    grads = _backward(params, state, grad_logits)
    grads.update({FLOW_PREFIX + name: grad for name, grad in flow_grads.items()})
    return ObjectiveResult(loss, losses, np.ones(losses.shape[0], dtype=bool), grads)


def forward_probs(params: ModelParams, corpus: MarkedCorpus, indices: Optional[np.ndarray] = None,
                  chunk_size: int = 256) -> Tuple[np.ndarray, np.ndarray]:
    """Eval-mode p(y|x) and p(z=1|x) for the given instances (all by default)."""
    if indices is None:
        indices = np.arange(len(corpus))
    indices = np.asarray(indices, dtype=np.int64)
    probs, keep = [], []
    for start in range(0, len(indices), chunk_size):
        state = forward(params, corpus, indices[start:start + chunk_size], Mode.EVAL)
        probs.append(tc.softmax(state.logits, axis=-1))
        keep.append(tc.sigmoid(state.z_logits))
    if not probs:
        return np.zeros((0, params.num_classes)), np.zeros(0)
    return np.concatenate(probs), np.concatenate(keep)

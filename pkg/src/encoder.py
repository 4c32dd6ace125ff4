"""
Relational sentence encoder.

A trainable desk-scale stand-in for a pretrained relational language model:
token embeddings, one per-token tanh mixing layer, entity-span averaging with a
shared fully connected head, and a separate head for the leading summary token.
The sentence feature is x = concat(b0, b_e1, b_e2).
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator

from . import tensorcore as tc
from .errors import ShapeError, SpanError, VocabularyError

logger = logging.getLogger(__name__)

PAD_ID = 0
SUMMARY_ID = 1
E1_MARKER_ID = 2
E2_MARKER_ID = 3
NUM_RESERVED = 4


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class FeatureMode(str, Enum):
    RELATIONAL = "relational"
    SUMMARY_ONLY = "summary_only"


class LabeledInstance(BaseModel):
    """One sentence with two entity spans and its (possibly wrong) label."""
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    tokens: Tuple[int, ...] = Field(description="Token ids")
    span_e1: Tuple[int, int] = Field(alias="e1", description="Inclusive span of entity 1")
    span_e2: Tuple[int, int] = Field(alias="e2", description="Inclusive span of entity 2")
    noisy_label: int = Field(description="Observed label")
    true_label: Optional[int] = Field(default=None, description="Hidden true label (synthetic data only)")
    bag_id: str = Field(description="Entity-pair key")

    @field_validator("tokens")
    @classmethod
    def _non_empty(cls, tokens):
        if len(tokens) == 0:
            raise ValueError("token sequence is empty")
        if min(tokens) < 0:
            raise ValueError("token ids must be non-negative")
        return tokens

    @field_validator("span_e1", "span_e2")
    @classmethod
    def _span_inside(cls, span, info: ValidationInfo):
        tokens = info.data.get("tokens")
        if span[0] > span[1]:
            raise ValueError(f"span {span} is reversed")
        if span[0] < 0 or (tokens is not None and span[1] >= len(tokens)):
            raise ValueError(f"span {span} outside the token sequence")
        return span

    @field_validator("noisy_label", "true_label")
    @classmethod
    def _label_in_range(cls, label, info: ValidationInfo):
        if label is None:
            return label
        num_classes = (info.context or {}).get("num_classes")
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise ValueError(f"label {label} outside [0, {num_classes})")
        return label


@dataclass
class EncoderParams:
    """Encoder weights; the entity head is shared by both entities."""
    embedding: np.ndarray       # V×d
    mix_weight: np.ndarray      # d×d
    mix_bias: np.ndarray        # d
    entity_weight: np.ndarray   # d×d'
    entity_bias: np.ndarray     # d'
    summary_weight: np.ndarray  # d×d'
    summary_bias: np.ndarray    # d'

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.entity_weight.shape[1]

    def named_arrays(self) -> Dict[str, np.ndarray]:
        return {
            "embedding": self.embedding,
            "mix_weight": self.mix_weight,
            "mix_bias": self.mix_bias,
            "entity_weight": self.entity_weight,
            "entity_bias": self.entity_bias,
            "summary_weight": self.summary_weight,
            "summary_bias": self.summary_bias,
        }


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_encoder(vocab_size: int, embed_dim: int, feature_dim: int, rng: np.random.Generator) -> EncoderParams:
    if vocab_size <= NUM_RESERVED:
        raise VocabularyError(f"vocabulary of {vocab_size} leaves no room past the reserved ids")
    return EncoderParams(
        embedding=rng.uniform(-0.1, 0.1, size=(vocab_size, embed_dim)),
        mix_weight=xavier_uniform(rng, embed_dim, embed_dim),
        mix_bias=np.zeros(embed_dim),
        entity_weight=xavier_uniform(rng, embed_dim, feature_dim),
        entity_bias=np.zeros(feature_dim),
        summary_weight=xavier_uniform(rng, embed_dim, feature_dim),
        summary_bias=np.zeros(feature_dim),
    )


def feature_size(feature_dim: int, feature_mode: FeatureMode) -> int:
    return feature_dim if FeatureMode(feature_mode) == FeatureMode.SUMMARY_ONLY else 3 * feature_dim


def mark_entities(tokens: Sequence[int], span_e1: Tuple[int, int], span_e2: Tuple[int, int],
                  max_len: int = 128) -> Tuple[List[int], Tuple[int, int], Tuple[int, int]]:
    """Prepend the summary token and wrap each entity in its marker pair.

    Spans are re-indexed onto the entity tokens of the marked sequence. A marked
    sequence longer than `max_len` is cut at the tail and span ends past the cut
    move to the last position.
    """
    length = len(tokens)
    for span in (span_e1, span_e2):
        if span[0] > span[1] or span[0] < 0 or span[1] >= length:
            raise SpanError(f"span {tuple(span)} invalid for length {length}")
    if any(token < NUM_RESERVED for token in tokens):
        raise VocabularyError("input already contains reserved ids (marked twice?)")
    if max_len < 1:
        raise ValueError("max_len must be positive")

    marked = [SUMMARY_ID]
    position = [0] * length
    for p, token in enumerate(tokens):
        if p == span_e1[0]:
            marked.append(E1_MARKER_ID)
        if p == span_e2[0]:
            marked.append(E2_MARKER_ID)
        position[p] = len(marked)
        marked.append(int(token))
        if p == span_e2[1]:
            marked.append(E2_MARKER_ID)
        if p == span_e1[1]:
            marked.append(E1_MARKER_ID)

    last = max_len - 1
    new_e1 = (min(position[span_e1[0]], last), min(position[span_e1[1]], last))
    new_e2 = (min(position[span_e2[0]], last), min(position[span_e2[1]], last))
    if len(marked) > max_len:
        logger.debug(f"truncating marked sequence of {len(marked)} to {max_len}")
        marked = marked[:max_len]
    return marked, new_e1, new_e2


def mark_instance(instance: LabeledInstance, max_len: int = 128) -> LabeledInstance:
    tokens, span_e1, span_e2 = mark_entities(instance.tokens, instance.span_e1, instance.span_e2, max_len)
    return instance.model_copy(update={"tokens": tuple(tokens), "span_e1": span_e1, "span_e2": span_e2})


@dataclass
class MarkedCorpus:
    """Marked instances as padded arrays, ready for batching."""
    tokens: np.ndarray       # N×L int
    span_e1: np.ndarray      # N×2
    span_e2: np.ndarray      # N×2
    noisy: np.ndarray        # N
    true: np.ndarray         # N, -1 where unknown
    bag_ids: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def has_true_labels(self) -> bool:
        return len(self) > 0 and bool(np.all(self.true >= 0))

    @classmethod
    def from_instances(cls, instances: Sequence[LabeledInstance], max_len: int = 128,
                       already_marked: bool = False) -> "MarkedCorpus":
        rows, spans1, spans2 = [], [], []
        for instance in instances:
            if already_marked:
                rows.append(list(instance.tokens))
                spans1.append(instance.span_e1)
                spans2.append(instance.span_e2)
            else:
                tokens, span_e1, span_e2 = mark_entities(instance.tokens, instance.span_e1, instance.span_e2, max_len)
                rows.append(tokens)
                spans1.append(span_e1)
                spans2.append(span_e2)
        width = max((len(row) for row in rows), default=1)
        tokens = np.full((len(rows), width), PAD_ID, dtype=np.int64)
        for i, row in enumerate(rows):
            tokens[i, :len(row)] = row
        return cls(
            tokens=tokens,
            span_e1=np.asarray(spans1, dtype=np.int64).reshape(-1, 2),
            span_e2=np.asarray(spans2, dtype=np.int64).reshape(-1, 2),
            noisy=np.asarray([inst.noisy_label for inst in instances], dtype=np.int64),
            true=np.asarray([-1 if inst.true_label is None else inst.true_label for inst in instances], dtype=np.int64),
            bag_ids=[inst.bag_id for inst in instances],
        )


@dataclass
class EncoderCache:
    ids: np.ndarray
    embedded: np.ndarray
    states: np.ndarray
    pool_weights: List[np.ndarray]
    pooled: List[np.ndarray]
    masks: List[Optional[np.ndarray]]
    heads: List[np.ndarray]
    feature_mode: FeatureMode


def encode_batch(corpus: MarkedCorpus, indices: np.ndarray, params: EncoderParams, mode: Mode,
                 rng: Optional[np.random.Generator] = None, dropout_rate: float = 0.1,
                 feature_mode: FeatureMode = FeatureMode.RELATIONAL) -> Tuple[np.ndarray, EncoderCache]:
    """Encode a batch of marked instances into features x (B×3d', or B×d' summary only)."""
    train = Mode(mode) == Mode.TRAIN
    feature_mode = FeatureMode(feature_mode)
    ids = corpus.tokens[indices]
    if ids.size and int(ids.max()) >= params.vocab_size:
        raise VocabularyError(f"token id {int(ids.max())} >= vocabulary size {params.vocab_size}")

    embedded = tc.embedding_lookup(params.embedding, ids)
    states = tc.tanh(tc.linear(embedded, params.mix_weight, params.mix_bias))
    batch = ids.shape[0]
    zeros = np.zeros(batch, dtype=np.int64)

    summary_in, summary_weights = tc.span_pool(states, zeros, zeros)
    summary_in, summary_mask = tc.dropout(summary_in, dropout_rate, rng, train)
    b0 = tc.tanh(tc.linear(summary_in, params.summary_weight, params.summary_bias))

    cache = EncoderCache(ids=ids, embedded=embedded, states=states, pool_weights=[summary_weights],
                         pooled=[summary_in], masks=[summary_mask], heads=[b0], feature_mode=feature_mode)
    if feature_mode == FeatureMode.SUMMARY_ONLY:
        return b0, cache

    for spans in (corpus.span_e1[indices], corpus.span_e2[indices]):
        pooled, weights = tc.span_pool(states, spans[:, 0], spans[:, 1])
        pooled, mask = tc.dropout(pooled, dropout_rate, rng, train)
        cache.pool_weights.append(weights)
        cache.pooled.append(pooled)
        cache.masks.append(mask)
        cache.heads.append(tc.tanh(tc.linear(pooled, params.entity_weight, params.entity_bias)))
    return tc.concat(cache.heads, axis=-1), cache


def encode_backward(cache: EncoderCache, params: EncoderParams, grad_x: np.ndarray) -> Dict[str, np.ndarray]:
    """Reverse pass of encode_batch; gradients keyed like EncoderParams.named_arrays()."""
    sizes = [head.shape[-1] for head in cache.heads]
    grad_heads = tc.concat_backward(grad_x, sizes, axis=-1)
    grads = {name: np.zeros_like(value) for name, value in params.named_arrays().items()}
    grad_states = np.zeros_like(cache.states)

    for slot, (grad_head, head) in enumerate(zip(grad_heads, cache.heads)):
        prefix = "summary" if slot == 0 else "entity"
        weight = params.summary_weight if slot == 0 else params.entity_weight
        grad_pre = tc.tanh_backward(head, grad_head)
        grad_in, grad_w, grad_b = tc.linear_backward(cache.pooled[slot], weight, grad_pre)
        grads[f"{prefix}_weight"] += grad_w
        grads[f"{prefix}_bias"] += grad_b
        grad_in = tc.dropout_backward(cache.masks[slot], grad_in)
        grad_states += tc.span_pool_backward(cache.pool_weights[slot], grad_in)

    grad_mix = tc.tanh_backward(cache.states, grad_states)
    grad_embedded, grad_w, grad_b = tc.linear_backward(cache.embedded, params.mix_weight, grad_mix)
    grads["mix_weight"] = grad_w
    grads["mix_bias"] = grad_b
    grads["embedding"] = tc.embedding_backward(cache.ids, grad_embedded, params.vocab_size)
    return grads


def encode(instance: LabeledInstance, params: EncoderParams, mode: Mode = Mode.EVAL,
           rng: Optional[np.random.Generator] = None, dropout_rate: float = 0.1,
           feature_mode: FeatureMode = FeatureMode.RELATIONAL) -> np.ndarray:
    """Feature vector of one instance already passed through mark_entities."""
    corpus = MarkedCorpus.from_instances([instance], already_marked=True)
    x, _ = encode_batch(corpus, np.array([0]), params, mode, rng, dropout_rate, feature_mode)
    if x.shape[0] != 1:
        raise ShapeError("single-instance encode produced a batch")
    return x[0]

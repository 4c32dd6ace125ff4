"""
Synthetic noisy-label corpora with a known noise process, and dataset file I/O.

Each class owns a disjoint block of signal token ids placed inside the entity
spans; everything else is uniform noise. Labels are then corrupted by drawing
z ~ Bernoulli(rho) and, when z = 0, a wrong label from column y of T*.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .encoder import NUM_RESERVED, LabeledInstance
from .errors import ConfigError, DatasetParseError, DatasetSchemaError, ShapeError
from .noisemodel import TransitionMatrix, read_transition_csv, validate_transition, write_transition_csv

logger = logging.getLogger(__name__)

TRAIN_FILE = "train.jsonl"
TEST_FILE = "test.jsonl"
TRANSITION_FILE = "transition_true.csv"
METADATA_FILE = "metadata.json"

MAX_SPAN = 3


class SyntheticConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_classes: int = Field(5, ge=2)
    vocab_size: int = Field(200, ge=NUM_RESERVED + 3)
    seq_len: int = Field(20, ge=2 * MAX_SPAN + 1)
    num_instances: int = Field(10000, ge=1)
    signal_strength: float = Field(0.6, ge=0, le=1)
    signal_tokens_per_class: int = Field(4, ge=1)
    max_bag_size: int = Field(3, ge=1)
    seed: int = 0

    @property
    def signal_limit(self) -> int:
        """Ids in [NUM_RESERVED, signal_limit) are class-signal tokens."""
        return NUM_RESERVED + self.num_classes * self.signal_tokens_per_class


@dataclass
class NoiseSpec:
    """Ground-truth noise process: T*, keep probability rho and how rho varies per instance."""
    transition: TransitionMatrix
    keep_prob: float
    keep_mode: Literal["constant", "signal_fraction"] = "constant"
    signal_limit: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.keep_prob <= 1.0:
            raise ConfigError(f"keep probability {self.keep_prob} outside [0, 1]")
        if self.keep_mode not in ("constant", "signal_fraction"):
            raise ConfigError(f"unknown keep mode: {self.keep_mode}")
        if self.keep_mode == "signal_fraction" and self.signal_limit is None:
            raise ConfigError("keep mode signal_fraction needs the signal id range")
        validate_transition(self.transition.values)

    def metadata(self) -> Dict[str, Any]:
        return {"keep_prob": self.keep_prob, "keep_mode": self.keep_mode, "signal_limit": self.signal_limit,
                "num_classes": self.transition.num_classes}


def signal_ids(config: SyntheticConfig, label: int) -> np.ndarray:
    start = NUM_RESERVED + label * config.signal_tokens_per_class
    return np.arange(start, start + config.signal_tokens_per_class)


def _instance(config: SyntheticConfig, label: int, bag_id: str, rng: np.random.Generator) -> LabeledInstance:
    tokens = rng.integers(config.signal_limit, config.vocab_size, size=config.seq_len)
    half = config.seq_len // 2
    len1, len2 = rng.integers(1, MAX_SPAN + 1, size=2)
    start1 = int(rng.integers(0, half - len1 + 1))
    start2 = int(rng.integers(half, config.seq_len - len2 + 1))
    own = signal_ids(config, label)
    for start, length in ((start1, len1), (start2, len2)):
        for position in range(start, start + length):
            if rng.random() < config.signal_strength:
                tokens[position] = own[rng.integers(len(own))]
    return LabeledInstance(tokens=tuple(int(t) for t in tokens), span_e1=(start1, start1 + int(len1) - 1),
                           span_e2=(start2, start2 + int(len2) - 1), noisy_label=label, true_label=label,
                           bag_id=bag_id)


def generate_clean(config: SyntheticConfig, bag_offset: int = 0) -> List[LabeledInstance]:
    """`num_instances` instances grouped in bags of one class each; noisy_label = true_label.

    Every bag draws from its own generator seeded by (seed, bag index), so output is fixed
    by the config alone.
    """
    if config.vocab_size <= config.signal_limit:
        raise ConfigError(f"vocabulary of {config.vocab_size} cannot hold {config.num_classes} signal sets "
                          f"of {config.signal_tokens_per_class} plus noise tokens")
    instances: List[LabeledInstance] = []
    bag = bag_offset
    while len(instances) < config.num_instances:
        rng = np.random.default_rng([config.seed, bag])
        label = int(rng.integers(config.num_classes))
        size = min(int(rng.integers(1, config.max_bag_size + 1)), config.num_instances - len(instances))
        bag_id = f"pair-{bag:06d}"
        instances.extend(_instance(config, label, bag_id, rng) for _ in range(size))
        bag += 1
    logger.info(f"generated {len(instances)} clean instances in {bag - bag_offset} bags")
    return instances


def random_transition(num_classes: int, rng: np.random.Generator) -> TransitionMatrix:
    """Each column's off-diagonal entries drawn from a symmetric Dirichlet(1)."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    values = np.zeros((num_classes, num_classes))
    for column in range(num_classes):
        others = [row for row in range(num_classes) if row != column]
        values[others, column] = rng.dirichlet(np.ones(num_classes - 1))
    return TransitionMatrix(values)


def signal_fraction(instance: LabeledInstance, signal_limit: int) -> float:
    """Fraction of entity-span tokens that are class-signal tokens."""
    tokens = []
    for start, end in (instance.span_e1, instance.span_e2):
        tokens.extend(instance.tokens[start:end + 1])
    tokens = np.asarray(tokens)
    return float(np.mean((tokens >= NUM_RESERVED) & (tokens < signal_limit)))


def keep_probabilities(instances: Sequence[LabeledInstance], spec: NoiseSpec) -> np.ndarray:
    if spec.keep_mode == "constant":
        return np.full(len(instances), spec.keep_prob)
    fractions = np.array([signal_fraction(instance, spec.signal_limit) for instance in instances])
    return spec.keep_prob * (0.5 + 0.5 * fractions)


def corrupt_labels(instances: Sequence[LabeledInstance], spec: NoiseSpec, seed: int) -> List[LabeledInstance]:
    """Overwrite noisy_label by the generative noise process; true_label is kept."""
    if not instances:
        return []
    if any(instance.true_label is None for instance in instances):
        raise ValueError("corrupt_labels needs instances with true labels")
    truths = np.array([instance.true_label for instance in instances], dtype=np.int64)
    num_classes = spec.transition.num_classes
    if truths.max() >= num_classes:
        raise ShapeError(f"true label {truths.max()} outside a {num_classes}-class noise process")

    rng = np.random.default_rng(seed)
    keep = rng.random(len(instances)) < keep_probabilities(instances, spec)
    draws = rng.random(len(instances))
    cumulative = np.cumsum(spec.transition.values[:, truths].T, axis=1)
    cumulative /= cumulative[:, -1:]
    flipped = np.minimum((cumulative <= draws[:, None]).sum(axis=1), num_classes - 1)
    noisy = np.where(keep, truths, flipped)

    kept = float(keep.mean())
    logger.info(f"corrupted {int((~keep).sum())} of {len(instances)} labels (keep rate {kept:.4f})")
    return [instance.model_copy(update={"noisy_label": int(label)}) for instance, label in zip(instances, noisy)]


# -- files ------------------------------------------------------------------

def write_dataset(instances: Iterable[LabeledInstance], path: Union[str, Path]):
    """One JSON record per line: tokens, e1, e2, noisy_label, true_label, bag_id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for instance in instances:
            f.write(json.dumps(instance.model_dump(mode="json", by_alias=True)) + "\n")


def read_dataset(path: Union[str, Path], num_classes: Optional[int] = None) -> List[LabeledInstance]:
    instances = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetParseError(str(e), line_number) from e
            if not isinstance(record, dict):
                raise DatasetParseError("record is not a JSON object", line_number)
            try:
                instances.append(LabeledInstance.model_validate(record, context={"num_classes": num_classes}))
            except ValidationError as e:
                error = e.errors()[0]
                field = str(error["loc"][0]) if error["loc"] else "<record>"
                raise DatasetSchemaError(error["msg"], field, line_number) from e
    return instances


def write_noise_spec(spec: NoiseSpec, directory: Union[str, Path], extra: Optional[Dict[str, Any]] = None):
    """T* as CSV plus a metadata record; `extra` entries are merged into the metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_transition_csv(spec.transition, directory / TRANSITION_FILE)
    metadata = {"noise": spec.metadata()}
    metadata.update(extra or {})
    with open(directory / METADATA_FILE, "w", encoding="utf-8") as f:
        json.dump(metadata, f, indent=2, sort_keys=True)
        f.write("\n")


def read_metadata(directory: Union[str, Path]) -> Dict[str, Any]:
    with open(Path(directory) / METADATA_FILE, "r", encoding="utf-8") as f:
        return json.load(f)


def read_noise_spec(directory: Union[str, Path]) -> NoiseSpec:
    directory = Path(directory)
    noise = read_metadata(directory)["noise"]
    return NoiseSpec(transition=read_transition_csv(directory / TRANSITION_FILE), keep_prob=noise["keep_prob"],
                     keep_mode=noise["keep_mode"], signal_limit=noise.get("signal_limit"))

"""
Training driver: implicit pretraining, then alternating explicit/implicit
optimization with periodic EM updates of the transition matrix.

Also owns the optimizer, checkpoints and instance/bag prediction.
"""

import hashlib
import json
import logging
import os
import pickle
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import tensorcore as tc
from .encoder import EncoderParams, FeatureMode, LabeledInstance, MarkedCorpus, Mode
from .errors import CheckpointError, InvariantViolation, ProjectionError, ShapeError
from .flow import FlowParams, FrozenSchedule, flow_diagnostics, init_flow, project_w, random_w
from .model import (FLOW_PREFIX, KeepWeighting, ModelParams, ObjectiveResult, explicit_objective, forward_probs,
                    implicit_objective, init_model, param_checksum, xe_objective)
from .noisemodel import TransitionMatrix, accumulate_stats_batch, e_step_batch, m_step, q_value

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"NOISY-TRANSITION-CKPT"
CHECKPOINT_VERSION = 1

PHASE_PRETRAIN = "pretrain"
PHASE_MAIN = "main"
PHASE_DONE = "done"


class BaselineMode(str, Enum):
    PLAIN_XE = "plain-xe"
    EXPLICIT_ONLY = "explicit-only"
    IMPLICIT_ONLY = "implicit-only"
    BOTH = "both"


class TrainConfig(BaseModel):
    """Training hyperparameters; unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    batch_size: int = Field(32, ge=1)
    max_len: int = Field(128, ge=4)
    dropout: float = Field(0.1, ge=0, lt=1)
    pretrain_epochs: int = Field(2, ge=0)
    main_epochs: int = Field(10, ge=0)
    inner_steps: int = Field(100, ge=1, description="J: explicit steps per outer iteration")
    t_update_every: Optional[int] = Field(None, ge=1, description="EM cadence in instances; None means once per epoch")
    implicit_steps: int = Field(1, ge=1)
    epsilon: float = Field(0.1, ge=0, lt=1)
    norm_target: float = Field(1.0, gt=0)
    seed: int = 0
    mode: BaselineMode = BaselineMode.BOTH
    embed_dim: int = Field(32, ge=1)
    feature_dim: int = Field(32, ge=1)
    feature_mode: FeatureMode = FeatureMode.RELATIONAL
    w_prime_init: Literal["verbatim", "positive"] = "verbatim"
    keep_weighting: KeepWeighting = Field(KeepWeighting.POSTERIOR,
                                          description="mixing weight of L_e: E-step posterior or sigmoid(z)")
    q_floor: float = Field(1e-8, gt=0)

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class OptimizerState:
    """Adam moments and step counters, one entry per parameter name."""
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: Dict[str, int] = field(default_factory=dict)


@dataclass
class TrainingProgress:
    phase: str = PHASE_PRETRAIN
    epoch: int = 0
    global_step: int = 0
    em_updates: int = 0
    skipped: int = 0
    window: List[int] = field(default_factory=list)


def adam_step(arrays: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState,
              config: TrainConfig, no_decay: Iterable[str] = (), step: Optional[int] = None):
    """In-place Adam update with decoupled weight decay for every array that has a gradient."""
    for name in sorted(grads):
        tc.check_finite(grads[name], f"gradient of {name}", step)
    no_decay = set(no_decay)
    lr = config.learning_rate
    for name in sorted(grads):
        param, grad = arrays[name], grads[name]
        if grad.shape != param.shape:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, parameter {param.shape}")
        if name not in state.first:
            state.first[name] = np.zeros_like(param)
            state.second[name] = np.zeros_like(param)
        count = state.steps.get(name, 0) + 1
        state.steps[name] = count

        if config.weight_decay and name not in no_decay:
            param *= 1.0 - lr * config.weight_decay
        first, second = state.first[name], state.second[name]
        first *= BETA1
        first += (1.0 - BETA1) * grad
        second *= BETA2
        second += (1.0 - BETA2) * (grad * grad)
        first_hat = first / (1.0 - BETA1 ** count)
        second_hat = second / (1.0 - BETA2 ** count)
        param -= lr * first_hat / (np.sqrt(second_hat) + ADAM_EPS)


def flow_names(params: ModelParams) -> List[str]:
    return [name for name in params.named_arrays() if name.startswith(FLOW_PREFIX)]


class Trainer:
    """Runs the two training phases over one marked corpus."""

    def __init__(self, config: TrainConfig, corpus: MarkedCorpus, num_classes: Optional[int] = None,
                 vocab_size: Optional[int] = None, params: Optional[ModelParams] = None,
                 log_sink: Optional[Callable[[Dict[str, Any]], None]] = None):
        self.config = config
        self.corpus = corpus
        self.rng = np.random.default_rng(config.seed)
        if params is None:
            if num_classes is None:
                raise ShapeError("num_classes is required to build fresh parameters")
            if vocab_size is None:
                vocab_size = int(corpus.tokens.max()) + 1
            params = init_model(num_classes, vocab_size, self.rng, config.embed_dim, config.feature_dim,
                                config.feature_mode, config.norm_target)
        if num_classes is not None and params.num_classes != num_classes:
            raise ShapeError(f"parameters over {params.num_classes} classes, data over {num_classes}")
        self.params = params
        self.state = OptimizerState()
        self.progress = TrainingProgress()
        self.records: List[Dict[str, Any]] = []
        self.log_sink = log_sink

    # -- bookkeeping --------------------------------------------------------

    def _emit(self, record: Dict[str, Any]):
        self.records.append(record)
        if self.log_sink is not None:
            self.log_sink(record)

    def _batches(self) -> List[np.ndarray]:
        order = self.rng.permutation(len(self.corpus))
        size = self.config.batch_size
        return [order[start:start + size] for start in range(0, len(order), size)]

    def _reproject_w(self):
        flow = self.params.flow
        try:
            flow.w[...] = project_w(flow.w, flow.norm_target)
        except ProjectionError:
            logger.warning("w collapsed to zero; reinitializing on the norm sphere")
            flow.w[...] = random_w(flow.num_classes, flow.norm_target, self.rng)

    def _step(self, result: ObjectiveResult, loss_type: str) -> Dict[str, Any]:
        step = self.progress.global_step
        tc.check_finite(np.asarray(result.loss), f"{loss_type} loss", step)
        params = self.params
        flow_before = param_checksum(params.flow.named_arrays())
        transition_before = param_checksum({"T": params.transition.values})

        adam_step(params.named_arrays(), result.grads, self.state, self.config,
                  no_decay=flow_names(params), step=step)
        if FLOW_PREFIX + "w" in result.grads:
            self._reproject_w()

        if loss_type == "explicit" and param_checksum(params.flow.named_arrays()) != flow_before:
            raise InvariantViolation(f"explicit step {step} modified flow parameters")
        if param_checksum({"T": params.transition.values}) != transition_before:
            raise InvariantViolation(f"{loss_type} step {step} modified the transition matrix")

        if loss_type == "implicit" and not params.flow.schedule.identity:
            slope, norm_sq = flow_diagnostics(params.flow)
            logger.debug(f"step {step} flow: w.u_eff={slope:.6f} |w|^2={norm_sq:.9f}")

        self.progress.global_step += 1
        self.progress.skipped += result.skipped
        if result.skipped:
            logger.warning(f"step {step}: skipped {result.skipped} instance(s) with a degenerate transition row")
        record = {"step": step, "phase": self.progress.phase, "loss_type": loss_type,
                  "loss": result.loss, "skipped": result.skipped}
        logger.debug(f"step {step} {loss_type} loss={result.loss:.6f}")
        self._emit(record)
        return record

    # -- phase bodies -------------------------------------------------------

    def _train_step(self, objective, indices: np.ndarray, loss_type: str, **options) -> Dict[str, Any]:
        result = objective(self.params, self.corpus, indices, Mode.TRAIN, self.rng, self.config.dropout, **options)
        return self._step(result, loss_type)

    def pretrain_epoch(self) -> List[Dict[str, Any]]:
        """One epoch of L_i with the flow frozen at identity (plain XE when mode is plain-xe)."""
        if not self.params.flow.schedule.identity:
            raise InvariantViolation("pretraining requires the identity flow")
        if self.config.mode == BaselineMode.PLAIN_XE:
            objective, loss_type = xe_objective, "xe"
        else:
            objective, loss_type = implicit_objective, "implicit"
        return [self._train_step(objective, indices, loss_type) for indices in self._batches()]

    def em_update(self) -> Dict[str, Any]:
        """Re-estimate T from eval-mode posteriors of the instances seen since the last update."""
        params = self.params
        indices = np.asarray(self.progress.window, dtype=np.int64)
        flow_before = param_checksum(params.flow.named_arrays())
        probs, keep = forward_probs(params, self.corpus, indices)
        posteriors = e_step_batch(probs, keep, params.transition, self.corpus.noisy[indices])
        stats = accumulate_stats_batch(posteriors)
        updated = m_step(stats, params.transition)
        q_before = q_value(stats, params.transition, floor=self.config.q_floor)
        q_after = q_value(stats, updated, floor=self.config.q_floor)
        if q_after < q_before - 1e-10:
            logger.warning(f"EM update {self.progress.em_updates}: Q decreased {q_before:.6f} -> {q_after:.6f}")
        if param_checksum(params.flow.named_arrays()) != flow_before:
            raise InvariantViolation("EM update modified flow parameters")
        params.transition = updated

        skipped = int((~posteriors.valid).sum())
        if skipped:
            logger.warning(f"EM update {self.progress.em_updates}: skipped {skipped} degenerate posterior(s)")
        self.progress.em_updates += 1
        self.progress.skipped += skipped
        self.progress.window = []
        logger.info(f"EM update {self.progress.em_updates} over {len(indices)} instances: "
                    f"Q {q_before:.4f} -> {q_after:.4f}")
        record = {"step": self.progress.global_step, "phase": self.progress.phase, "loss_type": "em",
                  "q_before": q_before, "q_after": q_after, "transition": updated.values.tolist(),
                  "skipped": skipped}
        self._emit(record)
        return record

    def main_epoch(self) -> List[Dict[str, Any]]:
        """One epoch of the alternating loop.

        The explicit steps walk the shuffled batches once; each block of J of them is
        followed by the EM update when due and then by `implicit_steps` implicit steps,
        which cycle over the same batches.
        """
        config = self.config
        batches = self._batches()
        if config.mode == BaselineMode.PLAIN_XE:
            return [self._train_step(xe_objective, indices, "xe") for indices in batches]
        if config.mode == BaselineMode.IMPLICIT_ONLY:
            return [self._train_step(implicit_objective, indices, "implicit") for indices in batches]

        records = []
        cursor = 0
        implicit_cursor = 0
        while cursor < len(batches):
            for _ in range(config.inner_steps):
                if cursor >= len(batches):
                    break
                indices = batches[cursor]
                cursor += 1
                records.append(self._train_step(explicit_objective, indices, "explicit",
                                                 weighting=config.keep_weighting))
                self.progress.window.extend(int(i) for i in indices)
                if config.t_update_every is not None and len(self.progress.window) >= config.t_update_every:
                    records.append(self.em_update())
            if config.t_update_every is None and cursor >= len(batches) and self.progress.window:
                records.append(self.em_update())
            if config.mode == BaselineMode.BOTH:
                for _ in range(config.implicit_steps):
                    indices = batches[implicit_cursor % len(batches)]
                    implicit_cursor += 1
                    records.append(self._train_step(implicit_objective, indices, "implicit"))
        return records

    def enter_main_phase(self):
        self.progress.phase = PHASE_MAIN
        self.progress.epoch = 0
        if self.config.mode in (BaselineMode.BOTH, BaselineMode.IMPLICIT_ONLY) and self.params.flow.schedule.identity:
            config = self.config
            self.params.flow = init_flow(self.params.num_classes, config.epsilon, config.norm_target,
                                         self.rng, config.w_prime_init)
            logger.info("flow parameters released for training")

    def fit(self, max_epochs: Optional[int] = None,
            on_epoch_end: Optional[Callable[["Trainer"], None]] = None) -> ModelParams:
        """Run (or continue) training; at most `max_epochs` further epochs when given."""
        ran = 0
        while self.progress.phase != PHASE_DONE:
            if max_epochs is not None and ran >= max_epochs:
                break
            phase = self.progress.phase
            if phase == PHASE_PRETRAIN:
                if self.progress.epoch >= self.config.pretrain_epochs:
                    self.enter_main_phase()
                    continue
                records = self.pretrain_epoch()
            else:
                if self.progress.epoch >= self.config.main_epochs:
                    self.progress.phase = PHASE_DONE
                    continue
                records = self.main_epoch()
            self.progress.epoch += 1
            ran += 1
            losses = [r["loss"] for r in records if r["loss_type"] != "em"]
            logger.info(f"{phase} epoch {self.progress.epoch}: {len(losses)} steps, "
                        f"mean loss {np.mean(losses) if losses else float('nan'):.4f}")
            if on_epoch_end is not None:
                on_epoch_end(self)
        return self.params

    # -- checkpoints --------------------------------------------------------

    def save(self, path: Union[str, Path]):
        save_checkpoint(path, self.params, self.state, self.progress, self.config, self.rng.bit_generator.state)

    @classmethod
    def resume(cls, checkpoint: "Checkpoint", corpus: MarkedCorpus,
               log_sink: Optional[Callable[[Dict[str, Any]], None]] = None) -> "Trainer":
        """Trainer that continues exactly where the checkpointed one stopped."""
        if checkpoint.config is None:
            raise CheckpointError("checkpoint carries no training config to resume from")
        trainer = cls(checkpoint.config, corpus, params=checkpoint.params, log_sink=log_sink)
        trainer.state = checkpoint.state
        trainer.progress = checkpoint.progress
        if checkpoint.rng_state is not None:
            trainer.rng.bit_generator.state = checkpoint.rng_state
        return trainer

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path], corpus: MarkedCorpus,
                        log_sink: Optional[Callable[[Dict[str, Any]], None]] = None) -> "Trainer":
        return cls.resume(load_checkpoint(path, expected_num_classes=None), corpus, log_sink)


def pretrain_implicit(corpus: MarkedCorpus, params: ModelParams, config: TrainConfig) -> ModelParams:
    """Configured pretraining epochs of L_i with the flow frozen at identity."""
    trainer = Trainer(config, corpus, params=params)
    for _ in range(config.pretrain_epochs):
        trainer.pretrain_epoch()
    return trainer.params


def alternating_train(corpus: MarkedCorpus, params: ModelParams,
                      config: TrainConfig) -> Tuple[ModelParams, List[Dict[str, Any]]]:
    """Main-phase epochs of the alternating loop; returns params and the training log."""
    trainer = Trainer(config, corpus, params=params)
    trainer.enter_main_phase()
    for _ in range(config.main_epochs):
        trainer.main_epoch()
    return trainer.params, trainer.records


# -- prediction -------------------------------------------------------------

def predict_instance(instance: LabeledInstance, params: ModelParams, max_len: int = 128) -> np.ndarray:
    """Eval-mode softmax(h) for one raw instance; neither T nor the flow is applied."""
    corpus = MarkedCorpus.from_instances([instance], max_len)
    probs, _ = forward_probs(params, corpus)
    return probs[0]


def aggregate_bag(probs: np.ndarray, na_class: int = 0) -> Tuple[int, float]:
    """Bag decision from per-instance probabilities.

    All instances predicted NA gives (NA, max p(NA)); otherwise the positive class with
    the highest probability among positively predicted instances wins.
    """
    probs = np.atleast_2d(probs)
    if probs.shape[0] == 0:
        raise ValueError("cannot predict an empty bag")
    positive = probs.argmax(axis=1) != na_class
    if not positive.any():
        return na_class, float(probs[:, na_class].max())
    candidates = probs[positive].max(axis=0)
    candidates[na_class] = -np.inf
    label = int(candidates.argmax())
    return label, float(candidates[label])


def predict_bag(instances: Sequence[LabeledInstance], params: ModelParams, na_class: int = 0,
                max_len: int = 128) -> Tuple[int, float]:
    if not instances:
        raise ValueError("cannot predict an empty bag")
    if len({instance.bag_id for instance in instances}) != 1:
        raise ValueError("instances of one bag must share a bag_id")
    probs, _ = forward_probs(params, MarkedCorpus.from_instances(instances, max_len))
    return aggregate_bag(probs, na_class)


def group_bags(bag_ids: Sequence[str]) -> Dict[str, List[int]]:
    groups: Dict[str, List[int]] = {}
    for index, bag_id in enumerate(bag_ids):
        groups.setdefault(bag_id, []).append(index)
    return groups


def predict_bags(params: ModelParams, corpus: MarkedCorpus, na_class: int = 0) -> Dict[str, Tuple[int, float]]:
    """Bag decision for every bag in a corpus, keyed by bag_id."""
    probs, _ = forward_probs(params, corpus)
    return {bag_id: aggregate_bag(probs[indices], na_class)
            for bag_id, indices in sorted(group_bags(corpus.bag_ids).items())}


# -- checkpoint file --------------------------------------------------------

@dataclass
class Checkpoint:
    params: ModelParams
    state: OptimizerState
    progress: TrainingProgress
    config: Optional[TrainConfig]
    rng_state: Optional[Dict[str, Any]]
    header: Dict[str, Any]


def save_checkpoint(path: Union[str, Path], params: ModelParams, state: Optional[OptimizerState] = None,
                    progress: Optional[TrainingProgress] = None, config: Optional[TrainConfig] = None,
                    rng_state: Optional[Dict[str, Any]] = None):
    """Magic line, JSON header line, then a pickled payload; written atomically."""
    state = state or OptimizerState()
    progress = progress or TrainingProgress()
    payload = pickle.dumps({
        "arrays": {name: np.array(value, copy=True) for name, value in params.named_arrays().items()},
        "transition": params.transition.values.copy(),
        "schedule": asdict(params.flow.schedule),
        "norm_target": params.flow.norm_target,
        "feature_mode": params.feature_mode.value,
        "optimizer": {"first": state.first, "second": state.second, "steps": state.steps},
        "progress": asdict(progress),
        "config": config.model_dump(mode="json") if config is not None else None,
        "rng_state": rng_state,
    }, protocol=pickle.HIGHEST_PROTOCOL)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "payload_bytes": len(payload),
        "num_classes": params.num_classes,
        "config_hash": config.config_hash() if config is not None else None,
        "seed": config.seed if config is not None else None,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scratch = path.with_name(path.name + ".tmp")
    with open(scratch, "wb") as f:
        f.write(CHECKPOINT_MAGIC + b"\n")
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(payload)
    os.replace(scratch, path)
    logger.info(f"checkpoint written to {path}")


def _params_from_payload(data: Dict[str, Any]) -> ModelParams:
    arrays = data["arrays"]

    def section(prefix: str) -> Dict[str, np.ndarray]:
        return {name[len(prefix):]: value for name, value in arrays.items() if name.startswith(prefix)}

    flow_arrays = section(FLOW_PREFIX)
    head = section("head.")
    return ModelParams(
        encoder=EncoderParams(**section("encoder.")),
        head_weight=head["weight"],
        head_bias=head["bias"],
        z_weight=head["z_weight"],
        z_bias=head["z_bias"],
        flow=FlowParams(u=flow_arrays["u"], w=flow_arrays["w"], beta=flow_arrays["beta"],
                        w_prime=flow_arrays["w_prime"], norm_target=data["norm_target"],
                        schedule=FrozenSchedule(**data["schedule"])),
        transition=TransitionMatrix(data["transition"]),
        feature_mode=FeatureMode(data["feature_mode"]),
    )


def load_checkpoint(path: Union[str, Path], expected_num_classes: Optional[int] = None) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    magic, _, rest = blob.partition(b"\n")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic line)")
    header_line, separator, payload = rest.partition(b"\n")
    if not separator:
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has a corrupt header: {e}") from e
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has format version {header.get('format_version')}, "
                              f"expected {CHECKPOINT_VERSION}")
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(f"{path} is truncated: {len(payload)} of {header.get('payload_bytes')} payload bytes")
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path} payload checksum mismatch")
    if expected_num_classes is not None and header.get("num_classes") != expected_num_classes:
        raise ShapeError(f"checkpoint is over {header.get('num_classes')} classes, data over {expected_num_classes}")
    try:
        data = pickle.loads(payload)
        params = _params_from_payload(data)
    except Exception as e:
        raise CheckpointError(f"{path} payload cannot be decoded: {e}") from e

    optimizer = data["optimizer"]
    return Checkpoint(
        params=params,
        state=OptimizerState(first=optimizer["first"], second=optimizer["second"], steps=optimizer["steps"]),
        progress=TrainingProgress(**data["progress"]),
        config=TrainConfig(**data["config"]) if data["config"] is not None else None,
        rng_state=data["rng_state"],
        header=header,
    )

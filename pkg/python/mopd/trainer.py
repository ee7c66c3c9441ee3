# Copyright © 2024 MoPD Lab Contributors.

"""Mini-batch training of the soft prompt and the gating network."""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np

from mopd import config as config_lib
from mopd import optimizers as optim
from mopd.backbone import Backbone, TeacherPool
from mopd.errors import ArtifactMismatch, ConfigError, NumericalAbort
from mopd.nn.layers.base import Module
from mopd.nn.layers.gating import (
    GatingNetwork,
    gate_statistics,
    uniform_random_gate,
)
from mopd.nn.layers.prompt import SoftPrompt, StudentModel
from mopd.nn.losses import (
    Batch,
    LossBreakdown,
    Reduction,
    TransferVariant,
    combined_loss,
    gate_weights_for,
)
from mopd.numerics import KLDirection
from mopd.serialization import array_from_json, to_jsonable, write_json

logger = logging.getLogger(__name__)

# Any loss component above this magnitude aborts training.
ABORT_THRESHOLD = 1e6


class Variant(str, Enum):
    """The training methods.

    ``CE_ONLY`` trains on the cross entropy alone, ``SIPD`` distills from one
    designated teacher, ``MOPD`` from the gated pool, ``MOPD_R`` from ``T``
    teachers drawn at random per instance and ``MOPD_NO_MPS`` drops the
    selection loss.
    """

    CE_ONLY = "ce_only"
    SIPD = "sipd"
    MOPD = "mopd"
    MOPD_R = "mopd_r"
    MOPD_NO_MPS = "mopd_no_mps"

    @property
    def uses_pool(self) -> bool:
        return self != Variant.CE_ONLY

    @property
    def uses_gate(self) -> bool:
        return self in (Variant.MOPD, Variant.MOPD_NO_MPS)


@dataclass(frozen=True)
class TrainConfig:
    """Every hyperparameter of a training run.

    ``top_t``, ``pool_size`` and ``prompt_length`` may also be given as
    ``T``, ``H`` and ``M`` in config files.
    """

    seed: int = 0
    variant: Variant = Variant.MOPD
    alpha: float = 0.8
    beta: float = 0.0005
    top_t: int = 2
    pool_size: int = 12
    prompt_length: int = 4
    tau: float = 0.01
    lr: float = 0.01
    epochs: int = 200
    batch_size: int = 32
    transfer: TransferVariant = TransferVariant.KL
    kl_direction: KLDirection = KLDirection.FIRST_ARG_REF
    teacher_index: int = 0
    schedule: Literal["constant", "cosine"] = "constant"
    reduction: Reduction = "sum"
    init_std_prompt: float = 0.02
    init_std_gate: float = 0.01
    preset: Optional[str] = None
    dump_dir: Optional[str] = None

    ALIASES = {"T": "top_t", "H": "pool_size", "M": "prompt_length"}

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "transfer", TransferVariant(self.transfer))
        object.__setattr__(self, "kl_direction", KLDirection(self.kl_direction))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}.")
        if not self.beta >= 0.0:
            raise ValueError(f"beta must be non-negative, got {self.beta}.")
        if not 1 <= self.top_t <= self.pool_size:
            raise ValueError(
                f"T must be in [1, H], got T={self.top_t} with H={self.pool_size}."
            )
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}.")
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}.")
        if self.epochs < 0 or self.batch_size < 1 or self.prompt_length < 1:
            raise ValueError(
                f"Need epochs >= 0, batch_size >= 1 and prompt_length >= 1, got "
                f"{self.epochs}, {self.batch_size} and {self.prompt_length}."
            )
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}.")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be constant or cosine, got {self.schedule}.")

    @property
    def effective_alpha(self) -> float:
        return 1.0 if self.variant == Variant.CE_ONLY else self.alpha

    @property
    def effective_beta(self) -> float:
        return self.beta if self.variant == Variant.MOPD else 0.0

    @classmethod
    def from_dict(cls, data) -> "TrainConfig":
        if not isinstance(data, dict):
            return config_lib.from_dict(cls, data, cls.ALIASES)
        canonical = {}
        for key, value in data.items():
            name = cls.ALIASES.get(key, key)
            if name in canonical:
                raise ConfigError("field given twice", field=key)
            canonical[name] = value
        return config_lib.from_dict(cls, config_lib.apply_preset(canonical))

    def to_dict(self) -> dict:
        return config_lib.to_dict(self)

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


class PromptLearner(Module):
    """Holds everything the optimizer updates: the student and, for gated
    variants, the gating network."""

    def __init__(self, student: StudentModel, gate: Optional[GatingNetwork] = None):
        super().__init__()
        self.student = student
        if gate is not None:
            self.gate = gate

    def __call__(self, features):
        return self.student(features)


@dataclass
class TrainState:
    """The mutable state of a run. ``history`` and ``log`` are append-only."""

    config: TrainConfig
    learner: PromptLearner
    optimizer: optim.Optimizer
    pool: Optional[TeacherPool]
    classes: Optional[Tuple[int, ...]]
    batch_rng: np.random.Generator
    selection_rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    history: List[LossBreakdown] = field(default_factory=list)
    log: List[dict] = field(default_factory=list)
    initial_gate_stats: Optional[dict] = None
    final_gate_stats: Optional[dict] = None
    dump_dir: Optional[str] = None

    @property
    def model(self) -> StudentModel:
        return self.learner.student

    @property
    def gate(self) -> Optional[GatingNetwork]:
        return self.learner.get("gate")


@dataclass(eq=False)
class Checkpoint:
    """A trained student, optionally with its gate, and its provenance."""

    prompt_vectors: np.ndarray
    tau: float
    backbone_fingerprint: str
    task_hash: str
    classes: Optional[Tuple[int, ...]] = None
    gate_weight: Optional[np.ndarray] = None
    top_t: Optional[int] = None
    config: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def has_gate(self) -> bool:
        return self.gate_weight is not None

    def without_gate(self) -> "Checkpoint":
        return replace(self, gate_weight=None, top_t=None)

    def student(self, backbone: Backbone) -> StudentModel:
        """Rebuild the student on ``backbone``.

        Raises:
            ArtifactMismatch: if ``backbone`` is not the one trained with.
        """
        if backbone.fingerprint() != self.backbone_fingerprint:
            raise ArtifactMismatch("checkpoint/backbone mismatch")
        prompt = SoftPrompt(*self.prompt_vectors.shape)
        prompt.load_weights({"vectors": np.array(self.prompt_vectors, copy=True)})
        return StudentModel(backbone, prompt, self.tau)

    def gate(self) -> Optional[GatingNetwork]:
        if self.gate_weight is None:
            return None
        gate = GatingNetwork(*self.gate_weight.shape, top_t=self.top_t)
        return gate.load_weights({"weight": np.array(self.gate_weight, copy=True)})

    def to_dict(self) -> dict:
        return to_jsonable(
            {
                "prompt_vectors": self.prompt_vectors,
                "tau": self.tau,
                "backbone_fingerprint": self.backbone_fingerprint,
                "task_hash": self.task_hash,
                "classes": None if self.classes is None else list(self.classes),
                "gate": None
                if self.gate_weight is None
                else {"weight": self.gate_weight, "top_t": self.top_t},
                "config": self.config,
                "metadata": self.metadata,
            }
        )

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        gate = d.get("gate")
        return cls(
            prompt_vectors=array_from_json(d["prompt_vectors"], 2, "prompt_vectors"),
            tau=float(d["tau"]),
            backbone_fingerprint=d["backbone_fingerprint"],
            task_hash=d["task_hash"],
            classes=None if d.get("classes") is None else tuple(d["classes"]),
            gate_weight=None if gate is None else array_from_json(gate["weight"], 2, "gate.weight"),
            top_t=None if gate is None else int(gate["top_t"]),
            config=dict(d.get("config", {})),
            metadata=dict(d.get("metadata", {})),
        )


def _check_inputs(config: TrainConfig, dataset: Batch, backbone: Backbone, pool: Optional[TeacherPool]):
    if dataset.n == 0:
        raise ValueError("Cannot train on an empty dataset.")
    if dataset.features.shape[1] != backbone.d:
        raise ValueError(
            f"Features have dimension {dataset.features.shape[1]} but the backbone "
            f"expects {backbone.d}."
        )
    if not config.variant.uses_pool:
        return
    if pool is None:
        raise ValueError(f"Variant {config.variant.value} requires a teacher pool.")
    if pool.C != backbone.C or pool.d != backbone.d:
        raise ValueError(
            f"Teacher tables of shape ({pool.C}, {pool.d}) do not match the "
            f"backbone ({backbone.C}, {backbone.d})."
        )
    if config.variant == Variant.SIPD:
        if not 0 <= config.teacher_index < pool.H:
            raise ValueError(
                f"teacher_index must be in [0, {pool.H}), got {config.teacher_index}."
            )
    elif pool.H != config.pool_size:
        raise ValueError(
            f"The config expects H={config.pool_size} teachers but the pool has {pool.H}."
        )


def _uniform_stats(pool: TeacherPool, T: int) -> dict:
    H = pool.H
    return {
        "mean_weight": np.full(H, 1.0 / H),
        "mean_entropy": math.log(T),
        "selection_frequency": np.full(H, T / H),
        "noisy_mass": float(pool.noisy_mask.sum()) / H,
    }


def gate_stats(state: TrainState, features: np.ndarray) -> Optional[dict]:
    """Gate statistics of the current state over ``features``."""
    if state.gate is not None:
        return state.gate.statistics(features, state.pool.noisy_mask)
    if state.config.variant == Variant.MOPD_R:
        return _uniform_stats(state.pool, state.config.top_t)
    return None


def init_state(
    config: TrainConfig,
    backbone: Backbone,
    pool: Optional[TeacherPool] = None,
    classes: Optional[Sequence[int]] = None,
) -> TrainState:
    """Build the initial model, gate, optimizer and random streams.

    The seed spawns three independent streams: parameter initialization,
    batch sampling and random teacher selection.
    """
    init_seq, batch_seq, selection_seq = np.random.SeedSequence(config.seed).spawn(3)
    init_rng = np.random.default_rng(init_seq)
    prompt = SoftPrompt(config.prompt_length, backbone.d_e, init_rng, config.init_std_prompt)
    student = StudentModel(backbone, prompt, config.tau)
    gate = None
    if config.variant.uses_gate:
        gate = GatingNetwork(
            backbone.d, pool.H, config.top_t, init_rng, config.init_std_gate
        )
    learner = PromptLearner(student, gate)
    return TrainState(
        config=config,
        learner=learner,
        optimizer=optim.SGD(config.lr),
        pool=pool,
        classes=None if classes is None else tuple(int(c) for c in classes),
        batch_rng=np.random.default_rng(batch_seq),
        selection_rng=np.random.default_rng(selection_seq),
    )


def _mean_gate_entropy(state: TrainState, batch: Batch, weights: Optional[np.ndarray]) -> float:
    if weights is None and state.gate is not None:
        weights = gate_weights_for(state.gate, batch)
    if weights is None:
        return 0.0
    return gate_statistics(weights)["mean_entropy"]


def _dump(state: TrainState, batch: Batch, breakdown: LossBreakdown) -> str:
    dump_dir = state.dump_dir or state.config.dump_dir
    root = Path(dump_dir) if dump_dir else config_lib.default_output_root() / "dumps"
    path = root / f"abort-seed{state.config.seed}-step{state.step}.json"
    gate = state.gate
    # JSON has no nan/inf; keep them readable as strings.
    components = {
        k: v if math.isfinite(v) else repr(v) for k, v in breakdown.to_dict().items()
    }
    write_json(
        path,
        {
            "config": state.config.to_dict(),
            "epoch": state.epoch,
            "step": state.step,
            "breakdown": components,
            "prompt_vectors": state.model.soft_prompt.vectors,
            "gate_weight": None if gate is None else gate.weight,
            "batch_uids": None if batch.uids is None else batch.uids,
            "batch_labels": batch.labels,
        },
    )
    return str(path)


def _check_finite(state: TrainState, batch: Batch, breakdown: LossBreakdown):
    bad = [
        name
        for name, value in breakdown.components().items()
        if not math.isfinite(value) or abs(value) > ABORT_THRESHOLD
    ]
    if bad:
        dump_path = _dump(state, batch, breakdown)
        logger.error("Aborting at step %d: %s out of range", state.step, ", ".join(bad))
        raise NumericalAbort(
            f"Loss component(s) {', '.join(bad)} non-finite or above "
            f"{ABORT_THRESHOLD:g} at step {state.step}.",
            step=state.step,
            breakdown=breakdown,
            dump_path=dump_path,
        )


def training_step(state: TrainState, batch: Batch, config: Optional[TrainConfig] = None) -> LossBreakdown:
    """Compute the variant's objective on ``batch`` and update the prompt and
    the gate simultaneously with one optimizer step.

    Raises:
        NumericalAbort: if a loss component is non-finite or exceeds
          :data:`ABORT_THRESHOLD`; nothing is updated in that case.
    """
    config = config or state.config
    variant = config.variant
    model, gate, pool = state.model, state.gate, state.pool
    kwargs = dict(
        transfer=config.transfer,
        kl_direction=config.kl_direction,
        reduction=config.reduction,
        classes=state.classes,
    )
    alpha = config.effective_alpha
    weights = None
    if variant == Variant.CE_ONLY:
        breakdown, grads = combined_loss(model, None, None, batch, alpha, 0.0, **kwargs)
    elif variant == Variant.SIPD:
        single = pool.subset([config.teacher_index])
        breakdown, grads = combined_loss(model, None, single, batch, alpha, 0.0, **kwargs)
    elif variant == Variant.MOPD_R:
        weights = uniform_random_gate(pool.H, config.top_t, batch.n, state.selection_rng)
        breakdown, grads = combined_loss(
            model, None, pool, batch, alpha, 0.0, gate_weights=weights, **kwargs
        )
    else:
        breakdown, grads = combined_loss(
            model, gate, pool, batch, alpha, config.effective_beta, **kwargs
        )

    _check_finite(state, batch, breakdown)
    entropy = _mean_gate_entropy(state, batch, weights)
    state.optimizer.update(state.learner, grads)
    state.step += 1
    state.history.append(breakdown)
    state.log.append(
        {
            "epoch": state.epoch,
            "step": state.step,
            "ce": breakdown.ce,
            "mpd": breakdown.mpd,
            "mps": breakdown.mps,
            "total": breakdown.total,
            "gate_entropy": entropy,
        }
    )
    logger.debug(
        "step %d: ce=%.6g mpd=%.6g mps=%.6g total=%.6g",
        state.step, breakdown.ce, breakdown.mpd, breakdown.mps, breakdown.total,
    )
    return breakdown


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train(
    config: TrainConfig,
    dataset: Batch,
    backbone: Backbone,
    pool: Optional[TeacherPool] = None,
    classes: Optional[Sequence[int]] = None,
    task_hash: Optional[str] = None,
    dump_dir: Optional[str] = None,
) -> Tuple[TrainState, Checkpoint]:
    """Run ``config.epochs`` epochs of shuffled mini-batch SGD.

    Args:
        config (TrainConfig): The run configuration.
        dataset (Batch): The training instances.
        backbone (Backbone): The frozen backbone.
        pool (TeacherPool, optional): Required by every variant except
          ``CE_ONLY``.
        classes (list[int], optional): Label space of training, e.g. the base
          classes. Default: all classes.
        task_hash (str, optional): Recorded in the checkpoint. Defaults to
          the backbone's task hash.
        dump_dir (str, optional): Where an abort writes its diagnostic state,
          overriding ``config.dump_dir``.

    Returns:
        tuple: The final :class:`TrainState` and its :class:`Checkpoint`.
    """
    _check_inputs(config, dataset, backbone, pool)
    state = init_state(config, backbone, pool, classes)
    state.dump_dir = dump_dir
    steps_per_epoch = math.ceil(dataset.n / config.batch_size)
    if config.schedule == "cosine":
        total = max(1, config.epochs * steps_per_epoch)
        state.optimizer = optim.SGD(optim.cosine_decay(config.lr, total))

    state.initial_gate_stats = gate_stats(state, dataset.features) if pool is not None else None
    logger.info(
        "Training %s for %d epochs (%d steps each) on %d instances",
        config.variant.value, config.epochs, steps_per_epoch, dataset.n,
    )
    for epoch in range(config.epochs):
        state.epoch = epoch
        totals = []
        for idx in _batches(state.batch_rng, dataset.n, config.batch_size):
            totals.append(training_step(state, dataset.take(idx), config).total)
        recent = state.log[-len(totals):]
        logger.info(
            "epoch %d/%d: mean total %.6f, gate entropy %.4f",
            epoch + 1, config.epochs, float(np.mean(totals)),
            float(np.mean([row["gate_entropy"] for row in recent])),
        )
    state.final_gate_stats = gate_stats(state, dataset.features) if pool is not None else None
    return state, make_checkpoint(state, backbone, task_hash)


def make_checkpoint(state: TrainState, backbone: Backbone, task_hash: Optional[str] = None) -> Checkpoint:
    gate = state.gate
    final = state.history[-1] if state.history else None
    return Checkpoint(
        prompt_vectors=np.array(state.model.soft_prompt.vectors, copy=True),
        tau=state.model.tau,
        backbone_fingerprint=backbone.fingerprint(),
        task_hash=backbone.task_hash if task_hash is None else task_hash,
        classes=state.classes,
        gate_weight=None if gate is None else np.array(gate.weight, copy=True),
        top_t=None if gate is None else gate.top_t,
        config=state.config.to_dict(),
        metadata={
            "steps": state.step,
            "epochs": state.config.epochs,
            "final_loss": None if final is None else final.total,
        },
    )

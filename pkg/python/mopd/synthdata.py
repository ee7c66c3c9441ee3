# Copyright © 2024 MoPD Lab Contributors.

"""Seeded synthetic classification tasks in embedding space.

A task is a set of unit-norm class prototypes with noisy instances around
them. Teacher pools hold one frozen per-class table per hard prompt; their
quality is set by how far the rows stray from the prototypes.
"""

import logging
import re
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from mopd import config
from mopd.backbone import (
    Backbone,
    ClassVocabulary,
    FrozenImageEncoder,
    FrozenTextEncoder,
    TeacherPool,
)
from mopd.nn import init as nn_init
from mopd.nn.losses import Batch
from mopd.numerics import normalize
from mopd.serialization import array_from_json, content_hash, to_jsonable

logger = logging.getLogger(__name__)

# Independent random streams derived from a task seed.
_STREAMS = {
    "prototypes": 0,
    "train": 1,
    "test": 2,
    "teachers": 3,
    "backbone": 4,
    "shift": 5,
    "few_shot": 6,
    "names": 7,
}

PROTOTYPE_MAX_COSINE = 0.95
PROTOTYPE_MAX_DRAWS = 10_000

TEMPLATES = (
    "a photo of a {}.",
    "a bad photo of a {}.",
    "a origami {}.",
    "a photo of the large {}.",
    "a {} in a video game.",
    "art of the {}.",
    "a photo of the small {}.",
    "itap of a {}.",
    "a sculpture of a {}.",
    "a rendering of a {}.",
    "a cropped photo of the {}.",
    "a close-up photo of a {}.",
)

_KIND_CODES = {"T": "task", "N": "noisy", "A": "adversarial"}


def stream(seed: int, name: str) -> np.random.Generator:
    """A generator for the named stream of ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAMS[name]]))


@dataclass(frozen=True)
class TaskSpec:
    """Shape and noise level of a synthetic task.

    Attributes:
        seed (int): Seed of every random draw of the task.
        num_classes (int): Number of classes ``C``. Default: ``20``.
        dims (int): Embedding dimension ``d``. Default: ``32``.
        embed_dims (int): Word-embedding dimension ``d_e`` of the backbone
          built for the task. Default: ``32``.
        shots (int): Training instances per class. Default: ``16``.
        test_per_class (int): Test instances per class. Default: ``50``.
        sigma_x (float): Per-coordinate instance noise. Default: ``0.3``.
        base_fraction (float): Share of classes in the base group.
          Default: ``0.5``.
        vocab_noise (float): Noise of the class tokens around the
          prototypes. Default: ``0.3``.
        token_norm (float): Norm of the class tokens of the backbone built
          for the task. Default: ``32.0``.
        name_share (float): Share of the noise variance of task-related
          teacher rows that comes from the class names, the same noise the
          class tokens carry. Default: ``0.75``.
    """

    seed: int
    num_classes: int = 20
    dims: int = 32
    embed_dims: int = 32
    shots: int = 16
    test_per_class: int = 50
    sigma_x: float = 0.3
    base_fraction: float = 0.5
    vocab_noise: float = 0.3
    token_norm: float = 32.0
    name_share: float = 0.75

    ALIASES = {"C": "num_classes", "d": "dims", "d_e": "embed_dims"}

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}.")
        if self.num_classes < 4:
            raise ValueError(f"num_classes must be at least 4, got {self.num_classes}.")
        if self.dims < 2 or self.embed_dims < self.dims:
            raise ValueError(
                f"Need 2 <= dims <= embed_dims, got dims={self.dims}, "
                f"embed_dims={self.embed_dims}."
            )
        if self.shots < 1 or self.test_per_class < 1:
            raise ValueError(
                f"shots and test_per_class must be positive, got {self.shots} "
                f"and {self.test_per_class}."
            )
        if self.sigma_x < 0 or self.vocab_noise < 0:
            raise ValueError(
                f"Noise levels must be non-negative, got sigma_x={self.sigma_x}, "
                f"vocab_noise={self.vocab_noise}."
            )
        if self.token_norm <= 0:
            raise ValueError(f"token_norm must be positive, got {self.token_norm}.")
        if not 0 <= self.name_share <= 1:
            raise ValueError(f"name_share must be in [0, 1], got {self.name_share}.")
        num_base = self.num_base
        if not 1 <= num_base < self.num_classes:
            raise ValueError(
                f"base_fraction {self.base_fraction} leaves no base or no new classes."
            )

    @property
    def num_base(self) -> int:
        return int(round(self.num_classes * self.base_fraction))

    @classmethod
    def from_dict(cls, data) -> "TaskSpec":
        return config.from_dict(cls, data, cls.ALIASES)

    def to_dict(self) -> dict:
        return config.to_dict(self)


@dataclass(eq=False)
class SyntheticTask:
    """Prototypes, train/test instances and the base/new class split.

    Every read of instances through :meth:`split_instances` is recorded in
    :attr:`access_log` as ``(split, group, uids)``.
    """

    spec: TaskSpec
    prototypes: np.ndarray
    train_features: np.ndarray
    train_labels: np.ndarray
    train_uids: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray
    test_uids: np.ndarray
    base_ids: Tuple[int, ...]
    new_ids: Tuple[int, ...]
    shift: float = 0.0
    few_shot: Optional[int] = None
    access_log: List[Tuple[str, str, Tuple[int, ...]]] = field(default_factory=list)

    def __post_init__(self):
        self.base_ids = tuple(int(c) for c in self.base_ids)
        self.new_ids = tuple(int(c) for c in self.new_ids)
        if set(self.base_ids) & set(self.new_ids):
            raise ValueError("Base and new classes must be disjoint.")
        if set(self.base_ids) | set(self.new_ids) != set(range(self.C)):
            raise ValueError("Base and new classes must cover every label.")
        if set(self.train_uids.tolist()) & set(self.test_uids.tolist()):
            raise ValueError("Train and test instances must be disjoint.")

    @property
    def C(self) -> int:
        return self.prototypes.shape[0]

    @property
    def d(self) -> int:
        return self.prototypes.shape[1]

    def group_ids(self, group: str) -> Tuple[int, ...]:
        if group == "base":
            return self.base_ids
        if group == "new":
            return self.new_ids
        if group == "all":
            return tuple(range(self.C))
        raise ValueError(f"Unknown class group {group!r}, expected base, new or all.")

    def split_instances(self, split: str, group: str = "all") -> Batch:
        """The instances of ``split`` (``"train"`` or ``"test"``) whose label
        is in ``group`` (``"base"``, ``"new"`` or ``"all"``)."""
        if split == "train":
            features, labels, uids = self.train_features, self.train_labels, self.train_uids
        elif split == "test":
            features, labels, uids = self.test_features, self.test_labels, self.test_uids
        else:
            raise ValueError(f"Unknown split {split!r}, expected train or test.")
        keep = np.isin(labels, self.group_ids(group))
        self.access_log.append((split, group, tuple(uids[keep].tolist())))
        return Batch(features[keep], labels[keep], uids[keep])

    def to_dict(self) -> dict:
        return to_jsonable(
            {
                "spec": self.spec.to_dict(),
                "prototypes": self.prototypes,
                "train": {
                    "features": self.train_features,
                    "labels": self.train_labels,
                    "uids": self.train_uids,
                },
                "test": {
                    "features": self.test_features,
                    "labels": self.test_labels,
                    "uids": self.test_uids,
                },
                "base_ids": list(self.base_ids),
                "new_ids": list(self.new_ids),
                "shift": self.shift,
                "few_shot": self.few_shot,
            }
        )

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTask":
        def ints(v):
            return np.asarray(v, dtype=np.int64)

        return cls(
            spec=TaskSpec.from_dict(d["spec"]),
            prototypes=array_from_json(d["prototypes"], 2, "prototypes"),
            train_features=array_from_json(d["train"]["features"], 2, "train.features"),
            train_labels=ints(d["train"]["labels"]),
            train_uids=ints(d["train"]["uids"]),
            test_features=array_from_json(d["test"]["features"], 2, "test.features"),
            test_labels=ints(d["test"]["labels"]),
            test_uids=ints(d["test"]["uids"]),
            base_ids=tuple(d["base_ids"]),
            new_ids=tuple(d["new_ids"]),
            shift=float(d.get("shift", 0.0)),
            few_shot=d.get("few_shot"),
        )

    @property
    def task_hash(self) -> str:
        return content_hash(self.to_dict())

    def summary(self) -> dict:
        return {
            "C": self.C,
            "d": self.d,
            "train": int(self.train_labels.size),
            "test": int(self.test_labels.size),
            "base": len(self.base_ids),
            "new": len(self.new_ids),
        }


@dataclass(frozen=True)
class TeacherSpec:
    """Composition and quality of a teacher pool.

    Attributes:
        num_task (int): Task-related teachers. Default: ``12``.
        num_noisy (int): Teachers with rows independent of the prototypes.
          Default: ``0``.
        num_adversarial (int): Teachers whose rows point at the next class's
          prototype. Default: ``0``.
        sigmas (tuple[float], optional): Noise ``sigma_t`` of each
          task-related teacher, in template order. If omitted the values are
          spread evenly over ``[sigma_min, sigma_max]``; the first template
          gets the median value and the others a seeded random order.
        sigma_min (float): Default: ``0.05``.
        sigma_max (float): Default: ``0.5``.
        seed (int, optional): Seed of the teacher draws, the task seed if
          omitted.
    """

    num_task: int = 12
    num_noisy: int = 0
    num_adversarial: int = 0
    sigmas: Optional[Tuple[float, ...]] = None
    sigma_min: float = 0.05
    sigma_max: float = 0.5
    seed: Optional[int] = None

    ALIASES = {"T": "num_task", "N": "num_noisy", "A": "num_adversarial"}

    def __post_init__(self):
        counts = (self.num_task, self.num_noisy, self.num_adversarial)
        if min(counts) < 0 or sum(counts) < 1:
            raise ValueError(f"A pool needs at least one teacher, got counts {counts}.")
        if self.sigmas is not None:
            if len(self.sigmas) != self.num_task:
                raise ValueError(
                    f"Expected {self.num_task} sigmas, got {len(self.sigmas)}."
                )
            if min(self.sigmas, default=0.0) < 0:
                raise ValueError(f"Teacher noise must be non-negative, got {self.sigmas}.")
        if not 0 <= self.sigma_min <= self.sigma_max:
            raise ValueError(
                f"Need 0 <= sigma_min <= sigma_max, got {self.sigma_min} and {self.sigma_max}."
            )
        if self.seed is not None and self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}.")

    @property
    def H(self) -> int:
        return self.num_task + self.num_noisy + self.num_adversarial

    @property
    def label(self) -> str:
        """The mixture name, e.g. ``"12T+12N"``."""
        parts = []
        for count, code in ((self.num_task, "T"), (self.num_noisy, "N"), (self.num_adversarial, "A")):
            if count:
                parts.append(f"{count}{code}")
        return "+".join(parts)

    def task_sigmas(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """The noise of each task-related teacher in template order.

        Spread values come sorted unless ``rng`` is given, in which case the
        median goes first and the rest follow in a random order.
        """
        if self.sigmas is not None:
            return np.asarray(self.sigmas, dtype=np.float64)
        if self.num_task == 1:
            return np.array([self.sigma_min])
        spread = np.linspace(self.sigma_min, self.sigma_max, self.num_task)
        if rng is None:
            return spread
        median = (self.num_task - 1) // 2
        rest = np.delete(spread, median)
        return np.concatenate([spread[median : median + 1], rest[rng.permutation(rest.size)]])

    @classmethod
    def parse_mixture(cls, text: str, **kwargs) -> "TeacherSpec":
        """Parse a mixture name such as ``"12T+12N"`` or ``"1T+1A"``."""
        counts = {"task": 0, "noisy": 0, "adversarial": 0}
        parts = text.replace(" ", "").split("+")
        for part in parts:
            m = re.fullmatch(r"(\d+)([TNA])", part)
            if m is None:
                raise ValueError(f"Cannot parse teacher mixture {text!r}.")
            counts[_KIND_CODES[m.group(2)]] += int(m.group(1))
        return cls(
            num_task=counts["task"],
            num_noisy=counts["noisy"],
            num_adversarial=counts["adversarial"],
            **kwargs,
        )

    @classmethod
    def from_dict(cls, data) -> "TeacherSpec":
        return config.from_dict(cls, data, cls.ALIASES)

    def to_dict(self) -> dict:
        return config.to_dict(self)


def _sample_prototypes(rng: np.random.Generator, C: int, d: int) -> np.ndarray:
    accepted = []
    for _ in range(PROTOTYPE_MAX_DRAWS):
        v = normalize(rng.standard_normal(d))
        if not accepted or np.max(np.stack(accepted) @ v) < PROTOTYPE_MAX_COSINE:
            accepted.append(v)
            if len(accepted) == C:
                return np.stack(accepted)
    raise ValueError(
        f"Could not place {C} prototypes with pairwise cosine < "
        f"{PROTOTYPE_MAX_COSINE} in dimension {d} after {PROTOTYPE_MAX_DRAWS} draws."
    )


def _instances(
    rng: np.random.Generator, prototypes: np.ndarray, per_class: int, sigma: float
) -> Tuple[np.ndarray, np.ndarray]:
    C, d = prototypes.shape
    labels = np.repeat(np.arange(C), per_class)
    means = prototypes[labels]
    if sigma == 0:
        return means.copy(), labels
    return normalize(means + sigma * rng.standard_normal(means.shape)), labels


def generate_task(spec: TaskSpec) -> SyntheticTask:
    """Draw a task from ``spec``; the same spec gives the same task bit for
    bit.

    Raises:
        ValueError: if the prototypes cannot be separated in ``spec.dims``
          dimensions.
    """
    prototypes = _sample_prototypes(stream(spec.seed, "prototypes"), spec.num_classes, spec.dims)
    train_features, train_labels = _instances(
        stream(spec.seed, "train"), prototypes, spec.shots, spec.sigma_x
    )
    test_features, test_labels = _instances(
        stream(spec.seed, "test"), prototypes, spec.test_per_class, spec.sigma_x
    )
    num_train = train_labels.size
    task = SyntheticTask(
        spec=spec,
        prototypes=prototypes,
        train_features=train_features,
        train_labels=train_labels,
        train_uids=np.arange(num_train),
        test_features=test_features,
        test_labels=test_labels,
        test_uids=np.arange(num_train, num_train + test_labels.size),
        base_ids=tuple(range(spec.num_base)),
        new_ids=tuple(range(spec.num_base, spec.num_classes)),
    )
    logger.info("Generated task %s", task.summary())
    return task


def class_name_noise(task: SyntheticTask) -> np.ndarray:
    """Standard normal ``(C, d)`` noise of the class names of ``task``.

    Every prompt of a class is built on its name, so the student's class
    tokens and the task-related teachers share this draw.
    """
    return stream(task.spec.seed, "names").standard_normal(task.prototypes.shape)


def generate_teacher_pool(
    task: SyntheticTask, spec: Optional[TeacherSpec] = None
) -> TeacherPool:
    """Build a teacher pool over all classes of ``task``.

    Task-related teacher ``t`` has rows ``normalize(mu_c + sigma_t eps)``
    where ``eps`` mixes the class-name noise of :func:`class_name_noise`
    with fresh noise, in the proportion ``name_share`` of the task spec.
    Noisy teachers have independent random unit rows; adversarial teachers
    use the prototype of class ``(c + 1) % C`` for class ``c``.
    """
    spec = spec or TeacherSpec()
    seed = task.spec.seed if spec.seed is None else spec.seed
    rng = stream(seed, "teachers")
    names = class_name_noise(task)
    share = task.spec.name_share
    tables, labels, kinds = [], [], []
    for i, sigma in enumerate(spec.task_sigmas(rng)):
        if sigma == 0:
            tables.append(task.prototypes.copy())
        else:
            own = rng.standard_normal(task.prototypes.shape)
            noise = np.sqrt(share) * names + np.sqrt(1.0 - share) * own
            tables.append(normalize(task.prototypes + sigma * noise))
        labels.append(TEMPLATES[i % len(TEMPLATES)])
        kinds.append("task")
    for i in range(spec.num_noisy):
        tables.append(nn_init.unit_rows()(task.prototypes, rng))
        labels.append(f"noisy prompt {i + 1}")
        kinds.append("noisy")
    for i in range(spec.num_adversarial):
        tables.append(np.roll(task.prototypes, -1, axis=0))
        labels.append(f"adversarial prompt {i + 1}")
        kinds.append("adversarial")
    pool = TeacherPool(
        tables=np.stack(tables),
        labels=tuple(labels),
        kinds=tuple(kinds),
        task_hash=task.task_hash,
    )
    logger.info("Generated teacher pool %s (H=%d)", spec.label, pool.H)
    return pool


def build_backbone(
    task: SyntheticTask,
    embed_dims: Optional[int] = None,
    seed: Optional[int] = None,
    vocab_noise: Optional[float] = None,
) -> Backbone:
    """A frozen backbone whose class tokens are aligned with the task's
    prototypes.

    The projection has orthonormal rows ``P`` so ``P^T`` is its right
    inverse; class token ``w_c = r P^T normalize(mu_c + sigma_v nu_c)`` with
    ``r = token_norm`` and the class-name noise ``nu`` makes a zero soft
    prompt encode class ``c`` close to its prototype. ``seed`` only redraws
    the projection.
    """
    embed_dims = task.spec.embed_dims if embed_dims is None else embed_dims
    seed = task.spec.seed if seed is None else seed
    vocab_noise = task.spec.vocab_noise if vocab_noise is None else vocab_noise
    rng = stream(seed, "backbone")
    projection = nn_init.orthonormal_rows()(np.zeros((task.d, embed_dims)), rng)
    noisy = task.prototypes + vocab_noise * class_name_noise(task)
    class_tokens = task.spec.token_norm * normalize(noisy) @ projection
    return Backbone(
        text_encoder=FrozenTextEncoder(projection),
        image_encoder=FrozenImageEncoder(d=task.d),
        vocabulary=ClassVocabulary(class_tokens),
        task_hash=task.task_hash,
        meta={"seed": seed, "vocab_noise": vocab_noise, "token_norm": task.spec.token_norm},
    )


def apply_domain_shift(task: SyntheticTask, shift: float) -> SyntheticTask:
    """Regenerate the test split under a rotated, noisier distribution.

    Each prototype is rotated by ``shift * pi / 2`` toward a random
    orthogonal direction and the instance noise grows to
    ``sigma_x * (1 + shift)``. Labels, uids and the training split are kept;
    ``shift == 0`` returns ``task`` itself.
    """
    if shift < 0:
        raise ValueError(f"Domain shift must be non-negative, got {shift}.")
    if shift == 0:
        return task
    rng = stream(task.spec.seed, "shift")
    theta = shift * np.pi / 2
    directions = rng.standard_normal(task.prototypes.shape)
    directions -= np.sum(directions * task.prototypes, axis=1, keepdims=True) * task.prototypes
    directions = normalize(directions)
    shifted = normalize(np.cos(theta) * task.prototypes + np.sin(theta) * directions)
    sigma = task.spec.sigma_x * (1.0 + shift)
    means = shifted[task.test_labels]
    if sigma == 0:
        test_features = means.copy()
    else:
        test_features = normalize(means + sigma * rng.standard_normal(means.shape))
    return SyntheticTask(
        spec=task.spec,
        prototypes=task.prototypes,
        train_features=task.train_features,
        train_labels=task.train_labels,
        train_uids=task.train_uids,
        test_features=test_features,
        test_labels=task.test_labels,
        test_uids=task.test_uids,
        base_ids=task.base_ids,
        new_ids=task.new_ids,
        shift=task.shift + shift,
        few_shot=task.few_shot,
    )


def few_shot_subset(task: SyntheticTask, k: int, seed: Optional[int] = None) -> SyntheticTask:
    """Keep ``k`` seeded training instances per class, in uid order.

    Raises:
        ValueError: if ``k`` exceeds the training instances of some class.
    """
    counts = np.bincount(task.train_labels, minlength=task.C)
    if k < 1 or k > counts.min():
        raise ValueError(
            f"Insufficient shots: requested {k} per class but the task has "
            f"{int(counts.min())}."
        )
    rng = stream(task.spec.seed if seed is None else seed, "few_shot")
    keep = []
    for c in range(task.C):
        idx = np.flatnonzero(task.train_labels == c)
        keep.extend(rng.choice(idx, size=k, replace=False).tolist())
    keep = np.sort(np.asarray(keep, dtype=np.int64))
    return SyntheticTask(
        spec=task.spec,
        prototypes=task.prototypes,
        train_features=task.train_features[keep],
        train_labels=task.train_labels[keep],
        train_uids=task.train_uids[keep],
        test_features=task.test_features,
        test_labels=task.test_labels,
        test_uids=task.test_uids,
        base_ids=task.base_ids,
        new_ids=task.new_ids,
        shift=task.shift,
        few_shot=k,
    )


def teacher_accuracy(pool: TeacherPool, t_index: int, task: SyntheticTask, split: str = "test") -> float:
    """Accuracy of teacher ``t_index`` over all classes of ``split``."""
    batch = task.split_instances(split, "all")
    scores = normalize(batch.features) @ pool.tables[t_index].T
    return float(np.mean(np.argmax(scores, axis=1) == batch.labels))

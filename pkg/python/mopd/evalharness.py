# Copyright © 2024 MoPD Lab Contributors.

"""Evaluation protocols and report emission.

Accuracies are fractions in ``[0, 1]`` internally and rendered as
percentages with two decimals in reports.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from mopd.backbone import Backbone, TeacherPool, cosine_logits
from mopd.errors import ArtifactMismatch
from mopd.nn.layers.prompt import StudentModel, predict_batch
from mopd.numerics import argmax_lowest
from mopd.serialization import content_hash, to_jsonable, write_csv, write_json
from mopd.synthdata import (
    SyntheticTask,
    TeacherSpec,
    apply_domain_shift,
    build_backbone,
    few_shot_subset,
    generate_teacher_pool,
)
from mopd.trainer import Checkpoint, TrainConfig, Variant, train

logger = logging.getLogger(__name__)

PROTOCOLS = ("base-to-new", "few-shot", "robustness", "domain-shift", "zero-shot")
DEFAULT_SHOTS = (1, 2, 4, 8, 16)
DEFAULT_SEEDS = (1, 2, 3)
REPORT_COLUMNS = ("protocol", "label", "seeds", "acc_base", "acc_new", "h")


def harmonic_mean(acc_base: float, acc_new: float, scale: float = 1.0) -> float:
    """``2 a b / (a + b)``, the trade-off between base and new accuracy.

    Args:
        acc_base (float): Accuracy on base classes, in ``[0, scale]``.
        acc_new (float): Accuracy on new classes, in ``[0, scale]``.
        scale (float, optional): Upper end of the accuracy range, ``100`` for
          percentages. Default: ``1.0``.

    Returns:
        float: ``0`` when both accuracies are ``0``.
    """
    for name, value in (("acc_base", acc_base), ("acc_new", acc_new)):
        if not 0.0 <= value <= scale:
            raise ValueError(f"{name} must be in [0, {scale}], got {value}.")
    if acc_base + acc_new == 0:
        return 0.0
    return 2.0 * acc_base * acc_new / (acc_base + acc_new)


def percent(x: float) -> str:
    return f"{100.0 * x:.2f}"


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Accuracy of one evaluation.

    ``h`` always equals :func:`harmonic_mean` of ``acc_base`` and
    ``acc_new``; protocols with a single label space report that accuracy
    as both.
    """

    protocol: str
    acc_base: float
    acc_new: float
    per_class: Dict[int, float] = field(default_factory=dict)
    gate_stats: Optional[dict] = None
    config_hash: Optional[str] = None
    label: Optional[str] = None
    seeds: Tuple[int, ...] = ()
    extra: dict = field(default_factory=dict)

    @property
    def h(self) -> float:
        return harmonic_mean(self.acc_base, self.acc_new)

    def summary(self) -> str:
        """The one-line ``base/new/H`` summary in percent."""
        name = f"{self.protocol} {self.label}" if self.label else self.protocol
        return (
            f"{name}: base {percent(self.acc_base)}  new {percent(self.acc_new)}  "
            f"H {percent(self.h)}"
        )

    def row(self) -> dict:
        row = {
            "protocol": self.protocol,
            "label": self.label or "",
            "seeds": " ".join(str(s) for s in self.seeds),
            "acc_base": percent(self.acc_base),
            "acc_new": percent(self.acc_new),
            "h": percent(self.h),
        }
        row.update({k: v for k, v in self.extra.items() if not isinstance(v, (dict, list))})
        return row

    def to_dict(self) -> dict:
        return to_jsonable(
            {
                "protocol": self.protocol,
                "label": self.label,
                "seeds": list(self.seeds),
                "acc_base": self.acc_base,
                "acc_new": self.acc_new,
                "h": self.h,
                "per_class": {str(c): a for c, a in sorted(self.per_class.items())},
                "gate_stats": self.gate_stats,
                "config_hash": self.config_hash,
                "extra": self.extra,
            }
        )


def per_class_accuracy(predictions: np.ndarray, labels: np.ndarray) -> Dict[int, float]:
    return {
        int(c): float(np.mean(predictions[labels == c] == c)) for c in np.unique(labels)
    }


def accuracy(model: StudentModel, task: SyntheticTask, group: str = "all") -> Tuple[float, Dict[int, float]]:
    """Test accuracy of ``model`` over ``group``, scored among that group's
    labels only."""
    batch = task.split_instances("test", group)
    predictions = predict_batch(model, batch.features, task.group_ids(group))
    return float(np.mean(predictions == batch.labels)), per_class_accuracy(predictions, batch.labels)


def _check_task(checkpoint: Checkpoint, task: SyntheticTask):
    if checkpoint.task_hash != task.task_hash:
        raise ArtifactMismatch("checkpoint/task mismatch")


def evaluate_base_to_new(
    checkpoint: Checkpoint,
    task: SyntheticTask,
    backbone: Backbone,
    pool: Optional[TeacherPool] = None,
) -> EvalReport:
    """Score a base-trained student on base and new test classes.

    The base test split is scored among base labels and the new split among
    new labels. The gate is never consulted for predictions; when present,
    its statistics over the base training instances are attached.

    Raises:
        ArtifactMismatch: if the checkpoint was trained on another task or
          backbone.
        ValueError: if the checkpoint's label space is not the base classes.
    """
    _check_task(checkpoint, task)
    if checkpoint.classes is None or tuple(checkpoint.classes) != tuple(task.base_ids):
        raise ValueError(
            f"label-space mismatch: checkpoint trained on {checkpoint.classes}, "
            f"task base classes are {list(task.base_ids)}."
        )
    model = checkpoint.student(backbone)
    acc_base, per_base = accuracy(model, task, "base")
    acc_new, per_new = accuracy(model, task, "new")
    gate_stats = None
    gate = checkpoint.gate()
    if gate is not None:
        train_base = task.split_instances("train", "base")
        gate_stats = gate.statistics(
            train_base.features, None if pool is None else pool.noisy_mask
        )
    return EvalReport(
        protocol="base-to-new",
        acc_base=acc_base,
        acc_new=acc_new,
        per_class={**per_base, **per_new},
        gate_stats=gate_stats,
        config_hash=content_hash(checkpoint.config),
        seeds=(int(checkpoint.config.get("seed", 0)),),
    )


def evaluate_zero_shot(pool: TeacherPool, t_index: int, task: SyntheticTask) -> EvalReport:
    """Base-to-new accuracy of teacher ``t_index`` alone, no training."""
    if not 0 <= t_index < pool.H:
        raise ValueError(f"t_index must be in [0, {pool.H}), got {t_index}.")
    accs, per_class = [], {}
    for group in ("base", "new"):
        ids = list(task.group_ids(group))
        batch = task.split_instances("test", group)
        scores = cosine_logits(pool.tables[t_index][ids], batch.features, 1.0)
        predictions = np.asarray(ids)[argmax_lowest(scores)]
        accs.append(float(np.mean(predictions == batch.labels)))
        per_class.update(per_class_accuracy(predictions, batch.labels))
    return EvalReport(
        protocol="zero-shot",
        acc_base=accs[0],
        acc_new=accs[1],
        per_class=per_class,
        label=pool.labels[t_index],
        extra={"kind": pool.kinds[t_index]},
    )


def evaluate_domain_shift(
    checkpoint: Checkpoint,
    task: SyntheticTask,
    backbone: Backbone,
    shifts: Sequence[float] = (0.2, 0.4),
) -> List[dict]:
    """All-class test accuracy on the source split and each shifted split.

    Returns:
        list[dict]: Rows ``{"shift": s, "acc": a}``, the source first.
    """
    _check_task(checkpoint, task)
    model = checkpoint.student(backbone)
    rows = []
    for shift in (0.0, *shifts):
        acc, _ = accuracy(model, apply_domain_shift(task, shift), "all")
        rows.append({"shift": float(shift), "acc": acc})
    return rows


def _default_pool(config: TrainConfig, task: SyntheticTask, pool: Optional[TeacherPool]):
    if pool is None and config.variant.uses_pool:
        pool = generate_teacher_pool(task, TeacherSpec(num_task=config.pool_size))
    return pool


def train_and_evaluate(
    config: TrainConfig,
    task: SyntheticTask,
    backbone: Optional[Backbone] = None,
    pool: Optional[TeacherPool] = None,
) -> Tuple[EvalReport, Checkpoint]:
    """Train ``config`` on the base split of ``task`` and run base-to-new.

    Only base-class training instances are read.
    """
    backbone = backbone or build_backbone(task)
    pool = _default_pool(config, task, pool)
    train_base = task.split_instances("train", "base")
    state, checkpoint = train(
        config, train_base, backbone, pool, classes=task.base_ids, task_hash=task.task_hash
    )
    report = evaluate_base_to_new(checkpoint, task, backbone, pool)
    extra = {"variant": config.variant.value}
    if state.initial_gate_stats is not None and "noisy_mass" in state.initial_gate_stats:
        extra["noisy_mass_initial"] = state.initial_gate_stats["noisy_mass"]
        extra["noisy_mass_final"] = state.final_gate_stats["noisy_mass"]
    return replace(report, extra=extra), checkpoint


def mean_report(reports: Sequence[EvalReport], label: Optional[str] = None) -> EvalReport:
    """Average several per-seed reports of one protocol.

    Accuracies and numeric extras are averaged; ``h`` follows from the mean
    accuracies.
    """
    if not reports:
        raise ValueError("Cannot average an empty list of reports.")
    extra = {}
    for key, value in reports[0].extra.items():
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            extra[key] = float(np.mean([r.extra[key] for r in reports]))
        else:
            extra[key] = value
    return EvalReport(
        protocol=reports[0].protocol,
        acc_base=float(np.mean([r.acc_base for r in reports])),
        acc_new=float(np.mean([r.acc_new for r in reports])),
        config_hash=reports[0].config_hash,
        label=label if label is not None else reports[0].label,
        seeds=tuple(s for r in reports for s in r.seeds),
        extra=extra,
    )


def run_seeds(
    config: TrainConfig,
    task: SyntheticTask,
    seeds: Iterable[int] = DEFAULT_SEEDS,
    backbone: Optional[Backbone] = None,
    pool: Optional[TeacherPool] = None,
    label: Optional[str] = None,
) -> Tuple[EvalReport, List[EvalReport]]:
    """:func:`train_and_evaluate` once per training seed.

    Returns:
        tuple: The averaged report and the per-seed reports.
    """
    backbone = backbone or build_backbone(task)
    pool = _default_pool(config, task, pool)
    reports = []
    for seed in seeds:
        report, _ = train_and_evaluate(config.replace(seed=int(seed)), task, backbone, pool)
        reports.append(replace(report, label=label))
        logger.info("%s seed %d: %s", config.variant.value, seed, report.summary())
    return mean_report(reports, label), reports


def evaluate_few_shot(
    config: TrainConfig,
    task: SyntheticTask,
    shots: Sequence[int] = DEFAULT_SHOTS,
    seeds: Iterable[int] = DEFAULT_SEEDS,
    backbone: Optional[Backbone] = None,
    pool: Optional[TeacherPool] = None,
) -> List[dict]:
    """Train on ``k`` shots of every class and score all-class test accuracy.

    Returns:
        list[dict]: One row per ``k`` with the mean and std of accuracy over
        ``seeds``.

    Raises:
        ValueError: if some class has fewer than ``max(shots)`` training
          instances.
    """
    few_shot_subset(task, max(shots))
    backbone = backbone or build_backbone(task)
    pool = _default_pool(config, task, pool)
    seeds = list(seeds)
    rows = []
    for k in shots:
        accs = []
        for seed in seeds:
            subset = few_shot_subset(task, k, seed)
            _, checkpoint = train(
                config.replace(seed=int(seed)),
                subset.split_instances("train", "all"),
                backbone,
                pool,
                task_hash=task.task_hash,
            )
            acc, _ = accuracy(checkpoint.student(backbone), task, "all")
            accs.append(acc)
        rows.append(
            {
                "shots": int(k),
                "acc": float(np.mean(accs)),
                "std": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
                "seeds": len(accs),
            }
        )
        logger.info("%d shots: accuracy %s", k, percent(rows[-1]["acc"]))
    return rows


def evaluate_robustness(
    config: TrainConfig,
    task: SyntheticTask,
    pool_mixtures: Sequence[Union[TeacherSpec, str]],
    seeds: Iterable[int] = DEFAULT_SEEDS,
    backbone: Optional[Backbone] = None,
    variants: Sequence[Variant] = (Variant.MOPD, Variant.MOPD_R),
) -> List[EvalReport]:
    """Train each variant on each pool mixture with the same seeds.

    Mixtures are :class:`TeacherSpec` instances or strings like
    ``"12T+12N"``. Each report is labeled with the mixture and carries the
    variant and, for the gated variants, the gate mass on noisy teachers at
    the start and the end of training.
    """
    backbone = backbone or build_backbone(task)
    seeds = list(seeds)
    reports = []
    for mixture in pool_mixtures:
        spec = TeacherSpec.parse_mixture(mixture) if isinstance(mixture, str) else mixture
        pool = generate_teacher_pool(task, spec)
        for variant in variants:
            cfg = config.replace(
                variant=variant, pool_size=pool.H, top_t=min(config.top_t, pool.H)
            )
            report, _ = run_seeds(cfg, task, seeds, backbone, pool, label=spec.label)
            reports.append(report)
    return reports


def aggregate_reports(reports: Sequence[EvalReport]) -> Dict[str, Tuple[float, float]]:
    """Mean and sample standard deviation of ``acc_base``, ``acc_new`` and
    ``h`` over ``reports``."""
    if not reports:
        raise ValueError("Cannot aggregate an empty list of reports.")
    out = {}
    for metric in ("acc_base", "acc_new", "h"):
        values = np.array([getattr(r, metric) for r in reports])
        std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
        out[metric] = (float(values.mean()), std)
    return out


def paired_sign_test(a: Sequence[float], b: Sequence[float]) -> float:
    """One-sided p-value for ``a > b`` from paired samples.

    Ties are dropped; with no untied pair the p-value is ``1``.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"Paired samples must have equal shapes, got {a.shape} and {b.shape}.")
    wins = int(np.sum(a > b))
    trials = wins + int(np.sum(a < b))
    if trials == 0:
        return 1.0
    return float(stats.binomtest(wins, trials, 0.5, alternative="greater").pvalue)


def new_class_train_reads(task: SyntheticTask) -> int:
    """Number of new-class training instances read through
    :meth:`SyntheticTask.split_instances` so far."""
    new_uids = set(task.train_uids[np.isin(task.train_labels, task.new_ids)].tolist())
    return sum(
        len(new_uids.intersection(uids)) for split, _, uids in task.access_log if split == "train"
    )


def write_reports(directory: Union[str, Path], reports: Sequence[EvalReport], name: str = "report") -> str:
    """Write ``<name>.json`` and the flat ``<name>.csv``; returns the JSON
    digest."""
    directory = Path(directory)
    digest = write_json(directory / f"{name}.json", [r.to_dict() for r in reports])
    rows = [r.row() for r in reports]
    header = list(REPORT_COLUMNS) + sorted({k for r in rows for k in r} - set(REPORT_COLUMNS))
    write_csv(directory / f"{name}.csv", header, [[r.get(k, "") for k in header] for r in rows])
    return digest


def write_table(path: Union[str, Path], rows: Sequence[dict]) -> str:
    """Write a list of flat dicts as CSV, columns in first-row order."""
    if not rows:
        raise ValueError("Cannot write an empty table.")
    header = list(rows[0])
    return write_csv(path, header, [[row[k] for k in header] for row in rows])


def write_plot_data(path: Union[str, Path], xs: Sequence[float], ys: Sequence[float]) -> str:
    """Two-column ``x,y`` CSV for external plotting."""
    if len(xs) != len(ys):
        raise ValueError(f"Got {len(xs)} x values but {len(ys)} y values.")
    return write_csv(path, ["x", "y"], list(zip(xs, ys)))

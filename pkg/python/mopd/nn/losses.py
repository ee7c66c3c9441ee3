# Copyright © 2024 MoPD Lab Contributors.

"""The training objectives.

Every loss returns ``(value, grads)`` where ``grads`` is a parameter tree
``{"student": {"soft_prompt": {"vectors": ...}}, "gate": {"weight": ...}}``
holding the analytic gradient for each module passed in. The combined
objective accumulates the gradient on the student logits and on the gate
weights over all terms and runs a single backward pass, so a term with a zero
coefficient leaves the update bit-identical to the objective without it.
"""

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Callable, Literal, Optional, Sequence, Tuple, Union, get_args

import numpy as np

from mopd.backbone import TeacherPool, cosine_logits, teacher_log_probs
from mopd.nn.layers.gating import GatingNetwork, gate_backward_batch, gate_forward_batch
from mopd.nn.layers.prompt import StudentModel, prompt_backward, student_text_table
from mopd.numerics import (
    KL_FLOOR,
    KLDirection,
    log_softmax,
    normalize,
    sequential_sum,
)

Reduction = Literal["sum", "mean"]


class TransferVariant(str, Enum):
    """How a student is compared to a teacher inside the distillation term.

    ``KL`` and ``MMD`` compare prediction distributions; ``COSINE`` and
    ``L1`` compare the per-class text embeddings.
    """

    KL = "kl"
    MMD = "mmd"
    COSINE = "cos"
    L1 = "l1"


@dataclass(frozen=True)
class LossBreakdown:
    """The components of ``alpha * ce + (1 - alpha) * mpd + beta * mps``."""

    ce: float
    mpd: float
    mps: float
    total: float
    alpha: float
    beta: float

    def to_dict(self) -> dict:
        return asdict(self)

    def components(self) -> dict:
        return {"ce": self.ce, "mpd": self.mpd, "mps": self.mps, "total": self.total}


@dataclass(frozen=True, eq=False)
class Batch:
    """Labeled visual embeddings.

    Attributes:
        features (np.ndarray): ``(n, d)`` visual embeddings.
        labels (np.ndarray): ``(n,)`` integer class ids.
        uids (np.ndarray): ``(n,)`` instance ids, used for access auditing.
    """

    features: np.ndarray
    labels: np.ndarray
    uids: Optional[np.ndarray] = None

    def __post_init__(self):
        features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        labels = np.atleast_1d(np.asarray(self.labels)).astype(np.int64)
        if features.shape[0] != labels.shape[0]:
            raise ValueError(
                f"Got {features.shape[0]} feature rows but {labels.shape[0]} labels."
            )
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        if self.uids is not None:
            object.__setattr__(self, "uids", np.asarray(self.uids, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    def take(self, indices: Sequence[int]) -> "Batch":
        indices = np.asarray(indices, dtype=np.int64)
        uids = None if self.uids is None else self.uids[indices]
        return Batch(self.features[indices], self.labels[indices], uids)


def _scale(reduction: Reduction, n: int) -> float:
    if reduction not in get_args(Reduction):
        raise ValueError(f"Invalid reduction. Must be one of {get_args(Reduction)}.")
    return 1.0 / n if reduction == "mean" else 1.0


def _label_positions(labels: np.ndarray, classes: Optional[Sequence[int]], C: int) -> np.ndarray:
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"Labels must lie in [0, {C}), got {np.unique(labels)}.")
    if classes is None:
        return labels
    lookup = {int(c): i for i, c in enumerate(classes)}
    try:
        return np.array([lookup[int(y)] for y in labels], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"Label {e.args[0]} is outside the label space {list(classes)}.") from e


def _restrict(tables: np.ndarray, classes: Optional[Sequence[int]]) -> np.ndarray:
    return tables if classes is None else tables[:, list(classes)]


def _divergence(
    transfer: TransferVariant,
    direction: KLDirection,
    p: np.ndarray,
    log_p: np.ndarray,
    table: np.ndarray,
    q: np.ndarray,
    log_q: np.ndarray,
    tables: np.ndarray,
) -> Tuple[np.ndarray, Callable, Callable]:
    """Student/teacher discrepancy for every instance and teacher.

    Args:
        p, log_p: Student distributions ``(n, C)``.
        table: Student text table ``(C, d)``.
        q, log_q: Teacher distributions ``(n, H, C)``.
        tables: Teacher text tables ``(H, C, d)``.

    Returns:
        tuple: ``D`` of shape ``(n, H)`` and two functions mapping teacher
        weights ``W`` of shape ``(n, H)`` to the gradient of ``sum(W * D)`` on
        the student logits and on the student text table (or ``None``).
    """
    n, H = q.shape[0], q.shape[1]

    if transfer == TransferVariant.KL and direction == KLDirection.FIRST_ARG_REF:
        a = log_p[:, None, :] - np.log(np.maximum(q, KL_FLOOR))
        D = np.sum(p[:, None, :] * a, axis=-1)

        def dlogits(W):
            return p * (np.einsum("nh,nhc->nc", W, a) - np.sum(W * D, axis=1, keepdims=True))

        return D, dlogits, lambda W: None

    if transfer == TransferVariant.KL:
        log_p_floor = np.maximum(log_p, np.log(KL_FLOOR))
        active = (p >= KL_FLOOR)[:, None, :]
        D = np.sum(q * (log_q - log_p_floor[:, None, :]), axis=-1)

        def dlogits(W):
            wq = np.einsum("nh,nhc->nc", W, q * active)
            return p * np.sum(wq, axis=-1, keepdims=True) - wq

        return D, dlogits, lambda W: None

    if transfer == TransferVariant.MMD:
        diff = p[:, None, :] - q
        D = np.sum(np.square(diff), axis=-1)

        def dlogits(W):
            r = 2.0 * np.einsum("nh,nhc->nc", W, diff)
            return p * (r - np.sum(r * p, axis=-1, keepdims=True))

        return D, dlogits, lambda W: None

    def zeros(W):
        return np.zeros_like(p)

    if transfer == TransferVariant.COSINE:
        per_teacher = np.sum(1.0 - np.einsum("cd,hcd->hc", table, tables), axis=-1)
        D = np.broadcast_to(per_teacher, (n, H)).copy()
        return D, zeros, lambda W: -np.einsum("h,hcd->cd", W.sum(axis=0), tables)

    if transfer == TransferVariant.L1:
        diff = table[None] - tables
        per_teacher = np.sum(np.abs(diff), axis=(1, 2))
        D = np.broadcast_to(per_teacher, (n, H)).copy()
        return D, zeros, lambda W: np.einsum("h,hcd->cd", W.sum(axis=0), np.sign(diff))

    raise ValueError(f"Unknown transfer variant {transfer}.")


def _objective(
    model: Optional[StudentModel],
    gate: Optional[GatingNetwork],
    tables: Optional[np.ndarray],
    batch: Batch,
    *,
    ce_coef: float,
    mpd_coef: float,
    mps_coef: float,
    transfer: Union[TransferVariant, str] = TransferVariant.KL,
    kl_direction: Union[KLDirection, str] = KLDirection.FIRST_ARG_REF,
    reduction: Reduction = "sum",
    classes: Optional[Sequence[int]] = None,
    gate_weights: Optional[np.ndarray] = None,
    tau: Optional[float] = None,
):
    transfer = TransferVariant(transfer)
    kl_direction = KLDirection(kl_direction)
    if batch.n == 0:
        raise ValueError("Cannot compute a loss on an empty batch.")
    scale = _scale(reduction, batch.n)
    features = normalize(batch.features)
    rows = np.arange(batch.n)
    num_classes = model.C if model is not None else tables.shape[1]
    positions = _label_positions(batch.labels, classes, num_classes)
    tau = model.tau if model is not None else tau
    if tau is None or not tau > 0:
        raise ValueError(f"Temperature must be positive, got {tau}.")

    ce_vec = np.zeros(batch.n)
    mpd_vec = np.zeros(batch.n)
    mps_vec = np.zeros(batch.n)
    dlogits = None
    dtable = None
    dgate = None
    weights = None

    if model is not None:
        table = student_text_table(model, classes)
        logits = cosine_logits(table, features, tau)
        log_p = log_softmax(logits)
        p = np.exp(log_p)
        ce_vec = -log_p[rows, positions]
        onehot = np.zeros_like(p)
        onehot[rows, positions] = 1.0
        dlogits = ce_coef * (p - onehot)

    if tables is not None:
        tables = _restrict(tables, classes)
        if gate_weights is not None:
            weights = np.asarray(gate_weights, dtype=np.float64)
            if weights.shape != (batch.n, tables.shape[0]):
                raise ValueError(
                    f"Expected gate weights of shape {(batch.n, tables.shape[0])}, "
                    f"got {weights.shape}."
                )
        elif gate is not None:
            if gate.H != tables.shape[0]:
                raise ValueError(
                    f"Gate has {gate.H} outputs but the pool has {tables.shape[0]} teachers."
                )
            weights, _ = gate_forward_batch(gate, features)
        else:
            weights = np.ones((batch.n, tables.shape[0]))

        log_q = teacher_log_probs(tables, features, tau)
        q = np.exp(log_q)

        if model is not None:
            D, dlogits_fn, dtable_fn = _divergence(
                transfer, kl_direction, p, log_p, table, q, log_q, tables
            )
            mpd_vec = np.sum(weights * D, axis=1)
            dlogits = dlogits + mpd_coef * dlogits_fn(weights)
            dt = dtable_fn(weights)
            if dt is not None:
                dtable = mpd_coef * dt
            dgate = mpd_coef * D

        if gate is not None and gate_weights is None:
            nll = -log_q[rows, :, positions]
            mps_vec = np.sum(weights * nll, axis=1)
            dgate = mps_coef * nll if dgate is None else dgate + mps_coef * nll

    grads = {}
    if model is not None:
        vectors = prompt_backward(
            model,
            features,
            scale * dlogits,
            classes,
            None if dtable is None else scale * dtable,
        )
        grads["student"] = {"soft_prompt": {"vectors": vectors}}
    if gate is not None:
        if dgate is None or gate_weights is not None:
            weight = np.zeros_like(gate.weight)
        else:
            weight = gate_backward_batch(gate, features, scale * dgate, weights)
        grads["gate"] = {"weight": weight}

    values = (
        scale * sequential_sum(ce_vec),
        scale * sequential_sum(mpd_vec),
        scale * sequential_sum(mps_vec),
    )
    return values, grads, weights


def ce_loss(
    model: StudentModel,
    batch: Batch,
    reduction: Reduction = "sum",
    classes: Optional[Sequence[int]] = None,
):
    r"""Cross entropy of the student, :math:`\sum_x -\ln p_{soft}(y | x)`.

    Args:
        model (StudentModel): The student.
        batch (Batch): Labeled instances.
        reduction (str, optional): ``'sum'`` | ``'mean'``. Default: ``'sum'``.
        classes (list[int], optional): Restrict the label space to these ids.

    Returns:
        tuple: ``(value, grads)``.
    """
    (ce, _, _), grads, _ = _objective(
        model, None, None, batch,
        ce_coef=1.0, mpd_coef=0.0, mps_coef=0.0,
        reduction=reduction, classes=classes,
    )
    return ce, grads


def pd_loss(
    model: StudentModel,
    teacher: np.ndarray,
    batch: Batch,
    transfer: Union[TransferVariant, str] = TransferVariant.KL,
    kl_direction: Union[KLDirection, str] = KLDirection.FIRST_ARG_REF,
    reduction: Reduction = "sum",
    classes: Optional[Sequence[int]] = None,
):
    r"""Distillation from a single teacher table,
    :math:`\sum_x \mathrm{KL}(p_{soft}(\cdot|x), p_{hard}(\cdot|x))`.

    Args:
        teacher (np.ndarray): One ``(C, d)`` teacher table with unit rows.
        transfer (TransferVariant, optional): The discrepancy. Default: ``KL``.
        kl_direction (KLDirection, optional): Which side of the KL is the
          reference. Default: ``FIRST_ARG_REF``.
    """
    teacher = np.asarray(teacher, dtype=np.float64)
    if teacher.ndim != 2 or teacher.shape[0] != model.C:
        raise ValueError(
            f"Teacher table must have shape ({model.C}, d), got {teacher.shape}."
        )
    (_, pd, _), grads, _ = _objective(
        model, None, teacher[None], batch,
        ce_coef=0.0, mpd_coef=1.0, mps_coef=0.0,
        transfer=transfer, kl_direction=kl_direction,
        reduction=reduction, classes=classes,
    )
    return pd, grads


def mpd_loss(
    model: StudentModel,
    gate: Optional[GatingNetwork],
    pool: TeacherPool,
    batch: Batch,
    transfer: Union[TransferVariant, str] = TransferVariant.KL,
    kl_direction: Union[KLDirection, str] = KLDirection.FIRST_ARG_REF,
    reduction: Reduction = "sum",
    classes: Optional[Sequence[int]] = None,
    gate_weights: Optional[np.ndarray] = None,
):
    r"""Gate-weighted distillation from the teacher pool,
    :math:`\sum_t \sum_x G(f)_t\, \mathrm{KL}(p_{soft}, p_{tea,t})`.

    Gradients reach the soft prompt through the discrepancy and ``W_g``
    through ``G(f)``. Passing ``gate_weights`` replaces the gate output with
    fixed ``(n, H)`` weights, in which case the gate receives no gradient.
    """
    if gate is None and gate_weights is None:
        raise ValueError("mpd_loss needs a gating network or explicit gate weights.")
    (_, mpd, _), grads, _ = _objective(
        model, gate, pool.tables, batch,
        ce_coef=0.0, mpd_coef=1.0, mps_coef=0.0,
        transfer=transfer, kl_direction=kl_direction,
        reduction=reduction, classes=classes, gate_weights=gate_weights,
    )
    return mpd, grads


def mps_loss(
    gate: GatingNetwork,
    pool: TeacherPool,
    batch: Batch,
    tau: float = 0.01,
    reduction: Reduction = "sum",
    classes: Optional[Sequence[int]] = None,
):
    r"""Selection loss :math:`-\sum_t \sum_{(x, y)} G(f)_t \ln p_{tea,t}(y | x)`.

    Only ``W_g`` receives a gradient; the teachers are frozen and the student
    does not appear.
    """
    (_, _, mps), grads, _ = _objective(
        None, gate, pool.tables, batch,
        ce_coef=0.0, mpd_coef=0.0, mps_coef=1.0,
        reduction=reduction, classes=classes, tau=tau,
    )
    return mps, grads


def combined_loss(
    model: StudentModel,
    gate: Optional[GatingNetwork],
    pool: Optional[TeacherPool],
    batch: Batch,
    alpha: float,
    beta: float,
    transfer: Union[TransferVariant, str] = TransferVariant.KL,
    kl_direction: Union[KLDirection, str] = KLDirection.FIRST_ARG_REF,
    reduction: Reduction = "sum",
    classes: Optional[Sequence[int]] = None,
    gate_weights: Optional[np.ndarray] = None,
):
    r"""The full objective
    :math:`\alpha\, \zeta_{CE} + (1 - \alpha)\, \zeta_{MPD} + \beta\, \zeta_{MPS}`.

    With ``pool=None`` only the cross entropy is evaluated (the prompt-only
    baseline). The selection term is only present when a gate produces the
    teacher weights.

    Returns:
        tuple: ``(LossBreakdown, grads)``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}.")
    if not beta >= 0.0:
        raise ValueError(f"beta must be non-negative, got {beta}.")
    tables = None if pool is None else pool.tables
    (ce, mpd, mps), grads, _ = _objective(
        model, gate, tables, batch,
        ce_coef=alpha, mpd_coef=1.0 - alpha, mps_coef=beta,
        transfer=transfer, kl_direction=kl_direction,
        reduction=reduction, classes=classes, gate_weights=gate_weights,
    )
    total = alpha * ce + (1.0 - alpha) * mpd + beta * mps
    return LossBreakdown(ce, mpd, mps, total, alpha, beta), grads


def transfer_variant_loss(
    variant: Union[TransferVariant, str],
    model: StudentModel,
    gate: Optional[GatingNetwork],
    pool: TeacherPool,
    batch: Batch,
    **kwargs,
):
    """:func:`mpd_loss` with the per-teacher KL replaced by ``variant``.

    Raises:
        ValueError: for an unknown variant.
    """
    return mpd_loss(model, gate, pool, batch, transfer=TransferVariant(variant), **kwargs)


def gate_weights_for(
    gate: GatingNetwork, batch: Batch
) -> np.ndarray:
    """The ``(n, H)`` gate weights used by the losses for ``batch``."""
    return gate_forward_batch(gate, normalize(batch.features))[0]

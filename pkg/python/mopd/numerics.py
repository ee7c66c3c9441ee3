# Copyright © 2024 MoPD Lab Contributors.

"""Dense probability primitives and the finite-difference gradient oracle.

Everything here works on float64 ``numpy`` arrays. Vectors are 1-D arrays,
matrices 2-D; functions that operate "along the last axis" accept a batch of
row vectors as well.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Optional, Union

import numpy as np
from scipy.special import logsumexp

from mopd.utils import tree_flatten, tree_unflatten

logger = logging.getLogger(__name__)

# Floor applied to the non-reference distribution before taking its log.
KL_FLOOR = 1e-12

# Tolerance used to validate that a vector is a probability distribution.
DISTRIBUTION_ATOL = 1e-9


class KLDirection(str, Enum):
    """Which argument of ``KL(p, q)`` is the reference (expectation) side.

    ``FIRST_ARG_REF`` computes ``sum p ln(p / q)``; ``SECOND_ARG_REF``
    computes ``sum q ln(q / p)``.
    """

    FIRST_ARG_REF = "first_arg_ref"
    SECOND_ARG_REF = "second_arg_ref"


@dataclass(frozen=True)
class MaskedLogits:
    """Logits with a keep-mask standing in for ``-inf`` entries.

    Masked positions hold ``0.0`` in ``values`` so that no non-finite number is
    ever materialized; ``mask`` is ``True`` where the logit is kept.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.mask.shape:
            raise ValueError(
                f"Mask shape {self.mask.shape} does not match "
                f"logits shape {self.values.shape}."
            )


Logits = Union[np.ndarray, MaskedLogits]


def _as_float_array(x: Any) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_finite(x: np.ndarray, what: str):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} must be finite.")


def sequential_sum(x: np.ndarray) -> float:
    """Left-to-right sum of a 1-D array."""
    x = _as_float_array(x).ravel()
    if x.size == 0:
        return 0.0
    return float(np.cumsum(x)[-1])


def softmax(logits: Logits, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``.

    Accepts either a plain array of finite logits or :class:`MaskedLogits`, in
    which case masked entries receive probability exactly ``0``.

    Raises:
        ValueError: ``"empty support"`` if every entry of a row is masked.
    """
    if isinstance(logits, MaskedLogits):
        values = _as_float_array(logits.values)
        mask = np.asarray(logits.mask, dtype=bool)
    else:
        values = _as_float_array(logits)
        mask = np.ones(values.shape, dtype=bool)
    _check_finite(values, "Logits")
    if values.size == 0 or np.any(mask.sum(axis=axis) == 0):
        raise ValueError("empty support")

    lowest = np.min(values, axis=axis, keepdims=True)
    shift = np.max(np.where(mask, values, lowest), axis=axis, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, values - shift, 0.0)), 0.0)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """``log(softmax(logits))`` computed with ``logsumexp``."""
    values = _as_float_array(logits)
    _check_finite(values, "Logits")
    return values - logsumexp(values, axis=axis, keepdims=True)


def entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shannon entropy (nats) with the convention ``0 ln 0 = 0``."""
    p = _as_float_array(p)
    safe = np.where(p > 0, p, 1.0)
    return -np.sum(np.where(p > 0, p * np.log(safe), 0.0), axis=axis)


def normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Scale ``x`` (or each row of ``x``) to unit Euclidean norm.

    Raises:
        ValueError: ``"degenerate vector"`` on a zero-norm input.
    """
    x = _as_float_array(x)
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise ValueError("degenerate vector")
    return x / norm


def normalize_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of :func:`normalize` over the last axis.

    For ``y = x / |x|`` returns ``(g - y (y . g)) / |x|``.
    """
    x = _as_float_array(x)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    y = x / norm
    g = _as_float_array(upstream)
    return (g - y * np.sum(y * g, axis=-1, keepdims=True)) / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity ``a . b / (|a| |b|)`` clipped to ``[-1, 1]``."""
    a = _as_float_array(a)
    b = _as_float_array(b)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError(
            f"Cosine expects two vectors of equal length, got {a.shape} "
            f"and {b.shape}."
        )
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("degenerate vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def check_distribution(p: np.ndarray, name: str = "p") -> np.ndarray:
    """Validate that every row of ``p`` is a probability distribution."""
    p = _as_float_array(p)
    _check_finite(p, name)
    if np.any(p < 0):
        raise ValueError(f"{name} has negative entries.")
    total = np.sum(p, axis=-1)
    if np.any(np.abs(total - 1.0) > DISTRIBUTION_ATOL * max(1, p.shape[-1])):
        raise ValueError(f"{name} does not sum to 1, got {total}.")
    return p


def kl_divergence(
    p: np.ndarray,
    q: np.ndarray,
    direction: Union[KLDirection, str] = KLDirection.FIRST_ARG_REF,
) -> Union[float, np.ndarray]:
    """KL divergence between distributions along the last axis.

    With ``FIRST_ARG_REF`` this is ``sum p ln(p / q)``, with
    ``SECOND_ARG_REF`` it is ``sum q ln(q / p)``. The non-reference
    distribution is floored at :data:`KL_FLOOR` before the log and
    ``0 ln 0`` is taken to be ``0``.

    Returns a float for vector inputs and an array of per-row values for
    batches.
    """
    direction = KLDirection(direction)
    p = _as_float_array(p)
    q = _as_float_array(q)
    if p.shape != q.shape:
        raise ValueError(
            f"Distribution shapes {p.shape} and {q.shape} do not match."
        )
    check_distribution(p, "p")
    check_distribution(q, "q")
    ref, other = (p, q) if direction == KLDirection.FIRST_ARG_REF else (q, p)
    log_ref = np.log(np.where(ref > 0, ref, 1.0))
    log_other = np.log(np.maximum(other, KL_FLOOR))
    terms = np.where(ref > 0, ref * (log_ref - log_other), 0.0)
    out = np.sum(terms, axis=-1)
    if out.ndim == 0:
        return float(out)
    return out


def linear_mmd(p: np.ndarray, q: np.ndarray) -> Union[float, np.ndarray]:
    """Squared MMD with a linear kernel between probability vectors, which
    reduces to ``|p - q|^2`` along the last axis."""
    p = _as_float_array(p)
    q = _as_float_array(q)
    if p.shape != q.shape:
        raise ValueError(
            f"Distribution shapes {p.shape} and {q.shape} do not match."
        )
    out = np.sum(np.square(p - q), axis=-1)
    if out.ndim == 0:
        return float(out)
    return out


def finite_difference_gradient(
    loss_fn: Callable[[np.ndarray], float],
    point: np.ndarray,
    step: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array.

    Each entry is ``(f(x + h e_i) - f(x - h e_i)) / (2 h)``; ``point`` is never
    modified.

    Raises:
        ValueError: if ``step <= 0`` or the loss is non-finite at a perturbed point.
    """
    if not step > 0:
        raise ValueError(f"Finite-difference step must be positive, got {step}.")
    x = np.array(point, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        f_plus = float(loss_fn(x.copy()))
        flat[i] = original - step
        f_minus = float(loss_fn(x.copy()))
        flat[i] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"non-finite loss at perturbed point (entry {i}).")
        gflat[i] = (f_plus - f_minus) / (2 * step)
    return grad


def finite_difference_tree(
    loss_fn: Callable[[Any], float],
    parameters: Any,
    step: float = 1e-5,
) -> Any:
    """Apply :func:`finite_difference_gradient` to every leaf of a parameter
    tree, holding the remaining leaves fixed."""
    flat = tree_flatten(parameters)
    grads = []
    for i, (key, value) in enumerate(flat):

        def perturbed(v, i=i):
            moved_flat = list(flat)
            moved_flat[i] = (moved_flat[i][0], v)
            return loss_fn(tree_unflatten(moved_flat))

        logger.debug("Finite differences for %s (%d entries)", key, np.size(value))
        grads.append((key, finite_difference_gradient(perturbed, value, step)))
    return tree_unflatten(grads)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``|a - n| / max(|a|, |n|, floor)`` in the Frobenius norm."""
    a = _as_float_array(analytic)
    n = _as_float_array(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def argmax_lowest(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Argmax with ties broken by the lowest index (numpy's convention)."""
    return np.argmax(_as_float_array(x), axis=axis)


def as_vector(x: Any, name: str = "vector", length: Optional[int] = None) -> np.ndarray:
    """Coerce ``x`` to a finite 1-D float64 array, optionally of fixed length."""
    v = _as_float_array(x)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"{name} must be a non-empty vector, got shape {v.shape}.")
    if length is not None and v.size != length:
        raise ValueError(f"{name} must have length {length}, got {v.size}.")
    _check_finite(v, name)
    return v

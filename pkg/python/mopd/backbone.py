# Copyright © 2024 MoPD Lab Contributors.

"""Frozen stand-ins for a vision-language backbone.

The text encoder mean-pools the prompt vectors together with a class token,
applies a frozen linear projection and normalizes. The image encoder is the
identity or a frozen linear map followed by normalization. Teacher prompts are
stored directly as frozen per-class embedding tables.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence, Tuple

import numpy as np

from mopd.nn.layers.base import Module
from mopd.numerics import as_vector, log_softmax, normalize, normalize_backward, softmax
from mopd.serialization import array_from_json, content_hash, to_jsonable

logger = logging.getLogger(__name__)


def _frozen_copy(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


class FrozenTextEncoder(Module):
    """Mean-pool, project with a frozen ``(d, d_e)`` matrix, normalize.

    Args:
        projection (np.ndarray): The ``(d, d_e)`` projection matrix.
    """

    def __init__(self, projection: np.ndarray):
        super().__init__()
        projection = np.asarray(projection, dtype=np.float64)
        if projection.ndim != 2:
            raise ValueError(
                f"Projection must be a matrix, got shape {projection.shape}."
            )
        self.projection = _frozen_copy(projection)
        self.freeze()

    @property
    def d(self) -> int:
        return self.projection.shape[0]

    @property
    def d_e(self) -> int:
        return self.projection.shape[1]

    def _extra_repr(self):
        return f"d_e={self.d_e}, d={self.d}"

    def __call__(self, prompt_vectors, class_token):
        return encode_text(self, prompt_vectors, class_token)


class FrozenImageEncoder(Module):
    """Maps a raw feature vector to a unit-norm visual embedding.

    With ``map=None`` the encoder is the identity followed by normalization.
    """

    def __init__(self, map: Optional[np.ndarray] = None, d: Optional[int] = None):
        super().__init__()
        if map is None:
            if d is None:
                raise ValueError("An identity image encoder needs its dimension d.")
            self.identity = True
            self.dims = int(d)
        else:
            map = np.asarray(map, dtype=np.float64)
            if map.ndim != 2:
                raise ValueError(f"Image map must be a matrix, got shape {map.shape}.")
            self.identity = False
            self.dims = map.shape[0]
            self.map = _frozen_copy(map)
        self.freeze()

    @property
    def d(self) -> int:
        return self.dims

    @property
    def raw_dims(self) -> int:
        return self.dims if self.identity else self.map.shape[1]

    def _extra_repr(self):
        if self.identity:
            return f"identity, d={self.d}"
        return f"raw_dims={self.raw_dims}, d={self.d}"

    def __call__(self, raw):
        return encode_image(self, raw)


class ClassVocabulary(Module):
    """The frozen ``[CLASS]`` token of every category, one row per class."""

    def __init__(self, class_tokens: np.ndarray):
        super().__init__()
        class_tokens = np.asarray(class_tokens, dtype=np.float64)
        if class_tokens.ndim != 2 or class_tokens.shape[0] < 2:
            raise ValueError(
                f"A vocabulary needs at least 2 class tokens, got shape {class_tokens.shape}."
            )
        if not np.all(np.isfinite(class_tokens)):
            raise ValueError("Class tokens must be finite.")
        if len(np.unique(class_tokens, axis=0)) != class_tokens.shape[0]:
            raise ValueError("Class tokens must be pairwise distinct.")
        self.class_tokens = _frozen_copy(class_tokens)
        self.freeze()

    @property
    def C(self) -> int:
        return self.class_tokens.shape[0]

    @property
    def d_e(self) -> int:
        return self.class_tokens.shape[1]

    def _extra_repr(self):
        return f"C={self.C}, d_e={self.d_e}"


@dataclass(frozen=True, eq=False)
class TeacherPool:
    """``H`` frozen teacher tables of shape ``(C, d)`` with unit-norm rows.

    Attributes:
        tables (np.ndarray): Array of shape ``(H, C, d)``.
        labels (tuple[str]): A human readable template name per teacher.
        kinds (tuple[str]): ``"task"``, ``"noisy"`` or ``"adversarial"`` per
          teacher.
        task_hash (str): Hash of the task the pool was generated for.
    """

    tables: np.ndarray
    labels: Tuple[str, ...]
    kinds: Tuple[str, ...] = ()
    task_hash: str = ""

    def __post_init__(self):
        tables = np.asarray(self.tables, dtype=np.float64)
        if tables.ndim != 3 or tables.shape[0] < 1:
            raise ValueError(
                f"Teacher tables must have shape (H, C, d) with H >= 1, got {tables.shape}."
            )
        if not np.all(np.isfinite(tables)):
            raise ValueError("Teacher tables must be finite.")
        norms = np.linalg.norm(tables, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("Teacher table rows must be unit-norm.")
        kinds = tuple(self.kinds) or ("task",) * tables.shape[0]
        if len(self.labels) != tables.shape[0] or len(kinds) != tables.shape[0]:
            raise ValueError(
                f"Expected {tables.shape[0]} labels and kinds, got "
                f"{len(self.labels)} and {len(kinds)}."
            )
        object.__setattr__(self, "tables", _frozen_copy(tables))
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "kinds", kinds)

    @property
    def H(self) -> int:
        return self.tables.shape[0]

    @property
    def C(self) -> int:
        return self.tables.shape[1]

    @property
    def d(self) -> int:
        return self.tables.shape[2]

    @property
    def noisy_mask(self) -> np.ndarray:
        return np.array([k == "noisy" for k in self.kinds])

    def subset(self, indices: Sequence[int]) -> "TeacherPool":
        indices = list(indices)
        return TeacherPool(
            tables=self.tables[indices],
            labels=tuple(self.labels[i] for i in indices),
            kinds=tuple(self.kinds[i] for i in indices),
            task_hash=self.task_hash,
        )

    def to_dict(self) -> dict:
        return {
            "tables": self.tables,
            "labels": list(self.labels),
            "kinds": list(self.kinds),
            "task_hash": self.task_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherPool":
        return cls(
            tables=array_from_json(d["tables"], 3, "tables"),
            labels=tuple(d["labels"]),
            kinds=tuple(d.get("kinds", ())),
            task_hash=d.get("task_hash", ""),
        )


@dataclass
class Backbone:
    """The frozen encoders plus the class vocabulary of one task."""

    text_encoder: FrozenTextEncoder
    image_encoder: FrozenImageEncoder
    vocabulary: ClassVocabulary
    task_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.vocabulary.d_e != self.text_encoder.d_e:
            raise ValueError(
                f"Class tokens have dimension {self.vocabulary.d_e} but the text "
                f"encoder expects {self.text_encoder.d_e}."
            )
        if self.image_encoder.d != self.text_encoder.d:
            raise ValueError(
                f"Image embeddings have dimension {self.image_encoder.d} but text "
                f"embeddings have {self.text_encoder.d}."
            )

    @property
    def C(self) -> int:
        return self.vocabulary.C

    @property
    def d(self) -> int:
        return self.text_encoder.d

    @property
    def d_e(self) -> int:
        return self.text_encoder.d_e

    def to_dict(self) -> dict:
        image = {"identity": self.image_encoder.identity, "d": self.image_encoder.d}
        if not self.image_encoder.identity:
            image["map"] = self.image_encoder.map
        return to_jsonable(
            {
                "projection": self.text_encoder.projection,
                "image_encoder": image,
                "class_tokens": self.vocabulary.class_tokens,
                "task_hash": self.task_hash,
                "meta": self.meta,
            }
        )

    @classmethod
    def from_dict(cls, d: dict) -> "Backbone":
        image = d["image_encoder"]
        if image.get("identity", False):
            image_encoder = FrozenImageEncoder(d=image["d"])
        else:
            image_encoder = FrozenImageEncoder(array_from_json(image["map"], 2, "map"))
        return cls(
            text_encoder=FrozenTextEncoder(array_from_json(d["projection"], 2, "projection")),
            image_encoder=image_encoder,
            vocabulary=ClassVocabulary(array_from_json(d["class_tokens"], 2, "class_tokens")),
            task_hash=d.get("task_hash", ""),
            meta=dict(d.get("meta", {})),
        )

    def fingerprint(self) -> str:
        """sha256 of the serialized frozen parameters."""
        return content_hash(self.to_dict())


def _check_prompt(encoder: FrozenTextEncoder, prompt_vectors: Any) -> np.ndarray:
    v = np.asarray(prompt_vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] != encoder.d_e:
        raise ValueError(
            f"Expected prompt vectors of shape (M, {encoder.d_e}) with M >= 1, "
            f"got {v.shape}."
        )
    return v


def _pooled(encoder, prompt_vectors, class_tokens):
    v = _check_prompt(encoder, prompt_vectors)
    w = np.asarray(class_tokens, dtype=np.float64)
    if w.shape[-1] != encoder.d_e:
        raise ValueError(
            f"Class tokens must have dimension {encoder.d_e}, got {w.shape[-1]}."
        )
    m = v.shape[0]
    pooled = (v.sum(axis=0) + w) / (m + 1)
    return pooled @ encoder.projection.T


def encode_text(
    encoder: FrozenTextEncoder, prompt_vectors: np.ndarray, class_token: np.ndarray
) -> np.ndarray:
    """``normalize(P . mean(v_1, ..., v_M, w))`` for one class token ``w``.

    Raises:
        ValueError: on dimension mismatch or ``"degenerate vector"`` if the
          projected mean is zero.
    """
    class_token = as_vector(class_token, "class_token", encoder.d_e)
    return normalize(_pooled(encoder, prompt_vectors, class_token))


def encode_text_table(
    encoder: FrozenTextEncoder, prompt_vectors: np.ndarray, class_tokens: np.ndarray
) -> np.ndarray:
    """:func:`encode_text` for every row of ``class_tokens``, shape ``(C, d)``."""
    class_tokens = np.asarray(class_tokens, dtype=np.float64)
    if class_tokens.ndim != 2:
        raise ValueError(f"Class tokens must be a matrix, got shape {class_tokens.shape}.")
    return normalize(_pooled(encoder, prompt_vectors, class_tokens))


def encode_text_jacobian(
    encoder: FrozenTextEncoder, prompt_vectors: np.ndarray, class_token: np.ndarray
) -> np.ndarray:
    """The ``(d, d_e)`` Jacobian of :func:`encode_text` with respect to any
    single prompt vector ``v_i``.

    All prompt vectors enter through the mean with equal weight, so the
    Jacobian is the same for every ``i``.
    """
    v = _check_prompt(encoder, prompt_vectors)
    class_token = as_vector(class_token, "class_token", encoder.d_e)
    z = _pooled(encoder, v, class_token)
    norm = np.linalg.norm(z)
    if norm == 0:
        raise ValueError("degenerate vector")
    e = z / norm
    jac_norm = (np.eye(z.size) - np.outer(e, e)) / norm
    return jac_norm @ encoder.projection / (v.shape[0] + 1)


def encode_text_backward(
    encoder: FrozenTextEncoder,
    prompt_vectors: np.ndarray,
    class_tokens: np.ndarray,
    upstream: np.ndarray,
) -> np.ndarray:
    """Gradient with respect to the ``(M, d_e)`` prompt vectors given the
    gradient ``upstream`` of shape ``(C, d)`` on :func:`encode_text_table`."""
    v = _check_prompt(encoder, prompt_vectors)
    z = _pooled(encoder, v, np.asarray(class_tokens, dtype=np.float64))
    dz = normalize_backward(z, upstream)
    d_pooled = dz.sum(axis=0) @ encoder.projection / (v.shape[0] + 1)
    return np.broadcast_to(d_pooled, v.shape).copy()


def encode_image(encoder: FrozenImageEncoder, raw: np.ndarray) -> np.ndarray:
    """Unit-norm visual embedding of one raw feature vector.

    Raises:
        ValueError: ``"degenerate vector"`` on a zero input.
    """
    raw = as_vector(raw, "raw", encoder.raw_dims)
    if encoder.identity:
        return normalize(raw)
    return normalize(encoder.map @ raw)


def cosine_logits(table: np.ndarray, f: np.ndarray, tau: float) -> np.ndarray:
    """``cos(table_c, f) / tau`` for unit-norm rows of ``table``.

    ``f`` may be a single vector or an ``(n, d)`` batch; it is normalized
    first so the result does not depend on its scale.
    """
    if not tau > 0:
        raise ValueError(f"Temperature must be positive, got {tau}.")
    f = normalize(np.asarray(f, dtype=np.float64))
    return (f @ table.T) / tau


def teacher_distribution(pool: TeacherPool, t_index: int, f: np.ndarray, tau: float) -> np.ndarray:
    """``p_tea,t(. | x)``: softmax over classes of ``cos(t_c, f) / tau``."""
    if not 0 <= t_index < pool.H:
        raise ValueError(f"Teacher index must be in [0, {pool.H}), got {t_index}.")
    f = as_vector(f, "f", pool.d)
    return softmax(cosine_logits(pool.tables[t_index], f, tau))


def teacher_log_probs(tables: np.ndarray, features: np.ndarray, tau: float) -> np.ndarray:
    """Log-distributions of every teacher for a batch, shape ``(n, H, C)``.

    ``tables`` holds unit-norm ``(H, C, d)`` rows, already restricted to the
    label space of interest.
    """
    if not tau > 0:
        raise ValueError(f"Temperature must be positive, got {tau}.")
    f = normalize(np.atleast_2d(np.asarray(features, dtype=np.float64)))
    return log_softmax(np.einsum("nd,hcd->nhc", f, tables) / tau)

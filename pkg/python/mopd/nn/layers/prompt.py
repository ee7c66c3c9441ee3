# Copyright © 2024 MoPD Lab Contributors.

from typing import Optional, Sequence

import numpy as np

from mopd.backbone import (
    Backbone,
    cosine_logits,
    encode_text_backward,
    encode_text_table,
)
from mopd.nn import init as nn_init
from mopd.nn.layers.base import Module
from mopd.numerics import argmax_lowest, as_vector, normalize, softmax


class SoftPrompt(Module):
    r"""``M`` learnable context vectors shared by every class.

    Args:
        length (int): The number of prompt vectors ``M``.
        dims (int): The word-embedding dimension ``d_e``.
        rng (np.random.Generator, optional): Generator used to draw the initial
          vectors. If omitted the vectors start at zero.
        std (float, optional): Standard deviation of the initial vectors.
          Default: ``0.02``.
    """

    def __init__(
        self,
        length: int,
        dims: int,
        rng: Optional[np.random.Generator] = None,
        std: float = 0.02,
    ):
        super().__init__()
        if length < 1:
            raise ValueError(f"Prompt length must be at least 1, got {length}.")
        shape = np.zeros((length, dims))
        if rng is None:
            self.vectors = shape
        else:
            self.vectors = nn_init.normal(std=std)(shape, rng)

    @property
    def M(self) -> int:
        return self.vectors.shape[0]

    def _extra_repr(self):
        return f"M={self.vectors.shape[0]}, d_e={self.vectors.shape[1]}"


class StudentModel(Module):
    r"""The student classifier: a soft prompt read through a frozen backbone.

    Only ``soft_prompt.vectors`` is trainable. The backbone is kept as a plain
    attribute so that its frozen tensors never appear in the parameter tree.

    Args:
        backbone (Backbone): The frozen encoders and class vocabulary.
        soft_prompt (SoftPrompt): The learnable context.
        tau (float): The softmax temperature.
    """

    def __init__(self, backbone: Backbone, soft_prompt: SoftPrompt, tau: float = 0.01):
        super().__init__()
        if not tau > 0:
            raise ValueError(f"Temperature must be positive, got {tau}.")
        if soft_prompt.vectors.shape[1] != backbone.d_e:
            raise ValueError(
                f"Prompt vectors have dimension {soft_prompt.vectors.shape[1]} but the "
                f"backbone expects {backbone.d_e}."
            )
        self.backbone = backbone
        self.tau = float(tau)
        self.soft_prompt = soft_prompt

    @property
    def C(self) -> int:
        return self.backbone.C

    def _extra_repr(self):
        return f"C={self.C}, tau={self.tau}"

    def __call__(self, features, classes=None):
        return p_soft_batch(self, features, classes)


def _class_tokens(model: StudentModel, classes: Optional[Sequence[int]]):
    tokens = model.backbone.vocabulary.class_tokens
    if classes is None:
        return tokens
    classes = list(classes)
    if not classes or min(classes) < 0 or max(classes) >= model.C:
        raise ValueError(f"Class ids must lie in [0, {model.C}), got {classes}.")
    return tokens[classes]


def student_text_table(model: StudentModel, classes: Optional[Sequence[int]] = None) -> np.ndarray:
    """The ``(C, d)`` student text embeddings, one unit-norm row per class.

    With ``classes`` only those rows are computed, in the given order.
    """
    return encode_text_table(
        model.backbone.text_encoder,
        model.soft_prompt.vectors,
        _class_tokens(model, classes),
    )


def student_logits(
    model: StudentModel, features: np.ndarray, classes: Optional[Sequence[int]] = None
) -> np.ndarray:
    """``cos(t_soft^c, f) / tau`` for a batch of features, shape ``(n, C')``."""
    table = student_text_table(model, classes)
    return cosine_logits(table, np.atleast_2d(features), model.tau)


def p_soft(model: StudentModel, f: np.ndarray) -> np.ndarray:
    """The student's class distribution for one visual embedding."""
    f = as_vector(f, "f", model.backbone.d)
    return softmax(cosine_logits(student_text_table(model), f, model.tau))


def p_soft_batch(
    model: StudentModel, features: np.ndarray, classes: Optional[Sequence[int]] = None
) -> np.ndarray:
    """Row-wise :func:`p_soft` over an ``(n, d)`` batch, optionally restricted
    to the label space ``classes``."""
    return softmax(student_logits(model, features, classes))


def predict(model: StudentModel, f: np.ndarray) -> int:
    """Most probable class; ties go to the lowest index."""
    return int(argmax_lowest(p_soft(model, f)))


def predict_batch(
    model: StudentModel, features: np.ndarray, classes: Optional[Sequence[int]] = None
) -> np.ndarray:
    """Predicted class ids for a batch.

    With ``classes`` the prediction is made among those ids only and the
    returned values are the ids themselves, not positions.
    """
    pos = argmax_lowest(student_logits(model, features, classes), axis=-1)
    if classes is None:
        return pos
    return np.asarray(list(classes))[pos]


def prompt_backward(
    model: StudentModel,
    features: np.ndarray,
    dlogits: np.ndarray,
    classes: Optional[Sequence[int]] = None,
    dtable: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Gradient on the prompt vectors from a gradient on the student logits.

    Args:
        features (np.ndarray): The ``(n, d)`` visual embeddings.
        dlogits (np.ndarray): Gradient on :func:`student_logits`, ``(n, C')``.
        dtable (np.ndarray, optional): An extra gradient acting directly on
          the ``(C', d)`` text table.

    Returns:
        np.ndarray: The ``(M, d_e)`` gradient.
    """
    f = normalize(np.atleast_2d(np.asarray(features, dtype=np.float64)))
    dE = np.asarray(dlogits).T @ f / model.tau
    if dtable is not None:
        dE = dE + dtable
    return encode_text_backward(
        model.backbone.text_encoder,
        model.soft_prompt.vectors,
        _class_tokens(model, classes),
        dE,
    )


def grad_p_soft_wrt_prompt(model: StudentModel, f: np.ndarray) -> np.ndarray:
    """``d log p_soft(c | x) / d v_i`` for every class ``c``.

    Returns:
        np.ndarray: Array of shape ``(C, M, d_e)``; entry ``[c]`` is the
        gradient of ``log p_soft(c | x)`` with respect to the prompt vectors.
    """
    f = as_vector(f, "f", model.backbone.d)
    p = p_soft(model, f)
    grads = []
    for c in range(p.size):
        dlogits = -p.copy()
        dlogits[c] += 1.0
        grads.append(prompt_backward(model, f[None], dlogits[None]))
    return np.stack(grads)

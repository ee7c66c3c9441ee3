# Copyright © 2024 MoPD Lab Contributors.

from typing import Optional, Tuple

import numpy as np

from mopd.nn import init as nn_init
from mopd.nn.layers.base import Module
from mopd.numerics import MaskedLogits, as_vector, entropy, normalize, softmax


def keep_top(u: np.ndarray, T: int) -> MaskedLogits:
    """Keep the ``T`` largest entries of each row of ``u`` and mask the rest.

    Ties at the selection boundary keep the lower index first.

    Raises:
        ValueError: if ``T`` is not in ``[1, len(u)]``.
    """
    u = np.asarray(u, dtype=np.float64)
    n = u.shape[-1]
    if not 1 <= T <= n:
        raise ValueError(f"T must be in [1, {n}], got {T}.")
    order = np.argsort(-u, axis=-1, kind="stable")
    mask = np.zeros(u.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :T], True, axis=-1)
    return MaskedLogits(values=np.where(mask, u, 0.0), mask=mask)


class GatingNetwork(Module):
    r"""A single bias-free linear layer followed by top-``T`` masking and a
    softmax over the kept teachers.

    .. math::

        G(f) = \mathrm{Softmax}(\mathrm{KeepTop}(f W_g, T))

    Args:
        dims (int): The visual embedding dimension ``d``.
        pool_size (int): The number of teachers ``H``.
        top_t (int): The selection width ``T``.
        rng (np.random.Generator, optional): Generator for the initial
          weights. If omitted the weights start at zero.
        std (float, optional): Standard deviation of the initial weights.
          Default: ``0.01``.
    """

    def __init__(
        self,
        dims: int,
        pool_size: int,
        top_t: int,
        rng: Optional[np.random.Generator] = None,
        std: float = 0.01,
    ):
        super().__init__()
        if not 1 <= top_t <= pool_size:
            raise ValueError(f"T must be in [1, {pool_size}], got {top_t}.")
        self.top_t = int(top_t)
        shape = np.zeros((dims, pool_size))
        if rng is None:
            self.weight = shape
        else:
            self.weight = nn_init.normal(std=std)(shape, rng)

    @property
    def H(self) -> int:
        return self.weight.shape[1]

    def _extra_repr(self):
        return f"d={self.weight.shape[0]}, H={self.weight.shape[1]}, T={self.top_t}"

    def __call__(self, features):
        return gate_forward_batch(self, features)[0]

    def statistics(self, features: np.ndarray, noisy_mask: Optional[np.ndarray] = None) -> dict:
        """Gate diagnostics over a set of visual embeddings.

        Returns:
            dict: ``mean_weight`` per teacher, ``mean_entropy`` of the gate
            distributions, ``selection_frequency`` per teacher and, when
            ``noisy_mask`` is given, the ``noisy_mass`` (mean total weight on
            noisy teachers).
        """
        weights, mask = gate_forward_batch(self, features)
        return gate_statistics(weights, mask, noisy_mask)


def gate_statistics(
    weights: np.ndarray,
    mask: Optional[np.ndarray] = None,
    noisy_mask: Optional[np.ndarray] = None,
) -> dict:
    """Summaries of an ``(n, H)`` matrix of gate weights."""
    weights = np.atleast_2d(weights)
    if mask is None:
        mask = weights > 0
    stats = {
        "mean_weight": weights.mean(axis=0),
        "mean_entropy": float(entropy(weights).mean()),
        "selection_frequency": mask.mean(axis=0),
    }
    if noisy_mask is not None:
        stats["noisy_mass"] = float(weights[:, np.asarray(noisy_mask, dtype=bool)].sum(axis=1).mean())
    return stats


def gate_logits(g: GatingNetwork, features: np.ndarray) -> np.ndarray:
    return normalize(np.atleast_2d(np.asarray(features, dtype=np.float64))) @ g.weight


def gate_forward(g: GatingNetwork, f: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Teacher weights ``G(f)`` for one visual embedding.

    Returns:
        tuple: The ``(H,)`` weights, exactly ``0`` outside the selection, and
        the sorted indices of the selected teachers.
    """
    f = as_vector(f, "f", g.weight.shape[0])
    weights, mask = gate_forward_batch(g, f[None])
    return weights[0], np.flatnonzero(mask[0])


def gate_forward_batch(g: GatingNetwork, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`gate_forward`; returns ``(weights, mask)`` of shape
    ``(n, H)``."""
    masked = keep_top(gate_logits(g, features), g.top_t)
    return softmax(masked), masked.mask


def gate_backward(g: GatingNetwork, f: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient on ``W_g`` for one instance given ``upstream = dL/dG(f)``.

    The selected set is held fixed; entries of ``upstream`` at masked
    positions are ignored and the matching columns get zero gradient.
    """
    f = as_vector(f, "f", g.weight.shape[0])
    upstream = as_vector(upstream, "upstream", g.H)
    weights, _ = gate_forward_batch(g, f[None])
    return gate_backward_batch(g, f[None], upstream[None], weights)


def gate_backward_batch(
    g: GatingNetwork,
    features: np.ndarray,
    upstream: np.ndarray,
    weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Summed :func:`gate_backward` over a batch.

    Args:
        features (np.ndarray): ``(n, d)`` visual embeddings.
        upstream (np.ndarray): ``(n, H)`` gradient on the gate weights.
        weights (np.ndarray, optional): The forward gate weights, recomputed
          when omitted.
    """
    f = normalize(np.atleast_2d(np.asarray(features, dtype=np.float64)))
    if weights is None:
        weights, _ = gate_forward_batch(g, f)
    upstream = np.where(weights > 0, upstream, 0.0)
    du = weights * (upstream - np.sum(weights * upstream, axis=-1, keepdims=True))
    return f.T @ du


def uniform_random_gate(
    H: int, T: int, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Random-selection weights: for each of ``n`` instances ``T`` distinct
    teachers drawn uniformly, each weighted ``1 / T``."""
    if not 1 <= T <= H:
        raise ValueError(f"T must be in [1, {H}], got {T}.")
    weights = np.zeros((n, H))
    for i in range(n):
        weights[i, rng.choice(H, size=T, replace=False)] = 1.0 / T
    return weights

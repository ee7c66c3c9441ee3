# Copyright © 2024 MoPD Lab Contributors.

from typing import Callable

import numpy as np

from mopd.numerics import normalize

Initializer = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def constant(value: float) -> Initializer:
    r"""An initializer that returns an array filled with ``value``.

    Example:

        >>> init_fn = nn.init.constant(0.5)
        >>> init_fn(np.zeros((2, 2)), rng)
        array([[0.5, 0.5],
               [0.5, 0.5]])
    """

    def initializer(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return np.full(a.shape, value, dtype=np.float64)

    return initializer


def normal(mean: float = 0.0, std: float = 1.0) -> Initializer:
    r"""An initializer that returns samples from a normal distribution drawn
    from the supplied generator.

    Args:
        mean (float, optional): Mean of the normal distribution. Default:
          ``0.0``.
        std (float, optional): Standard deviation of the normal distribution.
          Default: ``1.0``.

    Example:

        >>> init_fn = nn.init.normal(std=0.02)
        >>> init_fn(np.zeros((4, 32)), np.random.default_rng(0)).shape
        (4, 32)
    """
    if std < 0:
        raise ValueError(f"Standard deviation must be non-negative, got {std}.")

    def initializer(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return mean + std * rng.standard_normal(a.shape)

    return initializer


def orthonormal_rows() -> Initializer:
    r"""An initializer for a ``(d, d_e)`` matrix with ``d <= d_e`` whose rows
    are orthonormal, obtained from the QR factorization of a Gaussian matrix.

    Used for the frozen text projection, which then has a right
    pseudo-inverse equal to its transpose.
    """

    def initializer(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        rows, cols = a.shape
        if rows > cols:
            raise ValueError(
                f"Cannot build {rows} orthonormal rows in dimension {cols}."
            )
        q, r = np.linalg.qr(rng.standard_normal((cols, rows)))
        # Fix the sign so that the factorization is unique.
        q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
        return np.ascontiguousarray(q.T)

    return initializer


def unit_rows() -> Initializer:
    r"""An initializer whose rows are independent uniformly random unit
    vectors."""

    def initializer(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return normalize(rng.standard_normal(a.shape))

    return initializer

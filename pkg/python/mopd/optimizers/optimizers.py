# Copyright © 2024 MoPD Lab Contributors.

from typing import Callable, Dict, Union

import numpy as np

from mopd.nn.layers.base import Module
from mopd.utils import tree_map

Hyperparameter = Union[float, Callable[[int], float]]


class Optimizer:
    """Base class for optimizers that update a parameter tree leaf by leaf.

    The trainer hands over one tree ``{"student": ..., "gate": ...}`` so a
    single step moves the soft prompt and the gating weights together.

    Subclasses register their hyperparameters with :meth:`_hyperparameter`
    and implement :meth:`apply_single`. A hyperparameter given as a callable
    is a schedule: it is re-evaluated at the current step count before every
    update.
    """

    def __init__(self):
        self._step = 0
        self._values: Dict[str, float] = {}
        self._schedules: Dict[str, Callable[[int], float]] = {}

    def _hyperparameter(self, name: str, value: Hyperparameter):
        if callable(value):
            self._schedules[name] = value
            value = value(self._step)
        self._values[name] = float(value)

    @property
    def step(self) -> int:
        """How many updates have been applied."""
        return self._step

    @property
    def learning_rate(self) -> float:
        return self._values["learning_rate"]

    @learning_rate.setter
    def learning_rate(self, value: float):
        self._schedules.pop("learning_rate", None)
        self._values["learning_rate"] = float(value)

    def apply_gradients(self, gradients: dict, parameters: dict) -> dict:
        """Return the updated parameters for the locations in ``gradients``.

        Args:
            gradients (dict): A tree of gradients.
            parameters (dict): A tree with at least the paths of
              ``gradients``; extra entries are ignored.
        """
        for name, schedule in self._schedules.items():
            self._values[name] = float(schedule(self._step))
        self._step += 1
        return tree_map(self.apply_single, gradients, parameters)

    def update(self, model: Module, gradients: dict):
        """Step ``model`` in place.

        Args:
            model (mopd.nn.Module): The module to update.
            gradients (dict): A (possibly partial) tree shaped like
              ``model.trainable_parameters()``, as returned by
              :mod:`mopd.nn.losses`.
        """
        model.update(self.apply_gradients(gradients, model))

    def apply_single(self, gradient: np.ndarray, parameter: np.ndarray) -> np.ndarray:
        raise NotImplementedError()


class SGD(Optimizer):
    r"""Plain stochastic gradient descent.

    .. math::

        w_{t+1} = w_t - \lambda g_t

    No momentum and no weight decay: one step moves every parameter by
    exactly ``-learning_rate * gradient``.

    Args:
        learning_rate (float or callable): The learning rate :math:`\lambda`,
          or a schedule mapping the step count to a learning rate.
    """

    def __init__(self, learning_rate: Hyperparameter):
        super().__init__()
        if not callable(learning_rate) and learning_rate < 0:
            raise ValueError(
                f"Learning rate must be non-negative, got {learning_rate}."
            )
        self._hyperparameter("learning_rate", learning_rate)

    def apply_single(self, gradient: np.ndarray, parameter: np.ndarray) -> np.ndarray:
        return parameter - self.learning_rate * gradient

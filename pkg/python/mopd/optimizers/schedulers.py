# Copyright © 2024 MoPD Lab Contributors.

import math
from typing import Callable


def constant(init: float) -> Callable[[int], float]:
    r"""Make a schedule that always returns ``init``.

    Example:
        >>> lr_schedule = optim.constant(1e-2)
        >>> optimizer = optim.SGD(learning_rate=lr_schedule)
        >>> optimizer.learning_rate
        0.01
    """

    def schedule(step):
        return init

    return schedule


def cosine_decay(init: float, decay_steps: int, end: float = 0.0) -> Callable:
    r"""Make a cosine decay scheduler.

    Args:
        init (float): Initial value.
        decay_steps (int): Number of steps to decay over. The decayed
            value is constant for steps beyond ``decay_steps``.
        end (float, optional): Final value to decay to. Default: ``0``.

    Example:

        >>> lr_schedule = optim.cosine_decay(1e-1, 1000)
        >>> optimizer = optim.SGD(learning_rate=lr_schedule)
        >>> optimizer.learning_rate
        0.1
    """
    if decay_steps <= 0:
        raise ValueError(f"decay_steps must be positive, got {decay_steps}.")

    def schedule(step):
        s = min(step, decay_steps)
        decay = 0.5 * (1.0 + math.cos((math.pi / decay_steps) * s))
        return end + decay * (init - end)

    return schedule

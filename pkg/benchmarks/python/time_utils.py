# Copyright © 2024 MoPD Lab Contributors.

import time


def time_fn(fn, *args, **kwargs):
    msg = kwargs.pop("msg", None)
    num_iters = kwargs.pop("num_iters", 100)
    print(f"Timing {msg or fn.__name__} ...", end=" ")

    # warmup
    for _ in range(5):
        fn(*args, **kwargs)

    tic = time.perf_counter()
    for _ in range(num_iters):
        fn(*args, **kwargs)
    toc = time.perf_counter()

    msec = 1e3 * (toc - tic) / num_iters
    print(f"{msec:.5f} msec")
    return msec

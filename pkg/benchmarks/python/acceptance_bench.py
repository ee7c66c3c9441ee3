# Copyright © 2024 MoPD Lab Contributors.

import argparse
import time

import numpy as np
from mopd import evalharness as ev
from mopd.synthdata import TaskSpec, TeacherSpec, build_backbone, generate_task, generate_teacher_pool
from mopd.trainer import TrainConfig, Variant


def per_seed_h(variant, config, task, backbone, pool, seeds):
    tic = time.perf_counter()
    mean, reports = ev.run_seeds(config.replace(variant=variant), task, seeds, backbone, pool)
    toc = time.perf_counter()
    print(f"{variant.value:>12}: {toc - tic:8.3f} s, {mean.summary()}")
    return np.array([r.h for r in reports])


def compare(name, a, b):
    wins = int((a > b).sum())
    p = ev.paired_sign_test(a, b)
    print(f"{name:>16}: mean diff {np.mean(a - b):+.4f}, wins {wins}/{len(a)}, p={p:.4f}")


if __name__ == "__main__":
    parser = argparse.ArgumentParser("MoPD acceptance experiments.")
    parser.add_argument("--epochs", type=int, default=TrainConfig().epochs)
    parser.add_argument("--seeds", type=int, default=10)
    parser.add_argument("--pool", type=str, default="12T")
    args = parser.parse_args()

    task = generate_task(TaskSpec(seed=0))
    backbone = build_backbone(task)
    pool = generate_teacher_pool(task, TeacherSpec.parse_mixture(args.pool))
    config = TrainConfig(epochs=args.epochs)
    seeds = range(1, args.seeds + 1)

    h = {
        v: per_seed_h(v, config, task, backbone, pool, seeds)
        for v in (Variant.MOPD, Variant.SIPD, Variant.CE_ONLY, Variant.MOPD_R, Variant.MOPD_NO_MPS)
    }
    compare("mopd > sipd", h[Variant.MOPD], h[Variant.SIPD])
    compare("sipd > ce", h[Variant.SIPD], h[Variant.CE_ONLY])
    compare("mopd > mopd_r", h[Variant.MOPD], h[Variant.MOPD_R])
    compare("mopd > no_mps", h[Variant.MOPD], h[Variant.MOPD_NO_MPS])

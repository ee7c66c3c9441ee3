# Copyright © 2024 MoPD Lab Contributors.

"""The ``mopd`` command line.

Every command writes into one output directory (``--out``, by default
``$MOPD_OUTPUT_ROOT/<run-id>``) and records a ``manifest.json`` linking each
output to the hashes of the inputs that produced it.

Exit codes: 0 on success, 1 on usage, config or artifact errors, 2 when
training aborts on a non-finite loss.
"""

import argparse
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from mopd import __version__
from mopd import config as config_lib
from mopd import evalharness as eh
from mopd.backbone import Backbone, TeacherPool
from mopd.errors import ArtifactMismatch, ConfigError, NumericalAbort
from mopd.nn.losses import TransferVariant
from mopd.serialization import (
    content_hash,
    file_hash,
    load_json,
    read_artifact,
    write_artifact,
    write_csv,
    write_json,
)
from mopd.synthdata import (
    SyntheticTask,
    TaskSpec,
    TeacherSpec,
    build_backbone,
    generate_task,
    generate_teacher_pool,
)
from mopd.trainer import Checkpoint, TrainConfig, Variant, train

logger = logging.getLogger("mopd")

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
SWEEP_AXES = ("alpha", "beta", "T", "H_pool")
ABLATION_VARIANTS = (
    Variant.CE_ONLY,
    Variant.SIPD,
    Variant.MOPD_R,
    Variant.MOPD_NO_MPS,
    Variant.MOPD,
)
LOG_COLUMNS = ("epoch", "step", "ce", "mpd", "mps", "total", "gate_entropy")


class UsageError(Exception):
    """Bad command-line usage."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunManifest:
    """Provenance of one command: what went in, what came out."""

    run_id: str
    command: str
    config: dict = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    duration_s: float = 0.0

    def add_input(self, path):
        self.inputs[str(path)] = file_hash(path)

    def add_output(self, path, digest: Optional[str] = None):
        self.outputs[str(path)] = digest if digest is not None else file_hash(path)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "command": self.command,
            "config": self.config,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "duration_s": self.duration_s,
        }

    def write(self, out: Path, started: float) -> str:
        self.duration_s = round(time.perf_counter() - started, 3)
        return write_json(out / "manifest.json", self.to_dict())


def _out_dir(args, run_id: str, names: Sequence[str]) -> Path:
    out = Path(args.out) if args.out else config_lib.default_output_root() / run_id
    taken = [n for n in names if (out / n).exists()]
    if taken and not args.force:
        raise UsageError(
            f"{out} already holds {', '.join(taken)}; pass --force to overwrite."
        )
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seeds(args, base: int) -> List[int]:
    if args.seeds < 1:
        raise UsageError(f"--seeds must be at least 1, got {args.seeds}.")
    return [base + i for i in range(args.seeds)]


def _load_task(path, manifest: RunManifest) -> SyntheticTask:
    payload, _ = read_artifact(path, "task")
    manifest.add_input(path)
    return SyntheticTask.from_dict(payload)


def _load_pool(path, task: SyntheticTask, manifest: RunManifest) -> TeacherPool:
    payload, _ = read_artifact(path, "teachers")
    manifest.add_input(path)
    pool = TeacherPool.from_dict(payload)
    if pool.task_hash != task.task_hash:
        raise ArtifactMismatch("pool/task mismatch")
    return pool


def _load_backbone(args, task: SyntheticTask, manifest: RunManifest) -> Backbone:
    if args.backbone is None:
        return build_backbone(task)
    payload, _ = read_artifact(args.backbone, "backbone")
    manifest.add_input(args.backbone)
    backbone = Backbone.from_dict(payload)
    if backbone.task_hash != task.task_hash:
        raise ArtifactMismatch("backbone/task mismatch")
    return backbone


def _load_config(args, manifest: RunManifest) -> TrainConfig:
    config = config_lib.load_config(TrainConfig, args.config)
    manifest.add_input(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def _maybe_pool(args, config: TrainConfig, task, manifest) -> Optional[TeacherPool]:
    if args.pool is not None:
        return _load_pool(args.pool, task, manifest)
    if config.variant.uses_pool:
        raise UsageError(f"variant {config.variant.value} requires --pool")
    return None


def cmd_gen_data(args) -> int:
    started = time.perf_counter()
    data = load_json(args.spec) if args.spec else {}
    if not isinstance(data, dict):
        raise ConfigError("expected a JSON object for the task spec")
    data = dict(data)
    teachers = data.pop("teachers", None)
    if args.seed is not None:
        data["seed"] = args.seed
    spec = TaskSpec.from_dict(data)
    if isinstance(teachers, str):
        teacher_spec = TeacherSpec.parse_mixture(teachers)
    elif teachers is None:
        teacher_spec = TeacherSpec()
    else:
        teacher_spec = TeacherSpec.from_dict(teachers)

    task = generate_task(spec)
    pool = generate_teacher_pool(task, teacher_spec)
    backbone = build_backbone(task)
    run_id = f"data-seed{spec.seed}-{task.task_hash[:8]}"
    names = ("task.json", "teachers.json", "backbone.json", "manifest.json")
    out = _out_dir(args, run_id, names)

    manifest = RunManifest(
        run_id, "gen-data", {"task": spec.to_dict(), "teachers": teacher_spec.to_dict()}
    )
    if args.spec:
        manifest.add_input(args.spec)
    for name, kind, payload in (
        ("task.json", "task", task.to_dict()),
        ("teachers.json", "teachers", pool.to_dict()),
        ("backbone.json", "backbone", backbone.to_dict()),
    ):
        write_artifact(out / name, kind, payload)
        manifest.add_output(out / name)
    manifest.write(out, started)
    s = task.summary()
    print(
        f"C={s['C']} d={s['d']} H={pool.H} ({teacher_spec.label}) base={s['base']} "
        f"new={s['new']} train={s['train']} test={s['test']} -> {out}"
    )
    return 0


def _write_log(path: Path, rows: Sequence[dict]) -> str:
    return write_csv(path, LOG_COLUMNS, [[row[k] for k in LOG_COLUMNS] for row in rows])


def cmd_train(args) -> int:
    started = time.perf_counter()
    manifest = RunManifest("", "train")
    config = _load_config(args, manifest)
    task = _load_task(args.task, manifest)
    pool = _maybe_pool(args, config, task, manifest)
    backbone = _load_backbone(args, task, manifest)

    run_id = f"{config.variant.value}-seed{config.seed}-{content_hash(config.to_dict())[:8]}"
    names = ("config.json", "checkpoint.json", "train_log.csv", "manifest.json")
    out = _out_dir(args, run_id, names)
    manifest.run_id = run_id
    manifest.config = config.to_dict()
    manifest.add_output(out / "config.json", write_json(out / "config.json", config.to_dict()))

    classes = None if args.all_classes else task.base_ids
    group = "all" if args.all_classes else "base"
    state, checkpoint = train(
        config,
        task.split_instances("train", group),
        backbone,
        pool,
        classes=classes,
        task_hash=task.task_hash,
        dump_dir=str(out),
    )
    write_artifact(out / "checkpoint.json", "checkpoint", checkpoint.to_dict())
    manifest.add_output(out / "checkpoint.json")
    manifest.add_output(out / "train_log.csv", _write_log(out / "train_log.csv", state.log))
    manifest.write(out, started)
    final = state.history[-1].total if state.history else float("nan")
    print(f"{config.variant.value}: {state.step} steps, final loss {final!r} -> {out}")
    return 0


def _load_checkpoint(path, manifest: RunManifest) -> Checkpoint:
    payload, _ = read_artifact(path, "checkpoint")
    manifest.add_input(path)
    return Checkpoint.from_dict(payload)


def cmd_eval(args) -> int:
    started = time.perf_counter()
    manifest = RunManifest("", "eval")
    checkpoint = _load_checkpoint(args.checkpoint, manifest)
    task = _load_task(args.task, manifest)
    if checkpoint.task_hash != task.task_hash:
        raise ArtifactMismatch("checkpoint/task mismatch")
    backbone = _load_backbone(args, task, manifest)
    pool = None if args.pool is None else _load_pool(args.pool, task, manifest)
    config = TrainConfig.from_dict(checkpoint.config)

    run_id = f"eval-{args.protocol}-{checkpoint.task_hash[:8]}"
    out = _out_dir(args, run_id, ("report.json", "report.csv", "manifest.json"))
    manifest.run_id = run_id
    manifest.config = {"protocol": args.protocol, "train": checkpoint.config}
    seeds = _seeds(args, config.seed)

    if args.protocol == "base-to-new":
        reports = [eh.evaluate_base_to_new(checkpoint, task, backbone, pool)]
    elif args.protocol == "robustness":
        reports = eh.evaluate_robustness(config, task, args.mixtures, seeds, backbone)
    elif args.protocol == "few-shot":
        if config.variant.uses_pool and pool is None:
            raise UsageError(f"variant {config.variant.value} requires --pool")
        rows = eh.evaluate_few_shot(config, task, args.shots, seeds, backbone, pool)
        manifest.add_output(out / "report.csv", eh.write_table(out / "report.csv", rows))
        manifest.add_output(out / "report.json", write_json(out / "report.json", rows))
        manifest.add_output(
            out / "plot.csv",
            eh.write_plot_data(out / "plot.csv", [r["shots"] for r in rows], [r["acc"] for r in rows]),
        )
        manifest.write(out, started)
        for r in rows:
            print(f"{r['shots']} shots: {eh.percent(r['acc'])}")
        return 0
    else:
        rows = eh.evaluate_domain_shift(checkpoint, task, backbone, args.shifts)
        manifest.add_output(out / "report.csv", eh.write_table(out / "report.csv", rows))
        manifest.add_output(out / "report.json", write_json(out / "report.json", rows))
        manifest.write(out, started)
        for r in rows:
            print(f"shift {r['shift']}: {eh.percent(r['acc'])}")
        return 0

    manifest.add_output(out / "report.json", eh.write_reports(out, reports))
    manifest.add_output(out / "report.csv")
    manifest.write(out, started)
    for report in reports:
        variant = report.extra.get("variant")
        print(report.summary() + (f" [{variant}]" if variant else ""))
    return 0


def cmd_zero_shot(args) -> int:
    started = time.perf_counter()
    manifest = RunManifest("", "zero-shot")
    task = _load_task(args.task, manifest)
    pool = _load_pool(args.pool, task, manifest)
    run_id = f"zero-shot-{task.task_hash[:8]}"
    out = _out_dir(args, run_id, ("report.json", "report.csv", "manifest.json"))
    manifest.run_id = run_id
    reports = [eh.evaluate_zero_shot(pool, t, task) for t in range(pool.H)]
    manifest.add_output(out / "report.json", eh.write_reports(out, reports))
    manifest.add_output(out / "report.csv")
    manifest.write(out, started)
    for t, report in enumerate(reports):
        print(f"[{t}] {report.summary()}")
    return 0


def _integer_value(axis: str, value: float) -> int:
    if not float(value).is_integer():
        raise ConfigError(f"{axis} values must be integers, got {value}", field=axis)
    return int(value)


def _sweep_config(config: TrainConfig, axis: str, value: float) -> TrainConfig:
    if axis == "alpha":
        return config.replace(alpha=float(value))
    if axis == "beta":
        return config.replace(beta=float(value))
    if axis == "T":
        return config.replace(top_t=_integer_value(axis, value))
    H = _integer_value(axis, value)
    return config.replace(pool_size=H, top_t=min(config.top_t, H))


def _pool_sample(pool: TeacherPool, H: int, seed: int) -> TeacherPool:
    """``H`` teachers of ``pool`` drawn with ``seed``, in pool order.

    Draws for a smaller ``H`` are a subset of the draws for a larger one.
    """
    order = np.random.default_rng(seed).permutation(pool.H)
    return pool.subset(sorted(order[:H].tolist()))


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    manifest = RunManifest("", "sweep")
    config = _load_config(args, manifest)
    task = _load_task(args.task, manifest)
    pool = _maybe_pool(args, config, task, manifest)
    backbone = _load_backbone(args, task, manifest)
    # Reject invalid values before anything runs.
    configs = [_sweep_config(config, args.axis, v) for v in args.values]
    if args.axis == "H_pool" and pool is not None:
        too_big = [cfg.pool_size for cfg in configs if cfg.pool_size > pool.H]
        if too_big:
            raise UsageError(f"H_pool values {too_big} exceed the pool size {pool.H}")

    run_id = f"sweep-{args.axis}-{content_hash(config.to_dict())[:8]}"
    out = _out_dir(args, run_id, ("sweep.csv", "runs.csv", "plot.csv", "manifest.json"))
    manifest.run_id = run_id
    manifest.config = {"axis": args.axis, "values": list(args.values), "base": config.to_dict()}
    seeds = _seeds(args, config.seed)

    rows, runs = [], []
    for value, cfg in zip(args.values, configs):
        run_pool = pool
        if args.axis == "H_pool" and pool is not None:
            run_pool = _pool_sample(pool, cfg.pool_size, config.seed)
        reports, error = [], ""
        for seed in seeds:
            try:
                report, _ = eh.train_and_evaluate(cfg.replace(seed=seed), task, backbone, run_pool)
            except (NumericalAbort, ValueError) as e:
                error = str(e)
                logger.warning("%s=%s seed %d failed: %s", args.axis, value, seed, e)
                runs.append([value, seed, "", "", "", error])
                continue
            reports.append(report)
            runs.append([value, seed, report.acc_base, report.acc_new, report.h, ""])
            logger.info("%s=%s seed %d: %s", args.axis, value, seed, report.summary())
        if reports:
            agg = eh.aggregate_reports(reports)
            rows.append(
                [value, agg["acc_base"][0], agg["acc_new"][0], agg["h"][0], agg["h"][1], len(reports), error]
            )
        else:
            rows.append([value, "", "", "", "", 0, error])

    manifest.add_output(
        out / "sweep.csv",
        write_csv(out / "sweep.csv", ["value", "base", "new", "h", "h_std", "runs", "error"], rows),
    )
    manifest.add_output(
        out / "runs.csv",
        write_csv(out / "runs.csv", ["value", "seed", "base", "new", "h", "error"], runs),
    )
    done = [r for r in rows if r[5]]
    manifest.add_output(
        out / "plot.csv",
        eh.write_plot_data(out / "plot.csv", [r[0] for r in done], [r[3] for r in done]),
    )
    manifest.write(out, started)
    for r in rows:
        if r[5]:
            print(f"{args.axis}={r[0]}: base {eh.percent(r[1])}  new {eh.percent(r[2])}  H {eh.percent(r[3])}")
        else:
            print(f"{args.axis}={r[0]}: failed ({r[6]})")
    return 0


def cmd_ablate(args) -> int:
    started = time.perf_counter()
    manifest = RunManifest("", "ablate")
    config = _load_config(args, manifest)
    task = _load_task(args.task, manifest)
    if args.pool is None:
        raise UsageError("ablate requires --pool")
    pool = _load_pool(args.pool, task, manifest)
    backbone = _load_backbone(args, task, manifest)
    config = config.replace(pool_size=pool.H, top_t=min(config.top_t, pool.H))

    run_id = f"ablate-{content_hash(config.to_dict())[:8]}"
    out = _out_dir(args, run_id, ("report.json", "report.csv", "ablation.csv", "manifest.json"))
    manifest.run_id = run_id
    manifest.config = config.to_dict()
    seeds = _seeds(args, config.seed)

    runs = [(v.value, config.replace(variant=v)) for v in ABLATION_VARIANTS]
    if args.transfer:
        runs += [
            (f"mopd_{t.value}", config.replace(variant=Variant.MOPD, transfer=t))
            for t in TransferVariant
            if t != TransferVariant.KL
        ]

    means, per_seed = [], {}
    for name, cfg in runs:
        mean, reports = eh.run_seeds(cfg, task, seeds, backbone, pool, label=name)
        means.append(mean)
        per_seed[name] = [r.h for r in reports]
        print(mean.summary())

    reference = per_seed[Variant.MOPD.value]
    rows = []
    for mean in means:
        h = per_seed[mean.label]
        rows.append(
            [
                mean.label,
                mean.acc_base,
                mean.acc_new,
                float(np.mean(h)),
                float(np.std(h, ddof=1)) if len(h) > 1 else 0.0,
                eh.paired_sign_test(reference, h) if mean.label != Variant.MOPD.value else "",
            ]
        )
    manifest.add_output(out / "report.json", eh.write_reports(out, means))
    manifest.add_output(out / "report.csv")
    manifest.add_output(
        out / "ablation.csv",
        write_csv(out / "ablation.csv", ["variant", "base", "new", "h_mean", "h_std", "p_mopd_better"], rows),
    )
    manifest.write(out, started)
    return 0


def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--out", type=str, default=None, help="Output directory")
    p.add_argument("--force", action="store_true", help="Overwrite existing outputs")
    p.add_argument("--seed", type=int, default=None, help="Override the seed")
    p.add_argument("--seeds", type=int, default=3, help="Number of training seeds")
    p.add_argument("-v", "--verbose", action="store_true", help="Log at INFO level")
    return p


def _inputs(p: argparse.ArgumentParser, pool_required: bool = False):
    p.add_argument("--task", type=str, required=True, help="task.json from gen-data")
    p.add_argument("--pool", type=str, default=None, required=pool_required, help="teachers.json")
    p.add_argument("--backbone", type=str, default=None, help="backbone.json (rebuilt from the task if omitted)")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    p = _Parser(prog="mopd", description="Mixture-of-prompts distillation lab")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    pg = sub.add_parser("gen-data", parents=[common], help="Generate a task, teacher pool and backbone")
    pg.add_argument("spec", nargs="?", default=None, help="JSON task spec")
    pg.set_defaults(func=cmd_gen_data)

    pt = sub.add_parser("train", parents=[common], help="Train one configuration")
    pt.add_argument("config", type=str, help="JSON training config")
    _inputs(pt)
    pt.add_argument("--all-classes", action="store_true", help="Train on every class instead of the base split")
    pt.set_defaults(func=cmd_train)

    pe = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    pe.add_argument("checkpoint", type=str)
    _inputs(pe)
    pe.add_argument("--protocol", choices=eh.PROTOCOLS[:4], default="base-to-new")
    pe.add_argument("--mixtures", nargs="+", default=["12T", "6T+6N", "12T+12N", "12N"])
    pe.add_argument("--shots", nargs="+", type=int, default=list(eh.DEFAULT_SHOTS))
    pe.add_argument("--shifts", nargs="+", type=float, default=[0.2, 0.4])
    pe.set_defaults(func=cmd_eval)

    pz = sub.add_parser("zero-shot", parents=[common], help="Score each teacher alone")
    _inputs(pz, pool_required=True)
    pz.set_defaults(func=cmd_zero_shot)

    ps = sub.add_parser("sweep", parents=[common], help="Sweep one hyperparameter")
    ps.add_argument("config", type=str)
    _inputs(ps)
    ps.add_argument("--axis", choices=SWEEP_AXES, required=True)
    ps.add_argument("--values", nargs="+", type=float, required=True)
    ps.set_defaults(func=cmd_sweep)

    pa = sub.add_parser("ablate", parents=[common], help="Run the variant ablation")
    pa.add_argument("config", type=str)
    _inputs(pa)
    pa.add_argument("--transfer", action="store_true", help="Also run the MMD, cos and l1 transfer variants")
    pa.set_defaults(func=cmd_ablate)
    return p


def _configure_logging(verbose: bool):
    level = "INFO" if verbose else config_lib.env_log_level()
    logging.basicConfig(level=level, format=LOG_FORMAT)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    _configure_logging(args.verbose)
    try:
        return args.func(args)
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        if e.dump_path:
            print(f"diagnostic dump: {e.dump_path}", file=sys.stderr)
        return 2
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, ArtifactMismatch, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

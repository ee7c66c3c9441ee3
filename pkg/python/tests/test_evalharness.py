# Copyright © 2024 MoPD Lab Contributors.

import dataclasses
import math
import tempfile
import unittest
from pathlib import Path

import mopd_tests
import numpy as np
from mopd import evalharness as ev
from mopd.errors import ArtifactMismatch
from mopd.serialization import load_json
from mopd.synthdata import TaskSpec, TeacherSpec, build_backbone, generate_task, generate_teacher_pool
from mopd.trainer import Checkpoint, TrainConfig, Variant


def _config(**changes):
    fields = dict(pool_size=3, top_t=2, tau=0.1, epochs=2, batch_size=8)
    fields.update(changes)
    return TrainConfig(**fields)


class TestHarmonicMean(mopd_tests.MoPDTestCase):
    def test_published_values(self):
        self.assertAlmostEqual(ev.harmonic_mean(82.64, 68.00, scale=100), 74.61, delta=0.01)
        self.assertAlmostEqual(ev.harmonic_mean(69.34, 74.22, scale=100), 71.70, delta=0.01)

    def test_properties(self):
        for a in (0.0, 0.25, 1.0):
            self.assertAlmostEqual(ev.harmonic_mean(a, a), a)
        self.assertEqual(ev.harmonic_mean(0.0, 0.0), 0.0)
        self.assertEqual(ev.harmonic_mean(0.0, 0.9), 0.0)
        self.assertLessEqual(ev.harmonic_mean(0.2, 0.8), 0.5)
        self.assertGreaterEqual(ev.harmonic_mean(0.2, 0.8), 0.2)

    def test_range(self):
        for a, b in ((-0.1, 0.5), (0.5, 1.1), (101.0, 50.0)):
            with self.subTest(a=a, b=b):
                with self.assertRaises(ValueError):
                    ev.harmonic_mean(a, b, scale=1.0 if a < 100 else 100)

    def test_report_h(self):
        report = ev.EvalReport("base-to-new", 0.8264, 0.68)
        self.assertEqual(report.h, ev.harmonic_mean(0.8264, 0.68))
        self.assertEqual(report.summary(), "base-to-new: base 82.64  new 68.00  H 74.61")
        self.assertEqual(report.row()["h"], "74.61")


class TestBaseToNew(mopd_tests.MoPDTestCase):
    def setUp(self):
        super().setUp()
        self.task = mopd_tests.small_task(0)
        self.backbone = build_backbone(self.task)

    def test_perfect_student(self):
        task = mopd_tests.small_task(0, sigma_x=0.0, vocab_noise=0.0)
        backbone = build_backbone(task)
        checkpoint = Checkpoint(
            prompt_vectors=np.zeros((2, task.spec.embed_dims)),
            tau=0.1,
            backbone_fingerprint=backbone.fingerprint(),
            task_hash=task.task_hash,
            classes=task.base_ids,
        )
        report = ev.evaluate_base_to_new(checkpoint, task, backbone)
        self.assertEqual((report.acc_base, report.acc_new, report.h), (1.0, 1.0, 1.0))
        self.assertIsNone(report.gate_stats)
        self.assertEqual(sorted(report.per_class), list(range(task.C)))

    def test_gate_is_not_used_for_prediction(self):
        report, checkpoint = ev.train_and_evaluate(_config(), self.task, self.backbone)
        self.assertTrue(checkpoint.has_gate)
        self.assertIn("noisy_mass", report.gate_stats)
        self.assertEqual(report.extra["variant"], "mopd")

        without = ev.evaluate_base_to_new(checkpoint.without_gate(), self.task, self.backbone)
        self.assertIsNone(without.gate_stats)
        self.assertEqual((without.acc_base, without.acc_new), (report.acc_base, report.acc_new))
        self.assertEqual(without.per_class, report.per_class)

    def test_new_classes_never_trained_on(self):
        task = mopd_tests.small_task(3)
        ev.train_and_evaluate(_config(), task)
        self.assertEqual(ev.new_class_train_reads(task), 0)
        task.split_instances("train", "all")
        self.assertEqual(ev.new_class_train_reads(task), 12)

    def test_repeatable(self):
        _, checkpoint = ev.train_and_evaluate(_config(variant=Variant.SIPD), self.task, self.backbone)
        first = ev.evaluate_base_to_new(checkpoint, self.task, self.backbone)
        second = ev.evaluate_base_to_new(checkpoint, self.task, self.backbone)
        self.assertEqual(first.to_dict(), second.to_dict())
        self.assertEqual(first.seeds, (0,))

    def test_mismatches(self):
        _, checkpoint = ev.train_and_evaluate(_config(variant=Variant.CE_ONLY), self.task, self.backbone)
        other = mopd_tests.small_task(1)
        with self.assertRaisesRegex(ArtifactMismatch, "checkpoint/task mismatch"):
            ev.evaluate_base_to_new(checkpoint, other, self.backbone)
        with self.assertRaisesRegex(ArtifactMismatch, "backbone"):
            ev.evaluate_base_to_new(checkpoint, self.task, build_backbone(self.task, seed=9))
        with self.assertRaisesRegex(ValueError, "label-space mismatch"):
            ev.evaluate_base_to_new(
                dataclasses.replace(checkpoint, classes=None), self.task, self.backbone
            )

    def test_run_seeds(self):
        mean, reports = ev.run_seeds(
            _config(variant=Variant.CE_ONLY), self.task, seeds=(1, 2), backbone=self.backbone, label="ce"
        )
        self.assertEqual([r.seeds for r in reports], [(1,), (2,)])
        self.assertEqual(mean.seeds, (1, 2))
        self.assertEqual(mean.label, "ce")
        self.assertAlmostEqual(mean.acc_base, (reports[0].acc_base + reports[1].acc_base) / 2)
        self.assertEqual(mean.h, ev.harmonic_mean(mean.acc_base, mean.acc_new))


class TestOtherProtocols(mopd_tests.MoPDTestCase):
    def test_zero_shot(self):
        task = mopd_tests.small_task(0, sigma_x=0.0)
        pool = generate_teacher_pool(task, TeacherSpec(num_task=1, num_noisy=1, sigmas=(0.0,)))
        report = ev.evaluate_zero_shot(pool, 0, task)
        self.assertEqual((report.acc_base, report.acc_new), (1.0, 1.0))
        self.assertEqual(report.extra["kind"], "task")
        self.assertEqual(ev.evaluate_zero_shot(pool, 1, task).extra["kind"], "noisy")
        with self.assertRaises(ValueError):
            ev.evaluate_zero_shot(pool, 2, task)

    def test_domain_shift(self):
        task = mopd_tests.small_task(0)
        backbone = build_backbone(task)
        _, checkpoint = ev.train_and_evaluate(_config(variant=Variant.CE_ONLY), task, backbone)
        rows = ev.evaluate_domain_shift(checkpoint, task, backbone, shifts=(0.5, 1.0))
        self.assertEqual([r["shift"] for r in rows], [0.0, 0.5, 1.0])
        expected, _ = ev.accuracy(checkpoint.student(backbone), task, "all")
        self.assertEqual(rows[0]["acc"], expected)
        for row in rows:
            self.assertGreaterEqual(row["acc"], 0.0)
            self.assertLessEqual(row["acc"], 1.0)

    def test_few_shot(self):
        task = mopd_tests.small_task(0)
        config = _config(variant=Variant.CE_ONLY)
        rows = ev.evaluate_few_shot(config, task, shots=(1, 2), seeds=(1, 2))
        self.assertEqual([r["shots"] for r in rows], [1, 2])
        for row in rows:
            self.assertEqual(row["seeds"], 2)
            self.assertGreaterEqual(row["std"], 0.0)
            self.assertTrue(0.0 <= row["acc"] <= 1.0)
        with self.assertRaisesRegex(ValueError, "Insufficient shots"):
            ev.evaluate_few_shot(config, task, shots=(2, 8), seeds=(1,))

    def test_domain_shift_trend(self):
        task = generate_task(TaskSpec(seed=0))
        backbone = build_backbone(task)
        shifts = (0.5, 1.0)
        accs = np.zeros(3)
        for seed in range(1, 6):
            _, checkpoint = ev.train_and_evaluate(
                TrainConfig(variant=Variant.CE_ONLY, epochs=5, seed=seed), task, backbone
            )
            rows = ev.evaluate_domain_shift(checkpoint, task, backbone, shifts=shifts)
            accs += [row["acc"] for row in rows]
        accs /= 5
        self.assertTrue(np.all(np.diff(accs) < 0), msg=f"accuracies {accs}")

    def test_few_shot_trend(self):
        task = generate_task(TaskSpec(seed=0))
        config = TrainConfig(variant=Variant.CE_ONLY, epochs=20)
        rows = ev.evaluate_few_shot(config, task, shots=(1, 16), seeds=range(1, 11))
        self.assertGreaterEqual(rows[1]["acc"], rows[0]["acc"] - 0.02)

    def test_random_student_is_at_chance(self):
        task = mopd_tests.small_task(0, num_classes=10, dims=16, embed_dims=16, test_per_class=40)
        accs = []
        for seed in range(10):
            backbone = mopd_tests.toy_backbone(C=10, d=16, d_e=16, seed=seed)
            student = mopd_tests.toy_student(backbone, M=4, seed=seed + 100, std=1.0)
            acc, _ = ev.accuracy(student, task, "all")
            accs.append(acc)
        self.assertLess(abs(np.mean(accs) - 0.1), 0.05)

    def test_robustness(self):
        task = mopd_tests.small_task(0)
        reports = ev.evaluate_robustness(_config(), task, ["2T+1N"], seeds=(1,))
        self.assertEqual([r.label for r in reports], ["2T+1N", "2T+1N"])
        self.assertEqual([r.extra["variant"] for r in reports], ["mopd", "mopd_r"])
        for report in reports:
            self.assertIn("noisy_mass_initial", report.extra)
            self.assertIn("noisy_mass_final", report.extra)
        self.assertAlmostEqual(reports[1].extra["noisy_mass_final"], 1.0 / 3.0)


class TestStatistics(mopd_tests.MoPDTestCase):
    def test_aggregate(self):
        reports = [ev.EvalReport("x", 0.5, 0.5), ev.EvalReport("x", 0.7, 0.3)]
        out = ev.aggregate_reports(reports)
        self.assertAlmostEqual(out["acc_base"][0], 0.6)
        self.assertAlmostEqual(out["acc_base"][1], math.sqrt(0.02))
        self.assertAlmostEqual(out["h"][0], (0.5 + 0.42) / 2)
        self.assertEqual(ev.aggregate_reports(reports[:1])["acc_new"], (0.5, 0.0))
        with self.assertRaises(ValueError):
            ev.aggregate_reports([])

    def test_mean_report(self):
        reports = [
            ev.EvalReport("base-to-new", 0.5, 1.0, seeds=(1,), extra={"variant": "mopd", "noisy_mass_final": 0.2}),
            ev.EvalReport("base-to-new", 1.0, 0.5, seeds=(2,), extra={"variant": "mopd", "noisy_mass_final": 0.4}),
        ]
        mean = ev.mean_report(reports, label="mix")
        self.assertEqual((mean.acc_base, mean.acc_new), (0.75, 0.75))
        self.assertEqual(mean.h, 0.75)
        self.assertAlmostEqual(mean.extra["noisy_mass_final"], 0.3)
        self.assertEqual(mean.extra["variant"], "mopd")
        with self.assertRaises(ValueError):
            ev.mean_report([])

    def test_sign_test(self):
        self.assertAlmostEqual(ev.paired_sign_test([1.0] * 10, [0.0] * 10), 0.5**10)
        self.assertEqual(ev.paired_sign_test([0.5] * 4, [0.5] * 4), 1.0)
        self.assertAlmostEqual(ev.paired_sign_test([0.0] * 10, [1.0] * 10), 1.0)
        with self.assertRaises(ValueError):
            ev.paired_sign_test([1.0, 2.0], [1.0])


class TestWriters(mopd_tests.MoPDTestCase):
    def test_write_reports(self):
        reports = [
            ev.EvalReport("base-to-new", 0.5, 0.25, label="a", seeds=(1, 2), extra={"variant": "mopd"}),
            ev.EvalReport("base-to-new", 1.0, 0.5, per_class={1: 1.0, 0: 0.5}),
        ]
        with tempfile.TemporaryDirectory() as tmp:
            digest = ev.write_reports(tmp, reports)
            self.assertEqual(digest, ev.write_reports(tmp, reports))
            data = load_json(Path(tmp) / "report.json")
            self.assertEqual(data[1]["per_class"], {"0": 0.5, "1": 1.0})
            rows = mopd_tests.read_csv(Path(tmp) / "report.csv")
            self.assertEqual(rows[0]["seeds"], "1 2")
            self.assertEqual(rows[0]["h"], ev.percent(1.0 / 3.0))
            self.assertEqual(rows[1]["variant"], "")
            self.assertEqual(list(rows[0])[: len(ev.REPORT_COLUMNS)], list(ev.REPORT_COLUMNS))

    def test_tables(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "shots.csv"
            ev.write_table(path, [{"shots": 1, "acc": 0.5}, {"shots": 2, "acc": 0.75}])
            self.assertEqual(path.read_text().splitlines()[0], "shots,acc")
            with self.assertRaises(ValueError):
                ev.write_table(path, [])
            ev.write_plot_data(Path(tmp) / "plot.csv", [0.1, 0.2], [1.0, 2.0])
            with self.assertRaises(ValueError):
                ev.write_plot_data(Path(tmp) / "plot.csv", [0.1], [1.0, 2.0])


if __name__ == "__main__":
    mopd_tests.MoPDTestRunner()

# Copyright © 2024 MoPD Lab Contributors.

import contextlib
import io
import json
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import mopd_tests
from mopd import cli
from mopd.nn.losses import LossBreakdown
from mopd.serialization import load_json

SPEC = {"seed": 0, "C": 6, "d": 8, "d_e": 8, "shots": 4, "test_per_class": 5, "teachers": "3T"}
CONFIG = {"epochs": 2, "batch_size": 8, "H": 3, "T": 2, "tau": 0.1}


class TestCommandLine(mopd_tests.MoPDTestCase):
    def setUp(self):
        super().setUp()
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)
        self.spec = self._json("spec.json", SPEC)

    def tearDown(self):
        self._tmp.cleanup()
        super().tearDown()

    def _json(self, name, data):
        path = self.root / name
        path.write_text(json.dumps(data))
        return str(path)

    def run_cli(self, *argv):
        out, err = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            code = cli.main([str(a) for a in argv])
        return code, out.getvalue(), err.getvalue()

    def gen_data(self, name="data", spec=None):
        out = self.root / name
        code, _, err = self.run_cli("gen-data", spec or self.spec, "--out", out)
        self.assertEqual(code, 0, err)
        return out

    def train(self, data, name, **config):
        out = self.root / name
        path = self._json(f"{name}.json", {**CONFIG, **config})
        code, _, err = self.run_cli(
            "train", path, "--task", data / "task.json", "--pool", data / "teachers.json", "--out", out
        )
        self.assertEqual(code, 0, err)
        return out

    def test_gen_data(self):
        data = self.gen_data()
        first = {n: (data / n).read_bytes() for n in ("task.json", "teachers.json", "backbone.json")}
        code, _, _ = self.run_cli("gen-data", self.spec, "--out", data, "--force")
        self.assertEqual(code, 0)
        for name, content in first.items():
            self.assertEqual((data / name).read_bytes(), content)

        code, _, err = self.run_cli("gen-data", self.spec, "--out", data)
        self.assertEqual(code, 1)
        self.assertIn("--force", err)

        manifest = load_json(data / "manifest.json")
        self.assertEqual(manifest["command"], "gen-data")
        self.assertEqual(len(manifest["outputs"]), 3)

    def test_bad_inputs(self):
        self.assertEqual(self.run_cli("gen-data", self._json("bad.json", {"C": 2}))[0], 1)
        self.assertEqual(self.run_cli("gen-data", self.root / "missing.json")[0], 1)
        self.assertEqual(self.run_cli("no-such-command")[0], 1)

    def test_train_requires_pool(self):
        data = self.gen_data()
        ce = self._json("ce.json", {**CONFIG, "variant": "ce_only"})
        code, out, err = self.run_cli("train", ce, "--task", data / "task.json", "--out", self.root / "ce")
        self.assertEqual(code, 0, err)
        self.assertIn("ce_only", out)
        rows = mopd_tests.read_csv(self.root / "ce" / "train_log.csv")
        self.assertEqual(len(rows), 2 * 2)
        self.assertEqual(list(rows[0]), list(cli.LOG_COLUMNS))

        mopd = self._json("mopd.json", CONFIG)
        code, _, err = self.run_cli("train", mopd, "--task", data / "task.json", "--out", self.root / "m")
        self.assertEqual(code, 1)
        self.assertIn("--pool", err)

    def test_eval(self):
        data = self.gen_data()
        run = self.train(data, "mopd")
        reports = []
        for name in ("eval1", "eval2"):
            code, out, err = self.run_cli(
                "eval", run / "checkpoint.json", "--task", data / "task.json", "--out", self.root / name
            )
            self.assertEqual(code, 0, err)
            self.assertIn("base-to-new", out)
            reports.append((self.root / name / "report.json").read_bytes())
        self.assertEqual(reports[0], reports[1])

        other = self.gen_data("other", self._json("other.json", {**SPEC, "seed": 1}))
        code, _, err = self.run_cli(
            "eval", run / "checkpoint.json", "--task", other / "task.json", "--out", self.root / "bad"
        )
        self.assertEqual(code, 1)
        self.assertIn("checkpoint/task mismatch", err)

    def test_pool_task_mismatch(self):
        data = self.gen_data()
        other = self.gen_data("other", self._json("other.json", {**SPEC, "seed": 1}))
        code, _, err = self.run_cli(
            "train", self._json("c.json", CONFIG),
            "--task", data / "task.json", "--pool", other / "teachers.json", "--out", self.root / "x",
        )
        self.assertEqual(code, 1)
        self.assertIn("pool/task mismatch", err)

    def test_zero_shot(self):
        data = self.gen_data()
        code, out, err = self.run_cli(
            "zero-shot", "--task", data / "task.json", "--pool", data / "teachers.json", "--out", self.root / "zs"
        )
        self.assertEqual(code, 0, err)
        self.assertEqual(len(load_json(self.root / "zs" / "report.json")), 3)

    def test_sweep(self):
        data = self.gen_data()
        args = ("--task", data / "task.json", "--pool", data / "teachers.json", "--seeds", 1)
        code, out, err = self.run_cli(
            "sweep", self._json("c.json", CONFIG), *args, "--axis", "alpha",
            "--values", 0.0, 0.5, 1.0, "--out", self.root / "alpha",
        )
        self.assertEqual(code, 0, err)
        rows = mopd_tests.read_csv(self.root / "alpha" / "sweep.csv")
        self.assertEqual([float(r["value"]) for r in rows], [0.0, 0.5, 1.0])
        self.assertEqual(len(mopd_tests.read_csv(self.root / "alpha" / "plot.csv")), 3)

        code, _, _ = self.run_cli(
            "sweep", self._json("c.json", CONFIG), *args, "--axis", "T",
            "--values", 4, "--out", self.root / "t",
        )
        self.assertEqual(code, 1)

        code, _, err = self.run_cli(
            "sweep", self._json("c.json", CONFIG), *args, "--axis", "H_pool",
            "--values", 5, "--out", self.root / "h",
        )
        self.assertEqual(code, 1)
        self.assertIn("exceed", err)

        code, _, err = self.run_cli(
            "sweep", self._json("c.json", CONFIG), *args, "--axis", "T",
            "--values", 2.5, "--out", self.root / "t_frac",
        )
        self.assertEqual(code, 1)
        self.assertIn("T values must be integers", err)
        self.assertFalse((self.root / "t_frac" / "sweep.csv").exists())

        code, _, err = self.run_cli(
            "sweep", self._json("c.json", CONFIG), *args, "--axis", "H_pool",
            "--values", 2, 2.5, "--out", self.root / "h_frac",
        )
        self.assertEqual(code, 1)
        self.assertIn("H_pool values must be integers", err)

    def test_pool_size_sweep_samples_teachers(self):
        pool = mopd_tests.toy_pool(C=4, d=5, H=8)
        small = cli._pool_sample(pool, 3, seed=0)
        large = cli._pool_sample(pool, 6, seed=0)
        self.assertEqual(small.H, 3)
        self.assertTrue(set(small.labels) <= set(large.labels))
        self.assertEqual(list(small.labels), sorted(small.labels))
        self.assertEqual(cli._pool_sample(pool, 3, seed=0).labels, small.labels)
        prefixes = [cli._pool_sample(pool, 3, seed=s).labels == pool.labels[:3] for s in range(10)]
        self.assertFalse(all(prefixes))

    def test_ablate(self):
        data = self.gen_data()
        code, _, err = self.run_cli(
            "ablate", self._json("c.json", CONFIG), "--task", data / "task.json",
            "--pool", data / "teachers.json", "--seeds", 2, "--transfer", "--out", self.root / "ab",
        )
        self.assertEqual(code, 0, err)
        rows = mopd_tests.read_csv(self.root / "ab" / "ablation.csv")
        names = [r["variant"] for r in rows]
        self.assertEqual(names[:5], [v.value for v in cli.ABLATION_VARIANTS])
        self.assertEqual(names[5:], ["mopd_mmd", "mopd_cos", "mopd_l1"])
        for row in rows:
            if row["variant"] == "mopd":
                self.assertEqual(row["p_mopd_better"], "")
            else:
                self.assertTrue(0.0 < float(row["p_mopd_better"]) <= 1.0)

        code, _, err = self.run_cli(
            "ablate", self._json("c.json", CONFIG), "--task", data / "task.json", "--out", self.root / "ab2"
        )
        self.assertEqual(code, 1)
        self.assertIn("--pool", err)

    def test_numerical_abort(self):
        data = self.gen_data()
        nan = float("nan")
        with mock.patch(
            "mopd.trainer.combined_loss",
            return_value=(LossBreakdown(nan, 0.0, 0.0, nan, 0.8, 0.0), {}),
        ):
            code, _, err = self.run_cli(
                "train", self._json("c.json", CONFIG), "--task", data / "task.json",
                "--pool", data / "teachers.json", "--out", self.root / "abort",
            )
        self.assertEqual(code, 2)
        self.assertIn("numerical abort", err)
        self.assertTrue((self.root / "abort" / "abort-seed0-step0.json").exists())
        self.assertFalse((self.root / "abort" / "checkpoint.json").exists())

    def test_pipeline_replay(self):
        reports = []
        for name in ("a", "b"):
            data = self.gen_data(f"data-{name}")
            run = self.train(data, f"run-{name}")
            out = self.root / f"eval-{name}"
            code, _, err = self.run_cli(
                "eval", run / "checkpoint.json", "--task", data / "task.json",
                "--pool", data / "teachers.json", "--out", out,
            )
            self.assertEqual(code, 0, err)
            reports.append((out / "report.json").read_bytes())
            self.assertIn(str(data / "task.json"), load_json(out / "manifest.json")["inputs"])
        self.assertEqual(reports[0], reports[1])


if __name__ == "__main__":
    mopd_tests.MoPDTestRunner()

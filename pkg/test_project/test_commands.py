import json
import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase

from mvtune import formats
from mvtune.exceptions import (
    EXIT_INFEASIBLE,
    EXIT_INVALID_INPUT,
    EXIT_IO,
    InvalidInputError,
)
from mvtune.management.commands._base import parse_configuration
from mvtune.models import TuningRun
from test_project.factories import linear_models


GEN_ARGS = [
    *["--dims", "8,6,4", "--rows", 300, "--clusters", 8, "--queries", 3],
    *["--p", 0.6, "--k", 10, "--budget", 3, "--seed", 1],
]


def run(name, *args):
    """Call a management command, returning (stdout, stderr)."""
    out, err = StringIO(), StringIO()
    call_command(name, *[str(a) for a in args], stdout=out, stderr=err)
    return out.getvalue(), err.getvalue()


class GeneratedDataMixin:
    """A generated dataset and workload in a temporary directory."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        tmp = tempfile.TemporaryDirectory()
        cls.addClassCleanup(tmp.cleanup)
        cls.dir = Path(tmp.name)
        cls.data = cls.dir / "data"
        cls.gen_out, _ = run("mvtune_gen", *GEN_ARGS, "--out", cls.data)
        cls.workload = cls.data / "workload.json"

    @classmethod
    def inputs(cls, model):
        return ["--dataset", cls.data, "--workload", cls.workload, "--model", model]


class ParseConfigurationTest(SimpleTestCase):
    def test_parse(self):
        self.assertEqual(parse_configuration("1,3;2").as_lists(), [[2], [1, 3]])
        self.assertEqual(parse_configuration("1;;").as_lists(), [[1]])
        for bad in ["", ";", "1,x"]:
            with self.subTest(bad=bad):
                with self.assertRaises(InvalidInputError):
                    parse_configuration(bad)


class GenCommandTest(GeneratedDataMixin, SimpleTestCase):
    def test_files(self):
        self.assertIn("Wrote 300 rows x 3 column(s) and 3 queries", self.gen_out)
        for name in ["dataset.json", "col1.fbin", "col2.fbin", "col3.fbin"]:
            self.assertTrue((self.data / name).exists(), name)
        workload = formats.WorkloadFile.load(self.workload)
        self.assertEqual(workload.storage_budget, 3)
        self.assertEqual({q["k"] for q in workload.queries}, {10})

    def test_same_seed_same_files(self):
        other = self.dir / "again"
        run("mvtune_gen", *GEN_ARGS, "--out", other)
        for name in ["workload.json", "col2.fbin"]:
            self.assertEqual((other / name).read_bytes(), (self.data / name).read_bytes())

    def test_preset(self):
        args = ["--preset", "naive", "--rows", 120, "--k", 5, "--recall", 0.8]
        out, _ = run("mvtune_gen", *args, "--out", self.dir / "naive")
        self.assertIn("and 4 queries", out)
        workload = formats.WorkloadFile.load(self.dir / "naive" / "workload.json")
        self.assertEqual(workload.recall_threshold, 0.8)

    def test_invalid_input(self):
        for args in [
            ["--dims", "8,6"],
            ["--out", self.dir / "x"],
            ["--dims", "8,six", "--out", self.dir / "x"],
            ["--dims", "8", "--rows", 50, "--out", self.dir / "x"],
        ]:
            with self.subTest(args=args):
                with self.assertRaises(CommandError) as cm:
                    run("mvtune_gen", *args)
                self.assertEqual(cm.exception.returncode, EXIT_INVALID_INPUT)


class PipelineTest(GeneratedDataMixin, SimpleTestCase):
    """gen, train, tune, plan, eval and sweep chained through files."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.model = cls.dir / "models.json"
        cls.curves = cls.dir / "curves.csv"
        cls.train_out, _ = run(
            "mvtune_train",
            *["--dataset", cls.data, "--fraction", 1.0, "--grid", "5,10,20,40"],
            *["--train-queries", 3, "--curves", cls.curves, "--out", cls.model],
        )
        cls.report = cls.dir / "report.json"
        run("mvtune_tune", *cls.inputs(cls.model), "--out", cls.report)

    def test_train(self):
        self.assertIn(f"Wrote {self.model}", self.train_out)
        self.assertIn("cost R2", self.train_out)
        models = formats.load_models(self.model)
        self.assertEqual(models.columns, {1, 2, 3})
        lines = self.curves.read_text().splitlines()
        self.assertEqual(lines[0], "column,ek,num_dist,recall")
        self.assertEqual(len(lines), 1 + 3 * 3 * 4)

    def test_train_same_seed_same_bytes(self):
        outputs = []
        for name in ["first", "second"]:
            model, curves = self.dir / f"{name}.json", self.dir / f"{name}.csv"
            run(
                "mvtune_train",
                *["--dataset", self.data, "--fraction", 0.5, "--grid", "5,10,20"],
                *["--seed", 4, "--threads", 2, "--curves", curves, "--out", model],
            )
            outputs.append((model.read_bytes(), curves.read_bytes()))
        self.assertEqual(outputs[0], outputs[1])

    def test_tune_report(self):
        report = json.loads(self.report.read_text())
        self.assertEqual(set(report["baselines"]), {"per-column", "per-query"})
        self.assertLessEqual(report["tuned"]["storage"]["used"], 3)
        self.assertEqual(report["params"]["seed"], 0)
        for key in ["di", "se", "beam_width", "improvement", "kprime"]:
            self.assertIn(key, report["params"])
        estimation = report["estimation"]
        self.assertIn("est_recall", estimation["inflation"])
        self.assertFalse(estimation["sample_based"])
        self.assertEqual(estimation["model_scale_factor"], 1.0)
        self.assertEqual(report["recall_threshold"], 0.9)
        queries = formats.WorkloadFile.load(self.workload).queries
        used = sorted({i for q in queries for i in q["vid"]})
        self.assertEqual([c["id"] for c in report["columns"]], used)
        self.assertAlmostEqual(
            report["speedup"],
            report["baseline_costs"]["per-column"] / report["tuned"]["workload_cost"],
        )

    def test_tune_is_repeatable(self):
        out, err = run("mvtune_tune", *self.inputs(self.model))
        self.assertEqual(out, self.report.read_text())
        # the summary goes to stderr when the report goes to stdout
        self.assertIn("Tuned {", err)

    def test_tune_csv(self):
        out, _ = run("mvtune_tune", *self.inputs(self.model), "--format", "csv")
        lines = out.splitlines()
        self.assertEqual(lines[0], "label,query,plan,est_cost,est_recall")
        labels = {line.split(",")[0] for line in lines[1:]}
        self.assertEqual(labels, {"tuned", "per-column", "per-query"})

    def test_tune_infeasible_budget(self):
        with self.assertRaises(CommandError) as cm:
            run("mvtune_tune", *self.inputs(self.model), "--budget", 0.5)
        self.assertEqual(cm.exception.returncode, EXIT_INFEASIBLE)
        self.assertIn("(violated constraint: storage)", str(cm.exception))

    def test_threads_must_be_positive(self):
        with self.assertRaises(CommandError) as cm:
            run("mvtune_tune", *self.inputs(self.model), "--threads", 0)
        self.assertEqual(cm.exception.returncode, EXIT_INVALID_INPUT)

    def test_plan(self):
        out, err = run(
            "mvtune_plan", *self.inputs(self.model), "--config", "1;2;3", "--query", "q1"
        )
        data = json.loads(out)
        self.assertEqual(data["config"], [[1], [2], [3]])
        self.assertIsNone(data["di"])
        (plan,) = data["plans"]
        self.assertEqual(plan["query_id"], "q1")
        self.assertIn("q1: cost", err)

    def test_plan_errors(self):
        for args in [
            ["--config", "1;9"],
            ["--config", "1;x"],
            ["--config", "1;2;3", "--query", "nope"],
        ]:
            with self.subTest(args=args):
                with self.assertRaises(CommandError) as cm:
                    run("mvtune_plan", *self.inputs(self.model), *args)
                self.assertEqual(cm.exception.returncode, EXIT_INVALID_INPUT)

    def test_eval(self):
        args = ["--dataset", self.data, "--workload", self.workload]
        out, _ = run("mvtune_eval", *args, "--report", self.report)
        data = json.loads(out)
        self.assertEqual(set(data["results"]), {"tuned", "per-column", "per-query"})
        self.assertIn("speedup", data)
        for result in data["results"].values():
            self.assertEqual(len(result["queries"]), 3)
            for q in result["queries"]:
                self.assertGreaterEqual(q["measured_recall"], 0.0)
                self.assertLessEqual(q["measured_recall"], 1.0)

    def test_eval_errors(self):
        bad = self.dir / "bad.json"
        bad.write_text('{"tuned": {"plans": []}}')
        args = ["--dataset", self.data, "--workload", self.workload, "--report"]
        with self.assertRaises(CommandError) as cm:
            run("mvtune_eval", *args, bad)
        self.assertEqual(cm.exception.returncode, EXIT_INVALID_INPUT)
        with self.assertRaises(CommandError) as cm:
            run("mvtune_eval", *args, self.dir / "missing.json")
        self.assertEqual(cm.exception.returncode, EXIT_IO)

    def test_sweep(self):
        out, _ = run(
            "mvtune_sweep", *self.inputs(self.model), "--budgets", "4,3", "--format", "csv"
        )
        lines = out.splitlines()
        self.assertEqual(lines[0], "budget,workload_cost,storage_used,config")
        self.assertEqual([line.split(",")[0] for line in lines[1:]], ["3.0", "4.0"])
        costs = [float(line.split(",")[1]) for line in lines[1:]]
        self.assertGreaterEqual(costs[0], costs[1])


class SaveRunTest(GeneratedDataMixin, TestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        ds = formats.load_dataset(cls.data)
        cls.model = cls.dir / "linear.json"
        formats.save_models(cls.model, linear_models(ds))

    def test_save(self):
        out, _ = run("mvtune_tune", *self.inputs(self.model), "--save", "first")
        report = json.loads(out)
        saved = TuningRun.objects.get(name="first")
        self.assertEqual(saved.workload_cost, report["tuned"]["workload_cost"])
        self.assertEqual(saved.indexes.count(), len(report["tuned"]["config"]))
        self.assertEqual(saved.dataset, str(self.data))

        with self.assertRaises(CommandError) as cm:
            run("mvtune_tune", *self.inputs(self.model), "--save", "first")
        self.assertEqual(cm.exception.returncode, EXIT_INVALID_INPUT)
        self.assertEqual(TuningRun.objects.count(), 1)

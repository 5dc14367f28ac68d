import typing as T

from mvtune import searcher
from mvtune.exceptions import InvalidInputError
from mvtune.management.commands._base import (
    MvtuneCommand,
    add_input_arguments,
    add_search_arguments,
    estimation,
    load_inputs,
    parameters,
    planning_context,
    search_params,
)
from mvtune.models import TuningRun


def plan_rows(results: T.Iterable[searcher.TunerResult]):
    for result in results:
        for qid, plan in result.plans.items():
            yield (
                result.label,
                qid,
                ";".join(f"{x}:{ek}" for x, ek in plan.assignments),
                plan.estimated_cost,
                plan.estimated_recall,
            )


PLAN_HEADER = ("label", "query", "plan", "est_cost", "est_recall")


class Command(MvtuneCommand):
    help = (
        "Recommend a set of indexes for a workload and compare it with the "
        "per-column and per-query baselines."
    )

    def add_command_arguments(self, parser):
        add_input_arguments(parser)
        add_search_arguments(parser)
        parser.add_argument("--save", metavar="NAME", help="Store the run under NAME.")

    def run(self, **options):
        if options["save"] and TuningRun.objects.filter(name=options["save"]).exists():
            raise InvalidInputError(f"a tuning run named {options['save']!r} exists")
        ds, W, models = load_inputs(options)
        params = search_params(options)
        ctx = planning_context(ds, models, options, self.seed, params.di)
        tuned = searcher.tune(W, ds, models, params, ctx, threads=self.threads)
        per_column = searcher.baseline_per_column(W, ds, models, ctx)
        per_query = searcher.baseline_per_query(W, ds, models, ctx)

        report = {
            "dataset": str(options["dataset"]),
            "workload": str(options["workload"]),
            "recall_threshold": W.recall_threshold,
            "columns": [
                {"id": i, "dim": ds.dims[i]} for i in sorted(W.column_ids)
            ],
            "params": parameters(params, ctx, self.seed),
            "estimation": estimation(ctx),
            "tuned": tuned.to_dict(),
            "baselines": {
                "per-column": per_column.to_dict(),
                "per-query": per_query.to_dict(),
            },
            "baseline_costs": {
                "per-column": per_column.workload_cost,
                "per-query": per_query.workload_cost,
            },
            "speedup": (
                per_column.workload_cost / tuned.workload_cost
                if tuned.workload_cost > 0
                else None
            ),
        }
        self.note(
            options,
            f"Tuned {tuned.configuration}: estimated cost {tuned.workload_cost:.1f}, "
            f"per-column {per_column.workload_cost:.1f}, "
            f"per-query {per_query.workload_cost:.1f}",
        )
        if options["save"]:
            TuningRun.objects.create_from_report(
                options["save"], report["dataset"], report["workload"], report
            )
        self.emit(
            options,
            report,
            csv=(PLAN_HEADER, list(plan_rows([tuned, per_column, per_query]))),
        )

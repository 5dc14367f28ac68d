from mvtune import searcher
from mvtune.management.commands._base import (
    MvtuneCommand,
    add_input_arguments,
    add_search_arguments,
    estimation,
    float_list,
    load_inputs,
    parameters,
    planning_context,
    search_params,
)

SWEEP_HEADER = ("budget", "workload_cost", "storage_used", "config")


class Command(MvtuneCommand):
    help = (
        "Tune a workload at several storage budgets; each run starts from the "
        "previous budget's result."
    )

    def add_command_arguments(self, parser):
        add_input_arguments(parser)
        add_search_arguments(parser)
        parser.add_argument(
            "--budgets", required=True, help="Comma-separated storage budgets."
        )

    def run(self, **options):
        ds, W, models = load_inputs(options)
        params = search_params(options)
        ctx = planning_context(ds, models, options, self.seed, params.di)
        results = searcher.sweep(
            W,
            ds,
            models,
            float_list(options["budgets"]),
            params,
            ctx,
            threads=self.threads,
        )
        for r in results:
            self.note(
                options,
                f"budget {r.storage_budget:g}: {r.configuration} "
                f"cost {r.workload_cost:.1f}",
            )
        self.emit(
            options,
            {
                "params": parameters(params, ctx, self.seed),
                "estimation": estimation(ctx),
                "budgets": [r.storage_budget for r in results],
                "results": [r.to_dict() for r in results],
            },
            csv=(
                SWEEP_HEADER,
                [
                    (
                        r.storage_budget,
                        r.workload_cost,
                        r.storage_used,
                        str(r.configuration),
                    )
                    for r in results
                ],
            ),
        )

from mvtune import planner
from mvtune.exceptions import InvalidInputError
from mvtune.management.commands._base import (
    MvtuneCommand,
    add_input_arguments,
    load_inputs,
    parse_configuration,
    planning_context,
)


class Command(MvtuneCommand):
    help = (
        "What-if planning: the cheapest plan for one or more queries of a workload "
        "over a given set of hypothetical indexes."
    )

    def add_command_arguments(self, parser):
        add_input_arguments(parser)
        parser.add_argument(
            "--config",
            required=True,
            help='Indexes as column lists, e.g. "1,3;2" for x^{1,3} and x^{2}.',
        )
        parser.add_argument(
            "--query",
            action="append",
            help="Query id to plan (repeatable). Defaults to every query.",
        )
        parser.add_argument("--di", type=int, help="Max columns an index may miss.")
        parser.add_argument("--kprime", type=int, help="DP planner sample size.")

    def run(self, **options):
        ds, W, models = load_inputs(options)
        conf = parse_configuration(options["config"])
        for x in conf:
            if not x.vid <= ds.column_ids:
                raise InvalidInputError(f"{x} uses a column the dataset does not have")
        di = options["di"]
        ctx = planning_context(ds, models, options, self.seed, di)
        wanted = options["query"] or [q.qid for q in W.queries]
        by_id = {q.qid: q for q in W.queries}
        unknown = sorted(set(wanted) - set(by_id))
        if unknown:
            raise InvalidInputError(f"unknown query id(s): {', '.join(unknown)}")

        plans = []
        for qid in wanted:
            q = by_id[qid]
            p = planner.plan(q, conf, ctx, W.threshold_for(q))
            plans.append(p)
            self.note(
                options,
                f"{qid}: cost {p.estimated_cost:.1f}, "
                f"recall {p.estimated_recall:.3f}, total ek {p.total_ek}",
            )
        self.emit(
            options,
            {
                "config": conf.as_lists(),
                "di": di,
                "plans": [p.to_dict() for p in plans],
            },
            csv=(
                ("query", "vid", "ek", "est_cost", "est_recall"),
                [
                    (
                        p.query_id,
                        "-".join(map(str, x.columns)),
                        ek,
                        p.estimated_cost,
                        p.estimated_recall,
                    )
                    for p in plans
                    for x, ek in p.assignments
                ],
            ),
        )

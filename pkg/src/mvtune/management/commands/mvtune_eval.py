import dataclasses

from mvtune import ann, evaluation, formats
from mvtune.exceptions import InvalidInputError
from mvtune.management.commands._base import (
    MvtuneCommand,
    add_input_arguments,
    load_inputs,
)
from mvtune.searcher import TunerResult

QUERY_HEADER = (
    "label",
    "query",
    "est_cost",
    "measured_cost",
    "est_recall",
    "measured_recall",
    "threshold",
    "total_ek",
    "elapsed",
)


class Command(MvtuneCommand):
    help = (
        "Build the indexes of a tuning report, execute every query plan and compare "
        "measured cost and recall with the estimates."
    )

    def add_command_arguments(self, parser):
        add_input_arguments(parser, model=False)
        parser.add_argument(
            "--report", required=True, help="Report written by mvtune_tune."
        )

    def run(self, **options):
        ds, W, _ = load_inputs(options, model=False)
        report = formats.read_json(options["report"])
        try:
            results = [TunerResult.from_dict(report["tuned"])]
            results += [
                TunerResult.from_dict(data)
                for _, data in sorted(report.get("baselines", {}).items())
            ]
        except (KeyError, AttributeError):
            raise InvalidInputError(
                f"{options['report']} is not a tuning report"
            ) from None
        if options["recall"] is None and "recall_threshold" in report:
            W = dataclasses.replace(W, recall_threshold=report["recall_threshold"])
        qids = {q.qid for q in W.queries}
        for result in results:
            if set(result.plans) != qids:
                raise InvalidInputError(
                    f"the {result.label} plans do not match the workload's queries"
                )

        params = ann.BuildParams.from_settings(seed=self.seed)
        evaluated = evaluation.evaluate(W, ds, results, params, self.threads)
        for label, data in evaluated["results"].items():
            self.note(
                options,
                f"{label}: measured cost {data['measured_cost']:.1f} "
                f"(estimated {data['est_cost']:.1f})",
            )
        self.emit(
            options,
            evaluated,
            csv=(
                QUERY_HEADER,
                [
                    (
                        label,
                        q["query_id"],
                        q["est_cost"],
                        q["measured_cost"],
                        q["est_recall"],
                        q["measured_recall"],
                        q["threshold"],
                        q["total_ek"],
                        q["elapsed"],
                    )
                    for label, data in evaluated["results"].items()
                    for q in data["queries"]
                ],
            ),
        )

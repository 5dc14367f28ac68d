import dataclasses
from pathlib import Path

from mvtune import formats, synthetic
from mvtune.exceptions import InvalidInputError
from mvtune.management.commands._base import MvtuneCommand, int_list


class Command(MvtuneCommand):
    help = (
        "Generate a clustered synthetic dataset and a workload over it. Writes one "
        ".fbin file per column, dataset.json and workload.json into --out."
    )
    output_formats = ("json",)

    def add_command_arguments(self, parser):
        parser.add_argument(
            "--preset",
            choices=sorted(synthetic.PRESETS),
            help="Named column and query layout.",
        )
        parser.add_argument("--rows", type=int, default=10_000, help="Rows per column.")
        parser.add_argument("--dims", help="Comma-separated column dimensions.")
        parser.add_argument("--clusters", type=int, default=32)
        parser.add_argument("--queries", type=int, default=12, help="Number of queries.")
        parser.add_argument(
            "--p", type=float, help="Chance of each column joining a query."
        )
        parser.add_argument("--k", type=int, help="Neighbors per query.")
        parser.add_argument("--recall", type=float, help="Recall threshold.")
        parser.add_argument("--budget", type=float, help="Storage budget.")

    def run(self, **options):
        if not options["out"]:
            raise InvalidInputError("--out (the output directory) is required")
        directory = Path(options["out"])
        if options["preset"]:
            ds, workload = synthetic.generate_preset(
                options["preset"],
                options["rows"],
                options["clusters"],
                self.seed,
                k=options["k"],
            )
            changes = {}
            if options["recall"] is not None:
                changes["recall_threshold"] = options["recall"]
            if options["budget"] is not None:
                changes["storage_budget"] = options["budget"]
            if changes:
                workload = dataclasses.replace(workload, **changes)
        else:
            if not options["dims"]:
                raise InvalidInputError("either --preset or --dims is required")
            ds = synthetic.generate_dataset(
                options["rows"], int_list(options["dims"]), options["clusters"], self.seed
            )
            workload = synthetic.generate_workload(
                ds,
                options["queries"],
                p=0.5 if options["p"] is None else options["p"],
                k=100 if options["k"] is None else options["k"],
                recall_threshold=(
                    0.9 if options["recall"] is None else options["recall"]
                ),
                storage_budget=options["budget"],
                seed=self.seed,
            )
        formats.save_dataset(ds, directory)
        workload.dump(directory / "workload.json")
        self.stdout.write(
            f"Wrote {ds.num_rows} rows x {len(ds.columns)} column(s) and "
            f"{len(workload.queries)} queries to {directory}"
        )

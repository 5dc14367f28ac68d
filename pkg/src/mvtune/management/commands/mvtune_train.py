from mvtune import ann, estimators, formats
from mvtune.management.commands._base import MvtuneCommand, int_list


class Command(MvtuneCommand):
    help = (
        "Fit the cost and recall estimators on a sample of a dataset and write the "
        "model JSON."
    )
    output_formats = ("json",)

    def add_command_arguments(self, parser):
        parser.add_argument("--dataset", required=True, help="Dataset directory.")
        parser.add_argument("--fraction", type=float, help="Sample fraction.")
        parser.add_argument("--min-rows", type=int, help="Sample size floor.")
        parser.add_argument(
            "--train-queries", type=int, help="Training queries per column."
        )
        parser.add_argument("--grid", help="Comma-separated ek values to measure.")
        parser.add_argument(
            "--curves", help="Also write the raw observations to this CSV file."
        )

    def run(self, **options):
        ds = formats.load_dataset(options["dataset"])
        sample = estimators.TrainingSample.draw(
            ds,
            fraction=options["fraction"],
            min_rows=options["min_rows"],
            num_queries=options["train_queries"],
            seed=self.seed,
        )
        result = estimators.fit(
            ds,
            sample,
            grid=int_list(options["grid"]) if options["grid"] else None,
            build_params=ann.BuildParams.from_settings(seed=self.seed),
            threads=self.threads,
        )
        if options["curves"]:
            formats.write_csv(
                options["curves"],
                ("column", "ek", "num_dist", "recall"),
                ((o.column, o.ek, o.num_dist, o.recall) for o in result.observations),
            )
        for fit in result.fits.values():
            self.note(
                options,
                f"column {fit.column}: cost R2 {fit.r2_cost:.3f}, "
                f"recall R2 {fit.r2_recall:.3f}",
            )
        self.emit(options, result.models.to_dict())

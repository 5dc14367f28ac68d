import dataclasses
import typing as T

from django.core.management.base import BaseCommand, CommandError

from mvtune import formats, planner
from mvtune.apps import get_config
from mvtune.domain import Configuration, Dataset, Workload
from mvtune.estimators import TunerModels
from mvtune.exceptions import (
    InfeasibleWorkloadError,
    InvalidInputError,
    MvtuneError,
)
from mvtune.searcher import SearchParams


def int_list(value: str) -> T.List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise InvalidInputError(
            f"expected comma-separated integers, got {value!r}"
        ) from None


def float_list(value: str) -> T.List[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise InvalidInputError(
            f"expected comma-separated numbers, got {value!r}"
        ) from None


def parse_configuration(value: str) -> Configuration:
    """``"1,3;2"`` is the configuration {x^{1,3}, x^{2}}."""
    vids = [int_list(part) for part in value.split(";") if part.strip()]
    if not vids or not all(vids):
        raise InvalidInputError(f"cannot read a configuration from {value!r}")
    return Configuration.of(*vids)


class MvtuneCommand(BaseCommand):
    """
    Base class for the mvtune commands: shared --seed/--threads/--out/--format
    options, and mvtune errors turned into CommandError with the error's exit code.
    """

    output_formats: T.Tuple[str, ...] = ("json", "csv")

    def add_arguments(self, parser):
        parser.add_argument("--seed", type=int, help="Seed for every random choice.")
        parser.add_argument("--threads", type=int, help="Worker threads.")
        parser.add_argument("--out", help="Write the output to this path.")
        parser.add_argument(
            "--format",
            choices=self.output_formats,
            default=self.output_formats[0],
            help="Output format.",
        )
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        conf = get_config()
        self.seed = conf.seed if options["seed"] is None else options["seed"]
        self.threads = conf.threads if options["threads"] is None else options["threads"]
        if self.threads < 1:
            raise CommandError("--threads must be at least 1", returncode=3)
        try:
            self.run(**options)
        except InfeasibleWorkloadError as exc:
            raise CommandError(
                f"{exc} (violated constraint: {exc.constraint})",
                returncode=exc.exit_code,
            ) from exc
        except MvtuneError as exc:
            raise CommandError(str(exc), returncode=exc.exit_code) from exc

    def run(self, **options):
        raise NotImplementedError

    def note(self, options, message: str) -> None:
        """A human-readable summary line, kept off stdout when data goes there."""
        (self.stdout if options["out"] else self.stderr).write(message)

    def emit(self, options, data: T.Any = None, csv=None) -> None:
        """
        Write ``data`` as JSON, or ``csv`` (a header and rows) when --format csv was
        given, to --out or stdout.
        """
        if options["format"] == "csv":
            header, rows = csv
            text = formats.dumps_csv(header, rows)
        else:
            text = formats.dumps_json(data)
        if options["out"]:
            formats.atomic_write_text(options["out"], text)
            self.stdout.write(f"Wrote {options['out']}")
        else:
            self.stdout.write(text, ending="")


def add_input_arguments(parser, model: bool = True) -> None:
    parser.add_argument("--dataset", required=True, help="Dataset directory.")
    parser.add_argument("--workload", required=True, help="Workload JSON file.")
    if model:
        parser.add_argument("--model", required=True, help="Trained model JSON file.")
    parser.add_argument("--recall", type=float, help="Override the recall threshold.")
    parser.add_argument("--budget", type=float, help="Override the storage budget.")


def add_search_arguments(parser) -> None:
    parser.add_argument("--di", type=int, help="Max columns an index may miss.")
    parser.add_argument("--se", type=int, help="Max indexes per seed configuration.")
    parser.add_argument("--beam", type=int, help="Beam width.")
    parser.add_argument("--im", type=float, help="Relative improvement to continue.")
    parser.add_argument("--max-iterations", type=int, help="Beam search round limit.")
    parser.add_argument("--kprime", type=int, help="DP planner sample size.")


def load_inputs(
    options, model: bool = True
) -> T.Tuple[Dataset, Workload, T.Optional[TunerModels]]:
    ds = formats.load_dataset(options["dataset"])
    W = formats.load_workload(options["workload"], ds)
    overrides = {}
    if options.get("recall") is not None:
        overrides["recall_threshold"] = options["recall"]
    if options.get("budget") is not None:
        overrides["storage_budget"] = options["budget"]
    if overrides:
        W = dataclasses.replace(W, **overrides)
    models = formats.load_models(options["model"]) if model else None
    return ds, W, models


def search_params(options) -> SearchParams:
    return SearchParams.from_settings(
        di=options.get("di"),
        se=options.get("se"),
        beam_width=options.get("beam"),
        improvement=options.get("im"),
        max_iterations=options.get("max_iterations"),
    )


def planning_context(
    ds: Dataset, models: TunerModels, options, seed: int, di: T.Optional[int]
) -> planner.PlanningContext:
    overrides = {"seed": seed, "di": di}
    if options.get("kprime") is not None:
        overrides["kprime"] = options["kprime"]
    return planner.PlanningContext.create(ds, models, **overrides)


def parameters(
    params: SearchParams, ctx: planner.PlanningContext, seed: int
) -> T.Dict[str, T.Any]:
    return dict(
        params.to_dict(),
        kprime=ctx.kprime,
        dp_samples=ctx.dp_samples,
        seed=seed,
    )


def estimation(ctx: planner.PlanningContext) -> T.Dict[str, T.Any]:
    """How planned ek values were derived, so a report can be read on its own."""
    return {
        "inflation": "min over e >= ek of ceil(e / max(est_recall(e), 0.1))",
        "rank_scaling": "ceil(sample rank * planning_scale_factor)",
        "curve_ek": "ek / model_scale_factor",
        "sample_based": ctx.sample_based,
        "planning_scale_factor": ctx.scale_factor,
        "model_scale_factor": ctx.models.scale_factor,
    }

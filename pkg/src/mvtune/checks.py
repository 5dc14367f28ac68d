from django.core.checks import Error, Tags, Warning, register


def _positive_int(settings, name, default, minimum=1):
    value = getattr(settings, name, default)
    return isinstance(value, int) and not isinstance(value, bool) and value >= minimum


@register("mvtune")
def check_search_parameters(app_configs, **kwargs):
    """
    Checks that the beam search defaults are in range: di >= 0, se >= 1, beam width
    >= 1, 0 <= im < 1, max iterations >= 1.
    """
    from django.conf import settings

    errors = []
    bounds = [
        ("MVTUNE_DI", 2, 0),
        ("MVTUNE_SE", 2, 1),
        ("MVTUNE_BEAM_WIDTH", 4, 1),
        ("MVTUNE_MAX_ITERATIONS", 20, 1),
    ]
    for name, default, minimum in bounds:
        if not _positive_int(settings, name, default, minimum):
            errors.append(
                Error(
                    f"{name} must be an integer >= {minimum}.",
                    id="mvtune.E001",
                    obj="mvtune",
                )
            )

    im = getattr(settings, "MVTUNE_IMPROVEMENT", 0.05)
    if not isinstance(im, (int, float)) or not 0 <= im < 1:
        errors.append(
            Error(
                "MVTUNE_IMPROVEMENT must be a number in [0, 1).",
                id="mvtune.E002",
                obj="mvtune",
            )
        )
    return errors


@register("mvtune")
def check_index_and_sampling_parameters(app_configs, **kwargs):
    """
    Checks graph index and estimator sampling settings.
    """
    from django.conf import settings

    errors = []
    for name, default in [
        ("MVTUNE_MAX_DEGREE", 16),
        ("MVTUNE_EF_CONSTRUCTION", 200),
        ("MVTUNE_EF_SEARCH_FLOOR", 64),
        ("MVTUNE_SAMPLE_MIN_ROWS", 1000),
        ("MVTUNE_TRAIN_QUERIES", 50),
        ("MVTUNE_THREADS", 1),
        ("MVTUNE_DP_SAMPLES", 3),
        ("MVTUNE_KPRIME", 5),
    ]:
        if not _positive_int(settings, name, default):
            errors.append(
                Error(
                    f"{name} must be a positive integer.",
                    id="mvtune.E003",
                    obj="mvtune",
                )
            )

    fraction = getattr(settings, "MVTUNE_SAMPLE_FRACTION", 0.01)
    if not isinstance(fraction, (int, float)) or not 0 < fraction <= 1:
        errors.append(
            Error(
                "MVTUNE_SAMPLE_FRACTION must be in (0, 1].",
                id="mvtune.E004",
                obj="mvtune",
            )
        )

    grid = getattr(settings, "MVTUNE_EK_GRID", (100, 200, 400, 800, 1600, 3200))
    if len(grid) < 3 or any(
        not isinstance(ek, int) or ek < 1 for ek in grid
    ) or list(grid) != sorted(set(grid)):
        errors.append(
            Error(
                "MVTUNE_EK_GRID must hold at least 3 strictly increasing positive "
                "integers.",
                id="mvtune.E005",
                obj="mvtune",
            )
        )

    kprime = getattr(settings, "MVTUNE_KPRIME", 5)
    if isinstance(kprime, int) and kprime > 10:
        errors.append(
            Warning(
                "MVTUNE_KPRIME is larger than 10.",
                hint=(
                    "The DP planner enumerates 2**k' covers per index and 4**k' "
                    "cover pairs; large values make planning very slow."
                ),
                id="mvtune.W001",
                obj="mvtune",
            )
        )
    return errors


@register(Tags.caches)
def check_cache_alias_is_configured(app_configs, **kwargs):
    """
    Checks that the cache alias used for relevant-ek entries exists. Without it
    planning falls back to recomputing every relevant-ek list.
    """
    from django.conf import settings

    alias = getattr(settings, "MVTUNE_CACHE_ALIAS", "default")
    if getattr(settings, "MVTUNE_USE_CACHE", True) and alias not in getattr(
        settings, "CACHES", {"default": {}}
    ):
        return [
            Warning(
                f"MVTUNE_CACHE_ALIAS '{alias}' is not configured in CACHES.",
                hint="Add the alias to CACHES or set MVTUNE_USE_CACHE = False.",
                id="mvtune.W002",
                obj="mvtune",
            )
        ]
    return []

import typing as T

from django.apps import AppConfig
from django.conf import settings

# Import the checks module to register system checks
import mvtune.checks  # noqa: F401


class MvtuneConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "mvtune"
    verbose_name = "multi-vector index tuning"

    @property
    def use_cache(self) -> bool:
        return getattr(settings, "MVTUNE_USE_CACHE", True)

    @property
    def cache_alias(self) -> str:
        return getattr(settings, "MVTUNE_CACHE_ALIAS", "default")

    @property
    def max_degree(self) -> int:
        return getattr(settings, "MVTUNE_MAX_DEGREE", 16)

    @property
    def ef_construction(self) -> int:
        return getattr(settings, "MVTUNE_EF_CONSTRUCTION", 200)

    @property
    def ef_search_floor(self) -> int:
        return getattr(settings, "MVTUNE_EF_SEARCH_FLOOR", 64)

    @property
    def sample_fraction(self) -> float:
        return getattr(settings, "MVTUNE_SAMPLE_FRACTION", 0.01)

    @property
    def sample_min_rows(self) -> int:
        return getattr(settings, "MVTUNE_SAMPLE_MIN_ROWS", 1000)

    @property
    def train_queries(self) -> int:
        return getattr(settings, "MVTUNE_TRAIN_QUERIES", 50)

    @property
    def ek_grid(self) -> T.Tuple[int, ...]:
        return tuple(
            getattr(settings, "MVTUNE_EK_GRID", (100, 200, 400, 800, 1600, 3200))
        )

    @property
    def exact_planning_rows(self) -> int:
        return getattr(settings, "MVTUNE_EXACT_PLANNING_ROWS", 100_000)

    @property
    def di(self) -> int:
        return getattr(settings, "MVTUNE_DI", 2)

    @property
    def se(self) -> int:
        return getattr(settings, "MVTUNE_SE", 2)

    @property
    def beam_width(self) -> int:
        return getattr(settings, "MVTUNE_BEAM_WIDTH", 4)

    @property
    def improvement(self) -> float:
        return getattr(settings, "MVTUNE_IMPROVEMENT", 0.05)

    @property
    def max_iterations(self) -> int:
        return getattr(settings, "MVTUNE_MAX_ITERATIONS", 20)

    @property
    def kprime(self) -> int:
        return getattr(settings, "MVTUNE_KPRIME", 5)

    @property
    def dp_samples(self) -> int:
        return getattr(settings, "MVTUNE_DP_SAMPLES", 3)

    @property
    def max_pool(self) -> int:
        return getattr(settings, "MVTUNE_MAX_POOL", 5000)

    @property
    def threads(self) -> int:
        return getattr(settings, "MVTUNE_THREADS", 1)

    @property
    def seed(self) -> int:
        return getattr(settings, "MVTUNE_SEED", 0)

    @property
    def ground_truth_dir(self) -> T.Optional[str]:
        return getattr(settings, "MVTUNE_GROUND_TRUTH_DIR", None)


def get_config() -> MvtuneConfig:
    from django.apps import apps

    return apps.get_app_config("mvtune")

from django.contrib import admin

from mvtune.models import RecommendedIndex, TuningRun


class RecommendedIndexInline(admin.TabularInline):
    extra: int = 0
    model = RecommendedIndex


@admin.register(TuningRun)
class TuningRunAdmin(admin.ModelAdmin):
    list_display = (
        "name",
        "dataset",
        "workload_cost",
        "per_column_cost",
        "storage_used",
        "storage_budget",
        "created",
    )
    list_filter = ("storage_unit",)
    search_fields = ("name", "dataset", "workload")
    readonly_fields = ("created",)
    inlines = [RecommendedIndexInline]


@admin.register(RecommendedIndex)
class RecommendedIndexAdmin(admin.ModelAdmin):
    list_display = ("__str__", "dim", "run")
    list_filter = ("run",)

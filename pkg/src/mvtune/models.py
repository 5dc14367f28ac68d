import typing as T

from django.db import models, transaction
from django.utils.translation import gettext_lazy as _


class TuningRunQueryset(models.QuerySet):
    def best_for(self, dataset: str) -> T.Optional["TuningRun"]:
        """
        Returns the stored run with the lowest estimated workload cost for the given
        dataset path, or None if no run was saved for it.
        """
        return self.filter(dataset=dataset).order_by("workload_cost", "pk").first()

    def create_from_report(
        self, name: str, dataset: str, workload: str, report: T.Mapping[str, T.Any]
    ) -> "TuningRun":
        """
        Stores a tuning report (as written by ``mvtune_tune``) together with one
        RecommendedIndex row per index of the tuned configuration.
        """
        tuned = report["tuned"]
        baselines = report.get("baseline_costs", {})
        dims = {int(c["id"]): int(c["dim"]) for c in report.get("columns", [])}
        with transaction.atomic():
            run = self.create(
                name=name,
                dataset=dataset,
                workload=workload,
                workload_cost=tuned["workload_cost"],
                per_column_cost=baselines.get("per-column"),
                per_query_cost=baselines.get("per-query"),
                storage_used=tuned["storage"]["used"],
                storage_budget=tuned["storage"]["budget"],
                storage_unit=tuned["storage"]["unit"],
                recall_threshold=report["recall_threshold"],
                report=report,
            )
            RecommendedIndex.objects.bulk_create(
                RecommendedIndex(
                    run=run,
                    columns=",".join(str(i) for i in sorted(vid)),
                    dim=sum(dims.get(i, 0) for i in vid),
                )
                for vid in tuned["config"]
            )
        return run


class TuningRun(models.Model):
    """
    A saved tuning result: the recommended configuration, its estimated cost next to
    the baselines, and the full JSON report it was created from.
    """

    name = models.CharField(_("name"), max_length=100, unique=True)
    dataset = models.CharField(_("dataset"), max_length=500)
    workload = models.CharField(_("workload"), max_length=500)
    created = models.DateTimeField(_("created"), auto_now_add=True)
    workload_cost = models.FloatField(_("workload cost"))
    per_column_cost = models.FloatField(_("per-column cost"), null=True, blank=True)
    per_query_cost = models.FloatField(_("per-query cost"), null=True, blank=True)
    storage_used = models.FloatField(_("storage used"))
    storage_budget = models.FloatField(_("storage budget"))
    storage_unit = models.CharField(
        _("storage unit"), max_length=20, default="index-count"
    )
    recall_threshold = models.FloatField(_("recall threshold"))
    report = models.JSONField(_("report"), default=dict, blank=True)

    objects = TuningRunQueryset.as_manager()

    class Meta:
        base_manager_name = "objects"
        ordering = ("-created", "-pk")
        verbose_name = _("tuning run")
        verbose_name_plural = _("tuning runs")

    def __str__(self):
        return f"{self.name} ({self.dataset})"

    @property
    def speedup(self) -> T.Optional[float]:
        """Estimated per-column cost over tuned cost."""
        if self.per_column_cost is None or not self.workload_cost:
            return None
        return self.per_column_cost / self.workload_cost


class RecommendedIndex(models.Model):
    run = models.ForeignKey(
        TuningRun,
        verbose_name=_("tuning run"),
        on_delete=models.CASCADE,
        related_name="indexes",
    )
    columns = models.CharField(
        _("columns"), max_length=200, help_text=_("Comma-separated column ids.")
    )
    dim = models.PositiveIntegerField(_("dimension"), default=0)

    class Meta:
        unique_together = ("run", "columns")
        verbose_name = _("recommended index")
        verbose_name_plural = _("recommended indexes")

    def __str__(self):
        return "x^{" + self.columns + "}"

    @property
    def column_ids(self) -> T.List[int]:
        return [int(i) for i in self.columns.split(",") if i]

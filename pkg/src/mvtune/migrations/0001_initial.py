# Generated by Django 5.0.7 on 2026-10-19 09:12

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):
    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="TuningRun",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                (
                    "name",
                    models.CharField(max_length=100, unique=True, verbose_name="name"),
                ),
                ("dataset", models.CharField(max_length=500, verbose_name="dataset")),
                ("workload", models.CharField(max_length=500, verbose_name="workload")),
                (
                    "created",
                    models.DateTimeField(auto_now_add=True, verbose_name="created"),
                ),
                ("workload_cost", models.FloatField(verbose_name="workload cost")),
                (
                    "per_column_cost",
                    models.FloatField(
                        blank=True, null=True, verbose_name="per-column cost"
                    ),
                ),
                (
                    "per_query_cost",
                    models.FloatField(
                        blank=True, null=True, verbose_name="per-query cost"
                    ),
                ),
                ("storage_used", models.FloatField(verbose_name="storage used")),
                ("storage_budget", models.FloatField(verbose_name="storage budget")),
                (
                    "storage_unit",
                    models.CharField(
                        default="index-count",
                        max_length=20,
                        verbose_name="storage unit",
                    ),
                ),
                ("recall_threshold", models.FloatField(verbose_name="recall threshold")),
                (
                    "report",
                    models.JSONField(blank=True, default=dict, verbose_name="report"),
                ),
            ],
            options={
                "verbose_name": "tuning run",
                "verbose_name_plural": "tuning runs",
                "ordering": ("-created", "-pk"),
                "base_manager_name": "objects",
            },
        ),
        migrations.CreateModel(
            name="RecommendedIndex",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                (
                    "columns",
                    models.CharField(
                        help_text="Comma-separated column ids.",
                        max_length=200,
                        verbose_name="columns",
                    ),
                ),
                (
                    "dim",
                    models.PositiveIntegerField(default=0, verbose_name="dimension"),
                ),
                (
                    "run",
                    models.ForeignKey(
                        on_delete=django.db.models.deletion.CASCADE,
                        related_name="indexes",
                        to="mvtune.tuningrun",
                        verbose_name="tuning run",
                    ),
                ),
            ],
            options={
                "verbose_name": "recommended index",
                "verbose_name_plural": "recommended indexes",
                "unique_together": {("run", "columns")},
            },
        ),
    ]

"""Per-series OLS forecasts for hierarchical count data, reconciled with a
shrinkage trace-minimisation map, with bootstrap intervals and anomaly flags."""
from __future__ import annotations

__version__ = "0.1.0"

from .anomaly import AnomalyRecord, HolidayCalendar, detect, run_detection, summarize_most_frequent, tabulate, taiwan_calendar
from .bootstrap import IntervalSet, modified_residuals, percentile_intervals, sample_paths
from .design import DesignConfig, build_design
from .evaluate import PipelineConfig, plan_blocked_cv, rmse, run_pipeline, run_split, seasonal_naive
from .hierarchy import StructureSpec, SummingMatrix, aggregate, build_summing_matrix, coherence_residual
from .ingest import SeriesCollection, aggregate_hourly, filter_degenerate, read_dataset, write_dataset
from .ols import FitResult, fit, predict_recursive
from .reconcile import build_map, estimate_shrinkage, reconcile_paths, reconcile_points
from .synthetic import Surge, demo_structure, generate_synthetic, plan_surges, taiwan_like_structure

__all__ = [
    "AnomalyRecord", "Surge", "DesignConfig", "FitResult", "HolidayCalendar", "IntervalSet", "PipelineConfig",
    "SeriesCollection", "StructureSpec", "SummingMatrix", "aggregate", "aggregate_hourly", "build_design",
    "build_map", "build_summing_matrix", "coherence_residual", "demo_structure", "detect", "estimate_shrinkage", "filter_degenerate",
    "fit", "generate_synthetic", "modified_residuals", "percentile_intervals", "plan_blocked_cv",
    "plan_surges", "predict_recursive", "read_dataset", "reconcile_paths", "reconcile_points", "rmse", "run_detection", "run_pipeline", "run_split",
    "sample_paths", "seasonal_naive", "summarize_most_frequent", "tabulate", "taiwan_calendar", "taiwan_like_structure", "write_dataset",
]

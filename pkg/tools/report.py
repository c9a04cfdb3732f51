"""CSV tables written by the experiment commands.

Numbers are formatted with four decimals so tables diff cleanly between runs.
Columns holding wall-clock time are listed in :data:`TIMING_COLUMNS`.
"""
import csv
import logging
import os
from typing import Any, Dict, Iterable, List, Optional, Sequence

from .analysis import FeatureReport
from .defenses import DefenseSpec
from .distill import RunRecord, is_effective

logger = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "defense",
    "h",
    "k_ratio",
    "teacher_psnr",
    "teacher_ssim",
    "student_psnr",
    "student_ssim",
    "delta_psnr_vs_clean_kd",
    "mean_energy",
    "wall_ms_per_image",
)
SWEEP_COLUMNS = ("h", "k_ratio", "student_psnr", "student_ssim", "in_studied_regime", "effective")
MIN_EFFECTIVE_COLUMNS = ("task", "h", "k_ratio", "student_psnr", "student_ssim", "found")
STAGE_COLUMNS = ("stage", "student_psnr", "student_ssim", "delta_psnr_vs_clean_kd", "mean_energy")
BENCH_COLUMNS = ("defense", "size", "median_ms", "transient_bytes")
FEATURE_COLUMNS = (
    "tap",
    "path",
    "energy_total",
    "high_frequency_fraction",
    "value_min",
    "value_max",
    "max_abs",
)
TIMING_COLUMNS = ("wall_ms_per_image", "median_ms")

Row = Dict[str, Any]


def fmt(value: Any) -> str:
    """Fixed four-decimal formatting; empty cell for missing values."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def write_csv(path: str, columns: Sequence[str], rows: Iterable[Row]) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)

    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)

        for row in rows:
            writer.writerow([fmt(row.get(c)) for c in columns])

    logger.info("table written path=%s", path)
    return path


def read_csv(path: str) -> List[Dict[str, str]]:
    with open(path, "r", newline="") as f:
        return list(csv.DictReader(f))


def _asvp_params(record: RunRecord) -> Dict[str, Optional[float]]:
    spec = DefenseSpec.from_dict(record.config["train"]["defense"])

    if spec.kind != "asvp":
        return {"h": None, "k_ratio": None}

    cfg = spec.asvp_config()
    return {"h": cfg.h, "k_ratio": cfg.k_ratio}


def grid_row(record: RunRecord, clean_kd: RunRecord, images_seen: int) -> Row:
    """One ReportTable row for a distilled student.

    Wall time is the whole cell divided by the training images it processed.
    """
    teacher = record.teacher_metrics or clean_kd.teacher_metrics
    delta = record.metrics.psnr_db - clean_kd.metrics.psnr_db

    return {
        "defense": record.label,
        **_asvp_params(record),
        "teacher_psnr": teacher.psnr_db if teacher else None,
        "teacher_ssim": teacher.ssim if teacher else None,
        "student_psnr": record.metrics.psnr_db,
        "student_ssim": record.metrics.ssim,
        "delta_psnr_vs_clean_kd": 0.0 if record is clean_kd else delta,
        "mean_energy": record.mean_energy,
        "wall_ms_per_image": 1000.0 * record.wall_seconds / max(images_seen, 1),
    }


def sweep_rows(records: Sequence[RunRecord], clean_kd: RunRecord) -> List[Row]:
    rows = []

    for record in records:
        rows.append(
            {
                **_asvp_params(record),
                "student_psnr": record.metrics.psnr_db,
                "student_ssim": record.metrics.ssim,
                "in_studied_regime": record.in_studied_regime,
                "effective": is_effective(clean_kd.metrics, record.metrics),
            }
        )

    return rows


def min_effective_row(records: Sequence[RunRecord], clean_kd: RunRecord, task: str) -> Row:
    """Weakest effective sweep cell: smallest h, then smallest k_ratio.

    ``found`` is false, with empty h and k_ratio, when no cell is effective.
    """
    effective = [r for r in records if is_effective(clean_kd.metrics, r.metrics)]

    if not effective:
        return {"task": task, "found": False}

    def order(record: RunRecord):
        p = _asvp_params(record)
        return (p["h"], p["k_ratio"])

    best = min(effective, key=order)
    return {
        "task": task,
        **_asvp_params(best),
        "student_psnr": best.metrics.psnr_db,
        "student_ssim": best.metrics.ssim,
        "found": True,
    }


def write_sweep_pivot(path: str, records: Sequence[RunRecord]) -> str:
    """Student SSIM with one row per k_ratio and one column per h."""
    cells = {}
    for record in records:
        p = _asvp_params(record)
        cells[(p["k_ratio"], p["h"])] = record.metrics.ssim

    ks = sorted({k for k, _ in cells})
    hs = sorted({h for _, h in cells})

    columns = ["k_ratio"] + [f"h={fmt(h)}" for h in hs]
    rows = [
        {"k_ratio": k, **{f"h={fmt(h)}": cells.get((k, h)) for h in hs}} for k in ks
    ]
    return write_csv(path, columns, rows)


def stage_rows(records: Sequence[RunRecord]) -> List[Row]:
    """Stage table; deltas are against the ``stage-none`` row."""
    baseline = next((r for r in records if r.label == "stage-none"), None)
    rows = []

    for record in records:
        delta = None
        if baseline is not None:
            delta = record.metrics.psnr_db - baseline.metrics.psnr_db

        rows.append(
            {
                "stage": record.label[len("stage-"):],
                "student_psnr": record.metrics.psnr_db,
                "student_ssim": record.metrics.ssim,
                "delta_psnr_vs_clean_kd": delta,
                "mean_energy": record.mean_energy,
            }
        )

    return rows


def feature_row(tap: int, path: str, report: FeatureReport) -> Row:
    return {
        "tap": tap,
        "path": path,
        "energy_total": float(report.energy_map.sum()),
        "high_frequency_fraction": report.high_frequency_fraction,
        "value_min": report.value_min,
        "value_max": report.value_max,
        "max_abs": report.max_abs,
    }


def write_radial(path: str, clean: FeatureReport, defended: FeatureReport) -> str:
    rows = [
        {
            "radius": r,
            "clean_magnitude": float(clean.radial_profile[r]),
            "defended_magnitude": float(defended.radial_profile[r]),
            "clean_power": float(clean.radial_power[r]),
            "defended_power": float(defended.radial_power[r]),
        }
        for r in range(clean.radial_profile.shape[0])
    ]
    columns = ("radius", "clean_magnitude", "defended_magnitude", "clean_power", "defended_power")
    return write_csv(path, columns, rows)


def write_histogram(path: str, report: FeatureReport) -> str:
    rows = [
        {
            "bin_low": float(report.histogram_edges[i]),
            "bin_high": float(report.histogram_edges[i + 1]),
            "count": int(report.histogram[i]),
        }
        for i in range(len(report.histogram))
    ]
    return write_csv(path, ("bin_low", "bin_high", "count"), rows)

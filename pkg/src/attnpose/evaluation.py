"""Median-error metrics, cross-method rank aggregation, baseline comparison,
and attention-heatmap export.

Rank aggregation works on exact decimal arithmetic (``fractions.Fraction``)
so that reference tables transcribed from the literature reproduce their
published rankings deterministically. Ranking optionally compares scene-mean
errors on a fixed resolution grid (round half up); the shipped reference
tables use 0.01 m for position and 0.05 degrees for orientation, which is
the comparison resolution implied by the published tie structure. Ties share
the smallest rank and subsequent ranks are skipped (competition ranking,
matching the published tables). The final rank orders methods by the mean of
their two metric ranks.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .geometry import Pose, angular_error_deg
from .imageops import bilinear_resize, save_image_gray

__all__ = [
    "EvalRecord",
    "MethodTable",
    "RankRow",
    "BaselineComparison",
    "HeatmapArtifact",
    "scene_medians",
    "evaluate_dataset",
    "aggregate_and_rank",
    "baseline_comparison",
    "export_heatmap",
    "load_method_tables",
    "write_results_csv",
    "PAPER_POSITION_RESOLUTION",
    "PAPER_ORIENTATION_RESOLUTION",
]

# comparison grids of the shipped reference tables (see module docstring)
PAPER_POSITION_RESOLUTION = Fraction(1, 100)
PAPER_ORIENTATION_RESOLUTION = Fraction(1, 20)


@dataclass
class EvalRecord:
    image_id: str
    predicted: Pose
    ground_truth: Pose

    def __post_init__(self):
        norm = np.linalg.norm(self.ground_truth.q)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"ground-truth quaternion of {self.image_id} has norm {norm}")

    def position_error(self) -> float:
        return float(np.linalg.norm(self.ground_truth.x - self.predicted.x))

    def orientation_error_deg(self) -> float:
        return angular_error_deg(self.predicted.q, self.ground_truth.q)


def scene_medians(records: list[EvalRecord]) -> tuple[float, float]:
    """Median position error (world units) and angular error (degrees).

    Even-count medians average the two central order statistics.
    """
    if not records:
        raise ValueError("cannot take medians of an empty record list")
    pos = np.median([r.position_error() for r in records])
    ang = np.median([r.orientation_error_deg() for r in records])
    return float(pos), float(ang)


def evaluate_dataset(model, dataset) -> list[EvalRecord]:
    """Eval-mode predictions for every record of a pose dataset."""
    records = []
    for i in range(len(dataset)):
        rec = dataset[i]
        pose, _, _ = model.predict(dataset.image(i))
        records.append(EvalRecord(rec.image_id, predicted=pose, ground_truth=rec.pose))
    return records


# ---- method tables and ranking --------------------------------------------------


def _fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value)
    return Fraction(float(value))


@dataclass
class MethodTable:
    """Per-scene (position, orientation) medians for one method."""

    method: str
    scenes: dict[str, tuple[Fraction, Fraction]]

    def __post_init__(self):
        self.scenes = {k: (_fraction(p), _fraction(a)) for k, (p, a) in self.scenes.items()}
        for scene, (p, a) in self.scenes.items():
            if p < 0 or a < 0:
                raise ValueError(f"{self.method}/{scene}: negative error entry")


def load_method_tables(path) -> list[MethodTable]:
    """Read a results CSV (scene,method,pos_median_m,ang_median_deg) keeping
    decimal values exact."""
    by_method: dict[str, dict[str, tuple[Fraction, Fraction]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"scene", "method", "pos_median_m", "ang_median_deg"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns {sorted(required)}")
        for row in reader:
            by_method.setdefault(row["method"], {})[row["scene"]] = (
                Fraction(row["pos_median_m"]),
                Fraction(row["ang_median_deg"]),
            )
    return [MethodTable(m, scenes) for m, scenes in by_method.items()]


def write_results_csv(path, rows: list[tuple[str, str, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene", "method", "pos_median_m", "ang_median_deg"])
        writer.writerows(rows)


@dataclass
class RankRow:
    method: str
    avg_position: float
    avg_orientation: float
    position_rank: int
    orientation_rank: int
    final_rank: int


def _quantize(value: Fraction, resolution: Fraction | None) -> Fraction:
    if resolution is None:
        return value
    return (value / resolution + Fraction(1, 2)).__floor__() * resolution


def _competition_ranks(values: list) -> list[int]:
    """1-based ranks, ties share the smallest rank, later ranks skip."""
    return [1 + sum(1 for other in values if other < v) for v in values]


def aggregate_and_rank(tables: list[MethodTable],
                       position_resolution: Fraction | None = None,
                       orientation_resolution: Fraction | None = None) -> list[RankRow]:
    """Scene-mean errors, per-metric ranks, and the final rank per method.

    With no resolution arguments, values are compared exactly, which makes
    the final ordering invariant to any positive rescaling of one metric.
    """
    if not tables:
        raise ValueError("no method tables given")
    scene_set = set(tables[0].scenes)
    for t in tables[1:]:
        if set(t.scenes) != scene_set:
            raise ValueError(
                f"method {t.method} covers scenes {sorted(t.scenes)}, expected {sorted(scene_set)}")
    n = len(scene_set)
    avg_pos = [sum(p for p, _ in t.scenes.values()) / n for t in tables]
    avg_ang = [sum(a for _, a in t.scenes.values()) / n for t in tables]
    pos_ranks = _competition_ranks([_quantize(v, position_resolution) for v in avg_pos])
    ang_ranks = _competition_ranks([_quantize(v, orientation_resolution) for v in avg_ang])
    mean_ranks = [Fraction(p + a, 2) for p, a in zip(pos_ranks, ang_ranks)]
    final_ranks = _competition_ranks(mean_ranks)
    rows = [
        RankRow(t.method, float(avg_pos[i]), float(avg_ang[i]), pos_ranks[i], ang_ranks[i], final_ranks[i])
        for i, t in enumerate(tables)
    ]
    rows.sort(key=lambda r: (r.final_rank, r.position_rank, r.method))
    return rows


@dataclass
class BaselineComparison:
    """Per-scene deltas against a baseline and under-the-bar counts.

    ``cells_under/cells_total`` count every scene-metric cell strictly below
    the baseline. ``results_under/results_total`` additionally count the
    dataset-average pair as one result (under iff both metric means are
    strictly under), the counting used alongside the shipped reference data.
    """

    deltas: dict[str, tuple[float, float]]
    cells_under: int
    cells_total: int
    results_under: int
    results_total: int


def baseline_comparison(method: MethodTable, baseline: MethodTable) -> BaselineComparison:
    if set(method.scenes) != set(baseline.scenes):
        raise ValueError(
            f"scene sets differ: {sorted(method.scenes)} vs {sorted(baseline.scenes)}")
    deltas = {}
    under = 0
    for scene, (p, a) in method.scenes.items():
        bp, ba = baseline.scenes[scene]
        deltas[scene] = (float(p - bp), float(a - ba))
        under += int(p < bp) + int(a < ba)
    total = 2 * len(method.scenes)
    n = len(method.scenes)
    mean_under = (
        sum(p for p, _ in method.scenes.values()) / n < sum(p for p, _ in baseline.scenes.values()) / n
        and sum(a for _, a in method.scenes.values()) / n < sum(a for _, a in baseline.scenes.values()) / n
    )
    return BaselineComparison(
        deltas=deltas,
        cells_under=under,
        cells_total=total,
        results_under=under + int(mean_under),
        results_total=total + 1,
    )


# ---- heatmaps ------------------------------------------------------------------------


@dataclass
class HeatmapArtifact:
    branch: str
    raw: np.ndarray
    upsampled: np.ndarray
    degenerate: bool


def export_heatmap(heat: np.ndarray, target_size: int = 224, out_dir=None,
                   image_id: str = "image", branch: str = "position") -> HeatmapArtifact:
    """Upsample token-attention weights bilinearly and min-max normalize.

    All-equal weights cannot be normalized; they export as a flat 0.5 map
    with a warning. When ``out_dir`` is given, writes
    ``{image_id}.{branch}.png`` plus a CSV of the raw weights.
    """
    raw = np.asarray(heat, dtype=np.float64)
    if raw.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {raw.shape}")
    if (raw < 0).any():
        raise ValueError("heatmap weights must be nonnegative")
    up = bilinear_resize(raw, target_size, target_size)
    lo, hi = up.min(), up.max()
    degenerate = hi - lo <= 0.0
    if degenerate:
        warnings.warn(f"heatmap for {image_id}.{branch} is flat; exporting a 0.5 map")
        up = np.full_like(up, 0.5)
    else:
        up = (up - lo) / (hi - lo)
    artifact = HeatmapArtifact(branch=branch, raw=raw, upsampled=up, degenerate=degenerate)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_image_gray(out_dir / f"{image_id}.{branch}.png", up)
        np.savetxt(out_dir / f"{image_id}.{branch}.csv", raw, delimiter=",")
    return artifact

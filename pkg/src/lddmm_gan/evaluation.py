"""Registration metrics (Dice, label propagation, Jacobian positivity) and reports."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import grid as G
from .data import export_pgm, to_uint8
from .energy import mse, mse_rel
from .errors import ShapeError, UndefinedMetricError

REPORT_COLUMNS = ["pair", "source", "target", "mse", "mse_rel", "dice_annulus", "dice_interior",
                  "jac_pos", "runtime_s"]


def dice(A, B, label: int) -> float:
    """``2|A_k & B_k| / (|A_k| + |B_k|)`` for label ``k``."""
    A, B = np.asarray(A), np.asarray(B)
    if A.shape != B.shape:
        raise ShapeError(f"label images {A.shape} and {B.shape} differ")
    a, b = A == label, B == label
    den = int(a.sum()) + int(b.sum())
    if den == 0:
        raise UndefinedMetricError(f"label {label} is absent from both images")
    return 2.0 * int((a & b).sum()) / den


def warp_labels(labels, phi_inv) -> np.ndarray:
    """Nearest-neighbour pull-back of a label image through ``x + u(x)``."""
    labels = np.asarray(labels)
    if tuple(labels.shape) != tuple(phi_inv.shape[:-1]):
        raise ShapeError(f"labels {labels.shape} do not match displacement grid {phi_inv.shape[:-1]}")
    grid = G.grid_of(phi_inv, vector=True)
    ext = np.asarray(grid.extents)
    q = (G.identity_coords(grid) + phi_inv) * ext
    idx = np.clip(np.floor(q + 0.5), 0, ext - 1).astype(np.intp)
    return labels[tuple(idx[..., a] for a in range(grid.dims))]


def jacobian_positivity(phi_inv) -> float:
    """Fraction of interior nodes (one-node boundary ring excluded) with ``det > 0``."""
    det = G.jacobian_determinant(np.asarray(phi_inv, dtype=np.float64))
    inner = G.interior(det, det.ndim)
    return float(np.mean(inner > 0))


@dataclass
class PairResult:
    name: str
    source: np.ndarray
    target: np.ndarray
    warped: np.ndarray
    displacement: np.ndarray
    velocity: np.ndarray
    runtime_s: float
    source_labels: np.ndarray | None = None
    target_labels: np.ndarray | None = None
    source_path: str = ""
    target_path: str = ""


def pair_metrics(r: PairResult) -> dict:
    try:
        rel = mse_rel(r.source, r.target, r.warped)
    except UndefinedMetricError:
        rel = float("nan")
    row = {"pair": r.name, "source": r.source_path, "target": r.target_path,
           "mse": mse(r.target, r.warped), "mse_rel": rel,
           "dice_annulus": "", "dice_interior": "",
           "jac_pos": jacobian_positivity(r.displacement), "runtime_s": r.runtime_s}
    if r.source_labels is not None and r.target_labels is not None:
        warped_labels = warp_labels(r.source_labels, r.displacement)
        for key, k in (("dice_annulus", 1), ("dice_interior", 2)):
            try:
                row[key] = dice(warped_labels, r.target_labels, k)
            except UndefinedMetricError:
                row[key] = float("nan")
    return row


def panel(r: PairResult) -> np.ndarray:
    """Source | target | warped | |warped - target| | |v|, side by side, 8-bit."""
    tiles = [r.source, r.target, r.warped, np.abs(r.warped - r.target),
             np.linalg.norm(r.velocity, axis=-1)]
    gap = np.zeros((r.source.shape[0], 2), dtype=np.uint8)
    parts = []
    for t in tiles:
        parts += [to_uint8(t), gap]
    return np.concatenate(parts[:-1], axis=1)


def report(results: list[PairResult], out_dir, png: bool = True) -> Path:
    """Write ``metrics.csv`` and one panel image per 2D pair; returns the CSV path."""
    if not results:
        raise ValueError("report needs at least one registered pair")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for r in results:
            writer.writerow(pair_metrics(r))
            if r.source.ndim == 2:
                img = panel(r)
                export_pgm(img, out_dir / f"{r.name}_panel.pgm")
                if png:
                    from PIL import Image
                    Image.fromarray(img).save(out_dir / f"{r.name}_panel.png")
    return csv_path

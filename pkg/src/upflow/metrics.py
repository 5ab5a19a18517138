"""Displacement evaluation: end-point error and flow accuracy.

Predicted and reference clouds rarely share particle counts, so each
reference particle is matched to its nearest predicted particle before the
displacement vectors are compared.
"""

from __future__ import annotations

import numpy as np

from .particles import HashGrid


def _match_cell(positions: np.ndarray) -> float:
    span = float(np.max(np.ptp(positions, axis=0))) if len(positions) > 1 else 1.0
    n = max(len(positions), 1)
    return max(span / max(n ** (1.0 / 3.0), 1.0), 1e-9)


def match_nearest(pred_positions: np.ndarray, ref_positions: np.ndarray) -> np.ndarray:
    """For each reference particle, the index of the nearest predicted one."""
    pred_positions = np.asarray(pred_positions, dtype=np.float64).reshape(-1, 3)
    ref_positions = np.asarray(ref_positions, dtype=np.float64).reshape(-1, 3)
    if len(pred_positions) == 0:
        raise ValueError("cannot match against an empty predicted set")
    hg = HashGrid(pred_positions, _match_cell(pred_positions))
    return np.array([hg.query_nearest(q) for q in ref_positions], dtype=np.int64)


def epe(pred_positions, pred_displacements, ref_positions, ref_displacements,
        exclude_static: bool = False, static_threshold: float = 1e-8) -> float:
    """Mean L2 distance between matched displacement vectors.

    With `exclude_static`, reference particles whose own displacement
    magnitude is at most `static_threshold` are left out of the mean.
    """
    pred_displacements = np.asarray(pred_displacements, dtype=np.float64).reshape(-1, 3)
    ref_displacements = np.asarray(ref_displacements, dtype=np.float64).reshape(-1, 3)
    keep = np.ones(len(ref_displacements), dtype=bool)
    if exclude_static:
        keep = np.linalg.norm(ref_displacements, axis=1) > static_threshold
        if not keep.any():
            return 0.0
    m = match_nearest(pred_positions, np.asarray(ref_positions).reshape(-1, 3)[keep])
    err = np.linalg.norm(pred_displacements[m] - ref_displacements[keep], axis=1)
    return float(err.mean())


def flow_accuracy(pred_positions, pred_displacements, ref_positions,
                  ref_displacements, threshold: float = 0.1,
                  eps: float = 0.001) -> float:
    """Fraction of matched displacements with error within threshold + eps."""
    pred_displacements = np.asarray(pred_displacements, dtype=np.float64).reshape(-1, 3)
    ref_displacements = np.asarray(ref_displacements, dtype=np.float64).reshape(-1, 3)
    m = match_nearest(pred_positions, ref_positions)
    err = np.linalg.norm(pred_displacements[m] - ref_displacements, axis=1)
    return float(np.mean(err <= threshold + eps))

"""Evaluation metrics: ADE, signed directional errors and intention error rate.

Lateral errors are right-positive: the lateral unit vector is the
longitudinal one rotated clockwise by 90 degrees.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateTrajectoryError, EmptyInputError, LengthMismatchError

LATERAL = "lateral"
LONGITUDINAL = "longitudinal"

_EPS = 1e-12


@dataclass(frozen=True)
class DirectionFrame:
    u_lon: np.ndarray
    u_lat: np.ndarray


@dataclass(frozen=True)
class ErrorReport:
    ade: float
    lat_err: float
    lon_err: float
    intent_correct: bool | None = None


def _check_pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise LengthMismatchError(f"prediction {pred.shape} and truth {truth.shape} differ")
    return pred, truth


def ade(pred, truth) -> float:
    pred, truth = _check_pair(pred, truth)
    return float(np.mean(np.linalg.norm(pred - truth, axis=-1)))


def _rotate_cw(u: np.ndarray) -> np.ndarray:
    return np.stack([u[..., 1], -u[..., 0]], axis=-1)


def direction_frame(s_curr, s_next, fallback=None) -> DirectionFrame:
    """Unit heading from ``s_curr`` to ``s_next`` and its right-hand normal.

    When the two points coincide, the first moving pair of ``fallback``
    (normally the ground-truth future) supplies the heading instead.
    """
    d = np.asarray(s_next, dtype=np.float64) - np.asarray(s_curr, dtype=np.float64)
    n = np.hypot(d[0], d[1])
    if n <= _EPS:
        if fallback is None:
            raise DegenerateTrajectoryError("coincident waypoints and no fallback trajectory")
        d = _first_moving_step(np.asarray(fallback, dtype=np.float64))
        n = np.hypot(d[0], d[1])
    u_lon = d / n
    return DirectionFrame(u_lon, _rotate_cw(u_lon))


def _first_moving_step(traj: np.ndarray) -> np.ndarray:
    steps = np.diff(traj, axis=0)
    moving = np.hypot(steps[:, 0], steps[:, 1]) > _EPS
    if not moving.any():
        raise DegenerateTrajectoryError("ground-truth trajectory never moves")
    return steps[int(np.argmax(moving))]


def direction_frames(truth) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame ``(u_lon, u_lat)`` arrays of shape ``(F, 2)``.

    Frame a uses the pair (a, a+1); the last frame reuses the final pair.
    """
    truth = np.asarray(truth, dtype=np.float64)
    if len(truth) < 2:
        raise DegenerateTrajectoryError("need at least two waypoints for a heading")
    steps = np.diff(truth, axis=0)
    steps = np.concatenate([steps, steps[-1:]], axis=0)
    norms = np.hypot(steps[:, 0], steps[:, 1])
    degenerate = norms <= _EPS
    if degenerate.any():
        fb = _first_moving_step(truth)
        steps[degenerate] = fb
        norms[degenerate] = np.hypot(fb[0], fb[1])
    u_lon = steps / norms[:, None]
    return u_lon, _rotate_cw(u_lon)


def directional_errors_per_frame(pred, truth, axis: str) -> np.ndarray:
    pred, truth = _check_pair(pred, truth)
    u_lon, u_lat = direction_frames(truth)
    u = _axis_vectors(u_lon, u_lat, axis)
    return np.einsum("fi,fi->f", pred - truth, u)


def _axis_vectors(u_lon, u_lat, axis):
    if axis == LATERAL:
        return u_lat
    if axis == LONGITUDINAL:
        return u_lon
    raise ValueError(f"axis must be {LATERAL!r} or {LONGITUDINAL!r}, got {axis!r}")


def directional_error(pred, truth, axis: str) -> float:
    """Mean signed projection of the prediction error on the chosen axis."""
    return float(np.mean(directional_errors_per_frame(pred, truth, axis)))


def error_report(pred, truth, intent_correct: bool | None = None) -> ErrorReport:
    return ErrorReport(
        ade(pred, truth),
        directional_error(pred, truth, LATERAL),
        directional_error(pred, truth, LONGITUDINAL),
        intent_correct,
    )


def intention_error_rate(pred_intents: Sequence, true_intents: Sequence) -> float:
    if len(pred_intents) == 0 or len(true_intents) == 0:
        raise EmptyInputError("intention error rate needs at least one sample")
    if len(pred_intents) != len(true_intents):
        raise LengthMismatchError(f"{len(pred_intents)} predictions vs {len(true_intents)} labels")
    wrong = sum(int(p) != int(t) for p, t in zip(pred_intents, true_intents))
    return wrong / len(pred_intents)

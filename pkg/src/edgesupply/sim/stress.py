"""Server-side paging-request meter."""
from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from ..features import SessionLog
from .protocol import TRIGGERS


class QpsMeter:
    """Paging requests binned by wall-clock time (wrapped onto the horizon) and trigger."""

    def __init__(self, bin_seconds: float, horizon_seconds: float = 86400.0):
        if bin_seconds <= 0 or horizon_seconds <= 0:
            raise ValueError("bin width and horizon must be positive")
        self.bin_seconds = float(bin_seconds)
        self.horizon_seconds = float(horizon_seconds)
        self.n_bins = int(math.ceil(horizon_seconds / bin_seconds))
        self.counts = {t: np.zeros(self.n_bins, dtype=np.int64) for t in TRIGGERS}

    def add(self, t: float, trigger: str) -> None:
        b = int((t % self.horizon_seconds) // self.bin_seconds)
        self.counts[trigger][min(b, self.n_bins - 1)] += 1

    def series(self, trigger: str | None = None) -> np.ndarray:
        if trigger is None:
            return sum(self.counts.values())
        return self.counts[trigger].copy()

    def total(self) -> int:
        return int(self.series().sum())

    def bin_starts(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.bin_seconds


def stress_curve(logs: Iterable[SessionLog], bin_seconds: float, horizon_seconds: float = 86400.0) -> QpsMeter:
    """Bin every page_request event; logs are merged in session-id order."""
    meter = QpsMeter(bin_seconds, horizon_seconds)
    for log in sorted(logs, key=lambda g: g.session_id):
        for ev in log.events:
            if ev.kind == "page_request":
                meter.add(ev.t, ev.trigger)
    return meter


def relative_deviation(curve: Sequence[float], reference: Sequence[float]) -> np.ndarray:
    """Per-bin ``|curve - reference| / reference``; empty reference bins count 0 if both are empty, else inf."""
    a = np.asarray(curve, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    out = np.zeros_like(b)
    nz = b > 0
    out[nz] = np.abs(a[nz] - b[nz]) / b[nz]
    out[~nz & (a > 0)] = np.inf
    return out


def max_relative_deviation(curve, reference) -> float:
    dev = relative_deviation(curve, reference)
    return float(dev.max()) if dev.size else 0.0

"""Histogram style keys describing the intensity appearance of a target volume."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from bridgesynth.volume import HU_MAX, HU_MIN, NORMALIZED, Volume

DEFAULT_BINS = 256


def hu_to_unit(hu: float) -> float:
    return (hu - HU_MIN) / (HU_MAX - HU_MIN)


# (name, lower, upper) in normalized units
WINDOWS = (
    ("full", 0.0, 1.0),
    ("soft_tissue", hu_to_unit(-160.0), hu_to_unit(240.0)),
    ("vessel", hu_to_unit(0.0), hu_to_unit(500.0)),
)


@dataclass(frozen=True)
class StyleKey:
    histograms: np.ndarray  # (K, B), each row sums to 1
    source: str = "per-volume-ground-truth"

    def __post_init__(self):
        h = np.asarray(self.histograms, dtype=np.float64)
        if h.ndim != 2:
            raise ValueError(f"style key must be a (K, B) array, got shape {h.shape}")
        if np.any(h < 0) or not np.allclose(h.sum(axis=1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("style key histograms must be non-negative and sum to 1")
        h = h.copy()
        h.setflags(write=False)
        object.__setattr__(self, "histograms", h)

    @property
    def K(self) -> int:
        return self.histograms.shape[0]

    @property
    def B(self) -> int:
        return self.histograms.shape[1]

    def flat(self) -> np.ndarray:
        return self.histograms.reshape(-1)

    def to_dict(self) -> dict:
        return {"source": self.source, "windows": [w[0] for w in WINDOWS[: self.K]],
                "histograms": self.histograms.tolist()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "StyleKey":
        d = json.loads(Path(path).read_text())
        return cls(np.asarray(d["histograms"], dtype=np.float64), source=d.get("source", "file"))


def window_histogram(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    """Normalized histogram of the values inside [lo, hi], rescaled onto ``bins`` equal bins."""
    inside = values[(values >= lo) & (values <= hi)]
    if inside.size == 0:
        return np.full(bins, 1.0 / bins)
    idx = np.minimum(np.floor((inside - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    return counts / counts.sum()


def compute_style_key(v: Volume | np.ndarray, bins: int = DEFAULT_BINS, K: int = 3) -> StyleKey:
    """
    Style key of a normalized volume: histograms of its non-zero voxels over the full
    range, a soft-tissue window (HU -160..240) and a vessel window (HU 0..500).
    """
    if isinstance(v, Volume):
        if v.domain != NORMALIZED:
            raise ValueError("style keys are computed on normalized volumes")
        data = v.data
    else:
        data = np.asarray(v)
    values = data[data != 0].astype(np.float64)
    hists = [window_histogram(values, lo, hi, bins) for _, lo, hi in WINDOWS[:K]]
    return StyleKey(np.stack(hists))


def average_style_keys(keys: Sequence[StyleKey]) -> StyleKey:
    if not keys:
        raise ValueError("cannot average an empty list of style keys")
    shape = keys[0].histograms.shape
    for k in keys:
        if k.histograms.shape != shape:
            raise ValueError(f"style key shape mismatch: {k.histograms.shape} vs {shape}")
    mean = np.mean([k.histograms for k in keys], axis=0)
    # re-normalize to absorb float drift
    return StyleKey(mean / mean.sum(axis=1, keepdims=True), source="training-average")

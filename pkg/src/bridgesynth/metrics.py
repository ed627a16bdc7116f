"""
Full-volume NRMSE, PSNR and SSIM, plus variants restricted to non-zero voxels.

SSIM is 2D per axial slice with an 11x11 Gaussian window (sigma 1.5), with
symmetric boundary reflection, and the full per-pixel map is averaged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from scipy import ndimage

from bridgesynth.volume import Volume

WIN_SIZE = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03

METRIC_NAMES = ("nrmse", "psnr", "ssim", "nrmse_nz", "psnr_nz", "ssim_nz")


class MetricError(ValueError):
    pass


def _arrays(gt, pred) -> Tuple[np.ndarray, np.ndarray]:
    a = (gt.data if isinstance(gt, Volume) else np.asarray(gt)).astype(np.float64)
    b = (pred.data if isinstance(pred, Volume) else np.asarray(pred)).astype(np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _psnr_from_mse(mse: float, data_range: float) -> float:
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def _nrmse_from(a: np.ndarray, b: np.ndarray) -> float:
    rng = a.max() - a.min()
    if rng == 0:
        raise MetricError("NRMSE undefined: ground truth is constant")
    return math.sqrt(np.mean((a - b) ** 2)) / rng


def psnr(gt, pred, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE); identical inputs give +inf."""
    if data_range <= 0:
        raise MetricError("data range must be positive")
    a, b = _arrays(gt, pred)
    return _psnr_from_mse(float(np.mean((a - b) ** 2)), data_range)


def nrmse(gt, pred) -> float:
    """RMSE divided by the ground-truth range max(gt) - min(gt)."""
    a, b = _arrays(gt, pred)
    return _nrmse_from(a, b)


def gaussian_window(size: int = WIN_SIZE, sigma: float = SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(gt, pred, data_range: float = 1.0) -> np.ndarray:
    """Per-voxel SSIM, computed slice by slice along axis 0."""
    a, b = _arrays(gt, pred)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < WIN_SIZE or a.shape[-2] < WIN_SIZE:
        raise MetricError(f"in-plane size {a.shape[-2:]} smaller than the {WIN_SIZE}x{WIN_SIZE} window")
    w = gaussian_window()[None]  # no mixing across slices
    filt = lambda x: ndimage.correlate(x, w, mode="reflect")  # noqa: E731
    mu_a, mu_b = filt(a), filt(b)
    s_aa = filt(a * a) - mu_a ** 2
    s_bb = filt(b * b) - mu_b ** 2
    s_ab = filt(a * b) - mu_a * mu_b
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (s_aa + s_bb + c2)
    return num / den


def ssim(gt, pred, data_range: float = 1.0) -> float:
    m = ssim_map(gt, pred, data_range)
    return float(np.mean(m.reshape(m.shape[0], -1).mean(axis=1)))


def nz_support(a: np.ndarray, b: np.ndarray, mode: str = "union") -> np.ndarray:
    if mode == "union":
        return (a != 0) | (b != 0)
    if mode == "intersection":
        return (a != 0) & (b != 0)
    raise ValueError(f"unknown NZ mode {mode!r}")


def nz_metrics(gt, pred, data_range: float = 1.0, mode: str = "union") -> Tuple[float, float, float]:
    """(nrmse_nz, psnr_nz, ssim_nz) over voxels non-zero in the ground truth or the prediction."""
    a, b = _arrays(gt, pred)
    support = nz_support(a, b, mode)
    if not support.any():
        raise MetricError("empty non-zero support")
    sa, sb = a[support], b[support]
    mse = float(np.mean((sa - sb) ** 2))
    smap = ssim_map(a, b, data_range)
    return _nrmse_from(sa, sb), _psnr_from_mse(mse, data_range), float(smap[support].mean())


def evaluate_pair(gt, pred, data_range: float = 1.0, nz_mode: str = "union") -> Dict[str, float]:
    a, b = _arrays(gt, pred)
    out = {"nrmse": nrmse(a, b), "psnr": psnr(a, b, data_range), "ssim": ssim(a, b, data_range)}
    out["nrmse_nz"], out["psnr_nz"], out["ssim_nz"] = nz_metrics(a, b, data_range, nz_mode)
    return out


def _finite_json(x: float):
    return "inf" if x == math.inf else x


@dataclass
class MetricsReport:
    cases: List[dict] = field(default_factory=list)
    failed: List[dict] = field(default_factory=list)

    def add(self, case_id: str, values: Dict[str, float]) -> None:
        self.cases.append({"case_id": case_id, **values})

    def add_failure(self, case_id: str, reason: str) -> None:
        self.failed.append({"case_id": case_id, "error": reason})

    def aggregate(self) -> Dict[str, Dict[str, float]]:
        agg = {}
        for name in METRIC_NAMES:
            vals = np.array([c[name] for c in self.cases if name in c], dtype=np.float64)
            if vals.size == 0:
                continue
            with np.errstate(invalid="ignore"):  # inf - inf when a case is reproduced exactly
                agg[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return agg

    def mean(self, name: str) -> float:
        return self.aggregate()[name]["mean"]

    def to_dict(self) -> dict:
        fix = lambda d: {k: _finite_json(v) if isinstance(v, float) else v for k, v in d.items()}  # noqa: E731
        return {
            "cases": [fix(c) for c in self.cases],
            "failed": self.failed,
            "aggregate": {k: fix(v) for k, v in self.aggregate().items()},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def table(self) -> str:
        """Tab-separated rows: one per case plus a mean row, NZ columns after the full-volume ones."""
        header = "case_id\t" + "\t".join(n.upper().replace("_NZ", " (NZ)") for n in METRIC_NAMES)
        rows = [header]
        for c in self.cases:
            rows.append(c["case_id"] + "\t" + "\t".join(f"{c[n]:.4f}" for n in METRIC_NAMES))
        agg = self.aggregate()
        if agg:
            rows.append("mean\t" + "\t".join(f"{agg[n]['mean']:.4f}" for n in METRIC_NAMES))
        return "\n".join(rows) + "\n"

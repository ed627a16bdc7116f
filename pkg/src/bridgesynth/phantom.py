"""
Synthetic paired native/arterial phantoms.

Each case is an ellipsoidal "body" with a curved tube ("aorta") running
through every slice. The tube is a stack of discs whose centres follow a
low-frequency sinusoid in z, so neighbouring slices differ and slice
consistency matters. The two phases differ only in tube intensity and in
their independent noise draws.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from bridgesynth.preprocess import AV, DatasetManifest, Mask, build_dataset, load_cases, save_mask
from bridgesynth.volume import NORMALIZED, Volume, save_volume


@dataclass(frozen=True)
class PhantomConfig:
    shape: Tuple[int, int, int] = (16, 64, 64)
    radius_range: Tuple[float, float] = (3.0, 5.0)
    body_intensity: float = 0.25
    vessel_native: float = 0.30
    vessel_arterial: float = 0.75
    noise_sigma: float = 0.01
    seed: int = 0
    cases: int = 20
    spacing: Tuple[float, float, float] = (2.5, 0.7, 0.7)
    dilation_radius: float = 3
    ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)

    def validate(self) -> None:
        for name in ("body_intensity", "vessel_native", "vessel_arterial"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        Z, H, W = self.shape
        if min(self.shape) < 1:
            raise ValueError(f"invalid phantom shape {self.shape}")
        lo, hi = self.radius_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"invalid radius range {self.radius_range}")
        if 2 * hi + 4 > 0.6 * min(H, W):
            raise ValueError(f"tube radius {hi} too large for in-plane size {(H, W)}")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")


def case_id(index: int) -> str:
    return f"case_{index:03d}"


def centerline(cfg: PhantomConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, float]:
    """Per-slice tube centres (cy, cx) and the tube radius."""
    Z, H, W = cfg.shape
    radius = float(rng.uniform(*cfg.radius_range))
    amp = float(rng.uniform(0.05, 0.12)) * min(H, W)
    freq = float(rng.uniform(0.5, 1.0))
    phase_y, phase_x = rng.uniform(0, 2 * np.pi, 2)
    z = np.arange(Z)
    cy = (H - 1) / 2.0 + amp * np.sin(2 * np.pi * freq * z / Z + phase_y)
    cx = (W - 1) / 2.0 + amp * np.cos(2 * np.pi * freq * z / Z + phase_x)
    return cy, cx, radius


def tube_mask(shape, cy: np.ndarray, cx: np.ndarray, radius: float) -> np.ndarray:
    Z, H, W = shape
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
    return d2 <= radius ** 2


def body_mask(shape) -> np.ndarray:
    Z, H, W = shape
    zz, yy, xx = np.meshgrid(np.arange(Z), np.arange(H), np.arange(W), indexing="ij")
    az, ay, ax = 0.75 * Z, 0.42 * H, 0.45 * W
    return (((zz - (Z - 1) / 2) / az) ** 2 + ((yy - (H - 1) / 2) / ay) ** 2 + ((xx - (W - 1) / 2) / ax) ** 2) <= 1.0


def generate_phantom_pair(cfg: PhantomConfig, case_index: int) -> Tuple[Volume, Volume, Mask]:
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, case_index])
    cy, cx, radius = centerline(cfg, rng)
    tube = tube_mask(cfg.shape, cy, cx, radius)
    body = body_mask(cfg.shape) | tube
    base = np.where(body, cfg.body_intensity, 0.0)
    native = np.where(tube, cfg.vessel_native, base)
    arterial = np.where(tube, cfg.vessel_arterial, base)
    if cfg.noise_sigma > 0:
        native = native + rng.normal(0.0, cfg.noise_sigma, cfg.shape)
        arterial = arterial + rng.normal(0.0, cfg.noise_sigma, cfg.shape)
    cid = case_id(case_index)
    mk = lambda a: Volume(np.clip(a, 0.0, 1.0), spacing=cfg.spacing, domain=NORMALIZED, case_id=cid)  # noqa: E731
    return mk(native), mk(arterial), Mask(tube, spacing=cfg.spacing, label="aorta")


def generate_dataset(cfg: PhantomConfig, out_dir) -> DatasetManifest:
    """Write raw phantom bundles under ``out_dir/raw`` and preprocess them into an AV dataset."""
    cfg.validate()
    if cfg.cases < 10:
        raise ValueError(f"phantom dataset needs at least 10 cases, got {cfg.cases}")
    out_dir = Path(out_dir)
    raw = out_dir / "raw"
    listing = []
    for k in range(cfg.cases):
        native, arterial, mask = generate_phantom_pair(cfg, k)
        cid = case_id(k)
        save_volume(native, raw / f"{cid}_native")
        save_volume(arterial, raw / f"{cid}_arterial")
        save_mask(mask, raw / f"{cid}_aorta", case_id=cid)
        listing.append({"case_id": cid, "native": f"raw/{cid}_native.vol", "arterial": f"raw/{cid}_arterial.vol",
                        "masks": {"aorta": f"raw/{cid}_aorta.vol"}})
    cases_path = out_dir / "cases.json"
    cases_path.write_text(json.dumps(listing, indent=2) + "\n")
    (out_dir / "phantom.json").write_text(json.dumps(asdict(cfg), indent=2) + "\n")
    return build_dataset(load_cases(cases_path), AV, out_dir, seed=cfg.seed, ratios=cfg.ratios,
                         radius=cfg.dilation_radius)

"""
Volume data model and on-disk bundle format.

A bundle is a pair of files: ``<case>.vol`` holding the raw little-endian
float32 payload (axis order Z, H, W; axis 0 is axial) and ``<case>.json``
holding the header.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple, Union

import numpy as np

HU = "HU"
NORMALIZED = "normalized"
DOMAINS = (HU, NORMALIZED)

HU_MIN = -1000.0
HU_MAX = 1000.0

PAYLOAD_DTYPE = "f32le"

PathLike = Union[str, os.PathLike]


class VolumeError(ValueError):
    """Raised when a volume or bundle violates its invariants."""


@dataclass(frozen=True)
class Volume:
    """
    Z x H x W scalar grid with voxel spacing and intensity provenance.

    Attributes:
        data: float32 array of shape (Z, H, W); read-only after construction
        spacing: (sz, sy, sx) voxel size in mm
        domain: "HU" or "normalized" (values in [0, 1])
        case_id: opaque identifier
    """

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    domain: str = NORMALIZED
    case_id: str = ""

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeError(f"volume must be a non-empty 3D grid, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise VolumeError("volume contains non-finite intensities")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise VolumeError(f"spacing must be three positive values, got {self.spacing}")
        if self.domain not in DOMAINS:
            raise VolumeError(f"unknown intensity domain {self.domain!r}")
        if self.domain == NORMALIZED and data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise VolumeError("normalized volume has values outside [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, **changes) -> "Volume":
        """Copy of this volume with new voxel data (and optionally other fields)."""
        fields = dict(spacing=self.spacing, domain=self.domain, case_id=self.case_id)
        fields.update(changes)
        return Volume(data, **fields)

    def to_hu(self) -> np.ndarray:
        """Intensities in HU as float64; normalized values map back via HU = 2000*u - 1000."""
        if self.domain == HU:
            return self.data.astype(np.float64)
        return self.data.astype(np.float64) * (HU_MAX - HU_MIN) + HU_MIN


@dataclass(frozen=True)
class SubVolume:
    """(2N+1) slices centred on ``center_index`` of a parent volume."""

    data: np.ndarray
    center_index: int
    N: int = 1
    indices: Tuple[int, ...] = field(default=())


def _header_paths(path: PathLike) -> Tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".vol", ".json"):
        path = path.with_suffix("")
    return path.with_suffix(".vol"), path.with_suffix(".json")


def save_volume(v: Volume, path: PathLike, extra: dict | None = None) -> Path:
    """Write ``v`` as a bundle; ``path`` may name the .vol, the .json or the stem."""
    vol_path, hdr_path = _header_paths(path)
    vol_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "shape": list(v.shape),
        "spacing_mm": list(v.spacing),
        "dtype": PAYLOAD_DTYPE,
        "domain": v.domain,
        "case_id": v.case_id,
    }
    if extra:
        header.update(extra)
    vol_path.write_bytes(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
    hdr_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return vol_path


def read_header(path: PathLike) -> dict:
    _, hdr_path = _header_paths(path)
    try:
        header = json.loads(hdr_path.read_text())
    except FileNotFoundError:
        raise VolumeError(f"missing header file {hdr_path}") from None
    except json.JSONDecodeError as exc:
        raise VolumeError(f"malformed header {hdr_path}: {exc}") from None
    for key in ("shape", "spacing_mm", "dtype", "domain", "case_id"):
        if key not in header:
            raise VolumeError(f"header {hdr_path} lacks required key {key!r}")
    if header["dtype"] != PAYLOAD_DTYPE:
        raise VolumeError(f"unsupported payload dtype {header['dtype']!r}")
    shape = header["shape"]
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(n, int) and n >= 1 for n in shape)):
        raise VolumeError(f"header shape must be three positive integers, got {shape!r}")
    if not (isinstance(header["spacing_mm"], list) and len(header["spacing_mm"]) == 3):
        raise VolumeError(f"header spacing_mm must have three entries, got {header['spacing_mm']!r}")
    return header


def load_volume(path: PathLike) -> Volume:
    """Read a bundle written by :func:`save_volume`."""
    vol_path, hdr_path = _header_paths(path)
    header = read_header(hdr_path)
    Z, H, W = header["shape"]
    try:
        payload = vol_path.read_bytes()
    except FileNotFoundError:
        raise VolumeError(f"missing payload file {vol_path}") from None
    expected = Z * H * W * 4
    if len(payload) != expected:
        raise VolumeError(f"payload size mismatch for {vol_path}: expected {expected} bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(Z, H, W).astype(np.float32)
    return Volume(data, spacing=tuple(header["spacing_mm"]), domain=header["domain"], case_id=str(header["case_id"]))


def window_indices(Z: int, i: int, N: int = 1) -> np.ndarray:
    """Slice indices i-N..i+N clamped to [0, Z-1] (edge replication)."""
    if not 0 <= i < Z:
        raise IndexError(f"slice index {i} out of range for Z={Z}")
    if N < 0:
        raise ValueError("half-width N must be non-negative")
    return np.clip(np.arange(i - N, i + N + 1), 0, Z - 1)


def extract_subvolume(v: Volume | np.ndarray, i: int, N: int = 1) -> SubVolume:
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    idx = window_indices(data.shape[0], i, N)
    return SubVolume(data[idx], center_index=i, N=N, indices=tuple(int(k) for k in idx))


def stack_windows(data: np.ndarray, N: int = 1) -> np.ndarray:
    """All Z windows of ``data`` as an array of shape (Z, 2N+1, H, W)."""
    Z = data.shape[0]
    idx = np.clip(np.arange(Z)[:, None] + np.arange(-N, N + 1)[None, :], 0, Z - 1)
    return data[idx]


def apply_window(v: Volume, width: float = 350.0, level: float = 50.0) -> np.ndarray:
    """Map the HU interval [level - width/2, level + width/2] linearly onto uint8 0..255."""
    if width <= 0:
        raise ValueError(f"window width must be positive, got {width}")
    hu = v.to_hu()
    scaled = (hu - (level - width / 2.0)) / width * 255.0
    # half-up rounding
    return np.floor(np.clip(scaled, 0.0, 255.0) + 0.5).astype(np.uint8)


def export_png(v: Volume, out_dir: PathLike, width: float = 350.0, level: float = 50.0) -> list:
    """Write each windowed axial slice to ``out_dir/slice_<k>.png``."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stack = apply_window(v, width, level)
    paths = []
    for k, img in enumerate(stack):
        p = out_dir / f"slice_{k:04d}.png"
        Image.fromarray(img).save(p)
        paths.append(p)
    return paths

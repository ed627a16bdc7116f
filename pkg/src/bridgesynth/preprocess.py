"""
Preprocessing: resampling, HU clipping/normalization, mask dilation and
AV/CAV dataset assembly with a seeded train/val/test split.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from bridgesynth.volume import HU, HU_MAX, HU_MIN, NORMALIZED, Volume, VolumeError, load_volume, save_volume

logger = logging.getLogger(__name__)

AV = "AV"
CAV = "CAV"
VARIANT_ORGANS = {
    AV: ("aorta",),
    CAV: ("aorta", "myocardium", "atrium_left", "atrium_right", "ventricle_left", "ventricle_right"),
}
VARIANT_RADIUS = {AV: 10, CAV: 20}
PHASES = ("native", "arterial")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Mask:
    data: np.ndarray  # bool (Z, H, W)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    label: str = "aorta"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeError(f"mask must be 3D, got shape {data.shape}")
        if data.dtype != bool:
            if not np.all((data == 0) | (data == 1)):
                raise VolumeError("mask values must be 0 or 1")
            data = data.astype(bool)
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self):
        return self.data.shape

    def to_volume(self, case_id: str = "") -> Volume:
        return Volume(self.data.astype(np.float32), spacing=self.spacing, domain=NORMALIZED, case_id=case_id)

    @classmethod
    def from_volume(cls, v: Volume, label: str = "aorta") -> "Mask":
        return cls(v.data > 0.5, spacing=v.spacing, label=label)


def save_mask(m: Mask, path, case_id: str = "") -> Path:
    return save_volume(m.to_volume(case_id), path, extra={"label": m.label})


def load_mask(path, label: str | None = None) -> Mask:
    v = load_volume(path)
    if not np.all((v.data == 0) | (v.data == 1)):
        raise VolumeError(f"mask file {path} holds non-binary values")
    if label is None:
        hdr = json.loads(Path(path).with_suffix(".json").read_text())
        label = hdr.get("label", "aorta")
    return Mask.from_volume(v, label=label)


# ---------------------------------------------------------------------------
# intensity and geometry


def clip_normalize(v: Volume) -> Volume:
    """Clip HU to [-1000, 1000] and map affinely onto [0, 1]."""
    if v.domain != HU:
        raise ValueError(f"clip_normalize expects an HU volume, got domain {v.domain!r}")
    hu = np.clip(v.data.astype(np.float64), HU_MIN, HU_MAX)
    return v.with_data((hu - HU_MIN) / (HU_MAX - HU_MIN), domain=NORMALIZED)


def _axis_coords(n_in: int, n_out: int, sp_in: float, sp_out: float) -> np.ndarray:
    # centre-aligned: the physical centre of input and output grids coincide
    j = np.arange(n_out, dtype=np.float64)
    return (j - (n_out - 1) / 2.0) * (sp_out / sp_in) + (n_in - 1) / 2.0


def _resample_array(data: np.ndarray, spacing, target_shape, target_spacing, order: int, mode: str) -> np.ndarray:
    coords = [_axis_coords(n, m, a, b) for n, m, a, b in zip(data.shape, target_shape, spacing, target_spacing)]
    grid = np.meshgrid(*coords, indexing="ij")
    return ndimage.map_coordinates(data.astype(np.float64), grid, order=order, mode=mode, cval=0.0)


def resample_shape(shape, spacing, target_inplane: Optional[Tuple[int, int]], target_spacing) -> Tuple[int, int, int]:
    Z = int(round(shape[0] * spacing[0] / target_spacing[0]))
    if target_inplane is None:
        H = int(round(shape[1] * spacing[1] / target_spacing[1]))
        W = int(round(shape[2] * spacing[2] / target_spacing[2]))
    else:
        H, W = target_inplane
    if min(Z, H, W) < 1:
        raise ValueError(f"resampling to spacing {target_spacing} leaves a degenerate grid ({Z}, {H}, {W})")
    return Z, H, W


def resample(v: Volume, target_shape: Optional[Tuple[int, int]] = (256, 256),
             target_spacing: Tuple[float, float, float] = (2.5, 0.7, 0.7)) -> Volume:
    """
    Trilinear resampling of an intensity volume.

    The in-plane grid becomes ``target_shape``; the slice count is chosen to
    preserve the physical z-extent. Spacing is (sz, sy, sx).
    """
    target_spacing = tuple(float(s) for s in target_spacing)
    if len(target_spacing) != 3 or any(s <= 0 for s in target_spacing):
        raise ValueError(f"target spacing must be three positive values, got {target_spacing}")
    shape = resample_shape(v.shape, v.spacing, target_shape, target_spacing)
    if shape == v.shape and target_spacing == v.spacing:
        return v.with_data(v.data)
    out = _resample_array(v.data, v.spacing, shape, target_spacing, order=1, mode="nearest")
    if v.domain == NORMALIZED:
        out = np.clip(out, 0.0, 1.0)
    return v.with_data(out, spacing=target_spacing)


def resample_mask(m: Mask, target_shape: Optional[Tuple[int, int]] = (256, 256),
                  target_spacing: Tuple[float, float, float] = (2.5, 0.7, 0.7)) -> Mask:
    """Nearest-neighbour counterpart of :func:`resample` for binary masks."""
    target_spacing = tuple(float(s) for s in target_spacing)
    shape = resample_shape(m.shape, m.spacing, target_shape, target_spacing)
    if shape == m.shape and target_spacing == m.spacing:
        return m
    out = _resample_array(m.data, m.spacing, shape, target_spacing, order=0, mode="constant")
    return Mask(out > 0.5, spacing=target_spacing, label=m.label)


def dilate_mask(m: Mask | np.ndarray, radius: float) -> Mask | np.ndarray:
    """Voxels within Euclidean index-space distance ``radius`` of the mask."""
    if radius < 0:
        raise ValueError(f"dilation radius must be non-negative, got {radius}")
    data = m.data if isinstance(m, Mask) else np.asarray(m, dtype=bool)
    if not data.any():
        out = np.zeros_like(data, dtype=bool)
    else:
        dist = ndimage.distance_transform_edt(~data)
        out = dist <= radius
    if isinstance(m, Mask):
        return Mask(out, spacing=m.spacing, label=m.label)
    return out


def apply_mask(v: Volume, m: Mask | np.ndarray) -> Volume:
    """Zero every voxel outside the mask (0 is the normalized background)."""
    data = m.data if isinstance(m, Mask) else np.asarray(m, dtype=bool)
    if data.shape != v.shape:
        raise VolumeError(f"mask shape {data.shape} does not match volume shape {v.shape}")
    return v.with_data(np.where(data, v.data, 0.0))


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class CaseSource:
    """Raw inputs for one case. ``masks`` maps phase -> organ -> mask path."""

    case_id: str
    native: str
    arterial: str
    masks: Dict[str, Dict[str, str]]

    @classmethod
    def from_dict(cls, d: Mapping, base: Path | None = None) -> "CaseSource":
        def resolve(p):
            p = Path(p)
            return str(p if p.is_absolute() or base is None else base / p)

        masks = d.get("masks", {})
        if masks and not any(k in PHASES for k in masks):
            # a single organ->path mapping shared by both phases
            masks = {phase: dict(masks) for phase in PHASES}
        masks = {ph: {org: resolve(p) for org, p in organs.items()} for ph, organs in masks.items()}
        return cls(str(d["case_id"]), resolve(d["native"]), resolve(d["arterial"]), masks)


def load_cases(path) -> List[CaseSource]:
    path = Path(path)
    raw = json.loads(path.read_text())
    return [CaseSource.from_dict(d, base=path.parent) for d in raw]


def read_exclusions(path) -> List[str]:
    """One case_id per line; blank lines and '#' comments ignored."""
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(line)
    return out


def split_counts(n: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError(f"ratios must be three non-negative fractions, got {ratios}")
    total = float(sum(ratios))
    n_train = int(round(n * ratios[0] / total))
    n_val = int(round(n * ratios[1] / total))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def assign_splits(case_ids: Sequence[str], seed: int, ratios=(0.8, 0.1, 0.1)) -> Dict[str, List[str]]:
    ids = sorted(case_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[k] for k in order]
    n_train, n_val, _ = split_counts(len(ids), ratios)
    return {
        "train": shuffled[:n_train],
        "val": shuffled[n_train:n_train + n_val],
        "test": shuffled[n_train + n_val:],
    }


def no_registration(moving: Volume, fixed: Volume) -> Volume:
    """Default registration hook: inputs are assumed pre-registered."""
    return moving


@dataclass
class DatasetManifest:
    variant: str
    seed: int
    ratios: Tuple[float, float, float]
    radius: float
    entries: List[dict]
    splits: Dict[str, List[str]]
    excluded: List[str]

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "ratios": list(self.ratios),
            "radius": self.radius,
            "excluded": list(self.excluded),
            "splits": {k: list(self.splits[k]) for k in SPLITS},
            "entries": self.entries,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        base = path.parent
        entries = []
        for e in d["entries"]:
            e = dict(e)
            for k in ("native", "arterial", "mask"):
                if k in e and not Path(e[k]).is_absolute():
                    e[k] = str(base / e[k])
            entries.append(e)
        return cls(variant=d["variant"], seed=int(d["seed"]), ratios=tuple(d["ratios"]), radius=d["radius"],
                   entries=entries, splits=d["splits"], excluded=d["excluded"])

    def cases(self, split: str) -> List[dict]:
        by_id = {e["case_id"]: e for e in self.entries}
        return [by_id[c] for c in self.splits[split]]


def combined_mask(case: CaseSource, variant: str, shape) -> np.ndarray:
    """Union of native- and arterial-phase masks over all organs the variant requires."""
    organs = VARIANT_ORGANS[variant]
    union = np.zeros(shape, dtype=bool)
    for phase in PHASES:
        phase_masks = case.masks.get(phase, {})
        for organ in organs:
            if organ not in phase_masks:
                raise VolumeError(f"case {case.case_id}: missing {phase} {organ} mask")
            p = Path(phase_masks[organ])
            if not p.with_suffix(".vol").exists():
                raise VolumeError(f"case {case.case_id}: mask file {p} not found")
            m = load_mask(p, label=organ)
            if m.shape != tuple(shape):
                raise VolumeError(f"case {case.case_id}: {phase} {organ} mask shape {m.shape} != volume shape {tuple(shape)}")
            union |= m.data
    return union


def prepare_case(case: CaseSource, variant: str, radius: float,
                 register: Callable[[Volume, Volume], Volume] = no_registration,
                 target_shape: Optional[Tuple[int, int]] = None,
                 target_spacing: Optional[Tuple[float, float, float]] = None):
    """Registered, resampled, normalized and masked (native, arterial, mask) for one case."""
    native = load_volume(case.native)
    arterial = load_volume(case.arterial)
    if native.shape != arterial.shape:
        raise VolumeError(f"case {case.case_id}: native {native.shape} and arterial {arterial.shape} differ")
    native = register(native, arterial)
    union = Mask(combined_mask(case, variant, native.shape), spacing=native.spacing, label="union")
    if target_spacing is not None:
        native = resample(native, target_shape, target_spacing)
        arterial = resample(arterial, target_shape, target_spacing)
        union = resample_mask(union, target_shape, target_spacing)
    if native.domain == HU:
        native = clip_normalize(native)
    if arterial.domain == HU:
        arterial = clip_normalize(arterial)
    dilated = dilate_mask(union, radius)
    return apply_mask(native, dilated), apply_mask(arterial, dilated), dilated


def build_dataset(cases: Iterable[CaseSource], variant: str, out_dir, seed: int = 0,
                  ratios=(0.8, 0.1, 0.1), exclusions: Sequence[str] = (), radius: float | None = None,
                  register: Callable[[Volume, Volume], Volume] = no_registration,
                  target_shape: Optional[Tuple[int, int]] = None,
                  target_spacing: Optional[Tuple[float, float, float]] = None) -> DatasetManifest:
    """
    Preprocess every non-excluded case into ``out_dir/processed`` and write
    ``out_dir/manifest.json``. Resampling is skipped when ``target_spacing`` is None.
    """
    if variant not in VARIANT_ORGANS:
        raise ValueError(f"unknown dataset variant {variant!r}")
    radius = VARIANT_RADIUS[variant] if radius is None else radius
    out_dir = Path(out_dir)
    proc = out_dir / "processed"
    excluded = sorted(set(exclusions))
    entries = []
    kept = []
    for case in sorted(cases, key=lambda c: c.case_id):
        if case.case_id in excluded:
            continue
        native, arterial, mask = prepare_case(case, variant, radius, register, target_shape, target_spacing)
        stem = proc / case.case_id
        save_volume(native, f"{stem}_native")
        save_volume(arterial, f"{stem}_arterial")
        save_mask(mask, f"{stem}_mask", case_id=case.case_id)
        entries.append({
            "case_id": case.case_id,
            "native": f"processed/{case.case_id}_native.vol",
            "arterial": f"processed/{case.case_id}_arterial.vol",
            "mask": f"processed/{case.case_id}_mask.vol",
        })
        kept.append(case.case_id)
        logger.info("prepared case %s", case.case_id)
    splits = assign_splits(kept, seed, ratios)
    split_of = {c: s for s, ids in splits.items() for c in ids}
    for e in entries:
        e["split"] = split_of[e["case_id"]]
    manifest = DatasetManifest(variant=variant, seed=int(seed), ratios=tuple(float(r) for r in ratios),
                               radius=radius, entries=entries, splits=splits, excluded=excluded)
    manifest.save(out_dir / "manifest.json")
    return DatasetManifest.load(out_dir / "manifest.json")  # paths resolved against out_dir

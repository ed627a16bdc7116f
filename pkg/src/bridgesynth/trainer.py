"""
Training loop for the slice-window denoiser, with checkpoint selection by
full-volume validation sampling.

Checkpoint layout::

    <out>/ckpt/epoch_<n>/model.pt
    <out>/ckpt/epoch_<n>/meta.json
    <out>/ckpt/style_train_avg.json
    <out>/ckpt/best            # text file naming the best epoch directory
    <out>/train_log.jsonl
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from bridgesynth.metrics import MetricsReport, evaluate_pair
from bridgesynth.model import Denoiser, DenoiserSpec, UNet, init_model
from bridgesynth.preprocess import DatasetManifest
from bridgesynth.sampler import SamplerConfig, sample_volume
from bridgesynth.schedule import ScheduleTable, build_schedule
from bridgesynth.stylekey import StyleKey, average_style_keys, compute_style_key
from bridgesynth.volume import Volume, load_volume, stack_windows

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "bridgesynth-ckpt-1"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-4
    T: int = 1000
    s: float = 1.0
    N: int = 1
    seed: int = 0
    val_every: int = 1
    val_steps: int = 10
    crop: Optional[int] = None  # random in-plane training crops; None trains on full slices
    max_steps: Optional[int] = None
    time_limit_s: Optional[float] = None

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size and lr must be positive")
        if self.val_every < 1 or self.val_steps < 1:
            raise ValueError("val_every and val_steps must be >= 1")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.crop is not None and self.crop < 1:
            raise ValueError("crop must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class CheckpointRecord:
    epoch: int
    path: str
    metrics: Dict[str, float]
    best: bool = False


# ---------------------------------------------------------------------------
# objective


def bridge_loss(net: UNet, x0_sub, y_sub, style, t, eps, sched: ScheduleTable) -> torch.Tensor:
    """
    MSE between eps_theta(x_t, y, style, t) and m_t (y - x0) + sqrt(delta_t) eps.

    Window tensors are (B, 2N+1, H, W); ``style`` is (B, K*B); ``t`` is (B,) long.
    """
    dtype = net.input_conv.weight.dtype
    x0_sub, y_sub, eps = (torch.as_tensor(a, dtype=dtype) for a in (x0_sub, y_sub, eps))
    t = torch.as_tensor(t, dtype=torch.long)
    m = torch.as_tensor(sched.m, dtype=dtype)[t][:, None, None, None]
    sd = torch.sqrt(torch.as_tensor(sched.delta, dtype=dtype))[t][:, None, None, None]
    x_t = (1 - m) * x0_sub + m * y_sub + sd * eps
    target = m * (y_sub - x0_sub) + sd * eps
    pred = net(x_t, y_sub, torch.as_tensor(style, dtype=dtype), t)
    return torch.mean((pred - target) ** 2)


def training_step(batch, sched: ScheduleTable, d: Denoiser | UNet, optimizer=None) -> float:
    """One optimization step on ``batch = (x0_sub, y_sub, style, t, eps)``; returns the loss."""
    net = d.net if isinstance(d, Denoiser) else d
    net.train()
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
    loss = bridge_loss(net, *batch, sched)
    if not torch.isfinite(loss):
        t = batch[3]
        raise TrainingError(f"non-finite loss {loss.item()} at timesteps {list(np.asarray(t))}")
    loss.backward()
    if optimizer is not None:
        optimizer.step()
    return float(loss.item())


# ---------------------------------------------------------------------------
# data


@dataclass
class CaseData:
    case_id: str
    native: Volume
    arterial: Volume
    key: StyleKey


def load_cases(manifest: DatasetManifest, split: str) -> List[CaseData]:
    out = []
    for e in manifest.cases(split):
        native, arterial = load_volume(e["native"]), load_volume(e["arterial"])
        out.append(CaseData(e["case_id"], native, arterial, compute_style_key(arterial)))
    return out


class SliceSampler:
    """Seeded stream of training batches over all (case, slice) windows."""

    def __init__(self, cases: Sequence[CaseData], cfg: TrainConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.x0 = [stack_windows(c.arterial.data, cfg.N) for c in cases]
        self.y = [stack_windows(c.native.data, cfg.N) for c in cases]
        self.keys = [c.key.flat() for c in cases]
        self.index = [(ci, zi) for ci, c in enumerate(cases) for zi in range(c.native.shape[0])]

    def __len__(self):
        return len(self.index)

    def epoch(self):
        order = self.rng.permutation(len(self.index))
        bs = self.cfg.batch_size
        for s in range(0, len(order), bs):
            yield self._batch([self.index[k] for k in order[s:s + bs]])

    def _batch(self, items):
        x0 = np.stack([self.x0[c][z] for c, z in items])
        y = np.stack([self.y[c][z] for c, z in items])
        crop = self.cfg.crop
        if crop is not None and crop < x0.shape[-1]:
            H, W = x0.shape[-2:]
            r = self.rng.integers(0, H - crop + 1, len(items))
            q = self.rng.integers(0, W - crop + 1, len(items))
            x0 = np.stack([a[:, i:i + crop, j:j + crop] for a, i, j in zip(x0, r, q)])
            y = np.stack([a[:, i:i + crop, j:j + crop] for a, i, j in zip(y, r, q)])
        style = np.stack([self.keys[c] for c, _ in items])
        t = self.rng.integers(1, self.cfg.T + 1, len(items))
        eps = self.rng.standard_normal(x0.shape)
        return x0, y, style, t, eps


# ---------------------------------------------------------------------------
# validation and checkpoint selection


def validate_full_volume(d, val_cases: Sequence[CaseData], sched: ScheduleTable, cfg: SamplerConfig,
                         key: StyleKey | None = None) -> MetricsReport:
    """Sample every validation case in full and score it; ``key=None`` uses each case's own key."""
    if not val_cases:
        raise ValueError("validation set is empty")
    report = MetricsReport()
    for case in val_cases:
        try:
            pred = sample_volume(d, case.native, key or case.key, sched, cfg)
            report.add(case.case_id, evaluate_pair(case.arterial, pred))
        except Exception as exc:  # recorded, case skipped
            logger.warning("validation sampling failed for %s: %s", case.case_id, exc)
            report.add_failure(case.case_id, f"{type(exc).__name__}: {exc}")
    return report


def select_checkpoint(records: Sequence[CheckpointRecord]) -> CheckpointRecord:
    """Highest PSNR; ties by higher SSIM, lower NRMSE, then later epoch."""
    if not records:
        raise ValueError("no checkpoint records to select from")
    return max(records, key=lambda r: (r.metrics["psnr"], r.metrics["ssim"], -r.metrics["nrmse"], r.epoch))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, d: Denoiser, sched: ScheduleTable, cfg: TrainConfig, epoch: int,
                    metrics: Dict[str, float] | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(d.net.state_dict(), path / "model.pt")
    meta = {
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "spec": d.spec.to_dict(),
        "schedule": {"T": sched.T, "s": sched.s, "variance_mode": sched.variance_mode},
        "style": {"K": d.spec.style_hists, "B": d.spec.style_bins},
        "train": asdict(cfg),
        "metrics": metrics or {},
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def resolve_checkpoint(path) -> Path:
    """A checkpoint root (containing ``best``) or an epoch directory -> epoch directory."""
    path = Path(path)
    if (path / "model.pt").exists():
        return path
    for root in (path, path / "ckpt"):
        if (root / "best").exists():
            return root / (root / "best").read_text().strip()
    raise FileNotFoundError(f"no checkpoint found at {path}")


def load_checkpoint(path):
    """Returns (denoiser, schedule, meta, training-average style key or None)."""
    ep = resolve_checkpoint(path)
    meta = json.loads((ep / "meta.json").read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
    spec = DenoiserSpec.from_dict(meta["spec"])
    d = init_model(spec, seed=0)
    d.net.load_state_dict(torch.load(ep / "model.pt", map_location="cpu"))
    sc = meta["schedule"]
    sched = build_schedule(sc["T"], sc["s"], sc.get("variance_mode", "posterior"))
    avg = ep.parent / "style_train_avg.json"
    key = StyleKey.load(avg) if avg.exists() else None
    return d, sched, meta, key


@dataclass
class TrainResult:
    denoiser: Denoiser
    sched: ScheduleTable
    records: List[CheckpointRecord]
    best: Optional[CheckpointRecord]
    losses: List[float] = field(default_factory=list)
    train_key: Optional[StyleKey] = None


def train(manifest: DatasetManifest, out_dir, cfg: TrainConfig = TrainConfig(), spec: DenoiserSpec | None = None,
          sampler_cfg: SamplerConfig | None = None, validate: bool = True) -> TrainResult:
    cfg.validate()
    spec = spec or DenoiserSpec(out_channels=2 * cfg.N + 1, in_channels=2 * (2 * cfg.N + 1))
    if spec.out_channels != 2 * cfg.N + 1:
        raise ValueError(f"denoiser out_channels {spec.out_channels} does not match N={cfg.N}")
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "ckpt"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    sched = build_schedule(cfg.T, cfg.s)
    d = init_model(spec, seed=cfg.seed)
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(d.net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    train_cases = load_cases(manifest, "train")
    if not train_cases:
        raise ValueError("training split is empty")
    val_cases = load_cases(manifest, "val") if validate else []
    train_key = average_style_keys([c.key for c in train_cases])
    train_key.save(ckpt_dir / "style_train_avg.json")
    stream = SliceSampler(train_cases, cfg, rng)
    vcfg = sampler_cfg or SamplerConfig(steps=cfg.val_steps, seed=cfg.seed)
    if vcfg.steps != cfg.val_steps:
        vcfg = SamplerConfig(**{**asdict(vcfg), "steps": cfg.val_steps})

    records: List[CheckpointRecord] = []
    losses: List[float] = []
    step = 0
    start = time.monotonic()
    stop = False
    with open(out_dir / "train_log.jsonl", "w") as log:
        for epoch in range(1, cfg.epochs + 1):
            for batch in stream.epoch():
                loss = training_step(batch, sched, d, opt)
                losses.append(loss)
                step += 1
                log.write(json.dumps({"step": step, "epoch": epoch, "loss": loss, "lr": cfg.lr}) + "\n")
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    stop = True
                elif cfg.time_limit_s is not None and time.monotonic() - start > cfg.time_limit_s:
                    stop = True
                if stop:
                    break
            log.flush()
            last = stop or epoch == cfg.epochs
            if epoch % cfg.val_every and not last:
                continue
            metrics = {}
            if val_cases:
                report = validate_full_volume(d, val_cases, sched, vcfg, key=train_key)
                if report.cases:
                    metrics = {k: v["mean"] for k, v in report.aggregate().items()}
                if report.failed:
                    metrics["failed_cases"] = len(report.failed)
                logger.info("epoch %d validation %s", epoch, metrics)
            path = save_checkpoint(ckpt_dir / f"epoch_{epoch}", d, sched, cfg, epoch, metrics)
            records.append(CheckpointRecord(epoch, str(path), metrics))
            if stop:
                break

    scored = [r for r in records if "psnr" in r.metrics]
    best = select_checkpoint(scored) if scored else (records[-1] if records else None)
    if best is not None:
        best.best = True
        (ckpt_dir / "best").write_text(Path(best.path).name + "\n")
        if Path(best.path).name != f"epoch_{records[-1].epoch}":
            d.net.load_state_dict(torch.load(Path(best.path) / "model.pt", map_location="cpu"))
    return TrainResult(d, sched, records, best, losses, train_key)

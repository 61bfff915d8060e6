"""Pretraining loop: channel-subset sampling, augmentation, masking,
warmup+cosine schedule, decoupled-weight-decay updates, checkpointing.

All stochastic choices inside an epoch come from rng streams keyed by
(seed, epoch), so resuming from an epoch checkpoint reproduces the
interrupted run exactly and fixed seeds give identical loss curves.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data_model import Manifest, Tile, augment, compute_channel_stats, normalize_channels, read_tile
from .errors import DataUnavailable
from .model_core import CampfireMAE, ModelConfig, sample_mask, save_checkpoint
from .objective import LossWeights, total_loss
from .split_scheme import SplitAssignment, audit

logger = logging.getLogger(__name__)

DEFAULT_ID_CHANNELS = ("Nu", "Ac", "M")


@dataclass
class OptimConfig:
    lr_peak: float = 5e-4
    lr_warmup_start: float = 1e-5
    eta_min: float = 1e-6
    weight_decay: float = 5e-3
    warmup_epochs: int = 20
    total_epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    grad_clip: float = 1.0  # 0 disables; off in the full-scale preset

    def __post_init__(self):
        if self.lr_warmup_start > self.lr_peak:
            raise ValueError("lr_warmup_start must be <= lr_peak")
        if self.eta_min > self.lr_peak:
            raise ValueError("eta_min must be <= lr_peak")
        if self.warmup_epochs > self.total_epochs:
            raise ValueError("warmup_epochs must be <= total_epochs")


def lr_at(step: int, steps_per_epoch: int, cfg: OptimConfig) -> float:
    """Linear warmup to lr_peak, then cosine decay to eta_min at the final step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.total_epochs * steps_per_epoch
    if warm > 0 and step < warm:
        return cfg.lr_warmup_start + (cfg.lr_peak - cfg.lr_warmup_start) * step / warm
    last = total - 1
    if last <= warm:
        return cfg.lr_peak
    progress = min((step - warm) / (last - warm), 1.0)
    return cfg.eta_min + 0.5 * (cfg.lr_peak - cfg.eta_min) * (1.0 + math.cos(math.pi * progress))


def sample_channel_subset(available: tuple[str, ...], rng: np.random.Generator) -> tuple[str, ...]:
    """Uniform draw over the 2^k - 1 non-empty subsets of `available`."""
    if not available:
        raise ValueError("available channel set must be non-empty")
    k = len(available)
    bits = int(rng.integers(1, 2**k))
    return tuple(c for i, c in enumerate(available) if bits >> i & 1)


class TileStore:
    """Resolves tile uris against a data root, caches decoded tiles, and
    records which uris were touched under which purpose (leakage audit)."""

    def __init__(self, root: str | Path, max_cached: int = 4096):
        self.root = Path(root)
        self.max_cached = max_cached
        self._cache: dict[str, Tile] = {}
        self.accessed: dict[str, set[str]] = {}

    def load(self, uri: str, purpose: str = "train") -> Tile:
        self.accessed.setdefault(purpose, set()).add(uri)
        tile = self._cache.get(uri)
        if tile is None:
            tile = read_tile(self.root / uri)
            if len(self._cache) < self.max_cached:
                self._cache[uri] = tile
        return tile

    def exists(self, uri: str) -> bool:
        return uri in self._cache or (self.root / uri).exists()


def _split_uris(manifest: Manifest, assignment: SplitAssignment, split: str, store: TileStore) -> list[str]:
    """Tile uris of wells in `split`, sorted; missing tiles are skipped with a warning."""
    uris = []
    for w in sorted(manifest.wells, key=lambda w: w.key):
        if assignment.well_split.get(w.key) != split:
            continue
        for uri in w.tile_uris:
            if store.exists(uri):
                uris.append(uri)
            else:
                logger.warning("well %s: missing tile %s, excluded", w.key, uri)
    return uris


def make_optimizer(model: torch.nn.Module, cfg: OptimConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.dim() <= 1 or name.endswith("mask_token"):
            no_decay.append(p)
        else:
            decay.append(p)
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.lr_warmup_start,
    )


def _batch_tensors(
    tiles: list[Tile],
    subset: tuple[str, ...],
    stats: dict[str, tuple[float, float]],
    model_cfg: ModelConfig,
    rng: np.random.Generator,
    do_augment: bool,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (pixels (B,C,H,W), visible_idx (B,C,n_vis), masked_pixel (B,C,H,W) bool)."""
    planes, vis_rows, mask_rows = [], [], []
    P = model_cfg.patch_size
    for tile in tiles:
        if do_augment:
            tile = augment(tile, rng)
        tile = normalize_channels(tile.select_channels(subset), stats)
        planes.append(tile.pixels)
        side = tile.height // P
        spec = sample_mask(side * side, len(subset), model_cfg.mask_fraction, model_cfg.sync_mask, rng)
        vis_rows.append(np.stack(spec.visible))
        pixmask = np.zeros((len(subset), side, side), dtype=bool)
        for c, masked in enumerate(spec.masked):
            pixmask[c].reshape(-1)[masked] = True
        mask_rows.append(np.repeat(np.repeat(pixmask, P, axis=1), P, axis=2))
    pixels = torch.from_numpy(np.stack(planes))
    visible_idx = torch.from_numpy(np.stack(vis_rows).astype(np.int64))
    masked_pixel = torch.from_numpy(np.stack(mask_rows))
    return pixels, visible_idx, masked_pixel


def train_step(
    model: CampfireMAE,
    optimizer: torch.optim.Optimizer,
    pixels: torch.Tensor,
    visible_idx: torch.Tensor,
    masked_pixel: torch.Tensor,
    weights: LossWeights,
    lr: float,
    grad_clip: float = 1.0,
    masked_loss_only: bool = False,
) -> float:
    for group in optimizer.param_groups:
        group["lr"] = lr
    recon = model.forward_pretrain(pixels, visible_idx)
    if masked_loss_only:
        recon = torch.where(masked_pixel, recon, pixels)
    loss = total_loss(recon, pixels, weights)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return float(loss.detach())


@dataclass
class FitResult:
    checkpoint_path: Path
    metrics: list[dict] = field(default_factory=list)
    stats: dict[str, tuple[float, float]] = field(default_factory=dict)
    store: TileStore | None = None
    model: CampfireMAE | None = None


def _eval_loss(
    model: CampfireMAE,
    store: TileStore,
    uris: list[str],
    channels: tuple[str, ...],
    stats: dict,
    model_cfg: ModelConfig,
    weights: LossWeights,
    batch_size: int,
    rng: np.random.Generator,
    masked_loss_only: bool,
) -> float:
    model.eval()
    losses = []
    with torch.no_grad():
        for i in range(0, len(uris), batch_size):
            tiles = [store.load(u, purpose="val") for u in uris[i : i + batch_size]]
            pixels, visible_idx, masked_pixel = _batch_tensors(tiles, channels, stats, model_cfg, rng, do_augment=False)
            recon = model.forward_pretrain(pixels, visible_idx)
            if masked_loss_only:
                recon = torch.where(masked_pixel, recon, pixels)
            losses.append(float(total_loss(recon, pixels, weights)) * len(tiles))
    model.train()
    return sum(losses) / max(len(uris), 1)


def fit(
    manifest: Manifest,
    assignment: SplitAssignment,
    model_cfg: ModelConfig,
    optim_cfg: OptimConfig,
    weights: LossWeights,
    data_root: str | Path,
    out_dir: str | Path,
    channels: tuple[str, ...] = DEFAULT_ID_CHANNELS,
    masked_loss_only: bool = False,
    resume_epoch: int = 0,
    resume_state: tuple[CampfireMAE, torch.optim.Optimizer] | None = None,
    keep_epoch_checkpoints: bool = False,
) -> FitResult:
    """Train on train-split tiles only; per-epoch metrics and checkpoints.

    Only the configured in-distribution `channels` are ever sampled into
    batches; other channels in the tiles (the held-out set) are never fed to
    the model.
    """
    report = audit(assignment, manifest)
    if not report.clean:
        raise DataUnavailable(f"assignment has {len(report.violations)} audit violations")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = TileStore(data_root)
    train_uris = _split_uris(manifest, assignment, "train", store)
    val_uris = _split_uris(manifest, assignment, "val", store)
    if not train_uris:
        raise DataUnavailable("no training tiles available")

    # Normalization statistics: one pass over the training split, all channels
    # present in the tiles (held-out channels get stats for later inference,
    # the model itself never sees them here).
    stats = compute_channel_stats(store.load(u, purpose="stats") for u in train_uris)

    torch.manual_seed(optim_cfg.seed)
    if resume_state is not None:
        model, optimizer = resume_state
    else:
        model = CampfireMAE(model_cfg)
        optimizer = make_optimizer(model, optim_cfg)
    model.train()

    steps_per_epoch = math.ceil(len(train_uris) / optim_cfg.batch_size)
    metrics: list[dict] = []
    metrics_path = out_dir / "metrics.jsonl"
    if resume_epoch == 0 and metrics_path.exists():
        metrics_path.unlink()

    checkpoint_path = out_dir / "checkpoint.ckpt"
    meta_common = {
        "channels": list(channels),
        "norm_stats": {k: list(v) for k, v in stats.items()},
        "optim_config": asdict(optim_cfg),
        "loss_weights": asdict(weights),
    }

    global_step = resume_epoch * steps_per_epoch
    for epoch in range(resume_epoch, optim_cfg.total_epochs):
        t0 = time.monotonic()
        rng = np.random.default_rng([optim_cfg.seed, 100, epoch])
        order = rng.permutation(len(train_uris))
        epoch_losses = []
        lr = optim_cfg.lr_warmup_start
        for start in range(0, len(train_uris), optim_cfg.batch_size):
            idx = order[start : start + optim_cfg.batch_size]
            subset = sample_channel_subset(channels, rng)
            tiles = [store.load(train_uris[i], purpose="train") for i in idx]
            pixels, visible_idx, masked_pixel = _batch_tensors(tiles, subset, stats, model_cfg, rng, do_augment=True)
            lr = lr_at(global_step, steps_per_epoch, optim_cfg)
            loss = train_step(
                model, optimizer, pixels, visible_idx, masked_pixel, weights, lr,
                grad_clip=optim_cfg.grad_clip, masked_loss_only=masked_loss_only,
            )
            epoch_losses.append(loss * len(tiles))
            global_step += 1

        val_rng = np.random.default_rng([optim_cfg.seed, 200, epoch])
        val_loss = (
            _eval_loss(model, store, val_uris, channels, stats, model_cfg, weights, optim_cfg.batch_size, val_rng, masked_loss_only)
            if val_uris
            else float("nan")
        )
        entry = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": sum(epoch_losses) / len(train_uris),
            "val_loss": val_loss,
            "wall_time": time.monotonic() - t0,
        }
        metrics.append(entry)
        with metrics_path.open("a") as fh:
            fh.write(json.dumps(entry) + "\n")

        extra = _optimizer_tensors(optimizer)
        meta = {**meta_common, "epoch": epoch + 1, "optimizer_steps": extra.pop("__steps__")}
        save_checkpoint(checkpoint_path, model, meta, extra)
        if keep_epoch_checkpoints:
            save_checkpoint(out_dir / f"checkpoint_epoch{epoch:04d}.ckpt", model, meta, extra)

    result = FitResult(checkpoint_path, metrics, stats, store, model)
    return result


def resume_fit(
    checkpoint_path: str | Path,
    manifest: Manifest,
    assignment: SplitAssignment,
    weights: LossWeights,
    data_root: str | Path,
    out_dir: str | Path,
    total_epochs: int | None = None,
    masked_loss_only: bool = False,
) -> FitResult:
    """Continue a run from its checkpoint; epoch-keyed rng streams make the
    continuation identical to an uninterrupted run."""
    from .model_core import load_checkpoint

    model, meta, extras = load_checkpoint(checkpoint_path)
    optim_cfg = OptimConfig(**meta["optim_config"])
    if total_epochs is not None:
        optim_cfg.total_epochs = total_epochs
    optimizer = make_optimizer(model, optim_cfg)
    restore_optimizer(optimizer, extras, meta["optimizer_steps"])
    return fit(
        manifest,
        assignment,
        model.cfg,
        optim_cfg,
        weights,
        data_root,
        out_dir,
        channels=tuple(meta["channels"]),
        masked_loss_only=masked_loss_only,
        resume_epoch=meta["epoch"],
        resume_state=(model, optimizer),
    )


def _optimizer_tensors(optimizer: torch.optim.Optimizer) -> dict:
    """Flatten AdamW moment tensors for the checkpoint container."""
    tensors: dict = {}
    steps = []
    i = 0
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p, {})
            if "exp_avg" in state:
                tensors[f"optim.{i}.exp_avg"] = state["exp_avg"].detach().cpu().numpy().astype(np.float32)
                tensors[f"optim.{i}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy().astype(np.float32)
                steps.append(float(state["step"]))
            else:
                steps.append(0.0)
            i += 1
    tensors["__steps__"] = steps
    return tensors


def restore_optimizer(optimizer: torch.optim.Optimizer, tensors: dict[str, np.ndarray], steps: list[float]) -> None:
    i = 0
    for group in optimizer.param_groups:
        for p in group["params"]:
            key = f"optim.{i}.exp_avg"
            if key in tensors:
                optimizer.state[p] = {
                    "step": torch.tensor(steps[i]),
                    "exp_avg": torch.from_numpy(tensors[key].copy()),
                    "exp_avg_sq": torch.from_numpy(tensors[f"optim.{i}.exp_avg_sq"].copy()),
                }
            i += 1

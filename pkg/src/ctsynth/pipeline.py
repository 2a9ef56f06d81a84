"""Two-phase training and generation orchestration.

Phase one trains the text-conditioned joint denoiser on low-resolution
volumes; phase two trains the super-resolution denoiser on (high, low)
pairs with the ground-truth low-resolution volume as conditioning
(teacher forcing).  Generation runs low-res ancestral sampling from an
encoded report, upsamples 4x, and runs the super-resolution sampler
conditioned on the result.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import NoiseSchedule, ancestral_sample_array, make_diffusion_batch
from .errors import ShapeError, ValidationError
from .networks import DenoisingUNet3d, text_condition_tensors
from .text import TextCheckpoint, TextEmbedding, encode, tokenize, zero_text_embedding
from .volume import JointVolume, as_array

HU_WINDOW = (-1024.0, 600.0)
LABEL_ROLES = ("lobe", "airway", "vessel")


def normalize_hu(raw: np.ndarray) -> np.ndarray:
    """Clip to the [-1024, 600] HU window and map affinely to [-1, 1]."""
    raw = np.asarray(raw, dtype=np.float32)
    if not np.all(np.isfinite(raw)):
        raise ValidationError("HU volume contains non-finite values")
    lo, hi = HU_WINDOW
    clipped = np.clip(raw, lo, hi)
    return ((clipped - (lo + hi) / 2.0) / ((hi - lo) / 2.0)).astype(np.float32)


def denormalize_hu(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize_hu` on the window interior."""
    lo, hi = HU_WINDOW
    return (np.asarray(v, dtype=np.float32) * (hi - lo) / 2.0 + (lo + hi) / 2.0).astype(np.float32)


def downsample_nearest_4x(v: JointVolume) -> JointVolume:
    """Pick every 4th voxel (origin offset 0); preserves label codebooks."""
    d, h, w = v.spatial_shape
    if d % 4 or h % 4 or w % 4:
        raise ShapeError(f"spatial shape {v.spatial_shape} not divisible by 4")
    data = v.data[:, ::4, ::4, ::4].copy()
    spacing = tuple(s * 4.0 for s in v.voxel_spacing)
    return JointVolume(data, v.channel_roles, spacing)


def upsample_4x_array(data: np.ndarray, channel_roles: Sequence[str]) -> np.ndarray:
    """4x upsampling of (C, D, H, W) or (B, C, D, H, W) data.

    CT channels are trilinear (align_corners=False convention of
    ``torch.nn.functional.interpolate``); label channels are
    nearest-neighbor so codebook values survive exactly.
    """
    arr = np.asarray(data, dtype=np.float32)
    squeeze = arr.ndim == 4
    if squeeze:
        arr = arr[None]
    x = torch.from_numpy(np.ascontiguousarray(arr))
    tri = F.interpolate(x, scale_factor=4, mode="trilinear", align_corners=False)
    near = F.interpolate(x, scale_factor=4, mode="nearest")
    out = torch.where(
        torch.tensor([r in LABEL_ROLES for r in channel_roles]).view(1, -1, 1, 1, 1),
        near,
        tri,
    ).numpy()
    return out[0] if squeeze else out


def upsample_4x(v: JointVolume) -> JointVolume:
    data = upsample_4x_array(v.data, v.channel_roles)
    spacing = tuple(s / 4.0 for s in v.voxel_spacing)
    return JointVolume(data, v.channel_roles, spacing)


# -- training -----------------------------------------------------------------


@dataclass
class OptimConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    grad_clip_norm: Optional[float] = 1.0


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8          # physical micro-batch
    grad_accum: int = 1          # effective batch = batch_size * grad_accum
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    mixed_precision: bool = False
    log_path: Optional[str] = None
    snapshot_every: int = 50


class TrainingDivergedError(RuntimeError):
    """Raised when the loss goes non-finite; carries recovery information."""

    def __init__(self, step: int, batch_ids: list[int], checkpoint: Optional[dict]):
        super().__init__(f"non-finite loss at step {step}; offending batch ids {batch_ids}")
        self.step = step
        self.batch_ids = batch_ids
        self.last_finite_checkpoint = checkpoint


@dataclass
class TrainResult:
    history: list[dict]
    final_loss: float


def _run_training(
    model: DenoisingUNet3d,
    n_examples: int,
    micro_batch_fn: Callable[[np.ndarray, np.random.Generator], torch.Tensor],
    config: TrainConfig,
) -> TrainResult:
    """Shared AdamW loop: accumulation, global-norm clipping, jsonl metrics."""
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.AdamW(
        model.parameters(),
        lr=config.optim.lr,
        betas=config.optim.betas,
        weight_decay=config.optim.weight_decay,
    )
    history: list[dict] = []
    snapshot: Optional[dict] = None
    log_file = open(config.log_path, "w") if config.log_path else None
    try:
        for step in range(config.steps):
            model.train()
            opt.zero_grad()
            losses = []
            step_ids: list[int] = []
            for _ in range(config.grad_accum):
                replace = n_examples < config.batch_size
                idx = rng.choice(n_examples, size=config.batch_size, replace=replace)
                step_ids.extend(int(i) for i in idx)
                if config.mixed_precision:
                    with torch.autocast("cpu", dtype=torch.bfloat16):
                        loss = micro_batch_fn(idx, rng)
                else:
                    loss = micro_batch_fn(idx, rng)
                (loss / config.grad_accum).backward()
                losses.append(float(loss))
            mean_loss = float(np.mean(losses))
            if not math.isfinite(mean_loss):
                raise TrainingDivergedError(step, step_ids, snapshot)
            if config.optim.grad_clip_norm is not None:
                grad_norm = float(
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.optim.grad_clip_norm)
                )
            else:
                grad_norm = float(
                    torch.sqrt(
                        sum((p.grad ** 2).sum() for p in model.parameters() if p.grad is not None)
                    )
                )
            opt.step()
            entry = {
                "step": step,
                "loss": mean_loss,
                "lr": config.optim.lr,
                "grad_norm": grad_norm,
            }
            history.append(entry)
            if log_file:
                log_file.write(json.dumps(entry) + "\n")
            if (step + 1) % config.snapshot_every == 0:
                snapshot = {k: v.detach().clone() for k, v in model.state_dict().items()}
    finally:
        if log_file:
            log_file.close()
    model.eval()
    return TrainResult(history=history, final_loss=history[-1]["loss"] if history else math.nan)


def train_lowres(
    model: DenoisingUNet3d,
    sched: NoiseSchedule,
    volumes: np.ndarray,
    embeddings: Sequence[TextEmbedding],
    config: TrainConfig,
) -> TrainResult:
    """Minimize E || G(x_t, f_text) - x0 ||^2 with t ~ Uniform{1..T}."""
    volumes = np.asarray(volumes, dtype=np.float32)
    if volumes.ndim != 5:
        raise ShapeError(f"expected (N, C, n, n, n) training volumes, got {volumes.shape}")
    if len(embeddings) != volumes.shape[0]:
        raise ShapeError("one text embedding required per training volume")

    def micro(idx: np.ndarray, rng: np.random.Generator) -> torch.Tensor:
        x0 = volumes[idx]
        t = rng.integers(1, sched.T + 1, size=len(idx))
        batch = make_diffusion_batch(x0, t, sched, rng)
        feats, pad = text_condition_tensors([embeddings[i] for i in idx], len(idx))
        pred = model(
            torch.from_numpy(batch.xt),
            torch.from_numpy(batch.t),
            text=feats,
            text_pad_mask=pad,
        )
        return F.mse_loss(pred, torch.from_numpy(batch.x0))

    return _run_training(model, volumes.shape[0], micro, config)


def train_superres(
    model: DenoisingUNet3d,
    sched: NoiseSchedule,
    pair_fn: Callable[[int], tuple[np.ndarray, np.ndarray]],
    n_examples: int,
    channel_roles: Sequence[str],
    config: TrainConfig,
) -> TrainResult:
    """Minimize E || H(x_t, up(x0_low)) - x0 ||^2 on (high, low) pairs.

    ``pair_fn(i)`` returns the i-th (x0_high, x0_low) pair; pairs are
    fetched lazily so large high-resolution sets need not be material-
    ized.  Conditioning uses the ground-truth low-resolution volume.
    """

    def micro(idx: np.ndarray, rng: np.random.Generator) -> torch.Tensor:
        highs, lows = zip(*(pair_fn(int(i)) for i in idx))
        x0 = np.stack(highs).astype(np.float32)
        cond = upsample_4x_array(np.stack(lows).astype(np.float32), channel_roles)
        t = rng.integers(1, sched.T + 1, size=len(idx))
        batch = make_diffusion_batch(x0, t, sched, rng)
        inp = torch.cat([torch.from_numpy(batch.xt), torch.from_numpy(cond)], dim=1)
        pred = model(inp, torch.from_numpy(batch.t))
        return F.mse_loss(pred, torch.from_numpy(batch.x0))

    return _run_training(model, n_examples, micro, config)


# -- sampling wrappers --------------------------------------------------------


def lowres_sampler(model: DenoisingUNet3d, f_text: TextEmbedding | Sequence[TextEmbedding], batch: int):
    """Array-level denoiser closure over fixed text conditioning."""
    feats, pad = text_condition_tensors(f_text, batch)

    def denoise(x: np.ndarray, t: int, cond) -> np.ndarray:
        model.eval()
        with torch.no_grad():
            xt = torch.from_numpy(np.ascontiguousarray(x))
            tt = torch.full((x.shape[0],), int(t), dtype=torch.long)
            return model(xt, tt, text=feats, text_pad_mask=pad).numpy()

    return denoise


def superres_sampler(model: DenoisingUNet3d, low_up: np.ndarray):
    """Array-level denoiser closure over fixed low-res conditioning."""
    cond = torch.from_numpy(np.ascontiguousarray(low_up, dtype=np.float32))

    def denoise(x: np.ndarray, t: int, _cond) -> np.ndarray:
        model.eval()
        with torch.no_grad():
            xt = torch.from_numpy(np.ascontiguousarray(x))
            tt = torch.full((x.shape[0],), int(t), dtype=torch.long)
            return model(torch.cat([xt, cond], dim=1), tt).numpy()

    return denoise


def encode_report(report, text_ckpt: TextCheckpoint) -> TextEmbedding:
    seq = tokenize(report, text_ckpt.vocab, text_ckpt.config.max_len)
    return encode(seq, text_ckpt.model)


@dataclass
class GenerationResult:
    low: JointVolume
    high: JointVolume
    metadata: dict


def generate(
    report,
    text_ckpt: TextCheckpoint,
    lowres_model: DenoisingUNet3d,
    superres_model: DenoisingUNet3d,
    sched_low: NoiseSchedule,
    sched_high: NoiseSchedule,
    rng: np.random.Generator,
    low_size: int = 16,
    channel_roles: tuple[str, ...] = ("ct", "lobe", "airway", "vessel"),
    voxel_spacing_high: tuple[float, float, float] = (4.0, 4.0, 4.0),
    seed: Optional[int] = None,
) -> GenerationResult:
    """Full hierarchical generation: report -> low-res joint volume -> 4x volume."""
    t0 = time.time()
    f_text = encode_report(report, text_ckpt)
    low_arr = ancestral_sample_array(
        lowres_sampler(lowres_model, f_text, 1),
        sched_low,
        (1, len(channel_roles), low_size, low_size, low_size),
        rng,
    )
    spacing_low = tuple(s * 4.0 for s in voxel_spacing_high)
    low = JointVolume(low_arr[0], channel_roles, spacing_low)
    low_up = upsample_4x_array(low_arr, channel_roles)
    high_arr = ancestral_sample_array(
        superres_sampler(superres_model, low_up),
        sched_high,
        (1, len(channel_roles)) + tuple(s * 4 for s in low.spatial_shape),
        rng,
    )
    high = JointVolume(high_arr[0], channel_roles, voxel_spacing_high)
    metadata = {
        "seed": seed,
        "steps_low": sched_low.T,
        "steps_high": sched_high.T,
        "low_size": low_size,
        "high_size": low_size * 4,
        "elapsed_s": time.time() - t0,
    }
    return GenerationResult(low=low, high=high, metadata=metadata)

"""Stage runners: config in, artifacts on disk out.

Each stage loads its prerequisites from the working directory, computes
if its own artifact is missing, and persists results with enough
metadata to reload.  The CLI maps one subcommand to one stage; tests
drive the same functions directly.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import storage
from .config import RunConfig
from .conditioning import FixMask, marginal_sample, segment_via_marginalization
from .diffusion import NoiseSchedule, ancestral_sample_array, build_cosine_schedule
from .errors import ValidationError
from .metrics import (
    DEFAULT_PROMPT_PAIRS,
    ConvAutoencoder3d,
    FeatureSet,
    StudyReport,
    extract_features,
    prompt_contrast_study,
    train_feature_extractor,
)
from .networks import DenoisingUNet3d, build_lowres_denoiser, build_superres_denoiser
from .phantoms import (
    DatasetSplit,
    PhantomRecord,
    PhantomSpec,
    ReportDocument,
    TreeParams,
    sample_dataset,
    synth_phantom,
)
from .pipeline import (
    GenerationResult,
    OptimConfig,
    TrainConfig,
    TrainResult,
    downsample_nearest_4x,
    encode_report,
    generate,
    lowres_sampler,
    train_lowres,
    train_superres,
)
from .text import (
    TextCheckpoint,
    TextEncoder,
    TextEncoderConfig,
    TextEmbedding,
    TextTrainConfig,
    pretrain,
    zero_text_embedding,
)
from .volume import CHANNEL_ROLES, JointVolume

log = logging.getLogger("ctsynth")


def spec_to_dict(spec: PhantomSpec) -> dict:
    return dataclasses.asdict(spec)


def spec_from_dict(data: dict) -> PhantomSpec:
    def tree(d):
        return TreeParams(**d)

    kwargs = dict(data)
    kwargs["right_lung"] = tuple(kwargs["right_lung"])
    kwargs["left_lung"] = tuple(kwargs["left_lung"])
    kwargs["right_fissures"] = tuple(tuple(f) for f in kwargs["right_fissures"])
    kwargs["left_fissure"] = tuple(kwargs["left_fissure"])
    kwargs["airway"] = tree(kwargs["airway"])
    kwargs["vessel"] = tree(kwargs["vessel"])
    kwargs["bullae_radius"] = tuple(kwargs["bullae_radius"])
    return PhantomSpec(**kwargs)


# -- dataset stage ---------------------------------------------------------------


def dataset_stage(cfg: RunConfig, workdir: Path, write_volumes: bool = False) -> DatasetSplit:
    """Sample the phantom dataset; persist specs, splits, and reports."""
    workdir.mkdir(parents=True, exist_ok=True)
    path = workdir / "dataset.jsonl"
    if path.exists():
        return load_dataset(path)
    rng = np.random.default_rng(cfg.seed)
    split = sample_dataset(
        cfg.dataset.n,
        rng,
        grid=cfg.geometry.high_size,
        voxel_mm=cfg.geometry.voxel_mm,
        seed_base=cfg.dataset.seed_base,
    )
    files = []
    with open(path, "w") as f:
        for name, specs in (("train", split.train), ("val", split.val), ("test", split.test)):
            for spec in specs:
                record = synth_phantom(spec)
                row = {
                    "split": name,
                    "spec": spec_to_dict(spec),
                    "report": {
                        "subject_id": record.report.subject_id,
                        "impression": record.report.impression,
                        "findings": record.report.findings,
                    },
                }
                if write_volumes:
                    vol_path = workdir / f"{record.report.subject_id}.vol"
                    storage.write_volume(
                        downsample_nearest_4x(record.volume),
                        vol_path,
                        provenance={"seed": spec.seed},
                    )
                    row["volume_file"] = vol_path.name
                    files.append(vol_path)
                f.write(json.dumps(row) + "\n")
    return split


def load_dataset(path: Path) -> DatasetSplit:
    buckets: dict[str, list[PhantomSpec]] = {"train": [], "val": [], "test": []}
    with open(path) as f:
        for line in f:
            row = json.loads(line)
            buckets[row["split"]].append(spec_from_dict(row["spec"]))
    return DatasetSplit(**buckets)


def load_reports(path: Path) -> dict[str, ReportDocument]:
    out = {}
    with open(path) as f:
        for line in f:
            row = json.loads(line)
            rep = row["report"]
            out[rep["subject_id"]] = ReportDocument(**rep)
    return out


def low_volumes_for(specs: Sequence[PhantomSpec], workdir: Optional[Path] = None) -> tuple[np.ndarray, list[ReportDocument]]:
    """Low-resolution training arrays plus reports, cached as one npz."""
    cache = workdir / "lowres_cache.npz" if workdir else None
    if cache is not None and cache.exists():
        blob = np.load(cache, allow_pickle=True)
        vols = blob["volumes"]
        reports = [ReportDocument(**r) for r in json.loads(str(blob["reports"]))]
        if vols.shape[0] == len(specs):
            return vols, reports
    vols, reports = [], []
    t0 = time.time()
    for i, spec in enumerate(specs):
        record = synth_phantom(spec)
        vols.append(downsample_nearest_4x(record.volume).data)
        reports.append(record.report)
        if (i + 1) % 200 == 0:
            log.info("synthesized %d/%d phantoms (%.1fs)", i + 1, len(specs), time.time() - t0)
    arr = np.stack(vols).astype(np.float32)
    if cache is not None:
        rep_json = json.dumps(
            [{"subject_id": r.subject_id, "impression": r.impression, "findings": r.findings} for r in reports]
        )
        np.savez_compressed(cache, volumes=arr, reports=rep_json)
    return arr, reports


# -- text stage --------------------------------------------------------------------


def text_stage(cfg: RunConfig, workdir: Path, corpus: Optional[Sequence[ReportDocument]] = None) -> TextCheckpoint:
    base = workdir / "text"
    if base.with_suffix(".pt").exists():
        return load_text_checkpoint(base)
    if corpus is None:
        split = dataset_stage(cfg, workdir)
        _, corpus = low_volumes_for(split.train, workdir)
    enc_cfg = TextEncoderConfig(
        vocab_size=cfg.text.vocab_size,
        max_len=cfg.text.max_len,
        dim=cfg.text.dim,
        n_layers=cfg.text.n_layers,
        n_heads=cfg.text.n_heads,
    )
    train_cfg = TextTrainConfig(
        steps=cfg.text.steps,
        batch_size=cfg.text.batch_size,
        lr=cfg.text.lr,
        weight_decay=cfg.text.weight_decay,
        seed=cfg.seed,
    )
    log.info("pretraining text encoder: %d steps", train_cfg.steps)
    ckpt = pretrain(corpus, enc_cfg, train_cfg)
    save_text_checkpoint(ckpt, base)
    return ckpt


def save_text_checkpoint(ckpt: TextCheckpoint, base: Path) -> None:
    storage.save_checkpoint(
        base,
        ckpt.model.state_dict(),
        {
            "kind": "text_encoder",
            "vocab": ckpt.vocab.id_to_word,
            "config": dataclasses.asdict(ckpt.config),
            "step": ckpt.step,
            "history": ckpt.history[-200:],
            "final_mlm_acc": ckpt.history[-1]["mlm_acc"] if ckpt.history else None,
        },
    )


def load_text_checkpoint(base: Path) -> TextCheckpoint:
    from .text import Vocabulary

    state, meta = storage.load_checkpoint(base)
    config = TextEncoderConfig(**meta["config"])
    model = TextEncoder(config)
    model.load_state_dict(state)
    model.eval()
    vocab = Vocabulary(meta["vocab"], {w: i for i, w in enumerate(meta["vocab"])})
    return TextCheckpoint(model=model, vocab=vocab, config=config, history=meta["history"], step=meta["step"])


# -- denoiser stages ------------------------------------------------------------------


def schedules(cfg: RunConfig) -> tuple[NoiseSchedule, NoiseSchedule]:
    return (
        build_cosine_schedule(cfg.schedule.T_low, cfg.schedule.s),
        build_cosine_schedule(cfg.schedule.T_high, cfg.schedule.s),
    )


def _stage_train_config(stage, seed: int, log_path: Optional[Path]) -> TrainConfig:
    return TrainConfig(
        steps=stage.steps,
        batch_size=stage.batch_size,
        grad_accum=stage.grad_accum,
        optim=OptimConfig(
            lr=stage.lr,
            betas=stage.betas,
            weight_decay=stage.weight_decay,
            grad_clip_norm=stage.grad_clip_norm,
        ),
        seed=seed,
        mixed_precision=stage.mixed_precision,
        log_path=str(log_path) if log_path else None,
    )


def encode_corpus(reports: Sequence[ReportDocument], text_ckpt: TextCheckpoint) -> list[TextEmbedding]:
    return [encode_report(r, text_ckpt) for r in reports]


def lowres_stage(cfg: RunConfig, workdir: Path) -> tuple[DenoisingUNet3d, dict]:
    base = workdir / "lowres"
    if base.with_suffix(".pt").exists():
        return load_denoiser(base)
    split = dataset_stage(cfg, workdir)
    volumes, reports = low_volumes_for(split.train, workdir)
    text_ckpt = text_stage(cfg, workdir, corpus=reports)
    embeddings = encode_corpus(reports, text_ckpt)
    sched_low, _ = schedules(cfg)
    torch.manual_seed(cfg.seed)
    model = build_lowres_denoiser(
        in_channels=len(CHANNEL_ROLES),
        base_width=cfg.lowres_model.base_width,
        channel_multipliers=cfg.lowres_model.channel_multipliers,
        heads=cfg.lowres_model.heads,
        time_embedding_dim=cfg.lowres_model.time_embedding_dim,
        text_dim=cfg.text.dim,
    )
    log.info("training low-res denoiser: %d steps on %d volumes", cfg.train_low.steps, len(volumes))
    result = train_lowres(
        model,
        sched_low,
        volumes,
        embeddings,
        _stage_train_config(cfg.train_low, cfg.seed, workdir / "lowres_metrics.jsonl"),
    )
    meta = {
        "kind": "lowres_denoiser",
        "config": dataclasses.asdict(model.config),
        "step": cfg.train_low.steps,
        "history": result.history,
        "final_loss": result.final_loss,
    }
    storage.save_checkpoint(base, model.state_dict(), meta)
    return model, meta


def superres_stage(cfg: RunConfig, workdir: Path) -> tuple[DenoisingUNet3d, dict]:
    base = workdir / "superres"
    if base.with_suffix(".pt").exists():
        return load_denoiser(base)
    split = dataset_stage(cfg, workdir)
    specs = split.train
    _, sched_high = schedules(cfg)
    torch.manual_seed(cfg.seed + 1)
    model = build_superres_denoiser(
        in_channels=len(CHANNEL_ROLES),
        base_width=cfg.superres_model.base_width,
        channel_multipliers=cfg.superres_model.channel_multipliers,
        heads=cfg.superres_model.heads,
        time_embedding_dim=cfg.superres_model.time_embedding_dim,
        axial_axis=cfg.superres_model.axial_axis,
    )

    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def pair_fn(i: int) -> tuple[np.ndarray, np.ndarray]:
        if i not in cache:
            record = synth_phantom(specs[i])
            high = record.volume.data
            low = downsample_nearest_4x(record.volume).data
            if len(cache) < 256:
                cache[i] = (high, low)
            else:
                return high, low
        return cache[i]

    log.info("training super-res denoiser: %d steps", cfg.train_super.steps)
    result = train_superres(
        model,
        sched_high,
        pair_fn,
        len(specs),
        CHANNEL_ROLES,
        _stage_train_config(cfg.train_super, cfg.seed + 1, workdir / "superres_metrics.jsonl"),
    )
    meta = {
        "kind": "superres_denoiser",
        "config": dataclasses.asdict(model.config),
        "step": cfg.train_super.steps,
        "history": result.history,
        "final_loss": result.final_loss,
    }
    storage.save_checkpoint(base, model.state_dict(), meta)
    return model, meta


def load_denoiser(base: Path) -> tuple[DenoisingUNet3d, dict]:
    from .networks import BottleneckAttention, DenoiserConfig

    state, meta = storage.load_checkpoint(base)
    cfg_d = dict(meta["config"])
    cfg_d["bottleneck_attention"] = BottleneckAttention(**cfg_d["bottleneck_attention"])
    cfg_d["channel_multipliers"] = tuple(cfg_d["channel_multipliers"])
    model = DenoisingUNet3d(DenoiserConfig(**cfg_d))
    model.load_state_dict(state)
    model.eval()
    return model, meta


# -- feature extractor stage -----------------------------------------------------------


def features_stage(cfg: RunConfig, workdir: Path) -> ConvAutoencoder3d:
    base = workdir / "features"
    if base.with_suffix(".pt").exists():
        state, meta = storage.load_checkpoint(base)
        model = ConvAutoencoder3d(size=meta["size"], dim=meta["dim"])
        model.load_state_dict(state)
        model.eval()
        return model
    split = dataset_stage(cfg, workdir)
    volumes, _ = low_volumes_for(split.train, workdir)
    cts = volumes[:, 0]
    log.info("training feature extractor: %d steps", cfg.features.steps)
    model, losses = train_feature_extractor(
        cts, steps=cfg.features.steps, seed=cfg.seed, lr=cfg.features.lr
    )
    storage.save_checkpoint(
        base,
        model.state_dict(),
        {"kind": "feature_extractor", "size": cts.shape[-1], "dim": cfg.features.dim, "final_loss": losses[-1]},
    )
    return model


# -- samplers over trained artifacts ------------------------------------------------------


def require_trained(meta: dict, what: str) -> None:
    if not meta.get("history"):
        raise ValidationError(f"{what} checkpoint has no training history; refusing to sample")


def make_prompt_sampler(
    cfg: RunConfig,
    text_ckpt: TextCheckpoint,
    lowres_model: DenoisingUNet3d,
    lowres_meta: dict,
    superres_model: Optional[DenoisingUNet3d] = None,
    stage: str = "low",
):
    """Batched sampler(prompt, n, rng) -> list[JointVolume] for studies."""
    require_trained(lowres_meta, "low-res denoiser")
    sched_low, sched_high = schedules(cfg)
    low_size = cfg.geometry.low_size
    spacing_low = (cfg.geometry.voxel_mm * 4.0,) * 3

    def sampler(prompt: str, n: int, rng: np.random.Generator) -> list[JointVolume]:
        report = ReportDocument(impression=prompt, findings=prompt, subject_id="prompt")
        f_text = encode_report(report, text_ckpt)
        arr = ancestral_sample_array(
            lowres_sampler(lowres_model, f_text, n),
            sched_low,
            (n, len(CHANNEL_ROLES), low_size, low_size, low_size),
            rng,
        )
        if stage == "low":
            return [JointVolume(arr[i], CHANNEL_ROLES, spacing_low) for i in range(n)]
        from .pipeline import superres_sampler, upsample_4x_array

        low_up = upsample_4x_array(arr, CHANNEL_ROLES)
        high = ancestral_sample_array(
            superres_sampler(superres_model, low_up),
            sched_high,
            (n, len(CHANNEL_ROLES)) + (low_size * 4,) * 3,
            rng,
        )
        spacing_high = (cfg.geometry.voxel_mm,) * 3
        return [JointVolume(high[i], CHANNEL_ROLES, spacing_high) for i in range(n)]

    return sampler


def study_stage(cfg: RunConfig, workdir: Path, rng: Optional[np.random.Generator] = None) -> StudyReport:
    text_ckpt = text_stage(cfg, workdir)
    lowres_model, lowres_meta = lowres_stage(cfg, workdir)
    superres_model = None
    if cfg.study.stage == "high":
        superres_model, _ = superres_stage(cfg, workdir)
    sampler = make_prompt_sampler(
        cfg, text_ckpt, lowres_model, lowres_meta, superres_model, stage=cfg.study.stage
    )
    rng = np.random.default_rng(cfg.seed + 77) if rng is None else rng
    return prompt_contrast_study(
        sampler, DEFAULT_PROMPT_PAIRS, cfg.study.n_per_prompt, rng, seed=cfg.seed
    )

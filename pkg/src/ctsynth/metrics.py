"""Quantitative evaluation: distribution distances, anatomy measurements,
prompt-contrast studies, and segmentation overlap.

Distribution distances (FID, MMD) operate on feature embeddings from a
pluggable extractor; the default is a small 3D convolutional autoencoder
trained on real phantoms and frozen.  Anatomy measurements work directly
on HU volumes plus the generated anatomy channels: pleural fluid by HU
window in the basal region under the lungs, the heart as the largest
bright connected component, %LAA-950 on the airway-free lung parenchyma.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.ndimage
import scipy.stats
import torch
import torch.nn as nn

from .errors import ValidationError
from .volume import JointVolume

# HU windows for measurement proxies on generated volumes
FLUID_WINDOW = (-150.0, 35.0)
HEART_THRESHOLD = 80.0
LAA_THRESHOLD = -950.0


@dataclass
class FeatureSet:
    """n x d matrix of volume embeddings from a named extractor."""

    features: np.ndarray
    extractor_id: str = "unknown"

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 2:
            raise ValidationError("feature set must be (n >= 2, d)")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("feature set contains non-finite values")


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = scipy.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(real: FeatureSet, fake: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    x, y = real.features, fake.features
    if x.shape[1] != y.shape[1]:
        raise ValidationError("feature sets have different dimensions")
    d = x.shape[1]
    if min(x.shape[0], y.shape[0]) < d:
        warnings.warn(
            f"fewer samples ({min(x.shape[0], y.shape[0])}) than feature dims ({d}); "
            "covariance estimate will be degenerate",
            stacklevel=2,
        )
    mu_r, mu_f = x.mean(0), y.mean(0)
    cov_r = np.cov(x, rowvar=False).reshape(d, d)
    cov_f = np.cov(y, rowvar=False).reshape(d, d)
    a = _sqrtm_psd(cov_r)
    inner = a @ cov_f @ a
    vals = np.clip(scipy.linalg.eigvalsh((inner + inner.T) / 2.0), 0.0, None)
    tr_sqrt = float(np.sqrt(vals).sum())
    val = float(((mu_r - mu_f) ** 2).sum() + np.trace(cov_r) + np.trace(cov_f) - 2.0 * tr_sqrt)
    return max(val, 0.0)


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    pooled = np.concatenate([x, y], axis=0)
    d2 = ((pooled[:, None, :] - pooled[None, :, :]) ** 2).sum(-1)
    med = float(np.median(np.sqrt(d2[np.triu_indices_from(d2, k=1)])))
    return med if med > 0 else 1.0


def mmd(real: FeatureSet, fake: FeatureSet, bandwidth: Optional[float] = None) -> float:
    """Biased V-statistic squared MMD with an RBF kernel."""
    x, y = real.features, fake.features
    if x.size == 0 or y.size == 0:
        raise ValidationError("empty feature set")
    if x.shape[1] != y.shape[1]:
        raise ValidationError("feature sets have different dimensions")
    sigma = median_bandwidth(x, y) if bandwidth is None else float(bandwidth)

    def k(a, b):
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        return np.exp(-d2 / (2.0 * sigma * sigma))

    val = float(k(x, x).mean() + k(y, y).mean() - 2.0 * k(x, y).mean())
    return max(val, 0.0)


# -- anatomy measurements -----------------------------------------------------


def laa950(hu: np.ndarray, lung_mask: np.ndarray) -> float:
    """Percentage of lung-mask voxels below -950 HU."""
    lung_mask = np.asarray(lung_mask, dtype=bool)
    n = int(lung_mask.sum())
    if n == 0:
        raise ValidationError("empty lung mask")
    return 100.0 * float((np.asarray(hu)[lung_mask] < LAA_THRESHOLD).sum()) / n


def _slice_width(mask2d: np.ndarray) -> int:
    cols = np.flatnonzero(mask2d.any(axis=0))
    if cols.size == 0:
        return 0
    return int(cols[-1] - cols[0] + 1)


def ctr(heart_mask: np.ndarray, lung_mask: np.ndarray) -> float:
    """Cardiothoracic ratio: the widest cardiac level's width over the
    thoracic (outer lung envelope) width at that same axial level."""
    heart_mask = np.asarray(heart_mask, dtype=bool)
    lung_mask = np.asarray(lung_mask, dtype=bool)
    if not heart_mask.any() or not lung_mask.any():
        raise ValidationError("CTR requires non-empty heart and lung masks")
    best_z, best_w = -1, 0
    for z in range(heart_mask.shape[0]):
        w = _slice_width(heart_mask[z])
        if w > best_w:
            best_z, best_w = z, w
    thorax_w = _slice_width(lung_mask[best_z])
    if thorax_w == 0:
        return float("nan")
    return best_w / thorax_w


def dice(pred_mask: np.ndarray, true_mask: np.ndarray, labels: Optional[Sequence[int]] = None) -> float:
    """Overlap 2|A&B| / (|A| + |B|); mean over labels for label maps.

    Two empty masks count as perfect agreement (1.0).
    """
    pred_mask = np.asarray(pred_mask)
    true_mask = np.asarray(true_mask)
    if pred_mask.shape != true_mask.shape:
        raise ValidationError(f"mask shapes differ: {pred_mask.shape} vs {true_mask.shape}")
    if labels is None:
        a = pred_mask.astype(bool)
        b = true_mask.astype(bool)
        denom = int(a.sum()) + int(b.sum())
        if denom == 0:
            return 1.0
        return 2.0 * float((a & b).sum()) / denom
    return float(np.mean([dice(pred_mask == l, true_mask == l) for l in labels]))


def extract_heart_mask(hu: np.ndarray) -> np.ndarray:
    """Heart proxy on a generated CT: largest connected bright component."""
    cand = np.asarray(hu) > HEART_THRESHOLD
    labeled, n = scipy.ndimage.label(cand)
    if n == 0:
        return np.zeros_like(cand, dtype=bool)
    sizes = scipy.ndimage.sum_labels(np.ones_like(labeled), labeled, index=np.arange(1, n + 1))
    return labeled == (int(np.argmax(sizes)) + 1)


def estimate_effusion_volume_l(
    hu: np.ndarray, lobe_labels: np.ndarray, voxel_volume_mm3: float
) -> float:
    """Pleural fluid volume: HU fluid window within the basal recess.

    The recess is the axial band at and below the lowest lung level,
    restricted to columns under the (dilated) lung footprint given by the
    lobe channel.
    """
    lung = np.asarray(lobe_labels) > 0
    if not lung.any():
        return float("nan")
    footprint = scipy.ndimage.binary_dilation(lung.any(axis=0), iterations=1)
    z_lung_min = int(np.flatnonzero(lung.any(axis=(1, 2)))[0])
    band = np.zeros(hu.shape[0], dtype=bool)
    band[: z_lung_min + 2] = True
    region = band[:, None, None] & footprint[None, :, :]
    fluid = (np.asarray(hu) > FLUID_WINDOW[0]) & (np.asarray(hu) <= FLUID_WINDOW[1])
    return float((fluid & region).sum()) * voxel_volume_mm3 / 1e6


def lung_air_mask(hu: np.ndarray) -> np.ndarray:
    """Air-density voxels enclosed by the body: the CT's own lung region."""
    soft = np.asarray(hu) > -500.0
    body = scipy.ndimage.binary_fill_holes(soft)
    return body & ~soft


def pca_2d(features: np.ndarray) -> np.ndarray:
    """Two-component PCA projection (plumbing for embedding scatter plots)."""
    x = np.asarray(features, dtype=np.float64)
    x = x - x.mean(0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    return x @ vt[:2].T


# -- measurement registry for generated joint volumes --------------------------


def _measure_effusion(v: JointVolume) -> float:
    from .conditioning import decode_lobe
    from .pipeline import denormalize_hu

    hu = denormalize_hu(v.channel("ct"))
    return estimate_effusion_volume_l(hu, decode_lobe(v.channel("lobe")), v.voxel_volume_mm3)


def _measure_ctr(v: JointVolume) -> float:
    from .conditioning import decode_lobe
    from .pipeline import denormalize_hu

    hu = denormalize_hu(v.channel("ct"))
    heart = extract_heart_mask(hu)
    lung = decode_lobe(v.channel("lobe")) > 0
    if not heart.any() or not lung.any():
        return float("nan")
    return ctr(heart, lung)


def _measure_laa950(v: JointVolume) -> float:
    from .conditioning import decode_binary, decode_lobe
    from .pipeline import denormalize_hu

    hu = denormalize_hu(v.channel("ct"))
    lung = decode_lobe(v.channel("lobe")) > 0
    airway = decode_binary(v.channel("airway")).astype(bool)
    parenchyma = lung & ~airway
    if not parenchyma.any():
        return float("nan")
    return laa950(hu, parenchyma)


MEASUREMENTS: dict[str, Callable[[JointVolume], float]] = {
    "effusion_volume_l": _measure_effusion,
    "ctr": _measure_ctr,
    "laa950_pct": _measure_laa950,
}


# -- prompt-contrast study ------------------------------------------------------


@dataclass(frozen=True)
class PromptPair:
    """A pathology prompt and its reversed description."""

    name: str
    positive: str
    negative: str
    measurement: str


DEFAULT_PROMPT_PAIRS = (
    PromptPair(
        name="pleural_effusion",
        positive="There are large pleural effusions seen.",
        negative="There is no pleural effusion.",
        measurement="effusion_volume_l",
    ),
    PromptPair(
        name="cardiomegaly",
        positive="There is cardiomegaly.",
        negative="The heart size is normal.",
        measurement="ctr",
    ),
    PromptPair(
        name="bullae",
        positive="Multiple bullae are seen in the lungs.",
        negative="No bullae are seen.",
        measurement="laa950_pct",
    ),
)


@dataclass
class ArmResult:
    prompt: str
    values: list[float]

    @property
    def valid(self) -> np.ndarray:
        arr = np.asarray(self.values, dtype=float)
        return arr[np.isfinite(arr)]


@dataclass
class PairResult:
    pair: PromptPair
    positive: ArmResult
    negative: ArmResult
    t_stat: float
    p_value: float
    histogram: dict

    def summary(self) -> dict:
        pos, neg = self.positive.valid, self.negative.valid
        return {
            "name": self.pair.name,
            "measurement": self.pair.measurement,
            "positive_prompt": self.pair.positive,
            "negative_prompt": self.pair.negative,
            "n_positive": int(pos.size),
            "n_negative": int(neg.size),
            "mean_positive": float(pos.mean()) if pos.size else math.nan,
            "std_positive": float(pos.std(ddof=1)) if pos.size > 1 else math.nan,
            "mean_negative": float(neg.mean()) if neg.size else math.nan,
            "std_negative": float(neg.std(ddof=1)) if neg.size > 1 else math.nan,
            "t_stat": self.t_stat,
            "p_value": self.p_value,
        }


@dataclass
class StudyReport:
    results: list[PairResult]
    n_per_prompt: int
    seed: Optional[int] = None

    def to_json_dict(self) -> dict:
        return {
            "n_per_prompt": self.n_per_prompt,
            "seed": self.seed,
            "pairs": [r.summary() for r in self.results],
            "histograms": {r.pair.name: r.histogram for r in self.results},
        }

    def csv_rows(self) -> list[dict]:
        rows = []
        for r in self.results:
            for arm, res in (("positive", r.positive), ("negative", r.negative)):
                for i, val in enumerate(res.values):
                    rows.append(
                        {
                            "pair": r.pair.name,
                            "arm": arm,
                            "prompt": res.prompt,
                            "sample": i,
                            "value": val,
                        }
                    )
        return rows


PromptSampler = Callable[[str, int, np.random.Generator], list[JointVolume]]


def prompt_contrast_study(
    sampler: PromptSampler,
    prompt_pairs: Sequence[PromptPair],
    n_per_prompt: int,
    rng: np.random.Generator,
    measurements: Optional[dict[str, Callable[[JointVolume], float]]] = None,
    seed: Optional[int] = None,
    n_bins: int = 16,
) -> StudyReport:
    """Generate per-arm samples, measure them, and run one-tailed t-tests.

    The alternative hypothesis is that the positive-prompt arm has the
    larger mean.  Samples whose measurement is undefined (NaN) are
    dropped from the test but kept in the per-sample listing.
    """
    if n_per_prompt < 2:
        raise ValidationError("n_per_prompt must be >= 2 for a two-sample t-test")
    measurements = MEASUREMENTS if measurements is None else measurements
    results = []
    for pair in prompt_pairs:
        measure = measurements[pair.measurement]
        arms = {}
        for arm_name, prompt in (("positive", pair.positive), ("negative", pair.negative)):
            volumes = sampler(prompt, n_per_prompt, rng)
            arms[arm_name] = ArmResult(prompt=prompt, values=[measure(v) for v in volumes])
        pos, neg = arms["positive"].valid, arms["negative"].valid
        if pos.size >= 2 and neg.size >= 2:
            t_stat, p_value = scipy.stats.ttest_ind(
                pos, neg, equal_var=False, alternative="greater"
            )
        else:
            t_stat, p_value = math.nan, math.nan
        all_vals = np.concatenate([pos, neg]) if pos.size + neg.size else np.zeros(1)
        edges = np.histogram_bin_edges(all_vals, bins=n_bins)
        histogram = {
            "bin_edges": edges.tolist(),
            "positive_counts": np.histogram(pos, bins=edges)[0].tolist(),
            "negative_counts": np.histogram(neg, bins=edges)[0].tolist(),
        }
        results.append(
            PairResult(
                pair=pair,
                positive=arms["positive"],
                negative=arms["negative"],
                t_stat=float(t_stat),
                p_value=float(p_value),
                histogram=histogram,
            )
        )
    return StudyReport(results=results, n_per_prompt=n_per_prompt, seed=seed)


# -- default feature extractor --------------------------------------------------


class ConvAutoencoder3d(nn.Module):
    """Tiny 3D conv autoencoder; the bottleneck embedding feeds FID/MMD."""

    def __init__(self, size: int = 16, dim: int = 32):
        super().__init__()
        if size % 8 != 0:
            raise ValidationError("autoencoder input size must be divisible by 8")
        self.size = size
        self.dim = dim
        s = size // 8
        self.encoder = nn.Sequential(
            nn.Conv3d(1, 16, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv3d(16, 32, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv3d(32, 32, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Flatten(),
            nn.Linear(32 * s ** 3, dim),
        )
        self.decoder_fc = nn.Linear(dim, 32 * s ** 3)
        self.decoder = nn.Sequential(
            nn.ConvTranspose3d(32, 32, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose3d(32, 16, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose3d(16, 1, 4, stride=2, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.encoder(x)
        s = self.size // 8
        h = self.decoder_fc(z).reshape(-1, 32, s, s, s)
        return self.decoder(h)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)


EXTRACTOR_ID = "convae3d-d32-v1"


def train_feature_extractor(
    ct_volumes: np.ndarray, steps: int = 600, batch_size: int = 16, seed: int = 0, lr: float = 1e-3
) -> tuple[ConvAutoencoder3d, list[float]]:
    """Fit the autoencoder on real CT channels; freeze afterwards."""
    x = np.asarray(ct_volumes, dtype=np.float32)
    if x.ndim != 4:
        raise ValidationError("expected (N, D, H, W) CT volumes")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = ConvAutoencoder3d(size=x.shape[-1])
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        idx = rng.choice(x.shape[0], size=min(batch_size, x.shape[0]), replace=False)
        batch = torch.from_numpy(x[idx][:, None])
        recon = model(batch)
        loss = nn.functional.mse_loss(recon, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, losses


def extract_features(model: ConvAutoencoder3d, ct_volumes: np.ndarray, batch_size: int = 64) -> FeatureSet:
    x = np.asarray(ct_volumes, dtype=np.float32)
    outs = []
    model.eval()
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            outs.append(model.embed(torch.from_numpy(x[i : i + batch_size][:, None])).numpy())
    return FeatureSet(np.concatenate(outs, axis=0), extractor_id=EXTRACTOR_ID)

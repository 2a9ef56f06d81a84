"""Procedural desk-scale lung phantoms with exact ground-truth anatomy.

Each phantom is generated deterministically from a :class:`PhantomSpec`:
an elliptic-cylinder body, two lung ellipsoids partitioned into five
lobes by tilted fissure planes, per-lung airway and vessel trees drawn as
tapered capsule chains, a central heart ellipsoid whose width is a
controlled fraction of the thoracic width, a dependent basal effusion
zone, and optional low-attenuation bullae.  The paired radiology report
is templated from the same pathology parameters, so report keywords are
an exact function of the spec.

Intensities are Hounsfield-like and chosen so that simple windows
separate the tissue classes: air/airway/bullae near -1000, parenchyma
-850, effusion +20, chest wall +60, vessels +50, heart +100.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ValidationError
from .volume import JointVolume
from .conditioning import encode_channels

# HU assignments per tissue class (mean, noise sigma)
HU_AIR = (-1000.0, 3.0)
HU_PARENCHYMA = (-850.0, 30.0)
HU_AIRWAY = (-1000.0, 3.0)
HU_VESSEL = (50.0, 10.0)
HU_HEART = (100.0, 8.0)
HU_EFFUSION = (20.0, 5.0)
HU_BODY = (60.0, 8.0)
HU_BULLA = (-1000.0, 3.0)

LOBE_LABELS = (1, 2, 3, 4, 5)  # RU, RM, RL, LU, LL


@dataclass(frozen=True)
class TreeParams:
    """Branching-tree shape: depth, half-angle, taper, root size."""

    depth: int = 4
    branch_angle_deg: float = 32.0
    angle_jitter_deg: float = 5.0
    root_radius: float = 0.024
    radius_taper: float = 0.72
    root_length: float = 0.17
    length_taper: float = 0.74


@dataclass(frozen=True)
class PhantomSpec:
    """Deterministic recipe for one phantom volume and its report."""

    seed: int
    grid: int = 64
    voxel_mm: float = 4.0
    # per-side lung ellipsoids: (center_z, center_y, center_x, semi_z, semi_y, semi_x)
    right_lung: tuple[float, ...] = (0.50, 0.50, 0.30, 0.38, 0.24, 0.165)
    left_lung: tuple[float, ...] = (0.50, 0.50, 0.70, 0.38, 0.24, 0.165)
    # fissure planes: (z_offset_frac, tilt_y, tilt_x); two right, one left
    right_fissures: tuple[tuple[float, float, float], ...] = (
        (0.30, 0.10, -0.10),
        (-0.15, -0.12, 0.08),
    )
    left_fissure: tuple[float, float, float] = (0.05, 0.10, 0.10)
    airway: TreeParams = TreeParams()
    vessel: TreeParams = TreeParams(
        depth=5,
        branch_angle_deg=40.0,
        angle_jitter_deg=12.0,
        root_radius=0.017,
        radius_taper=0.74,
        root_length=0.14,
        length_taper=0.76,
    )
    heart_width_fraction: float = 0.48
    effusion_level: float = 0.0
    bullae_count: int = 0
    bullae_radius: tuple[float, float] = (0.035, 0.065)

    def validate(self) -> None:
        if self.grid < 16 or self.grid % 4 != 0:
            raise ValidationError(f"grid must be a multiple of 4 and >= 16, got {self.grid}")
        if not 0.0 <= self.effusion_level <= 0.48:
            raise ValidationError(f"effusion_level must lie in [0, 0.48], got {self.effusion_level}")
        if not 0.2 <= self.heart_width_fraction <= 0.88:
            raise ValidationError(
                f"heart_width_fraction must lie in [0.2, 0.88], got {self.heart_width_fraction}"
            )
        if self.bullae_count < 0:
            raise ValidationError("bullae_count must be >= 0")


@dataclass
class ReportDocument:
    """Impression and findings sections of one report."""

    impression: str
    findings: str
    subject_id: str = ""

    def __post_init__(self) -> None:
        if not self.impression.strip() or not self.findings.strip():
            raise ValidationError("report sections must be non-empty")


@dataclass
class PhantomRecord:
    """One phantom: joint volume, templated report, generating spec, GT masks."""

    volume: JointVolume
    report: ReportDocument
    spec: PhantomSpec
    lobe_labels: np.ndarray      # (D, H, W) uint8 in 0..5
    airway_mask: np.ndarray      # bool
    vessel_mask: np.ndarray      # bool
    heart_mask: np.ndarray       # bool
    effusion_mask: np.ndarray    # bool
    bullae_mask: np.ndarray      # bool
    body_mask: np.ndarray        # bool
    hu: np.ndarray               # (D, H, W) float32, unclipped HU


# -- geometry helpers ---------------------------------------------------------


def _voxel_grid(n: int) -> np.ndarray:
    """Normalized voxel-center coordinates, shape (3, n, n, n) in [0, 1]."""
    axes = (np.arange(n, dtype=np.float64) + 0.5) / n
    return np.stack(np.meshgrid(axes, axes, axes, indexing="ij"))


def _ellipsoid(coords: np.ndarray, center, semi) -> np.ndarray:
    cz, cy, cx = center
    sz, sy, sx = semi
    return (
        ((coords[0] - cz) / sz) ** 2
        + ((coords[1] - cy) / sy) ** 2
        + ((coords[2] - cx) / sx) ** 2
    ) <= 1.0


def _capsule(coords: np.ndarray, p0: np.ndarray, p1: np.ndarray, radius: float) -> np.ndarray:
    """Voxels within ``radius`` of segment p0-p1, computed in a bounding box."""
    n = coords.shape[1]
    lo = np.maximum(np.floor((np.minimum(p0, p1) - radius) * n).astype(int) - 1, 0)
    hi = np.minimum(np.ceil((np.maximum(p0, p1) + radius) * n).astype(int) + 1, n)
    out = np.zeros((n, n, n), dtype=bool)
    if np.any(lo >= hi):
        return out
    sl = tuple(slice(l, h) for l, h in zip(lo, hi))
    sub = coords[(slice(None),) + sl]
    d = p1 - p0
    dd = float(d @ d)
    rel = sub - p0.reshape(3, 1, 1, 1)
    if dd < 1e-12:
        dist2 = (rel ** 2).sum(axis=0)
    else:
        tproj = np.clip((rel * d.reshape(3, 1, 1, 1)).sum(axis=0) / dd, 0.0, 1.0)
        closest = p0.reshape(3, 1, 1, 1) + tproj[None] * d.reshape(3, 1, 1, 1)
        dist2 = ((sub - closest) ** 2).sum(axis=0)
    out[sl] = dist2 <= radius * radius
    return out


def _rotate(direction: np.ndarray, angle_rad: float, plane: int) -> np.ndarray:
    """Rotate a unit direction by angle in the (z, x) plane (0) or (z, y) plane (1)."""
    d = direction.copy()
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    if plane == 0:
        d[0], d[2] = c * direction[0] - s * direction[2], s * direction[0] + c * direction[2]
    else:
        d[0], d[1] = c * direction[0] - s * direction[1], s * direction[0] + c * direction[1]
    out = d / np.linalg.norm(d)
    return out


def _draw_tree(
    coords: np.ndarray,
    root: np.ndarray,
    direction: np.ndarray,
    params: TreeParams,
    rng: np.random.Generator,
) -> np.ndarray:
    """Binary capsule tree descending from ``root``; returns a boolean mask."""
    n = coords.shape[1]
    mask = np.zeros((n, n, n), dtype=bool)
    stack = [(root, direction / np.linalg.norm(direction), 0)]
    while stack:
        p0, d, depth = stack.pop()
        length = params.root_length * params.length_taper ** depth
        radius = params.root_radius * params.radius_taper ** depth
        p1 = p0 + d * length
        mask |= _capsule(coords, p0, p1, radius)
        if depth + 1 < params.depth:
            base = math.radians(params.branch_angle_deg)
            jit = math.radians(params.angle_jitter_deg)
            plane = depth % 2
            for sign in (-1.0, 1.0):
                angle = sign * (base + rng.uniform(-jit, jit))
                stack.append((p1, _rotate(d, angle, plane), depth + 1))
    return mask


# -- report templating --------------------------------------------------------

EFFUSION_SENTENCES = {
    "none": (
        "There is no pleural effusion.",
        "No pleural effusion is seen.",
        "The pleural spaces are clear.",
        "No pleural fluid is identified.",
    ),
    "small": (
        "There is a small pleural effusion.",
        "Small pleural effusions are seen.",
        "Trace pleural fluid is present.",
    ),
    "moderate": (
        "There is a moderate pleural effusion.",
        "Moderate pleural effusions are present.",
        "A moderate amount of pleural fluid is seen.",
    ),
    "large": (
        "There are large pleural effusions seen.",
        "Large pleural effusions are present.",
        "There is a large pleural effusion.",
        "Extensive pleural fluid is identified.",
    ),
}

CARDIO_SENTENCES = {
    "none": (
        "The heart size is normal.",
        "No cardiomegaly.",
        "The cardiac silhouette is normal in size.",
    ),
    "mild": (
        "There is mild cardiomegaly.",
        "The heart is mildly enlarged.",
        "Mild enlargement of the cardiac silhouette is seen.",
    ),
    "severe": (
        "There is cardiomegaly.",
        "There is marked cardiomegaly.",
        "The heart is severely enlarged.",
        "The cardiac silhouette is markedly enlarged.",
    ),
}

BULLAE_SENTENCES = {
    "none": (
        "No bullae are seen.",
        "There is no bullous disease.",
        "No emphysematous bullae are identified.",
    ),
    "present": (
        "Multiple bullae are seen in the lungs.",
        "There are scattered emphysematous bullae.",
        "Bullous emphysema is present.",
        "Several bullae are identified.",
    ),
}

FILLER_SENTENCES = (
    ("The airways are patent.", "The central airways are clear.", "The tracheobronchial tree is patent."),
    ("The pulmonary vessels are unremarkable.", "Normal caliber pulmonary vasculature.", "The pulmonary vasculature is within normal limits."),
    ("The fissures are intact.", "Lung lobes are well delineated.", "The lobar anatomy is preserved."),
    ("No acute osseous abnormality.", "The imaged upper abdomen is unremarkable.", "No lymphadenopathy by size criteria."),
)

NORMAL_IMPRESSION = (
    "No acute cardiopulmonary abnormality.",
    "Clear lungs with normal heart size.",
    "Unremarkable chest examination.",
)


def effusion_category(level: float) -> str:
    if level <= 0.0:
        return "none"
    if level < 0.21:
        return "small"
    if level < 0.33:
        return "moderate"
    return "large"


def cardio_category(fraction: float) -> str:
    if fraction < 0.56:
        return "none"
    if fraction < 0.70:
        return "mild"
    return "severe"


def bullae_category(count: int) -> str:
    return "present" if count > 0 else "none"


def render_report(spec: PhantomSpec, rng: np.random.Generator) -> ReportDocument:
    """Template a two-section report from the spec's pathology parameters."""
    eff = effusion_category(spec.effusion_level)
    card = cardio_category(spec.heart_width_fraction)
    bul = bullae_category(spec.bullae_count)

    def pick(pool) -> str:
        return pool[rng.integers(len(pool))]

    findings = [
        pick(EFFUSION_SENTENCES[eff]),
        pick(CARDIO_SENTENCES[card]),
        pick(BULLAE_SENTENCES[bul]),
    ]
    for pool in FILLER_SENTENCES:
        if rng.random() < 0.8:
            findings.append(pick(pool))
    order = rng.permutation(len(findings))
    findings_text = " ".join(findings[i] for i in order)

    impression = []
    if eff != "none":
        impression.append(pick(EFFUSION_SENTENCES[eff]))
    if card != "none":
        impression.append(pick(CARDIO_SENTENCES[card]))
    if bul != "none":
        impression.append(pick(BULLAE_SENTENCES[bul]))
    if not impression:
        impression.append(pick(NORMAL_IMPRESSION))
    return ReportDocument(
        impression=" ".join(impression),
        findings=findings_text,
        subject_id=f"phantom-{spec.seed}",
    )


def template_vocabulary() -> set[str]:
    """All lowercased words the report templates can emit (the closed corpus vocabulary)."""
    words: set[str] = set()
    pools = (
        list(EFFUSION_SENTENCES.values())
        + list(CARDIO_SENTENCES.values())
        + list(BULLAE_SENTENCES.values())
        + list(FILLER_SENTENCES)
        + [NORMAL_IMPRESSION]
    )
    for pool in pools:
        for sentence in pool:
            for w in sentence.lower().replace(".", " ").replace(",", " ").split():
                words.add(w)
    return words


# -- phantom synthesis --------------------------------------------------------


def _lung_outer_extent(spec: PhantomSpec, z: float) -> tuple[float, float]:
    """Analytic outer x-extent (lo, hi) of the two lungs at axial height z."""
    lo, hi = math.inf, -math.inf
    for lung in (spec.right_lung, spec.left_lung):
        cz, _, cx, sz, _, sx = lung
        u = 1.0 - ((z - cz) / sz) ** 2
        if u <= 0:
            continue
        half = sx * math.sqrt(u)
        lo = min(lo, cx - half)
        hi = max(hi, cx + half)
    if not math.isfinite(lo):
        raise ValidationError("heart level lies outside both lungs")
    return lo, hi


def heart_geometry(spec: PhantomSpec) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
    """Heart ellipsoid center and semi-axes implied by the width fraction."""
    center = (0.45, 0.52, 0.50)
    lo, hi = _lung_outer_extent(spec, center[0])
    semi_x = spec.heart_width_fraction * (hi - lo) / 2.0
    semi = (0.17, 0.15, semi_x)
    return center, semi


def synth_phantom(spec: PhantomSpec) -> PhantomRecord:
    """Deterministically build the phantom volume, masks, and report."""
    spec.validate()
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    n = spec.grid
    coords = _voxel_grid(n)

    # body: elliptic cylinder along z
    body = (
        (((coords[1] - 0.5) / 0.33) ** 2 + ((coords[2] - 0.5) / 0.44) ** 2) <= 1.0
    ) & (coords[0] >= 0.03) & (coords[0] <= 0.97)

    right = _ellipsoid(coords, spec.right_lung[:3], spec.right_lung[3:])
    left = _ellipsoid(coords, spec.left_lung[:3], spec.left_lung[3:])
    lungs = (right | left) & body

    heart_center, heart_semi = heart_geometry(spec)
    heart = _ellipsoid(coords, heart_center, heart_semi) & body

    # cavity z-range for effusion and basal clearance (analytic union bounds)
    z_lo = min(spec.right_lung[0] - spec.right_lung[3], spec.left_lung[0] - spec.left_lung[3])
    z_hi = max(spec.right_lung[0] + spec.right_lung[3], spec.left_lung[0] + spec.left_lung[3])
    z_extent = z_hi - z_lo
    basal_clearance = z_lo + 0.22 * z_extent

    # airway and vessel trees, one per lung, clipped to lung and above the base
    airway = np.zeros((n, n, n), dtype=bool)
    vessel = np.zeros((n, n, n), dtype=bool)
    for lung_params in (spec.right_lung, spec.left_lung):
        cz, cy, cx, sz, sy, sx = lung_params
        a_root = np.array([cz + 0.55 * sz, cy, cx])
        a_dir = np.array([-1.0, 0.05, 0.22 if cx < 0.5 else -0.22])
        airway |= _draw_tree(coords, a_root, a_dir, spec.airway, rng)
        v_root = np.array([cz + 0.35 * sz, cy - 0.25 * sy, cx])
        v_dir = np.array([-1.0, 0.35, 0.30 if cx < 0.5 else -0.30])
        vessel |= _draw_tree(coords, v_root, v_dir, spec.vessel, rng)
    above_base = coords[0] > basal_clearance
    airway &= lungs & ~heart & above_base
    vessel &= lungs & ~heart & ~airway & above_base

    # dependent effusion fills the cavity below the fluid line
    z_cut = z_lo + spec.effusion_level * z_extent
    effusion = lungs & (coords[0] < z_cut) & ~heart & ~airway & ~vessel

    # bullae: air spheres in parenchyma above the fluid line
    bullae = np.zeros((n, n, n), dtype=bool)
    parenchyma_zone = lungs & ~heart & ~effusion & ~airway & ~vessel
    placed = 0
    attempts = 0
    while placed < spec.bullae_count and attempts < 200:
        attempts += 1
        radius = rng.uniform(*spec.bullae_radius)
        side = spec.right_lung if rng.random() < 0.5 else spec.left_lung
        cz, cy, cx, sz, sy, sx = side
        center = np.array(
            [
                rng.uniform(max(z_cut + radius, cz - 0.5 * sz), cz + 0.7 * sz),
                rng.uniform(cy - 0.55 * sy, cy + 0.55 * sy),
                rng.uniform(cx - 0.55 * sx, cx + 0.55 * sx),
            ]
        )
        sphere = _ellipsoid(coords, center, (radius, radius, radius))
        if not sphere.any():
            continue
        if (sphere & ~parenchyma_zone).sum() > 0.4 * sphere.sum():
            continue
        bullae |= sphere & parenchyma_zone
        placed += 1

    # lobe partition of the remaining lung tissue
    lobes = np.zeros((n, n, n), dtype=np.uint8)
    lung_tissue = lungs & ~heart & ~effusion
    for side_idx, (lung_params, in_side) in enumerate(
        ((spec.right_lung, right), (spec.left_lung, left))
    ):
        cz, cy, cx, sz, sy, sx = lung_params
        region = lung_tissue & in_side
        if side_idx == 0:
            (o1, ty1, tx1), (o2, ty2, tx2) = spec.right_fissures
            d1 = (coords[0] - (cz + o1 * sz)) + ty1 * (coords[1] - cy) + tx1 * (coords[2] - cx)
            d2 = (coords[0] - (cz + o2 * sz)) + ty2 * (coords[1] - cy) + tx2 * (coords[2] - cx)
            lobes[region & (d1 > 0)] = 1
            lobes[region & (d1 <= 0) & (d2 > 0)] = 2
            lobes[region & (d2 <= 0)] = 3
        else:
            o, ty, tx = spec.left_fissure
            d = (coords[0] - (cz + o * sz)) + ty * (coords[1] - cy) + tx * (coords[2] - cx)
            lobes[region & (d > 0)] = 4
            lobes[region & (d <= 0)] = 5

    for label in LOBE_LABELS:
        if not np.any(lobes == label):
            raise ValidationError(f"degenerate geometry: lobe {label} is empty (seed {spec.seed})")

    # compose HU volume, most-specific tissue last
    hu = np.full((n, n, n), HU_AIR[0], dtype=np.float32)
    noise = np.full((n, n, n), HU_AIR[1], dtype=np.float32)

    def paint(mask, mean_sigma):
        hu[mask] = mean_sigma[0]
        noise[mask] = mean_sigma[1]

    paint(body, HU_BODY)
    paint(lungs & ~heart, HU_PARENCHYMA)
    paint(heart, HU_HEART)
    paint(effusion, HU_EFFUSION)
    paint(vessel, HU_VESSEL)
    paint(airway, HU_AIRWAY)
    paint(bullae, HU_BULLA)
    hu = hu + noise * rng.standard_normal((n, n, n)).astype(np.float32)

    report = render_report(spec, rng)

    from .pipeline import normalize_hu  # local import to avoid a module cycle

    spacing = (spec.voxel_mm,) * 3
    volume = encode_channels(
        normalize_hu(hu), lobes, airway.astype(np.uint8), vessel.astype(np.uint8), spacing
    )
    record = PhantomRecord(
        volume=volume,
        report=report,
        spec=spec,
        lobe_labels=lobes,
        airway_mask=airway,
        vessel_mask=vessel,
        heart_mask=heart,
        effusion_mask=effusion,
        bullae_mask=bullae,
        body_mask=body,
        hu=hu,
    )
    _check_invariants(record)
    return record


def _check_invariants(record: PhantomRecord) -> None:
    lung_region = (record.lobe_labels > 0) | record.airway_mask | record.vessel_mask
    if np.any(record.airway_mask & ~lung_region):
        raise ValidationError("airway leaks outside the lung region")
    if np.any(record.vessel_mask & ~lung_region):
        raise ValidationError("vessel leaks outside the lung region")
    if np.any(record.effusion_mask & record.airway_mask):
        raise ValidationError("effusion overlaps the airway")


def basal_recess_mask(record: PhantomRecord, frac: float = 0.2) -> np.ndarray:
    """Dependent basal portion of the pleural cavity (excluding the heart)."""
    spec = record.spec
    n = spec.grid
    coords = _voxel_grid(n)
    right = _ellipsoid(coords, spec.right_lung[:3], spec.right_lung[3:])
    left = _ellipsoid(coords, spec.left_lung[:3], spec.left_lung[3:])
    z_lo = min(spec.right_lung[0] - spec.right_lung[3], spec.left_lung[0] - spec.left_lung[3])
    z_hi = max(spec.right_lung[0] + spec.right_lung[3], spec.left_lung[0] + spec.left_lung[3])
    band = coords[0] < z_lo + frac * (z_hi - z_lo)
    return (right | left) & band & ~record.heart_mask & record.body_mask


# -- dataset sampling ---------------------------------------------------------

EFFUSION_PRIORS = (("none", 0.40), ("small", 0.15), ("moderate", 0.15), ("large", 0.30))
CARDIO_PRIORS = (("none", 0.50), ("mild", 0.20), ("severe", 0.30))
BULLAE_PRIORS = (("none", 0.60), ("present", 0.40))

EFFUSION_RANGES = {"none": (0.0, 0.0), "small": (0.10, 0.20), "moderate": (0.22, 0.32), "large": (0.34, 0.48)}
CARDIO_RANGES = {"none": (0.42, 0.52), "mild": (0.58, 0.66), "severe": (0.72, 0.84)}


def _draw_category(priors, rng: np.random.Generator) -> str:
    names = [n for n, _ in priors]
    probs = [p for _, p in priors]
    return names[rng.choice(len(names), p=probs)]


def sample_spec(seed: int, rng: np.random.Generator, grid: int = 64, voxel_mm: float = 4.0) -> PhantomSpec:
    """Draw one spec: jittered anatomy plus categorical pathology levels."""
    def jitter(base, rel=0.07):
        return base * (1.0 + rng.uniform(-rel, rel))

    right = (0.50, jitter(0.50, 0.03), jitter(0.30, 0.05), jitter(0.38), jitter(0.24), jitter(0.165))
    left = (0.50, jitter(0.50, 0.03), jitter(0.70, 0.02), jitter(0.38), jitter(0.24), jitter(0.165))
    fiss_r = (
        (rng.uniform(0.24, 0.36), rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15)),
        (rng.uniform(-0.22, -0.10), rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15)),
    )
    fiss_l = (rng.uniform(-0.02, 0.12), rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15))

    eff_cat = _draw_category(EFFUSION_PRIORS, rng)
    card_cat = _draw_category(CARDIO_PRIORS, rng)
    bul_cat = _draw_category(BULLAE_PRIORS, rng)
    eff_level = rng.uniform(*EFFUSION_RANGES[eff_cat]) if eff_cat != "none" else 0.0
    card_frac = rng.uniform(*CARDIO_RANGES[card_cat])
    n_bullae = int(rng.integers(2, 7)) if bul_cat == "present" else 0

    return PhantomSpec(
        seed=seed,
        grid=grid,
        voxel_mm=voxel_mm,
        right_lung=right,
        left_lung=left,
        right_fissures=fiss_r,
        left_fissure=fiss_l,
        heart_width_fraction=card_frac,
        effusion_level=eff_level,
        bullae_count=n_bullae,
    )


@dataclass
class DatasetSplit:
    train: list[PhantomSpec]
    val: list[PhantomSpec]
    test: list[PhantomSpec]


def sample_dataset(
    n: int,
    rng: np.random.Generator,
    grid: int = 64,
    voxel_mm: float = 4.0,
    seed_base: int = 10_000,
) -> DatasetSplit:
    """Draw n specs with sequential seeds and a fixed 80/10/10 split."""
    if n < 1:
        raise ValidationError("dataset size must be >= 1")
    specs = [sample_spec(seed_base + i, rng, grid=grid, voxel_mm=voxel_mm) for i in range(n)]
    n_test = n // 10
    n_val = n // 10
    n_train = n - n_val - n_test
    return DatasetSplit(
        train=specs[:n_train],
        val=specs[n_train : n_train + n_val],
        test=specs[n_train + n_val :],
    )


# -- ground-truth measurements ------------------------------------------------


def measure_ground_truth(record: PhantomRecord) -> dict[str, float]:
    """Exact anatomy/pathology measurements from the generating masks."""
    vox_mm3 = record.volume.voxel_volume_mm3
    effusion_l = float(record.effusion_mask.sum()) * vox_mm3 / 1e6

    parenchyma = (record.lobe_labels > 0) & ~record.airway_mask
    n_par = int(parenchyma.sum())
    laa = 100.0 * float((record.bullae_mask & parenchyma).sum()) / n_par if n_par else float("nan")

    from .metrics import ctr  # local import to avoid a module cycle

    lung_mask = record.lobe_labels > 0
    ctr_value = ctr(record.heart_mask, lung_mask)

    airway_mm3 = float(record.airway_mask.sum()) * vox_mm3
    return {
        "effusion_volume_l": effusion_l,
        "laa950_pct": laa,
        "ctr": ctr_value,
        "airway_volume_mm3": airway_mm3,
    }

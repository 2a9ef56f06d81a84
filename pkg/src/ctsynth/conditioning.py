"""Channel-space joint modeling and conditioning modes.

The joint volume carries CT plus anatomy in four channels.  Label
channels use fixed affine codes: lobe labels 0..5 map to ``2*k/5 - 1``,
binary airway/vessel maps to ``{-1, +1}``.  Conditioning on known
channels is done by marginalization: during reverse diffusion the known
channels are overwritten with their correctly-noised ground truth before
every denoiser call, so the denoiser only ever sees in-distribution
states and only the unknown channels are generated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .diffusion import NoiseSchedule, ancestral_sample_array
from .errors import ShapeError, ValidationError
from .volume import CHANNEL_ROLES, JointVolume, as_array

N_LOBE_LEVELS = 6  # background + 5 lobes


def encode_lobe(labels: np.ndarray) -> np.ndarray:
    """Lobe labels 0..5 -> [-1, 1] via v = 2*k/5 - 1."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 5:
        raise ValidationError("lobe labels must lie in 0..5")
    return (2.0 * labels.astype(np.float32) / 5.0 - 1.0).astype(np.float32)


def decode_lobe(values: np.ndarray) -> np.ndarray:
    """Nearest encoded level."""
    k = np.rint((np.asarray(values, dtype=np.float32) + 1.0) * 2.5)
    return np.clip(k, 0, 5).astype(np.uint8)


def encode_binary(mask: np.ndarray) -> np.ndarray:
    """{0, 1} -> {-1, +1}."""
    mask = np.asarray(mask)
    vals = np.unique(mask)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValidationError("binary mask must contain only 0/1")
    return (mask.astype(np.float32) * 2.0 - 1.0).astype(np.float32)


def decode_binary(values: np.ndarray) -> np.ndarray:
    """Sign threshold at 0."""
    return (np.asarray(values) > 0).astype(np.uint8)


def concat_channels(
    ct: np.ndarray,
    lobe_labels: np.ndarray,
    airway: np.ndarray,
    vessel: np.ndarray,
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> JointVolume:
    """Stack (normalized CT, raw label masks) into the 4-channel joint volume."""
    ct = np.asarray(ct, dtype=np.float32)
    for name, m in (("lobe", lobe_labels), ("airway", airway), ("vessel", vessel)):
        if np.asarray(m).shape != ct.shape:
            raise ShapeError(f"{name} mask shape {np.asarray(m).shape} != ct shape {ct.shape}")
    data = np.stack(
        [ct, encode_lobe(lobe_labels), encode_binary(airway), encode_binary(vessel)]
    )
    return JointVolume(data, CHANNEL_ROLES, voxel_spacing)


# kept as an explicit alias: phantoms build their channels through the same codec
encode_channels = concat_channels


def split_channels(v: JointVolume) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`concat_channels`: (ct, lobe labels, airway, vessel)."""
    return (
        v.channel("ct").copy(),
        decode_lobe(v.channel("lobe")),
        decode_binary(v.channel("airway")),
        decode_binary(v.channel("vessel")),
    )


@dataclass
class FixMask:
    """Which channels are held fixed during sampling, and their content."""

    flags: tuple[bool, ...]
    content: Optional[JointVolume] = None

    @classmethod
    def none(cls, n_channels: int = len(CHANNEL_ROLES)) -> "FixMask":
        return cls(flags=(False,) * n_channels, content=None)

    @classmethod
    def for_roles(cls, roles: tuple[str, ...], content: JointVolume) -> "FixMask":
        flags = tuple(r in roles for r in content.channel_roles)
        return cls(flags=flags, content=content)

    def validate(self) -> None:
        if any(self.flags) and self.content is None:
            raise ValidationError("fixed channels declared but no content volume given")
        if all(self.flags):
            raise ValidationError("all channels fixed: nothing left to generate")

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.flags))


OverwriteHook = Callable[[int, np.ndarray, np.ndarray], None]


def marginal_sample(
    denoiser,
    sched: NoiseSchedule,
    fix: FixMask,
    rng: np.random.Generator,
    spatial_shape: tuple[int, int, int],
    cond=None,
    channel_roles: tuple[str, ...] = CHANNEL_ROLES,
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    batch: int = 1,
    on_overwrite: Optional[OverwriteHook] = None,
) -> np.ndarray:
    """Ancestral sampling with fixed channels marginalized out.

    At every reverse step the flagged channels of the state are replaced
    with a fresh forward-noised rendering of the fixed content; after the
    final step they are set to the content exactly.  Returns a
    ``(batch, C, D, H, W)`` array.  ``on_overwrite(t, state, eps)`` is an
    instrumentation hook observing each overwrite.
    """
    fix.validate()
    idx = fix.indices
    shape = (batch, len(channel_roles)) + tuple(spatial_shape)

    if idx.size:
        content = as_array(fix.content).astype(np.float32)
        if content.shape != shape[1:]:
            raise ShapeError(f"fix content shape {content.shape} != sample shape {shape[1:]}")
        fixed = content[idx]

        def hook(t: int, x: np.ndarray) -> np.ndarray:
            eps = rng.standard_normal((batch, idx.size) + tuple(spatial_shape), dtype=np.float32)
            x[:, idx] = (
                np.float32(sched.sqrt_alpha_bar[t]) * fixed
                + np.float32(sched.sqrt_one_minus_alpha_bar[t]) * eps
            )
            if on_overwrite is not None:
                on_overwrite(t, x, eps)
            return x

        def finalize(x: np.ndarray) -> np.ndarray:
            x[:, idx] = fixed
            return x

    else:
        hook = None
        finalize = None

    out = ancestral_sample_array(
        denoiser, sched, shape, rng, cond=cond, pre_step_hook=hook, post_hook=finalize
    )
    if idx.size:
        # the conditioning contract: fixed channels match their content bit-exactly
        if not np.array_equal(out[:, idx], np.broadcast_to(fixed, (batch,) + fixed.shape)):
            raise AssertionError("fixed channels diverged from conditioning content at t=0")
    return out


def segment_via_marginalization(
    ct: np.ndarray,
    denoiser,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    cond=None,
    channel_roles: tuple[str, ...] = CHANNEL_ROLES,
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    repeats: int = 1,
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Segmentation as generation: fix the CT channel, generate the anatomy.

    ``cond`` may be a zero text embedding to express the prompt-free
    variant.  Returns ``repeats`` decoded ``(lobe, airway, vessel)`` mask
    tuples (single stochastic samples; callers may aggregate).
    """
    ct = np.asarray(ct, dtype=np.float32)
    template = np.zeros((len(channel_roles),) + ct.shape, dtype=np.float32)
    template[channel_roles.index("ct")] = ct
    content = JointVolume(template, channel_roles, voxel_spacing)
    fix = FixMask.for_roles(("ct",), content)
    out = marginal_sample(
        denoiser,
        sched,
        fix,
        rng,
        ct.shape,
        cond=cond,
        channel_roles=channel_roles,
        voxel_spacing=voxel_spacing,
        batch=repeats,
    )
    results = []
    for b in range(repeats):
        vol = JointVolume(out[b], channel_roles, voxel_spacing)
        _, lobe, airway, vessel = split_channels(vol)
        results.append((lobe, airway, vessel))
    return results

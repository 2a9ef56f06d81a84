"""Multi-channel 3D volumes.

A :class:`JointVolume` is a ``(C, D, H, W)`` float array holding a CT
channel together with encoded anatomy channels (lobe labels, airway,
vessel), all normalized to ``[-1, 1]``.  Axis convention: ``D`` is the
axial (inferior -> superior) axis, ``H`` anterior -> posterior, ``W``
right -> left.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ShapeError, ValidationError

CHANNEL_ROLES = ("ct", "lobe", "airway", "vessel")


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class JointVolume:
    """C-channel 3D scalar field with named channels and voxel spacing.

    ``data`` has shape ``(C, D, H, W)`` with values in ``[-1, 1]``;
    ``voxel_spacing`` is mm per voxel along ``(D, H, W)``.
    """

    data: np.ndarray
    channel_roles: tuple[str, ...] = CHANNEL_ROLES
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        self.channel_roles = tuple(self.channel_roles)
        self.voxel_spacing = tuple(float(s) for s in self.voxel_spacing)
        self.validate()

    def validate(self) -> None:
        if self.data.ndim != 4:
            raise ShapeError(f"expected (C, D, H, W) data, got shape {self.data.shape}")
        c, d, h, w = self.data.shape
        if c != len(self.channel_roles):
            raise ShapeError(
                f"{c} channels but {len(self.channel_roles)} roles {self.channel_roles}"
            )
        for role in self.channel_roles:
            if role not in CHANNEL_ROLES:
                raise ValidationError(f"unknown channel role {role!r}")
        if len(set(self.channel_roles)) != len(self.channel_roles):
            raise ValidationError(f"duplicate channel roles {self.channel_roles}")
        for n in (d, h, w):
            if not _is_power_of_two(n):
                raise ShapeError(f"spatial dims must be powers of two, got {(d, h, w)}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("volume contains non-finite values")
        if len(self.voxel_spacing) != 3 or any(s <= 0 for s in self.voxel_spacing):
            raise ValidationError(f"bad voxel spacing {self.voxel_spacing}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    @property
    def voxel_volume_mm3(self) -> float:
        sd, sh, sw = self.voxel_spacing
        return sd * sh * sw

    def channel(self, role: str) -> np.ndarray:
        """Return the (D, H, W) array for a named channel."""
        try:
            idx = self.channel_roles.index(role)
        except ValueError:
            raise ValidationError(f"no channel {role!r} in {self.channel_roles}") from None
        return self.data[idx]

    def with_data(self, data: np.ndarray) -> "JointVolume":
        """Same metadata, new voxel data."""
        return replace(self, data=data)


def as_array(x) -> np.ndarray:
    """Accept a JointVolume or a bare array; return the underlying ndarray."""
    if isinstance(x, JointVolume):
        return x.data
    return np.asarray(x)

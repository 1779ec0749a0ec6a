"""Dense 3D/4D volume types shared by every other module.

Arrays are held in ``(H, W, D)`` shape (``(C, H, W, D)`` for logits). The
canonical flat ordering is x-fastest, ``index = h + H * (w + W * d)``, which is
numpy's Fortran order on the ``(H, W, D)`` array; :meth:`flat` and
:meth:`from_flat` convert to and from it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

if TYPE_CHECKING:
    from mlvfuse.labels import LabelSchema

LABEL_DTYPE = np.uint16
REAL_DTYPE = np.float32


class GeometryMismatchError(ValueError):
    """Raised when a binary operation receives volumes on different grids."""


@dataclass(frozen=True)
class VolumeGeometry:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # Opaque NIfTI qform/sform bytes; never interpreted, ignored by equality.
    orientation: Optional[bytes] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise ValueError(f"geometry needs 3 dims and 3 spacings, got {dims}, {spacing}")
        if any(d < 1 for d in dims):
            raise ValueError(f"all dims must be >= 1, got {dims}")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"all spacings must be finite and > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def num_voxels(self) -> int:
        h, w, d = self.dims
        return h * w * d

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz


def require_same_geometry(volumes: Sequence, what: str = "volumes") -> VolumeGeometry:
    """Return the shared geometry of ``volumes`` or raise GeometryMismatchError."""
    if not volumes:
        raise ValueError(f"no {what} given")
    ref = volumes[0].geometry
    for i, v in enumerate(volumes[1:], start=1):
        if v.geometry != ref:
            raise GeometryMismatchError(
                f"{what}[{i}] geometry {v.geometry.dims}/{v.geometry.spacing} "
                f"differs from {what}[0] {ref.dims}/{ref.spacing}"
            )
    return ref


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


class _Volume3D:
    geometry: VolumeGeometry
    data: np.ndarray

    def flat(self) -> np.ndarray:
        """Voxel values in canonical x-fastest order."""
        return self.data.ravel(order="F")

    def same_data(self, other) -> bool:
        return (
            type(self) is type(other)
            and self.geometry == other.geometry
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class LabelVolume(_Volume3D):
    """Integer label ids on a 3D grid.

    ``space`` is ``"base"`` (background + F regions) or ``"rater"``
    (R*F + 1 rater-specific labels); it only matters when ``schema`` is set.
    """

    geometry: VolumeGeometry
    data: np.ndarray
    schema: Optional["LabelSchema"] = None
    space: str = "base"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != self.geometry.dims:
            raise ValueError(f"label data shape {data.shape} != dims {self.geometry.dims}")
        if data.dtype.kind not in "iub":
            raise TypeError(f"label data must be integer, got {data.dtype}")
        if data.size and data.min() < 0:
            raise ValueError("label ids must be non-negative")
        if data.size and data.max() > np.iinfo(LABEL_DTYPE).max:
            raise ValueError("label ids exceed the 16-bit label range")
        if self.space not in ("base", "rater"):
            raise ValueError(f"unknown label space {self.space!r}")
        if self.schema is not None:
            limit = self.schema.num_labels(self.space)
            if data.size and int(data.max()) >= limit:
                bad = int(np.flatnonzero(self.flat_of(data) >= limit)[0])
                raise ValueError(
                    f"voxel {bad}: label {int(self.flat_of(data)[bad])} invalid in "
                    f"{self.space} space ({limit} labels)"
                )
        object.__setattr__(self, "data", _frozen(data.astype(LABEL_DTYPE, copy=False)))

    @staticmethod
    def flat_of(arr: np.ndarray) -> np.ndarray:
        return arr.ravel(order="F")

    @classmethod
    def from_flat(cls, geometry: VolumeGeometry, values, **kw) -> "LabelVolume":
        arr = np.asarray(values).reshape(geometry.dims, order="F")
        return cls(geometry, arr, **kw)

    @classmethod
    def zeros(cls, geometry: VolumeGeometry, **kw) -> "LabelVolume":
        return cls(geometry, np.zeros(geometry.dims, dtype=LABEL_DTYPE), **kw)

    def with_data(self, data: np.ndarray) -> "LabelVolume":
        return LabelVolume(self.geometry, data, schema=self.schema, space=self.space)


@dataclass(frozen=True, eq=False)
class ScalarVolume(_Volume3D):
    geometry: VolumeGeometry
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != self.geometry.dims:
            raise ValueError(f"scalar data shape {data.shape} != dims {self.geometry.dims}")
        object.__setattr__(self, "data", _frozen(data.astype(REAL_DTYPE, copy=False)))

    @classmethod
    def from_flat(cls, geometry: VolumeGeometry, values) -> "ScalarVolume":
        return cls(geometry, np.asarray(values).reshape(geometry.dims, order="F"))

    @classmethod
    def constant(cls, geometry: VolumeGeometry, value: float) -> "ScalarVolume":
        return cls(geometry, np.full(geometry.dims, value, dtype=REAL_DTYPE))


@dataclass(frozen=True, eq=False)
class LogitVolume:
    """Per-class scores, array shape ``(C, H, W, D)``; flat order is class-major."""

    geometry: VolumeGeometry
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4 or data.shape[1:] != self.geometry.dims:
            raise ValueError(
                f"logit data shape {data.shape} incompatible with dims {self.geometry.dims}"
            )
        if data.shape[0] < 2:
            raise ValueError(f"logit volume needs C >= 2 classes, got {data.shape[0]}")
        object.__setattr__(self, "data", _frozen(data.astype(REAL_DTYPE, copy=False)))

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    def flat(self) -> np.ndarray:
        # class-major, x-fastest within each class: Fortran order of (H, W, D, C)
        return np.moveaxis(self.data, 0, -1).ravel(order="F")

    @classmethod
    def from_flat(cls, geometry: VolumeGeometry, num_classes: int, values) -> "LogitVolume":
        arr = np.asarray(values).reshape(geometry.dims + (num_classes,), order="F")
        return cls(geometry, np.moveaxis(arr, -1, 0))

    def same_data(self, other) -> bool:
        return (
            isinstance(other, LogitVolume)
            and self.geometry == other.geometry
            and np.array_equal(self.data, other.data)
        )


def argmax_labels(logits: LogitVolume) -> LabelVolume:
    """Decode class scores to labels; ties go to the lowest class index."""
    # np.argmax returns the first maximal index, which is the tie-break we want
    labels = np.argmax(logits.data, axis=0)
    return LabelVolume(logits.geometry, labels.astype(LABEL_DTYPE))

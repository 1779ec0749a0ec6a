"""Base and rater-specific label spaces.

Base space: background 0 plus foreground regions 1..F. Rater-specific space:
one shared background plus every (region, rater) pair, laid out region-major::

    id(f, r) = 1 + (f - 1) * R + r        f in 1..F, r in 0..R-1

so with F=3, R=4 the ids 1-4 are the anterior region for raters 0-3, 5-8 the
middle region and 9-12 the posterior region.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from mlvfuse.volume import LABEL_DTYPE, LabelVolume

DEFAULT_REGIONS = ("Anterior", "Middle", "Posterior")


@dataclass(frozen=True)
class LabelSchema:
    foreground_names: tuple[str, ...] = DEFAULT_REGIONS
    num_raters: int = 4

    def __post_init__(self):
        names = tuple(str(n) for n in self.foreground_names)
        if len(names) < 1:
            raise ValueError("schema needs at least one foreground label")
        if int(self.num_raters) < 1:
            raise ValueError(f"num_raters must be >= 1, got {self.num_raters}")
        object.__setattr__(self, "foreground_names", names)
        object.__setattr__(self, "num_raters", int(self.num_raters))

    @property
    def num_foreground(self) -> int:
        return len(self.foreground_names)

    @property
    def total_labels(self) -> int:
        """Size of the rater-specific label space, background included."""
        return self.num_raters * self.num_foreground + 1

    def num_labels(self, space: str) -> int:
        if space == "base":
            return self.num_foreground + 1
        if space == "rater":
            return self.total_labels
        raise ValueError(f"unknown label space {space!r}")

    def region_key(self, base_label: int) -> str:
        """Lowercase region name used as a report key."""
        return self.foreground_names[base_label - 1].lower()

    def rater_label_name(self, label: int) -> str:
        base, rater = collapse_to_base(label, self)
        if base == 0:
            return "Background"
        return f"{self.foreground_names[base - 1]}/Rater {rater + 1}"

    def to_json(self) -> dict:
        return {"foreground_names": list(self.foreground_names), "num_raters": self.num_raters}

    @classmethod
    def from_json(cls, obj: dict) -> "LabelSchema":
        try:
            return cls(tuple(obj["foreground_names"]), int(obj["num_raters"]))
        except KeyError as e:
            raise ValueError(f"schema JSON missing field {e}") from None

    @classmethod
    def load(cls, path) -> "LabelSchema":
        with open(Path(path), encoding="utf-8") as f:
            return cls.from_json(json.load(f))


def _check_rater(rater_index: int, schema: LabelSchema) -> None:
    if not 0 <= rater_index < schema.num_raters:
        raise ValueError(f"rater index {rater_index} out of range [0, {schema.num_raters})")


def to_rater_label(base_label: int, rater_index: int, schema: LabelSchema) -> int:
    _check_rater(rater_index, schema)
    if not 0 <= base_label <= schema.num_foreground:
        raise ValueError(f"base label {base_label} out of range [0, {schema.num_foreground}]")
    if base_label == 0:
        return 0
    return 1 + (base_label - 1) * schema.num_raters + rater_index


def collapse_to_base(label: int, schema: LabelSchema) -> tuple[int, Optional[int]]:
    """Inverse of :func:`to_rater_label`; background gives ``(0, None)``."""
    if not 0 <= label < schema.total_labels:
        raise ValueError(f"rater-specific label {label} out of range [0, {schema.total_labels})")
    if label == 0:
        return 0, None
    base, rater = divmod(label - 1, schema.num_raters)
    return base + 1, rater


def _lookup_tables(schema: LabelSchema, rater_index: int) -> tuple[np.ndarray, np.ndarray]:
    to_rater = np.array(
        [to_rater_label(b, rater_index, schema) for b in range(schema.num_foreground + 1)],
        dtype=LABEL_DTYPE,
    )
    to_base = np.array(
        [collapse_to_base(lab, schema)[0] for lab in range(schema.total_labels)], dtype=LABEL_DTYPE
    )
    return to_rater, to_base


def remap_volume(
    volume: LabelVolume, rater_index: Optional[int], direction: str, schema: LabelSchema
) -> LabelVolume:
    """Apply the label map voxelwise.

    ``direction`` is ``"base->rater"`` or ``"rater->base"``. For
    ``rater->base`` the rater index is not needed to collapse and may be None;
    if given, voxels carrying another rater's labels are rejected.
    """
    if direction not in ("base->rater", "rater->base"):
        raise ValueError(f"unknown direction {direction!r}")
    src_space = "base" if direction == "base->rater" else "rater"
    if rater_index is not None or direction == "base->rater":
        _check_rater(rater_index if rater_index is not None else -1, schema)

    flat = volume.flat()
    n_src = schema.num_labels(src_space)
    bad = flat >= n_src
    if direction == "rater->base" and rater_index is not None:
        fg = flat > 0
        bad |= fg & ((flat.astype(np.int64) - 1) % schema.num_raters != rater_index)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(
            f"voxel {i} has label {int(flat[i])}, invalid for {src_space} space"
            + (f" of rater {rater_index}" if rater_index is not None else "")
        )

    to_rater, to_base = _lookup_tables(schema, rater_index if rater_index is not None else 0)
    if direction == "base->rater":
        return LabelVolume(volume.geometry, to_rater[volume.data], schema=schema, space="rater")
    return LabelVolume(volume.geometry, to_base[volume.data], schema=schema, space="base")

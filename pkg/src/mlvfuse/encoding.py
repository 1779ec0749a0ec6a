"""Rater-conditioned input stacks.

Each rater gets a signed one-hot code over ``ceil(R/2)`` channels: rater ``i``
puts ``+1`` (even ``i``) or ``-1`` (odd ``i``) into channel ``i // 2``. For
four raters this gives ``[1, 0], [-1, 0], [0, 1], [0, -1]``. The code is
appended to the image as spatially constant channels, and those channels are
exempt from z-score normalization (which would flatten them to zero).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mlvfuse.volume import ScalarVolume, VolumeGeometry, require_same_geometry

STD_EPS = 1e-12


@dataclass(frozen=True)
class RaterCodebook:
    num_raters: int
    num_channels: int
    codes: tuple[tuple[int, ...], ...]

    def code(self, rater_index: int) -> tuple[int, ...]:
        if not 0 <= rater_index < self.num_raters:
            raise IndexError(f"rater index out of range: {rater_index} (num_raters={self.num_raters})")
        return self.codes[rater_index]

    def as_array(self) -> np.ndarray:
        return np.array(self.codes, dtype=np.int64).reshape(self.num_raters, self.num_channels)


def build_codebook(num_raters: int) -> RaterCodebook:
    if num_raters < 1:
        raise ValueError(f"need at least one rater, got {num_raters}")
    n_ch = (num_raters + 1) // 2
    codes = []
    for i in range(num_raters):
        code = [0] * n_ch
        code[i // 2] = 1 if i % 2 == 0 else -1
        codes.append(tuple(code))
    return RaterCodebook(num_raters, n_ch, tuple(codes))


@dataclass(frozen=True)
class InputStack:
    geometry: VolumeGeometry
    channels: tuple[ScalarVolume, ...]
    rater_channel_start: int

    @property
    def image_channels(self) -> tuple[ScalarVolume, ...]:
        return self.channels[: self.rater_channel_start]

    @property
    def code_channels(self) -> tuple[ScalarVolume, ...]:
        return self.channels[self.rater_channel_start :]


def build_input(
    image_channels: Sequence[ScalarVolume],
    rater_index: int,
    codebook: RaterCodebook,
    geometry: VolumeGeometry | None = None,
) -> InputStack:
    """Append the rater's code channels to ``image_channels``.

    ``geometry`` is only needed when there are no image channels to take it
    from; if both are given they must agree.
    """
    if image_channels:
        geom = require_same_geometry(list(image_channels), "image channels")
        if geometry is not None and geometry != geom:
            raise ValueError("explicit geometry differs from the image channels")
    elif geometry is None:
        raise ValueError("geometry is required when there are no image channels")
    else:
        geom = geometry
    code = codebook.code(rater_index)
    codes = tuple(ScalarVolume.constant(geom, float(c)) for c in code)
    return InputStack(geom, tuple(image_channels) + codes, len(image_channels))


def _zscore(channel: ScalarVolume) -> ScalarVolume:
    # fixed reduction order: canonical voxel order, float64 accumulation
    x = channel.flat().astype(np.float64)
    mean = np.add.reduce(x) / x.size
    centered = x - mean
    std = np.sqrt(np.add.reduce(centered * centered) / x.size)
    if std < STD_EPS:
        return ScalarVolume(channel.geometry, np.zeros(channel.geometry.dims))
    return ScalarVolume.from_flat(channel.geometry, centered / std)


def zscore_normalize(stack: InputStack) -> InputStack:
    """Per-channel z-score (population std) of image channels only."""
    normed = tuple(_zscore(c) for c in stack.image_channels)
    return InputStack(stack.geometry, normed + stack.code_channels, stack.rater_channel_start)

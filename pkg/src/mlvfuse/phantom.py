"""Synthetic ramified vessel phantoms and simulated rater styles.

A phantom is a curved trunk tube (an arc, like a sinus seen sideways) with
recursively branching side tubes. Trunk arclength is split into consecutive
regions (anterior/middle/posterior by default); every branch inherits the
region of the trunk point it sprouts from. Tubes are capsules around their
center-line segments, voxelized in millimeters so anisotropic spacing is
respected.

Raters are simulated from a ground truth by whole-branch dropout, a
spacing-aware morphological dilation/erosion and random flips of voxels on
the foreground/background boundary.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from mlvfuse.rng import PortableRng
from mlvfuse.volume import LABEL_DTYPE, LabelVolume, ScalarVolume, VolumeGeometry


class PhantomGeometryError(ValueError):
    """A tube does not fit inside the volume."""


@dataclass(frozen=True)
class PhantomParams:
    dims: tuple[int, int, int] = (80, 48, 40)
    spacing: tuple[float, float, float] = (0.5, 0.5, 1.0)
    seed: int = 0
    # trunk: x runs from margin to far end, z rises by arc_height_frac of the free height
    trunk: Optional[tuple[tuple[float, float, float], ...]] = None
    trunk_margin_mm: float = 3.0
    arc_height_frac: float = 0.6
    trunk_samples: int = 64
    branch_depth: int = 2
    branches_per_node: int = 2
    branch_sites: int = 6
    branch_length_mm: float = 7.0
    length_decay: float = 0.7
    cone_angle_deg: float = 45.0
    radius_mm: float = 1.2
    radius_decay: float = 0.75
    region_fractions: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "region_fractions", tuple(float(f) for f in self.region_fractions))
        if self.trunk is not None:
            object.__setattr__(self, "trunk", tuple(tuple(float(c) for c in p) for p in self.trunk))
        self.validate()

    @property
    def geometry(self) -> VolumeGeometry:
        return VolumeGeometry(self.dims, self.spacing)

    @property
    def num_regions(self) -> int:
        return len(self.region_fractions)

    def radius_at(self, depth: int) -> float:
        return self.radius_mm * self.radius_decay**depth

    def validate(self) -> None:
        VolumeGeometry(self.dims, self.spacing)
        if self.branch_depth < 0 or self.branches_per_node < 0 or self.branch_sites < 0:
            raise ValueError("branch_depth, branches_per_node and branch_sites must be >= 0")
        if not self.region_fractions or any(f <= 0 for f in self.region_fractions):
            raise ValueError("region fractions must be positive")
        if not math.isclose(sum(self.region_fractions), 1.0, abs_tol=1e-9):
            raise ValueError(f"region fractions must sum to 1, got {sum(self.region_fractions)}")
        if self.radius_at(self.branch_depth) < min(self.spacing):
            raise ValueError(
                f"radius at depth {self.branch_depth} is {self.radius_at(self.branch_depth):.3f} mm, "
                f"below one voxel ({min(self.spacing)} mm)"
            )
        if self.trunk is not None and len(self.trunk) < 2:
            raise ValueError("a custom trunk needs at least two points")
        if self.trunk_samples < 2:
            raise ValueError("trunk_samples must be >= 2")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "PhantomParams":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown phantom parameters: {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class RaterStyle:
    dilation_mm: float = 0.0
    branch_dropout_prob: float = 0.0
    boundary_flip_prob: float = 0.0
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if not 0 <= self.branch_dropout_prob < 1:
            raise ValueError(f"branch_dropout_prob must be in [0, 1), got {self.branch_dropout_prob}")
        if not 0 <= self.boundary_flip_prob < 0.5:
            raise ValueError(f"boundary_flip_prob must be in [0, 0.5), got {self.boundary_flip_prob}")
        if not math.isfinite(self.dilation_mm):
            raise ValueError("dilation_mm must be finite")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "RaterStyle":
        return cls(**obj)


@dataclass(frozen=True)
class Segment:
    start: np.ndarray
    end: np.ndarray
    radius: float
    region: int
    branch: int  # 1 = trunk, >= 2 = side branches


@dataclass(frozen=True)
class Phantom:
    """Ground truth plus the branch bookkeeping needed for dropout.

    ``branch_map`` holds the branch id owning each voxel (0 background,
    1 trunk); ``branch_parent[b]`` is the parent id of branch ``b``.
    """

    labels: LabelVolume
    branch_map: np.ndarray
    branch_parent: dict[int, int] = field(default_factory=dict)
    params: Optional[PhantomParams] = None


def _resample(points: np.ndarray, n: int) -> np.ndarray:
    """``n`` points evenly spaced in arclength along a polyline."""
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])
    if cum[-1] == 0:
        return points[[0, -1]]
    s = np.linspace(0.0, cum[-1], n)
    return np.stack([np.interp(s, cum, points[:, a]) for a in range(3)], axis=1)


def _trunk_polyline(p: PhantomParams) -> np.ndarray:
    if p.trunk is not None:
        return _resample(np.array(p.trunk, dtype=np.float64), p.trunk_samples)
    ext = np.array([(n - 1) * s for n, s in zip(p.dims, p.spacing)])
    m = p.trunk_margin_mm
    t = np.linspace(0.0, 1.0, p.trunk_samples)
    z_lo = m
    z_hi = m + p.arc_height_frac * max(ext[2] - 2 * m, 0.0)
    x = m + t * (ext[0] - 2 * m)
    y = np.full_like(t, ext[1] / 2)
    z = z_lo + (z_hi - z_lo) * np.sin(np.pi * t)
    return np.stack([x, y, z], axis=1)


def _region_of(frac: float, fractions: Sequence[float]) -> int:
    edges = np.cumsum(fractions)
    return int(min(np.searchsorted(edges, frac, side="right"), len(fractions) - 1)) + 1


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _orthonormal(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = _unit(np.cross(axis, helper))
    return u, np.cross(axis, u)


def _cone_direction(axis: np.ndarray, half_angle: float, rng: PortableRng) -> np.ndarray:
    """Uniform direction on the spherical cap of ``half_angle`` around ``axis``."""
    u1, u2 = rng.uniform(2)
    cos_t = 1.0 - u1 * (1.0 - math.cos(half_angle))
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    phi = 2 * math.pi * u2
    a, b = _orthonormal(axis)
    return _unit(cos_t * axis + sin_t * (math.cos(phi) * a + math.sin(phi) * b))


def _inside(point: np.ndarray, radius: float, extent: np.ndarray) -> bool:
    return bool(np.all(point - radius >= 0) and np.all(point + radius <= extent))


def _fit_branch(start, direction, length, radius, extent) -> Optional[np.ndarray]:
    """End point of a branch, shortened until the tube fits; None if it cannot."""
    for scale in (1.0, 0.75, 0.5, 0.35):
        end = start + direction * length * scale
        if _inside(end, radius, extent):
            return end
    return None


def build_segments(params: PhantomParams) -> tuple[list[Segment], dict[int, int]]:
    """Center-line segments of the trunk and its branch tree."""
    rng = PortableRng(params.seed, 0)
    extent = np.array([(n - 1) * s for n, s in zip(params.dims, params.spacing)])
    pts = _trunk_polyline(params)
    r0 = params.radius_at(0)
    for i, q in enumerate(pts):
        if not _inside(q, r0, extent):
            raise PhantomGeometryError(
                f"trunk point {i} at {np.round(q, 3).tolist()} mm with radius {r0} mm "
                f"leaves the volume extent {extent.tolist()} mm"
            )

    seg_len = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    total = float(seg_len.sum())
    if total <= 0:
        raise PhantomGeometryError("trunk has zero length")
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])

    segments: list[Segment] = []
    for i in range(len(pts) - 1):
        mid_frac = (cum[i] + cum[i + 1]) / 2 / total
        segments.append(Segment(pts[i], pts[i + 1], r0, _region_of(mid_frac, params.region_fractions), 1))

    parents: dict[int, int] = {}
    next_id = 2
    half_angle = math.radians(params.cone_angle_deg)

    def grow(start, axis, depth, region, parent):
        nonlocal next_id
        length = params.branch_length_mm * params.length_decay ** (depth - 1)
        radius = params.radius_at(depth)
        for _ in range(params.branches_per_node):
            direction = _cone_direction(axis, half_angle, rng)
            end = _fit_branch(start, direction, length, radius, extent)
            if end is None:
                continue
            bid = next_id
            next_id += 1
            parents[bid] = parent
            segments.append(Segment(start, end, radius, region, bid))
            if depth < params.branch_depth:
                grow(end, direction, depth + 1, region, bid)

    if params.branch_depth >= 1:
        for k in range(params.branch_sites):
            frac = (k + 0.5) / params.branch_sites
            s = frac * total
            i = int(min(np.searchsorted(cum, s, side="right") - 1, len(pts) - 2))
            local = (s - cum[i]) / seg_len[i] if seg_len[i] > 0 else 0.0
            root = pts[i] + local * (pts[i + 1] - pts[i])
            tangent = _unit(pts[i + 1] - pts[i])
            # side branches leave roughly perpendicular to the trunk
            a, b = _orthonormal(tangent)
            phi = 2 * math.pi * rng.uniform()
            axis = math.cos(phi) * a + math.sin(phi) * b
            grow(root, axis, 1, _region_of(frac, params.region_fractions), 1)
    return segments, parents


def _rasterize(segments: Sequence[Segment], geometry: VolumeGeometry):
    spacing = np.array(geometry.spacing)
    dims = np.array(geometry.dims)
    best = np.full(geometry.dims, np.inf)
    region = np.zeros(geometry.dims, dtype=LABEL_DTYPE)
    branch = np.zeros(geometry.dims, dtype=np.int32)
    for seg in segments:
        lo = np.floor((np.minimum(seg.start, seg.end) - seg.radius) / spacing).astype(int)
        hi = np.ceil((np.maximum(seg.start, seg.end) + seg.radius) / spacing).astype(int) + 1
        lo = np.clip(lo, 0, dims)
        hi = np.clip(hi, 0, dims)
        if np.any(hi <= lo):
            continue
        axes = [np.arange(lo[a], hi[a]) * spacing[a] for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([gx, gy, gz], axis=-1)
        d = seg.end - seg.start
        dd = float(d @ d)
        t = np.zeros(gx.shape) if dd == 0 else np.clip((pts - seg.start) @ d / dd, 0.0, 1.0)
        nearest = seg.start + t[..., None] * d
        dist = np.linalg.norm(pts - nearest, axis=-1)
        box = tuple(slice(lo[a], hi[a]) for a in range(3))
        take = (dist <= seg.radius) & (dist < best[box])
        best[box] = np.where(take, dist, best[box])
        region[box] = np.where(take, seg.region, region[box])
        branch[box] = np.where(take, seg.branch, branch[box])
    return region, branch


def build_phantom(params: PhantomParams) -> Phantom:
    segments, parents = build_segments(params)
    geom = params.geometry
    region, branch = _rasterize(segments, geom)
    return Phantom(LabelVolume(geom, region), branch, parents, params)


def generate_phantom(params: PhantomParams) -> LabelVolume:
    """Ground-truth label volume for ``params`` (deterministic in the seed)."""
    return build_phantom(params).labels


def synthetic_image(phantom_labels: LabelVolume, seed: int, noise_std: float = 0.3) -> ScalarVolume:
    """Flat bright-vessel image with Gaussian noise, for exercising input stacks."""
    rng = PortableRng(seed, 1)
    base = (phantom_labels.data > 0).astype(np.float64)
    noise = rng.normal(phantom_labels.geometry.dims)
    return ScalarVolume(phantom_labels.geometry, base + noise_std * noise)


# --- rater simulation ------------------------------------------------------


def _dropped_branches(parents: dict[int, int], prob: float, rng: PortableRng) -> set[int]:
    ids = sorted(parents)
    draws = rng.uniform(len(ids)) if ids else np.empty(0)
    chosen = {b for b, u in zip(ids, draws) if u < prob}
    dropped = set()
    for b in ids:
        node = b
        while node in parents:
            if node in chosen:
                dropped.add(b)
                break
            node = parents[node]
    return dropped


def morph_labels(labels: np.ndarray, spacing, amount_mm: float) -> np.ndarray:
    """Grow (``amount_mm > 0``) or shrink (``< 0``) the foreground by a distance.

    Growing gives each newly covered background voxel the label of its nearest
    foreground voxel; shrinking removes foreground voxels within the distance
    of the background. Distances are Euclidean between voxel centers in mm.
    """
    if amount_mm == 0:
        return labels.copy()
    fg = labels > 0
    if amount_mm > 0:
        if not fg.any():
            return labels.copy()
        dist, (ix, iy, iz) = ndimage.distance_transform_edt(~fg, sampling=spacing, return_indices=True)
        out = labels.copy()
        grow = ~fg & (dist <= amount_mm)
        out[grow] = labels[ix[grow], iy[grow], iz[grow]]
        return out
    if fg.all():
        return labels.copy()
    dist = ndimage.distance_transform_edt(fg, sampling=spacing)
    out = labels.copy()
    out[fg & (dist <= -amount_mm)] = 0
    return out


_FACE = ndimage.generate_binary_structure(3, 1)


def _flip_boundary(labels: np.ndarray, prob: float, rng: PortableRng) -> np.ndarray:
    draws = rng.uniform(labels.shape)
    if prob <= 0:
        return labels
    fg = labels > 0
    inner_edge = fg & ~ndimage.binary_erosion(fg, _FACE, border_value=1)
    outer_edge = ndimage.binary_dilation(fg, _FACE) & ~fg
    flip = draws < prob
    out = labels.copy()
    out[inner_edge & flip] = 0
    grow = outer_edge & flip
    if grow.any():
        neighbour_label = ndimage.grey_dilation(labels, footprint=_FACE)
        out[grow] = neighbour_label[grow]
    return out


def simulate_rater(
    gt: LabelVolume,
    style: RaterStyle,
    phantom: Optional[Phantom] = None,
) -> LabelVolume:
    """One rater's annotation of ``gt`` in the given style.

    Branch dropout needs the branch bookkeeping of ``phantom``; without it
    dropout is skipped with a warning. Steps run in order dropout,
    dilation/erosion, boundary flips, each drawing from its own stream of
    the style's seed.
    """
    labels = np.array(gt.data)
    if style.branch_dropout_prob > 0:
        if phantom is None:
            warnings.warn("branch dropout requested without branch map; skipped", stacklevel=2)
        else:
            dropped = _dropped_branches(
                phantom.branch_parent, style.branch_dropout_prob, PortableRng(style.seed, 10)
            )
            if dropped:
                labels[np.isin(phantom.branch_map, sorted(dropped))] = 0
    labels = morph_labels(labels, gt.geometry.spacing, style.dilation_mm)
    labels = _flip_boundary(labels, style.boundary_flip_prob, PortableRng(style.seed, 11))
    return LabelVolume(gt.geometry, labels, schema=gt.schema, space=gt.space)


MODERATE_STYLES = (
    RaterStyle(dilation_mm=0.5, branch_dropout_prob=0.1, boundary_flip_prob=0.05, seed=11, name="generous"),
    RaterStyle(dilation_mm=0.0, branch_dropout_prob=0.15, boundary_flip_prob=0.08, seed=12, name="noisy"),
    RaterStyle(dilation_mm=-0.5, branch_dropout_prob=0.1, boundary_flip_prob=0.05, seed=13, name="tight"),
    RaterStyle(dilation_mm=0.0, branch_dropout_prob=0.2, boundary_flip_prob=0.05, seed=14, name="sparse"),
)


def load_styles(path) -> list[RaterStyle]:
    """A JSON file holding one style object or a list of them."""
    with open(path, encoding="utf-8") as f:
        obj = json.load(f)
    items = obj if isinstance(obj, list) else [obj]
    return [RaterStyle.from_json(o) for o in items]

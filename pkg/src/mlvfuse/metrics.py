"""Segmentation metrics, volume error bounds, Fleiss' kappa and t-tests.

Dice and relative predicted volume both come from one confusion matrix::

    DSC   = 2 TP / (2 TP + FN + FP)
    V_rel = (TP + FP) / (TP + FN)

For any prediction with DSC > 0 the relative volume is confined to
``[2 / (2 - DSC) - 1, 2 / DSC - 1]``. Normalising by the reference volume
(TP + FN = 1) gives ``V_rel = 2 TP / DSC - 1``; TP <= 1 yields the upper
bound and FP >= 0 the lower one. The lower bound is reached when FP = 0 and
the upper bound when FN = 0.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from mlvfuse.volume import LabelVolume, require_same_geometry


class EmptyDiceWarning(UserWarning):
    """Both prediction and reference are empty for the evaluated labels."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def predicted(self) -> int:
        return self.tp + self.fp

    @property
    def reference(self) -> int:
        return self.tp + self.fn

    def swapped(self) -> "ConfusionCounts":
        """Counts with prediction and reference exchanged."""
        return ConfusionCounts(self.tp, self.fn, self.fp, self.tn)


def confusion(pred: LabelVolume, ref: LabelVolume, label_set: Iterable[int]) -> ConfusionCounts:
    """Binarize both volumes by membership in ``label_set`` and count."""
    require_same_geometry([pred, ref], "volumes")
    labels = np.array(sorted(set(int(x) for x in label_set)), dtype=np.int64)
    p = np.isin(pred.data, labels)
    r = np.isin(ref.data, labels)
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def dice(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fn + c.fp
    if denom == 0:
        warnings.warn("Dice of two empty masks defined as 1.0", EmptyDiceWarning, stacklevel=2)
        return 1.0
    return 2 * c.tp / denom


def relative_volume(c: ConfusionCounts) -> float:
    if c.reference == 0:
        raise ValueError("relative volume undefined: reference is empty")
    return c.predicted / c.reference


@dataclass(frozen=True)
class VolumeBounds:
    dsc: float
    lower: float
    upper: float

    def contains(self, v_rel: float, rtol: float = 1e-12) -> bool:
        return self.lower * (1 - rtol) <= v_rel <= self.upper * (1 + rtol)


def volume_bounds(dsc: float) -> VolumeBounds:
    if not 0 < dsc <= 1:
        raise ValueError(f"DSC must lie in (0, 1], got {dsc}")
    # d/(2-d) and (2-d)/d equal 2/(2-d)-1 and 2/d-1 without the cancellation at small d
    return VolumeBounds(dsc, dsc / (2 - dsc), (2 - dsc) / dsc)


def landis_koch(kappa: Optional[float]) -> str:
    if kappa is None:
        return "undefined"
    if kappa < 0:
        return "poor"
    for upper, name in ((0.2, "slight"), (0.4, "fair"), (0.6, "moderate"), (0.8, "substantial")):
        if kappa <= upper:
            return name
    return "almost perfect"


@dataclass(frozen=True)
class KappaReport:
    """Fleiss' kappa result. ``kappa`` is None when chance agreement is 1."""

    kappa: Optional[float]
    num_items: int
    num_raters: int
    num_categories: int
    categories: tuple
    marginals: tuple[float, ...]
    observed_agreement: float
    expected_agreement: float

    @property
    def defined(self) -> bool:
        return self.kappa is not None

    @property
    def interpretation(self) -> str:
        return landis_koch(self.kappa)

    def to_json(self) -> dict:
        return {
            "kappa": self.kappa,
            "status": "ok" if self.defined else "undefined",
            "interpretation": self.interpretation,
            "num_items": self.num_items,
            "num_raters": self.num_raters,
            "num_categories": self.num_categories,
            "categories": [c.item() if hasattr(c, "item") else c for c in self.categories],
            "marginals": list(self.marginals),
            "observed_agreement": self.observed_agreement,
            "expected_agreement": self.expected_agreement,
        }


def fleiss_kappa(ratings, categories: Optional[Sequence] = None) -> KappaReport:
    """Fleiss' kappa for an ``N items x R raters`` matrix of category values.

    Parameters
    ----------
    ratings : array_like, 2-D
        ``ratings[i, j]`` is the category rater ``j`` assigned to item ``i``.
    categories : sequence, optional
        The category set. Defaults to the values present in ``ratings``;
        categories nobody used do not change kappa.

    Returns
    -------
    KappaReport
        ``kappa`` is None (not NaN) when expected agreement equals 1, i.e.
        every rating falls into one category.
    """
    ratings = np.asarray(ratings)
    if ratings.ndim != 2:
        raise ValueError(f"ratings must be 2-D (items x raters), got shape {ratings.shape}")
    n_items, n_raters = ratings.shape
    if n_items < 1:
        raise ValueError("need at least one item")
    if n_raters < 2:
        raise ValueError("need at least two raters")
    if categories is None:
        cats, idx = np.unique(ratings, return_inverse=True)
        idx = idx.reshape(ratings.shape)
    else:
        cats = np.unique(np.asarray(list(categories)))
        idx = np.searchsorted(cats, ratings).clip(0, len(cats) - 1)
        if not np.array_equal(cats[idx], ratings):
            raise ValueError("ratings contain values outside the category set")
    k = len(cats)

    # counts[i, j]: raters placing item i in category j
    counts = np.zeros((n_items, k), dtype=np.int64)
    for j in range(n_raters):
        np.add.at(counts, (np.arange(n_items), idx[:, j]), 1)

    p_j = counts.sum(axis=0) / (n_items * n_raters)
    p_i = ((counts * counts).sum(axis=1) - n_raters) / (n_raters * (n_raters - 1))
    p_bar = float(p_i.mean())
    pe_bar = float((p_j * p_j).sum())
    kappa = None if math.isclose(pe_bar, 1.0, rel_tol=0, abs_tol=1e-15) else (p_bar - pe_bar) / (1 - pe_bar)
    return KappaReport(
        kappa=kappa,
        num_items=n_items,
        num_raters=n_raters,
        num_categories=k,
        categories=tuple(cats.tolist()),
        marginals=tuple(float(x) for x in p_j),
        observed_agreement=p_bar,
        expected_agreement=pe_bar,
    )


def foreground_bbox(volumes: Sequence[LabelVolume], margin: int = 0) -> Optional[tuple[slice, ...]]:
    """Bounding box of the union foreground, grown by ``margin`` voxels."""
    union = np.zeros(volumes[0].geometry.dims, dtype=bool)
    for v in volumes:
        union |= v.data > 0
    if not union.any():
        return None
    box = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        nz = np.flatnonzero(union.any(axis=other))
        lo = max(0, int(nz[0]) - margin)
        hi = min(union.shape[axis], int(nz[-1]) + 1 + margin)
        box.append(slice(lo, hi))
    return tuple(box)


def kappa_from_volumes(
    annotations: Sequence[LabelVolume],
    mode: str = "binary",
    bbox: bool = False,
    bbox_margin: int = 0,
) -> KappaReport:
    """Fleiss' kappa with every voxel as an item.

    ``mode="binary"`` merges all foreground labels into one category;
    ``mode="multiclass"`` keeps base labels apart. ``bbox=True`` restricts the
    items to the bounding box of the union foreground, since large empty
    background inflates agreement.
    """
    if len(annotations) < 2:
        raise ValueError("need at least two annotations")
    require_same_geometry(list(annotations), "annotations")
    if mode not in ("binary", "multiclass"):
        raise ValueError(f"unknown kappa mode {mode!r}")
    region = (slice(None),) * 3
    if bbox:
        region = foreground_bbox(annotations, bbox_margin) or region
    cols = []
    for a in annotations:
        v = a.data[region].ravel(order="F")
        cols.append((v > 0).astype(np.uint8) if mode == "binary" else v)
    ratings = np.stack(cols, axis=1)
    return fleiss_kappa(ratings)


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: float
    significant: bool
    welch: bool = False
    alpha: float = field(default=0.05)

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "p": self.p,
            "df": self.df,
            "significant": self.significant,
            "alpha": self.alpha,
            "test": "welch" if self.welch else "student",
        }


def two_sample_ttest(group_a, group_b, welch: bool = False, alpha: float = 0.05) -> TTestResult:
    """Two-sided two-sample t-test; pooled-variance Student by default."""
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.size < 2 or b.size < 2:
        raise ValueError("each group needs at least two samples")
    na, nb = a.size, b.size
    va, vb = a.var(ddof=1), b.var(ddof=1)
    diff = a.mean() - b.mean()
    if welch:
        se2 = va / na + vb / nb
        if se2 == 0:
            raise ValueError("both groups have zero variance")
        df = se2**2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    else:
        pooled = ((na - 1) * va + (nb - 1) * vb) / (na + nb - 2)
        if pooled == 0:
            raise ValueError("both groups have zero variance")
        se2 = pooled * (1 / na + 1 / nb)
        df = float(na + nb - 2)
    t = float(diff / math.sqrt(se2))
    p = float(min(1.0, 2 * stats.t.sf(abs(t), df)))
    return TTestResult(t, p, float(df), p < alpha, welch, alpha)

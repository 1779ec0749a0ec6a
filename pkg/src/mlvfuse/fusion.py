"""Weighted majority-label voting, logit ensembling and rater disagreement.

Votes are counted per *base* label. Foreground counts are multiplied by the
foreground weight ``w_fg`` and the label with the largest weighted count
wins; ties go to the lowest label id, so background (0) wins every tie it is
part of. With four voters and ``w_fg = 3`` a voxel is foreground unless at
least three voters say background.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from mlvfuse.labels import LabelSchema
from mlvfuse.volume import (
    LABEL_DTYPE,
    GeometryMismatchError,
    LabelVolume,
    LogitVolume,
    ScalarVolume,
    VolumeGeometry,
    require_same_geometry,
)


@dataclass(frozen=True)
class VoteConfig:
    foreground_weight: int = 3
    tie_break: str = "lowest-label-index"

    def __post_init__(self):
        w = self.foreground_weight
        if isinstance(w, bool) or int(w) != w or w < 1:
            raise ValueError(f"foreground_weight must be an integer >= 1, got {w!r}")
        object.__setattr__(self, "foreground_weight", int(w))
        if self.tie_break != "lowest-label-index":
            raise ValueError(f"unsupported tie break {self.tie_break!r}")


@dataclass(frozen=True)
class VoteTally:
    """Vote counts, arrays of shape ``(F + 1, H, W, D)`` indexed by base label."""

    raw_count: np.ndarray
    weighted_count: np.ndarray
    num_voters: int

    def winner(self) -> np.ndarray:
        # argmax picks the first maximum: lowest label index on ties
        return np.argmax(self.weighted_count, axis=0).astype(LABEL_DTYPE)

    def disagreement(self) -> np.ndarray:
        return self.num_voters - self.raw_count.max(axis=0)


def _num_foreground(
    predictions: Sequence[LabelVolume], schema: Union[LabelSchema, int, None]
) -> int:
    if isinstance(schema, LabelSchema):
        return schema.num_foreground
    if schema is not None:
        return int(schema)
    for p in predictions:
        if p.schema is not None:
            return p.schema.num_foreground
    return max(1, max(int(p.data.max()) for p in predictions))


def tally_votes(
    predictions: Sequence[LabelVolume],
    config: VoteConfig,
    schema: Union[LabelSchema, int, None] = None,
) -> VoteTally:
    """Count base-label votes per voxel.

    ``schema`` fixes the number of foreground labels F (a LabelSchema or a
    plain int). Without it F is taken from an attached schema or, failing
    that, from the largest label present.
    """
    if not predictions:
        raise ValueError("need at least one prediction to vote")
    geom = require_same_geometry(list(predictions), "predictions")
    n_fg = _num_foreground(predictions, schema)
    for i, p in enumerate(predictions):
        if p.schema is not None and p.space != "base":
            raise ValueError(f"prediction {i} is in rater-specific space; collapse it to base first")
        flat = p.flat()
        bad = flat > n_fg
        if bad.any():
            j = int(np.flatnonzero(bad)[0])
            raise ValueError(
                f"prediction {i}, voxel {j}: label {int(flat[j])} outside base range [0, {n_fg}]"
            )

    raw = np.zeros((n_fg + 1,) + geom.dims, dtype=np.int64)
    for p in predictions:
        for label in range(n_fg + 1):
            raw[label] += p.data == label
    weights = np.full(n_fg + 1, config.foreground_weight, dtype=np.int64)
    weights[0] = 1
    weighted = raw * weights[:, None, None, None]
    return VoteTally(raw, weighted, len(predictions))


def weighted_majority_vote(
    predictions: Sequence[LabelVolume],
    config: VoteConfig = VoteConfig(),
    schema: Union[LabelSchema, int, None] = None,
) -> tuple[LabelVolume, ScalarVolume]:
    """Fuse base-space predictions; returns (fused labels, disagreement map).

    The disagreement score at a voxel is the number of voters minus the
    largest raw (unweighted) vote count there: 0 for unanimity, 2 for a 2-2
    split between four voters.
    """
    tally = tally_votes(predictions, config, schema)
    geom = predictions[0].geometry
    schema_obj = schema if isinstance(schema, LabelSchema) else predictions[0].schema
    fused = LabelVolume(geom, tally.winner(), schema=schema_obj, space="base")
    return fused, ScalarVolume(geom, tally.disagreement())


def ensemble_logits(models: Sequence[LogitVolume]) -> LogitVolume:
    """Voxelwise mean of model logits, summed in list order."""
    if not models:
        raise ValueError("need at least one logit volume")
    require_same_geometry(list(models), "logit volumes")
    n_cls = models[0].num_classes
    for i, m in enumerate(models):
        if m.num_classes != n_cls:
            raise GeometryMismatchError(
                f"logit volume {i} has {m.num_classes} classes, expected {n_cls}"
            )
    acc = models[0].data.astype(np.float64)
    for m in models[1:]:
        acc = acc + m.data
    return LogitVolume(models[0].geometry, acc / len(models))


def oracle_select(predictions: Sequence[LabelVolume], rater_index: int) -> LabelVolume:
    """Pick the prediction conditioned on the reference's own rater."""
    if not 0 <= rater_index < len(predictions):
        raise IndexError(f"rater index {rater_index} out of range for {len(predictions)} predictions")
    return predictions[rater_index]


@dataclass(frozen=True)
class ForegroundRule:
    """Outcome of fusing every possible vote multiset at one voxel.

    ``rows`` holds ``(raw_counts, weighted_counts, winner)`` per multiset,
    counts indexed by base label. ``by_background`` maps a background vote
    count to ``(foreground_possible, foreground_always)``.
    """

    num_raters: int
    num_foreground: int
    foreground_weight: int
    rows: tuple[tuple[tuple[int, ...], tuple[int, ...], int], ...]
    by_background: dict[int, tuple[bool, bool]]

    def foreground_threshold(self) -> Optional[int]:
        """Largest background count for which foreground is still reachable."""
        reachable = [b for b, (can, _) in self.by_background.items() if can]
        return max(reachable) if reachable else None

    def decisions(self) -> dict[tuple[int, ...], int]:
        return {raw: winner for raw, _, winner in self.rows}


def characterize_foreground_rule(num_raters: int, num_foreground: int, w_fg: int) -> ForegroundRule:
    """Run the voting engine on every multiset of R votes over F + 1 labels.

    Each multiset becomes one voxel of a ``(n, 1, 1)`` volume so the table is
    produced by :func:`weighted_majority_vote` itself.
    """
    config = VoteConfig(w_fg)
    multisets = list(itertools.combinations_with_replacement(range(num_foreground + 1), num_raters))
    votes = np.array(multisets, dtype=LABEL_DTYPE)  # (n, R)
    geom = VolumeGeometry((len(multisets), 1, 1))
    preds = [LabelVolume(geom, votes[:, r].reshape(-1, 1, 1)) for r in range(num_raters)]
    tally = tally_votes(preds, config, num_foreground)
    winners = tally.winner().ravel()

    rows = []
    by_bg: dict[int, list[bool]] = {}
    for i in range(len(multisets)):
        raw = tuple(int(x) for x in tally.raw_count[:, i, 0, 0])
        weighted = tuple(int(x) for x in tally.weighted_count[:, i, 0, 0])
        winner = int(winners[i])
        rows.append((raw, weighted, winner))
        by_bg.setdefault(raw[0], []).append(winner != 0)
    summary = {b: (any(v), all(v)) for b, v in sorted(by_bg.items())}
    return ForegroundRule(num_raters, num_foreground, config.foreground_weight, tuple(rows), summary)

"""Rater-aware label fusion and evaluation for multi-rater volumetric segmentation."""

from mlvfuse.volume import (
    GeometryMismatchError,
    LabelVolume,
    LogitVolume,
    ScalarVolume,
    VolumeGeometry,
    argmax_labels,
)
from mlvfuse.labels import LabelSchema, collapse_to_base, remap_volume, to_rater_label
from mlvfuse.encoding import (
    InputStack,
    RaterCodebook,
    build_codebook,
    build_input,
    zscore_normalize,
)
from mlvfuse.fusion import (
    VoteConfig,
    VoteTally,
    characterize_foreground_rule,
    ensemble_logits,
    oracle_select,
    weighted_majority_vote,
)
from mlvfuse.metrics import (
    ConfusionCounts,
    KappaReport,
    VolumeBounds,
    confusion,
    dice,
    fleiss_kappa,
    kappa_from_volumes,
    relative_volume,
    two_sample_ttest,
    volume_bounds,
)

__version__ = "0.1.0"

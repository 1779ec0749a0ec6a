"""``mlvfuse`` command line: encode, vote, metrics, irr, phantom, bounds, ttest.

Exit codes: 0 success, 2 usage or input error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from mlvfuse.encoding import build_codebook, build_input, zscore_normalize
from mlvfuse.formats import (
    VolumeFormatError,
    read_csv_column,
    read_volume,
    write_csv,
    write_json,
    write_volume,
)
from mlvfuse.fusion import VoteConfig, weighted_majority_vote
from mlvfuse.labels import LabelSchema, remap_volume
from mlvfuse.metrics import (
    confusion,
    dice,
    kappa_from_volumes,
    relative_volume,
    two_sample_ttest,
    volume_bounds,
)
from mlvfuse.phantom import (
    MODERATE_STYLES,
    PhantomParams,
    build_phantom,
    load_styles,
    simulate_rater,
    synthetic_image,
)
from mlvfuse.rng import derive_seed
from mlvfuse.volume import GeometryMismatchError, LabelVolume, VolumeGeometry

log = logging.getLogger("mlvfuse")

METRIC_COLUMNS = ("case", "region", "dsc", "v_rel", "v_mm3", "bound_lower", "bound_upper", "in_bounds")


class UsageError(Exception):
    """Bad arguments or inputs; exit code 2."""


def _config_hash(args: argparse.Namespace) -> str:
    # output locations and threading do not change results
    skip = ("func", "json_errors", "verbose", "threads")
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in skip and not k.startswith("out")}
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_schema(path) -> LabelSchema:
    if path is None:
        return LabelSchema()
    try:
        return LabelSchema.load(path)
    except FileNotFoundError:
        raise UsageError(f"schema file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"schema file {path} is not valid JSON: {e}") from None


def _existing(paths: Sequence[str], what: str) -> list[Path]:
    out = []
    for p in paths:
        path = Path(p)
        if not path.is_file():
            raise UsageError(f"{what} not found: {p}")
        out.append(path)
    return out


def _stem(path: Path) -> str:
    name = path.name
    for ext in (".nii.gz", ".nii", ".mlvr"):
        if name.lower().endswith(ext):
            return name[: -len(ext)]
    return path.stem


def _parallel_map(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _num(x) -> str:
    return "" if x is None else repr(float(x))


# --- encode ----------------------------------------------------------------


def cmd_encode(args) -> int:
    if args.raters < 1:
        raise UsageError("--raters must be >= 1")
    if not 0 <= args.rater < args.raters:
        raise UsageError(f"rater index out of range: {args.rater} (raters={args.raters})")
    images = [read_volume(p, "scalar") for p in _existing(args.image, "image")]
    geometry = None
    if not images:
        log.warning("no image channels given; stack holds rater-code channels only")
        if args.dims is None:
            raise UsageError("--dims is required when no --image is given")
        geometry = VolumeGeometry(tuple(args.dims), tuple(args.spacing))
    codebook = build_codebook(args.raters)
    stack = zscore_normalize(build_input(images, args.rater, codebook, geometry))

    out = Path(args.out)
    out.mkdir(parents=False, exist_ok=True)
    channels = []
    for i, ch in enumerate(stack.channels):
        path = out / f"channel_{i:02d}.{args.format}"
        write_volume(ch, path)
        entry = {"index": i, "path": path.name}
        if i < stack.rater_channel_start:
            entry.update(kind="image", source=str(args.image[i]))
        else:
            entry.update(kind="rater_code", value=float(ch.data.flat[0]))
        channels.append(entry)
    manifest = {
        "rater": args.rater,
        "num_raters": args.raters,
        "code": list(codebook.code(args.rater)),
        "rater_channel_start": stack.rater_channel_start,
        "num_channels": len(stack.channels),
        "dims": list(stack.geometry.dims),
        "spacing": list(stack.geometry.spacing),
        "channels": channels,
        "config_hash": _config_hash(args),
    }
    write_json(manifest, out / "manifest.json")
    _emit(manifest)
    return 0


# --- vote ------------------------------------------------------------------


def _label_counts(volume: LabelVolume, schema: LabelSchema) -> dict:
    counts = np.bincount(volume.data.ravel(), minlength=schema.num_foreground + 1)
    out = {"background": int(counts[0])}
    for f in range(1, schema.num_foreground + 1):
        out[schema.region_key(f)] = int(counts[f])
    return out


def load_predictions(paths: Sequence[Path], schema: LabelSchema, label_space: str) -> list[LabelVolume]:
    preds = []
    for path in paths:
        vol = read_volume(path, "label")
        if label_space == "rater":
            vol = remap_volume(vol, None, "rater->base", schema)
        preds.append(vol)
    return preds


def cmd_vote(args) -> int:
    schema = _load_schema(args.schema)
    preds = load_predictions(_existing(args.pred, "prediction"), schema, args.label_space)
    fused, disagreement = weighted_majority_vote(preds, VoteConfig(args.wfg), schema)
    write_volume(fused, args.out_label)
    write_volume(disagreement, args.out_uncertainty)
    if args.out_projection:
        proj = disagreement.data.max(axis=args.projection_axis)
        np.savetxt(args.out_projection, proj, fmt="%d", delimiter=",")
    hist = np.bincount(disagreement.data.astype(np.int64).ravel(), minlength=len(preds))
    _emit(
        {
            "num_voters": len(preds),
            "w_fg": args.wfg,
            "label_counts": _label_counts(fused, schema),
            "disagreement_histogram": {str(i): int(n) for i, n in enumerate(hist)},
            "config_hash": _config_hash(args),
        }
    )
    return 0


# --- metrics ---------------------------------------------------------------


def metric_rows(case: str, pred: LabelVolume, ref: LabelVolume, schema: LabelSchema) -> list[dict]:
    """One row per region plus the combined foreground."""
    regions = [(schema.region_key(f), {f}) for f in range(1, schema.num_foreground + 1)]
    regions.append(("foreground", set(range(1, schema.num_foreground + 1))))
    rows = []
    voxel_mm3 = pred.geometry.voxel_volume_mm3
    for name, label_set in regions:
        c = confusion(pred, ref, label_set)
        dsc = dice(c)
        v_rel = relative_volume(c) if c.reference > 0 else None
        bounds = volume_bounds(dsc) if dsc > 0 else None
        in_bounds = ""
        if bounds is not None and v_rel is not None:
            in_bounds = "true" if bounds.contains(v_rel) else "false"
        rows.append(
            {
                "case": case,
                "region": name,
                "dsc": _num(dsc),
                "v_rel": _num(v_rel),
                "v_mm3": _num(c.predicted * voxel_mm3),
                "bound_lower": _num(bounds.lower if bounds else None),
                "bound_upper": _num(bounds.upper if bounds else None),
                "in_bounds": in_bounds,
            }
        )
    return rows


def cmd_metrics(args) -> int:
    schema = _load_schema(args.schema)
    if len(args.pred) != len(args.ref):
        raise UsageError(f"got {len(args.pred)} --pred but {len(args.ref)} --ref paths")
    preds = _existing(args.pred, "prediction")
    refs = _existing(args.ref, "reference")

    def one(pair):
        p, r = pair
        return metric_rows(_stem(p), read_volume(p, "label"), read_volume(r, "label"), schema)

    rows = [row for case_rows in _parallel_map(one, list(zip(preds, refs)), args.threads) for row in case_rows]
    write_csv(rows, args.out, METRIC_COLUMNS)
    fg = [float(r["dsc"]) for r in rows if r["region"] == "foreground"]
    _emit(
        {
            "cases": len(preds),
            "rows": len(rows),
            "mean_foreground_dsc": float(np.mean(fg)),
            "all_in_bounds": all(r["in_bounds"] in ("true", "") for r in rows),
            "out": str(args.out),
            "config_hash": _config_hash(args),
        }
    )
    return 0


# --- irr -------------------------------------------------------------------


def cmd_irr(args) -> int:
    vols = [read_volume(p, "label") for p in _existing(args.annot, "annotation")]
    report = kappa_from_volumes(vols, mode=args.mode, bbox=args.bbox, bbox_margin=args.bbox_margin)
    out = report.to_json()
    out.update(mode=args.mode, bbox=args.bbox, config_hash=_config_hash(args))
    if args.out:
        write_json(out, args.out)
    _emit(out)
    return 0


# --- phantom ---------------------------------------------------------------


def cmd_phantom(args) -> int:
    if args.params:
        with open(_existing([args.params], "params file")[0], encoding="utf-8") as f:
            params = PhantomParams.from_json(json.load(f))
    else:
        params = PhantomParams()
    styles = []
    for path in _existing(args.styles or [], "styles file"):
        styles.extend(load_styles(path))
    styles = styles or list(MODERATE_STYLES)

    out = Path(args.out_dir)
    out.mkdir(parents=False, exist_ok=True)

    def one(case: int) -> dict:
        case_params = replace(params, seed=derive_seed(args.seed, case, 0))
        ph = build_phantom(case_params)
        case_dir = out / f"case_{case:03d}"
        case_dir.mkdir(exist_ok=True)
        write_volume(ph.labels, case_dir / f"gt.{args.format}")
        write_volume(synthetic_image(ph.labels, derive_seed(args.seed, case, 99)), case_dir / f"image.{args.format}")
        raters = []
        for j, style in enumerate(styles):
            st = replace(style, seed=derive_seed(args.seed, case, j + 1))
            vol = simulate_rater(ph.labels, st, ph)
            write_volume(vol, case_dir / f"rater_{j}.{args.format}")
            raters.append(vol)
        fg = set(range(1, params.num_regions + 1))
        kappa = kappa_from_volumes(raters, "binary") if len(raters) >= 2 else None
        return {
            "case": case_dir.name,
            "phantom_seed": case_params.seed,
            "foreground_voxels": int(np.count_nonzero(ph.labels.data)),
            "num_branches": len(ph.branch_parent),
            "rater_dsc": [dice(confusion(r, ph.labels, fg)) for r in raters],
            "kappa_binary": kappa.kappa if kappa else None,
        }

    cases = _parallel_map(one, list(range(args.cases)), args.threads)
    report = {
        "seed": args.seed,
        "params": params.to_json(),
        "styles": [s.to_json() for s in styles],
        "cases": cases,
        "config_hash": _config_hash(args),
    }
    write_json(report, out / "phantom_report.json")
    _emit({"cases": len(cases), "out_dir": str(out), "config_hash": report["config_hash"]})
    return 0


# --- bounds / ttest --------------------------------------------------------


def cmd_bounds(args) -> int:
    b = volume_bounds(args.dsc)
    _emit({"dsc": b.dsc, "lower": b.lower, "upper": b.upper})
    return 0


def cmd_ttest(args) -> int:
    a_path, b_path = _existing([args.group_a, args.group_b], "group CSV")
    a = read_csv_column(a_path, args.column)
    b = read_csv_column(b_path, args.column)
    res = two_sample_ttest(a, b, welch=args.welch, alpha=args.alpha)
    out = res.to_json()
    out.update(n_a=len(a), n_b=len(b), mean_a=float(np.mean(a)), mean_b=float(np.mean(b)))
    _emit(out)
    return 0


# --- wiring ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlvfuse", description=__doc__.splitlines()[0])
    p.add_argument("--json-errors", action="store_true", help="report failures as JSON on stderr")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    fmt_choices = ("nii.gz", "nii", "mlvr")

    e = sub.add_parser("encode", help="build a rater-conditioned, normalized input stack")
    e.add_argument("--image", nargs="*", default=[], help="image channel volumes")
    e.add_argument("--rater", type=int, required=True, help="0-based rater index")
    e.add_argument("--raters", type=int, required=True, help="number of raters R")
    e.add_argument("--out", required=True, help="output directory for channels and manifest")
    e.add_argument("--format", choices=fmt_choices, default="nii.gz")
    e.add_argument("--dims", type=int, nargs=3, help="grid size when no image is given")
    e.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    e.set_defaults(func=cmd_encode)

    v = sub.add_parser("vote", help="weighted majority-label vote with disagreement map")
    v.add_argument("--pred", nargs="+", required=True, help="one prediction per rater")
    v.add_argument("--wfg", type=int, default=3, help="foreground weight w_fg >= 1")
    v.add_argument("--schema", help="label schema JSON")
    v.add_argument("--label-space", choices=("base", "rater"), default="base",
                   help="label space of the predictions; rater-specific ones are collapsed")
    v.add_argument("--out-label", required=True)
    v.add_argument("--out-uncertainty", required=True)
    v.add_argument("--out-projection", help="CSV of the max-projection of the disagreement map")
    v.add_argument("--projection-axis", type=int, choices=(0, 1, 2), default=1)
    v.set_defaults(func=cmd_vote)

    m = sub.add_parser("metrics", help="per-region DSC, relative volume and volume bounds")
    m.add_argument("--pred", nargs="+", required=True)
    m.add_argument("--ref", nargs="+", required=True)
    m.add_argument("--schema")
    m.add_argument("--out", required=True, help="CSV output path")
    m.add_argument("--threads", type=int, default=1)
    m.set_defaults(func=cmd_metrics)

    i = sub.add_parser("irr", help="Fleiss' kappa between annotations")
    i.add_argument("--annot", nargs="+", required=True)
    i.add_argument("--mode", choices=("binary", "multiclass"), default="binary")
    i.add_argument("--bbox", action="store_true", help="restrict to the union-foreground bounding box")
    i.add_argument("--bbox-margin", type=int, default=0)
    i.add_argument("--out", help="JSON report path")
    i.set_defaults(func=cmd_irr)

    ph = sub.add_parser("phantom", help="generate phantoms and simulated rater annotations")
    ph.add_argument("--params", help="PhantomParams JSON")
    ph.add_argument("--styles", nargs="*", help="RaterStyle JSON files (object or list)")
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--cases", type=int, default=1)
    ph.add_argument("--out-dir", required=True)
    ph.add_argument("--format", choices=fmt_choices, default="nii.gz")
    ph.add_argument("--threads", type=int, default=1)
    ph.set_defaults(func=cmd_phantom)

    b = sub.add_parser("bounds", help="relative-volume bounds for a Dice score")
    b.add_argument("--dsc", type=float, required=True)
    b.set_defaults(func=cmd_bounds)

    t = sub.add_parser("ttest", help="two-sided two-sample t-test on volume CSVs")
    t.add_argument("--group-a", required=True)
    t.add_argument("--group-b", required=True)
    t.add_argument("--column", help="numeric column (default v_mm3, else first column)")
    t.add_argument("--welch", action="store_true", help="Welch instead of pooled-variance Student")
    t.add_argument("--alpha", type=float, default=0.05)
    t.set_defaults(func=cmd_ttest)
    return p


def _fail(args, code: int, exc: BaseException) -> int:
    msg = str(exc) or type(exc).__name__
    if getattr(args, "json_errors", False):
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": msg, "exit_code": code}) + "\n")
    else:
        sys.stderr.write(f"mlvfuse: error: {msg}\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="mlvfuse: %(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, VolumeFormatError, GeometryMismatchError, ValueError, IndexError,
            FileNotFoundError, PermissionError) as e:
        return _fail(args, 2, e)
    except OSError as e:
        return _fail(args, 2, e)
    except Exception as e:  # invariant violations and bugs
        return _fail(args, 3, e)


if __name__ == "__main__":
    sys.exit(main())

import json
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from mlvfuse.cli import main, metric_rows
from mlvfuse.formats import read_volume, write_volume
from mlvfuse.fusion import VoteConfig, weighted_majority_vote
from mlvfuse.labels import LabelSchema, remap_volume
from mlvfuse.metrics import confusion, dice, relative_volume, volume_bounds
from mlvfuse.phantom import MODERATE_STYLES, PhantomParams, build_phantom, simulate_rater
from mlvfuse.rng import derive_seed
from mlvfuse.volume import LabelVolume, ScalarVolume, VolumeGeometry

ONE = VolumeGeometry((1, 1, 1))


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def schema_file(tmp_path):
    path = tmp_path / "schema.json"
    path.write_text(json.dumps({"foreground_names": ["Anterior", "Middle", "Posterior"], "num_raters": 4}))
    return path


def write_labels(tmp_path, name, values, geom=ONE):
    path = tmp_path / name
    write_volume(LabelVolume(geom, np.asarray(values).reshape(geom.dims)), path)
    return path


def test_bounds(capsys):
    code, out, _ = run(capsys, "bounds", "--dsc", 0.806)
    res = json.loads(out)
    assert code == 0
    assert res["lower"] == pytest.approx(0.6750, abs=5e-4)
    assert res["upper"] == pytest.approx(1.4814, abs=5e-4)


def test_bounds_invalid(capsys):
    code, _, err = run(capsys, "--json-errors", "bounds", "--dsc", 0)
    assert code == 2
    assert json.loads(err)["exit_code"] == 2


def test_encode_with_image(tmp_path, capsys):
    img = tmp_path / "img.nii.gz"
    g = VolumeGeometry((4, 4, 2), (0.5, 0.5, 1.0))
    write_volume(ScalarVolume(g, np.arange(32, dtype=np.float32).reshape(g.dims)), img)
    code, out, _ = run(capsys, "encode", "--image", img, "--rater", 0, "--raters", 4, "--out", tmp_path / "stack")
    assert code == 0
    manifest = json.loads(out)
    codes = [c for c in manifest["channels"] if c["kind"] == "rater_code"]
    assert [c["value"] for c in codes] == [1.0, 0.0]
    assert manifest["code"] == [1, 0]
    ch0 = read_volume(tmp_path / "stack" / "channel_00.nii.gz", "scalar")
    assert abs(float(ch0.data.mean())) < 1e-6
    code1 = read_volume(tmp_path / "stack" / "channel_01.nii.gz", "scalar")
    assert np.all(code1.data == 1)


def test_encode_rater_out_of_range(tmp_path, capsys):
    code, _, err = run(capsys, "encode", "--rater", 4, "--raters", 4, "--out", tmp_path / "s", "--dims", 2, 2, 2)
    assert code == 2
    assert "rater index out of range" in err


def test_encode_without_images_warns(tmp_path, capsys, caplog):
    code, out, _ = run(capsys, "encode", "--rater", 3, "--raters", 4, "--out", tmp_path / "s",
                       "--dims", 2, 2, 2, "--format", "mlvr")
    assert code == 0
    assert "no image channels" in caplog.text
    manifest = json.loads(out)
    assert manifest["num_channels"] == 2
    assert [c["value"] for c in manifest["channels"]] == [0.0, -1.0]


def test_vote_figure_fixture(tmp_path, capsys, schema_file):
    preds = [write_labels(tmp_path, f"r{i}.mlvr", v) for i, v in enumerate([2, 2, 0, 1])]
    code, out, _ = run(capsys, "vote", "--pred", *preds, "--wfg", 3, "--schema", schema_file,
                       "--out-label", tmp_path / "f.mlvr", "--out-uncertainty", tmp_path / "u.mlvr")
    assert code == 0
    assert read_volume(tmp_path / "f.mlvr", "label").data.item() == 2
    assert read_volume(tmp_path / "u.mlvr", "scalar").data.item() == 2.0
    assert json.loads(out)["label_counts"]["middle"] == 1


def test_vote_identity_for_identical_inputs(tmp_path, capsys, rng, schema_file):
    g = VolumeGeometry((5, 4, 3))
    values = rng.integers(0, 4, g.dims)
    preds = [write_labels(tmp_path, f"p{i}.nii.gz", values, g) for i in range(3)]
    code, _, _ = run(capsys, "vote", "--pred", *preds, "--wfg", 1, "--schema", schema_file,
                     "--out-label", tmp_path / "f.nii.gz", "--out-uncertainty", tmp_path / "u.nii.gz")
    assert code == 0
    assert np.array_equal(read_volume(tmp_path / "f.nii.gz", "label").data, values)
    assert not read_volume(tmp_path / "u.nii.gz", "scalar").data.any()


def test_vote_rater_space_inputs(tmp_path, capsys, schema_file):
    schema = LabelSchema()
    base = [2, 2, 0, 1]
    preds = []
    for r, b in enumerate(base):
        v = remap_volume(LabelVolume(ONE, np.array(b).reshape(1, 1, 1)), r, "base->rater", schema)
        path = tmp_path / f"r{r}.nii"
        write_volume(v, path)
        preds.append(path)
    code, _, _ = run(capsys, "vote", "--pred", *preds, "--label-space", "rater", "--schema", schema_file,
                     "--out-label", tmp_path / "f.nii", "--out-uncertainty", tmp_path / "u.nii")
    assert code == 0
    assert read_volume(tmp_path / "f.nii", "label").data.item() == 2


def test_vote_matches_library_on_phantom(tmp_path, capsys, schema_file):
    ph = build_phantom(PhantomParams(seed=5))
    raters = [simulate_rater(ph.labels, s, ph) for s in MODERATE_STYLES]
    paths = []
    for i, r in enumerate(raters):
        paths.append(tmp_path / f"r{i}.nii.gz")
        write_volume(r, paths[-1])
    proj = tmp_path / "proj.csv"
    code, _, _ = run(capsys, "vote", "--pred", *paths, "--wfg", 3, "--schema", schema_file,
                     "--out-label", tmp_path / "f.nii.gz", "--out-uncertainty", tmp_path / "u.nii.gz",
                     "--out-projection", proj)
    assert code == 0
    fused, dis = weighted_majority_vote(raters, VoteConfig(3), LabelSchema())
    assert read_volume(tmp_path / "f.nii.gz", "label").data.tobytes() == fused.data.tobytes()
    assert read_volume(tmp_path / "u.nii.gz", "scalar").data.tobytes() == dis.data.tobytes()
    assert np.array_equal(np.loadtxt(proj, delimiter=",", ndmin=2), dis.data.max(axis=1))


def test_vote_geometry_mismatch(tmp_path, capsys, schema_file):
    a = write_labels(tmp_path, "a.mlvr", 1)
    b = write_labels(tmp_path, "b.mlvr", [1, 1], VolumeGeometry((2, 1, 1)))
    code, _, err = run(capsys, "vote", "--pred", a, b, "--schema", schema_file,
                       "--out-label", tmp_path / "f.mlvr", "--out-uncertainty", tmp_path / "u.mlvr")
    assert code == 2
    assert "geometry" in err


def test_vote_is_reproducible(tmp_path, capsys, rng, schema_file):
    g = VolumeGeometry((6, 6, 6))
    preds = [write_labels(tmp_path, f"p{i}.nii.gz", rng.integers(0, 4, g.dims), g) for i in range(4)]
    args = ["vote", "--pred", *preds, "--schema", schema_file,
            "--out-label", tmp_path / "f.nii.gz", "--out-uncertainty", tmp_path / "u.nii.gz"]
    first = run(capsys, *args)[1]
    first_bytes = (tmp_path / "f.nii.gz").read_bytes()
    assert run(capsys, *args)[1] == first
    assert (tmp_path / "f.nii.gz").read_bytes() == first_bytes


def _csv_rows(path):
    import csv

    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_metrics_perfect(tmp_path, capsys, rng, schema_file):
    g = VolumeGeometry((6, 6, 6))
    p = write_labels(tmp_path, "case1.nii.gz", rng.integers(0, 4, g.dims), g)
    code, _, _ = run(capsys, "metrics", "--pred", p, "--ref", p, "--schema", schema_file, "--out", tmp_path / "m.csv")
    assert code == 0
    rows = _csv_rows(tmp_path / "m.csv")
    assert [r["region"] for r in rows] == ["anterior", "middle", "posterior", "foreground"]
    for r in rows:
        assert r["case"] == "case1"
        assert float(r["dsc"]) == 1.0 and float(r["v_rel"]) == 1.0 and r["in_bounds"] == "true"


def test_metrics_dsc_0806_fixture(tmp_path, capsys, schema_file):
    # 403 TP, 97 FP, 97 FN -> DSC = 806 / 1000
    g = VolumeGeometry((10, 10, 10))
    ref = np.zeros(1000, dtype=int)
    pred = np.zeros(1000, dtype=int)
    ref[:500] = 1
    pred[:403] = 1
    pred[500:597] = 1
    rp = write_labels(tmp_path, "ref.mlvr", ref.reshape(g.dims), g)
    pp = write_labels(tmp_path, "pred.mlvr", pred.reshape(g.dims), g)
    with pytest.warns(Warning):
        code, _, _ = run(capsys, "metrics", "--pred", pp, "--ref", rp, "--schema", schema_file,
                         "--out", tmp_path / "m.csv")
    assert code == 0
    fg = [r for r in _csv_rows(tmp_path / "m.csv") if r["region"] == "foreground"][0]
    assert float(fg["dsc"]) == pytest.approx(0.806, abs=1e-12)
    assert float(fg["bound_lower"]) == pytest.approx(0.6750, abs=5e-4)
    assert float(fg["bound_upper"]) == pytest.approx(1.4814, abs=5e-4)
    assert fg["in_bounds"] == "true"
    middle = [r for r in _csv_rows(tmp_path / "m.csv") if r["region"] == "middle"][0]
    assert middle["v_rel"] == "" and float(middle["dsc"]) == 1.0


def test_metrics_match_library(tmp_path, capsys, schema_file):
    ph = build_phantom(PhantomParams(seed=9))
    rater = simulate_rater(ph.labels, MODERATE_STYLES[0], ph)
    write_volume(ph.labels, tmp_path / "gt.nii.gz")
    write_volume(rater, tmp_path / "r.nii.gz")
    code, _, _ = run(capsys, "metrics", "--pred", tmp_path / "r.nii.gz", "--ref", tmp_path / "gt.nii.gz",
                     "--schema", schema_file, "--out", tmp_path / "m.csv", "--threads", 2)
    assert code == 0
    rows = _csv_rows(tmp_path / "m.csv")
    sets = [{1}, {2}, {3}, {1, 2, 3}]
    for row, labels in zip(rows, sets):
        c = confusion(rater, ph.labels, labels)
        d = dice(c)
        assert float(row["dsc"]) == d
        assert float(row["v_rel"]) == relative_volume(c)
        assert float(row["v_mm3"]) == c.predicted * 0.25
        assert float(row["bound_lower"]) == volume_bounds(d).lower
    assert rows == metric_rows("r", rater, ph.labels, LabelSchema())


def test_metrics_missing_reference(tmp_path, capsys, schema_file):
    p = write_labels(tmp_path, "p.mlvr", 1)
    code, _, err = run(capsys, "metrics", "--pred", p, "--ref", tmp_path / "nope.mlvr",
                       "--schema", schema_file, "--out", tmp_path / "m.csv")
    assert code == 2
    assert "not found" in err


def test_irr(tmp_path, capsys, rng):
    g = VolumeGeometry((5, 5, 5))
    values = rng.integers(0, 4, g.dims)
    paths = [write_labels(tmp_path, f"a{i}.nii", values, g) for i in range(3)]
    code, out, _ = run(capsys, "irr", "--annot", *paths, "--mode", "multiclass", "--out", tmp_path / "k.json")
    assert code == 0
    assert json.loads(out)["kappa"] == 1.0
    assert json.loads((tmp_path / "k.json").read_text())["interpretation"] == "almost perfect"


def test_irr_undefined(tmp_path, capsys):
    paths = [write_labels(tmp_path, f"a{i}.nii", 0) for i in range(2)]
    code, out, _ = run(capsys, "irr", "--annot", *paths)
    assert code == 0
    res = json.loads(out)
    assert res["kappa"] is None and res["status"] == "undefined"


def test_phantom_command(tmp_path, capsys):
    out_dir = tmp_path / "ph"
    params = tmp_path / "params.json"
    params.write_text(json.dumps({"dims": [60, 40, 30], "branch_depth": 1}))
    code, _, _ = run(capsys, "phantom", "--params", params, "--seed", 3, "--cases", 2, "--out-dir", out_dir,
                     "--threads", 2)
    assert code == 0
    report = json.loads((out_dir / "phantom_report.json").read_text())
    assert len(report["cases"]) == 2
    case = out_dir / "case_001"
    assert sorted(p.name for p in case.iterdir()) == [
        "gt.nii.gz", "image.nii.gz", "rater_0.nii.gz", "rater_1.nii.gz", "rater_2.nii.gz", "rater_3.nii.gz"
    ]
    # library equivalence for one rater
    p = PhantomParams(dims=(60, 40, 30), branch_depth=1, seed=derive_seed(3, 1, 0))
    ph = build_phantom(p)
    assert read_volume(case / "gt.nii.gz", "label").data.tobytes() == ph.labels.data.tobytes()
    style = replace(MODERATE_STYLES[2], seed=derive_seed(3, 1, 3))
    expected = simulate_rater(ph.labels, style, ph)
    assert read_volume(case / "rater_2.nii.gz", "label").data.tobytes() == expected.data.tobytes()


def test_phantom_rerun_is_byte_identical(tmp_path, capsys):
    styles = tmp_path / "styles.json"
    styles.write_text(json.dumps([{"dilation_mm": 0.5}, {"boundary_flip_prob": 0.1}]))
    for name in ("a", "b"):
        code, _, _ = run(capsys, "phantom", "--styles", styles, "--seed", 1, "--out-dir", tmp_path / name,
                         "--format", "mlvr")
        assert code == 0
    for f in ("phantom_report.json", "case_000/gt.mlvr", "case_000/rater_1.mlvr", "case_000/image.mlvr"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_ttest(tmp_path, capsys):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    a.write_text("case,v_mm3\nx,2\ny,4\nz,6\n")
    b.write_text("case,v_mm3\nx,3\ny,5\nz,7\n")
    code, out, _ = run(capsys, "ttest", "--group-a", a, "--group-b", b)
    res = json.loads(out)
    assert code == 0
    assert res["t"] == pytest.approx(-0.6123724356957946, abs=1e-12)
    assert not res["significant"] and res["test"] == "student"


def test_console_script_entry(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mlvfuse.cli", "bounds", "--dsc", "0.5"],
                         capture_output=True, text=True, check=True)
    assert json.loads(res.stdout)["upper"] == pytest.approx(3.0)

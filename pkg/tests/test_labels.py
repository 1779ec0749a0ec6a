import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mlvfuse.labels import LabelSchema, collapse_to_base, remap_volume, to_rater_label
from mlvfuse.volume import LabelVolume, VolumeGeometry

SCHEMA = LabelSchema(("Anterior", "Middle", "Posterior"), 4)


def enumerated_table(schema):
    """Region-major layout built by counting, independent of the id formula."""
    table = {}
    next_id = 1
    for f in range(1, schema.num_foreground + 1):
        for r in range(schema.num_raters):
            table[(f, r)] = next_id
            next_id += 1
    return table


def test_total_labels():
    assert SCHEMA.total_labels == 13


def test_background_has_no_rater_label():
    for r in range(4):
        assert to_rater_label(0, r, SCHEMA) == 0


def test_known_ids():
    assert to_rater_label(1, 0, SCHEMA) == 1
    assert to_rater_label(2, 2, SCHEMA) == 7
    assert collapse_to_base(12, SCHEMA) == (3, 3)
    assert collapse_to_base(0, SCHEMA) == (0, None)


def test_formula_matches_enumeration():
    table = enumerated_table(SCHEMA)
    for (f, r), lab in table.items():
        assert to_rater_label(f, r, SCHEMA) == lab
    assert sorted(table.values()) == list(range(1, 13))


def test_names():
    assert SCHEMA.rater_label_name(1) == "Anterior/Rater 1"
    assert SCHEMA.rater_label_name(8) == "Middle/Rater 4"


@pytest.mark.parametrize("bad", [(4, 0), (-1, 0), (1, 4), (1, -1)])
def test_out_of_range(bad):
    with pytest.raises(ValueError):
        to_rater_label(*bad, SCHEMA)


def test_collapse_out_of_range():
    with pytest.raises(ValueError):
        collapse_to_base(13, SCHEMA)


@given(st.integers(1, 5), st.integers(1, 6))
def test_bijection(n_fg, n_raters):
    schema = LabelSchema(tuple(f"r{i}" for i in range(n_fg)), n_raters)
    images = set()
    for f, r in itertools.product(range(1, n_fg + 1), range(n_raters)):
        lab = to_rater_label(f, r, schema)
        assert collapse_to_base(lab, schema) == (f, r)
        images.add(lab)
    assert images == set(range(1, schema.total_labels))


def test_remap_volume_example():
    g = VolumeGeometry((4, 1, 1))
    base = LabelVolume(g, np.array([0, 1, 2, 3]).reshape(4, 1, 1))
    rater = remap_volume(base, 1, "base->rater", SCHEMA)
    assert rater.flat().tolist() == [0, 2, 6, 10]
    assert rater.space == "rater"
    back = remap_volume(rater, 1, "rater->base", SCHEMA)
    assert np.array_equal(back.data, base.data)
    assert back.geometry == g


def test_remap_background_unchanged():
    vol = LabelVolume.zeros(VolumeGeometry((2, 2, 2)))
    for direction in ("base->rater", "rater->base"):
        assert not remap_volume(vol, 0, direction, SCHEMA).data.any()


def test_remap_names_first_bad_voxel():
    g = VolumeGeometry((3, 1, 1))
    vol = LabelVolume(g, np.array([1, 5, 4]).reshape(3, 1, 1))
    with pytest.raises(ValueError, match="voxel 1"):
        remap_volume(vol, 0, "base->rater", SCHEMA)


def test_remap_rejects_other_raters_labels():
    g = VolumeGeometry((2, 1, 1))
    vol = LabelVolume(g, np.array([1, 2]).reshape(2, 1, 1))  # rater 0 and rater 1
    with pytest.raises(ValueError, match="voxel 1"):
        remap_volume(vol, 0, "rater->base", SCHEMA)
    assert remap_volume(vol, None, "rater->base", SCHEMA).flat().tolist() == [1, 1]


def test_schema_json_roundtrip(tmp_path):
    path = tmp_path / "schema.json"
    path.write_text('{"foreground_names": ["A", "B"], "num_raters": 3}')
    schema = LabelSchema.load(path)
    assert schema == LabelSchema(("A", "B"), 3)
    assert LabelSchema.from_json(schema.to_json()) == schema

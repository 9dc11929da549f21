import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from margincal.core import (
    ClassRangeError,
    HeaderError,
    LabelMask,
    ScoreMap,
    ShapeError,
    TruncatedPayloadError,
    argmax_predict,
    load_manifest,
    load_mask,
    load_scores,
    save_manifest,
    save_mask,
    save_scores,
)


def write_raw(path, header: str, payload: bytes):
    path.write_bytes(header.encode("ascii") + payload)
    return path


def test_mask_bytes_echo(tmp_path):
    p = write_raw(tmp_path / "m.msk", "MSK1 2 2 2\n", bytes([0, 1, 1, 0]))
    m = load_mask(p)
    assert (m.height, m.width, m.classes) == (2, 2, 2)
    assert m.flat().tolist() == [0, 1, 1, 0]


def test_mask_out_of_range(tmp_path):
    p = write_raw(tmp_path / "m.msk", "MSK1 2 2 3\n", bytes([0, 5, 1, 0]))
    with pytest.raises(ClassRangeError):
        load_mask(p)


def test_mask_truncated(tmp_path):
    p = write_raw(tmp_path / "m.msk", "MSK1 2 2 2\n", bytes([0, 1, 1]))
    with pytest.raises(TruncatedPayloadError):
        load_mask(p)


def test_mask_trailing_bytes_and_bad_header(tmp_path):
    with pytest.raises(HeaderError):
        load_mask(write_raw(tmp_path / "a.msk", "MSK1 1 1 2\n", bytes([0, 0])))
    with pytest.raises(HeaderError):
        load_mask(write_raw(tmp_path / "b.msk", "XXX1 1 1 2\n", bytes([0])))
    with pytest.raises(HeaderError):
        load_mask(write_raw(tmp_path / "c.msk", "MSK1 1 x 2\n", bytes([0])))


def test_mask_class_override(tmp_path):
    p = write_raw(tmp_path / "m.msk", "MSK1 1 2 4\n", bytes([0, 3]))
    with pytest.raises(ClassRangeError):
        load_mask(p, classes=3)
    assert load_mask(p, classes=5).classes == 5


def test_mask_is_read_only():
    m = LabelMask(1, 2, 2, [0, 1])
    with pytest.raises(ValueError):
        m.data[0, 0] = 1


def test_mask_invariants():
    with pytest.raises(ValueError):
        LabelMask(1, 1, 1, [0])
    with pytest.raises(ShapeError):
        LabelMask(2, 2, 2, [0, 1, 0])


@pytest.mark.parametrize(
    "scores, expected",
    [([0.1, 0.9], 1), ([0.5, 0.5], 0), ([2.0, 0.5, -1.0], 0)],
)
def test_argmax_examples(scores, expected):
    assert argmax_predict(np.array([scores]))[0] == expected
    sm = ScoreMap(1, 1, len(scores), scores)
    assert argmax_predict(sm).flat()[0] == expected


def test_scores_decode_exact(tmp_path):
    sm = ScoreMap(1, 1, 3, [1.5, -2.25, 0.0])
    save_scores(sm, tmp_path / "s.scr")
    raw = (tmp_path / "s.scr").read_bytes()
    assert raw.startswith(b"SCR1 1 1 3\n")
    payload = np.frombuffer(raw[len(b"SCR1 1 1 3\n"):], dtype="<f4")
    assert payload.tolist() == [1.5, -2.25, 0.0]


def test_scores_empty_dimension_rejected(tmp_path):
    sm = ScoreMap(0, 2, 2, np.zeros(0))
    with pytest.raises(ShapeError):
        save_scores(sm, tmp_path / "s.scr")
    assert not (tmp_path / "s.scr").exists()


def test_mask_empty_rejected(tmp_path):
    with pytest.raises(ShapeError):
        save_mask(LabelMask(0, 3, 2, []), tmp_path / "m.msk")


def test_scores_non_finite_rejected():
    with pytest.raises(ValueError):
        ScoreMap(1, 1, 2, [0.0, np.nan])


@settings(max_examples=60, deadline=None)
@given(
    h=st.integers(1, 5),
    w=st.integers(1, 5),
    c=st.integers(1, 4),
    data=st.data(),
)
def test_scores_round_trip(tmp_path_factory, h, w, c, data):
    vals = data.draw(arrays(np.float32, h * w * c, elements=st.floats(-1e6, 1e6, width=32)))
    sm = ScoreMap(h, w, c, vals.astype(np.float64))
    p = tmp_path_factory.mktemp("rt") / "s.scr"
    save_scores(sm, p)
    back = load_scores(p)
    assert (back.height, back.width, back.classes) == (h, w, c)
    np.testing.assert_array_equal(back.data, sm.data)


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6), c=st.integers(2, 256), seed=st.integers(0, 2**31))
def test_mask_round_trip(tmp_path_factory, h, w, c, seed):
    data = np.random.default_rng(seed).integers(0, c, h * w)
    m = LabelMask(h, w, c, data)
    p = tmp_path_factory.mktemp("rt") / "m.msk"
    save_mask(m, p)
    back = load_mask(p)
    assert back.classes == c
    np.testing.assert_array_equal(back.data, m.data)


def test_manifest_relative_paths_and_comments(tmp_path):
    (tmp_path / "d").mkdir()
    save_mask(LabelMask(2, 2, 3, [0, 1, 2, 0]), tmp_path / "d" / "a.msk")
    save_scores(ScoreMap(2, 2, 3, np.zeros(12)), tmp_path / "d" / "a.scr")
    (tmp_path / "m.tsv").write_text("# comment\nd/a.scr\td/a.msk\n\n")
    man = load_manifest(tmp_path / "m.tsv")
    assert len(man) == 1 and man.classes == 3 and man.pixels_per_image == 4
    assert [m.flat().tolist() for m in man.masks()] == [[0, 1, 2, 0]]


def test_manifest_round_trip(tmp_path):
    save_mask(LabelMask(1, 2, 2, [0, 1]), tmp_path / "a.msk")
    save_scores(ScoreMap(1, 2, 2, np.zeros(4)), tmp_path / "a.scr")
    save_manifest([(tmp_path / "a.scr", tmp_path / "a.msk")], tmp_path / "m.tsv")
    man = load_manifest(tmp_path / "m.tsv")
    assert man.entries[0][1].resolve() == (tmp_path / "a.msk").resolve()


def test_manifest_errors(tmp_path):
    (tmp_path / "empty.tsv").write_text("# nothing\n")
    with pytest.raises(ValueError):
        load_manifest(tmp_path / "empty.tsv")
    (tmp_path / "bad.tsv").write_text("only-one-column\n")
    with pytest.raises(ValueError):
        load_manifest(tmp_path / "bad.tsv")

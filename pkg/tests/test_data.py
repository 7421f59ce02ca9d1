import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affuse.data import (
    AU_HEADER,
    CONTEXT_DIM,
    LABELS,
    THERMAL_HEADER,
    AuFrame,
    LabeledSegment,
    ThermalFrame,
    attach_context,
    compute_window_metrics,
    load_au_csv,
    load_labels_csv,
    load_thermal_csv,
    slide_windows,
    split_by_group,
    token_dims,
    write_au_csv,
    write_labels_csv,
    write_thermal_csv,
)
from affuse.errors import (
    AlignmentError,
    AmbiguityError,
    ConfigurationError,
    DimensionError,
    DuplicateError,
    ParseError,
    ValidationError,
)

from conftest import brute_force_windows, random_streams


def _stream(pid, seconds, label_spans, temps=None):
    thermal = [ThermalFrame(pid, t, temps[t] if temps else (34.0, 34.5, 33.8, 33.0)) for t in range(seconds)]
    au = [AuFrame(pid, t, (1.0,) * 18) for t in range(seconds)]
    segs = [LabeledSegment(pid, a, b, lab) for a, b, lab in label_spans]
    return thermal, au, segs


# -- loaders ------------------------------------------------------------------


def test_empty_thermal_file(tmp_path):
    p = tmp_path / "thermal.csv"
    p.write_text(",".join(THERMAL_HEADER) + "\n")
    assert load_thermal_csv(p) == []


def test_one_row_roundtrip(tmp_path):
    p = tmp_path / "thermal.csv"
    p.write_text(",".join(THERMAL_HEADER) + "\nP01,3,34.1,34.2,33.9,33.5\n")
    (f,) = load_thermal_csv(p)
    assert f == ThermalFrame("P01", 3, (34.1, 34.2, 33.9, 33.5))


def test_duplicate_cites_both_lines(tmp_path):
    p = tmp_path / "thermal.csv"
    p.write_text(",".join(THERMAL_HEADER) + "\nP01,3,34,34,34,34\nP01,4,34,34,34,34\nP01,3,35,35,35,35\n")
    with pytest.raises(DuplicateError) as exc:
        load_thermal_csv(p)
    msg = str(exc.value)
    assert "lines 2 and 4" in msg


def test_bad_header_and_bad_number(tmp_path):
    p = tmp_path / "au.csv"
    p.write_text("participant_id,t\nP01,0\n")
    with pytest.raises(ParseError):
        load_au_csv(p)
    p.write_text(",".join(AU_HEADER) + "\nP01,0," + ",".join(["1"] * 17 + ["x"]) + "\n")
    with pytest.raises(ParseError) as exc:
        load_au_csv(p)
    assert exc.value.line == 2


def test_thermal_out_of_band_rejected(tmp_path):
    p = tmp_path / "thermal.csv"
    p.write_text(",".join(THERMAL_HEADER) + "\nP01,0,34,34,34,80\n")
    with pytest.raises(ValidationError):
        load_thermal_csv(p)


def test_overlapping_segments_rejected(tmp_path):
    p = tmp_path / "labels.csv"
    p.write_text("participant_id,start_s,end_s,label\nP01,0,10,boredom\nP01,5,12,enjoyment\n")
    with pytest.raises(ValidationError):
        load_labels_csv(p)


def test_unknown_label_rejected(tmp_path):
    p = tmp_path / "labels.csv"
    p.write_text("participant_id,start_s,end_s,label\nP01,0,10,anger\n")
    with pytest.raises(ParseError):
        load_labels_csv(p)


def test_write_then_load_roundtrip(tmp_path, rng):
    # values carried at 6 significant digits survive the text round trip exactly
    thermal = [ThermalFrame("P1", t, tuple(float(format(v, ".6g")) for v in rng.uniform(30, 38, 4)))
               for t in range(20)]
    au = [AuFrame("P1", t, tuple(float(format(v, ".6g")) for v in rng.uniform(0, 5, 18))) for t in range(20)]
    segs = [LabeledSegment("P1", 0, 10, "boredom"), LabeledSegment("P1", 10, 20, "enjoyment")]
    write_thermal_csv(thermal, tmp_path / "t.csv")
    write_au_csv(au, tmp_path / "a.csv")
    write_labels_csv(segs, tmp_path / "l.csv")
    assert load_thermal_csv(tmp_path / "t.csv") == thermal
    assert load_au_csv(tmp_path / "a.csv") == au
    assert load_labels_csv(tmp_path / "l.csv") == segs


# -- window metrics -----------------------------------------------------------


@pytest.mark.parametrize(
    "values, expected",
    [
        ([2] * 7, (2, 0, 2, 2)),
        ([0, 1, 2, 3, 4, 5, 6], (3, 6, 6, 0)),
        ([3, 1, 4, 1, 5, 9, 2], (25 / 7, -1, 9, 1)),
    ],
)
def test_window_metrics_examples(values, expected):
    m = compute_window_metrics(values)
    got = (m.avg[0], m.change[0], m.max[0], m.min[0])
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_window_metrics_channel_major():
    block = np.stack([np.arange(7.0), np.full(7, 2.0)], axis=1)
    v = compute_window_metrics(block).as_vector()
    np.testing.assert_array_equal(v, [3, 6, 6, 0, 2, 0, 2, 2])


def test_window_metrics_wrong_length():
    with pytest.raises(DimensionError):
        compute_window_metrics([1, 2, 3])


def test_token_dims():
    assert token_dims("aggregate") == {"thermal": 16, "au": 72}
    assert token_dims("sequence") == {"thermal": 4, "au": 18}
    with pytest.raises(ConfigurationError):
        token_dims("frames")


# -- windowing ----------------------------------------------------------------


def test_seven_seconds_one_window():
    assert len(slide_windows(*_stream("P", 7, [(0, 7, "boredom")]))) == 1


def test_twenty_seconds_fourteen_windows():
    ws = slide_windows(*_stream("P", 20, [(0, 20, "boredom")]))
    assert [w.start_s for w in ws] == list(range(14))


def test_boundary_at_five_no_windows():
    ws = slide_windows(*_stream("P", 10, [(0, 5, "boredom"), (5, 10, "enjoyment")]))
    assert ws == []


def test_gap_drops_windows():
    th, au, segs = _stream("P", 20, [(0, 20, "baseline")])
    th = [f for f in th if f.timestamp_s != 10]
    ws = slide_windows(th, au, segs)
    # starts 4..10 include second 10
    assert [w.start_s for w in ws] == [0, 1, 2, 3, 11, 12, 13]


def test_sequence_tokens_are_raw_seconds():
    temps = {t: (30.0 + t, 31.0, 32.0, 33.0) for t in range(8)}
    ws = slide_windows(*_stream("P", 8, [(0, 8, "boredom")], temps), mode="sequence")
    assert ws[1].thermal_tokens.shape == (7, 4)
    np.testing.assert_array_equal(ws[1].thermal_tokens[:, 0], 31.0 + np.arange(7))
    agg = slide_windows(*_stream("P", 8, [(0, 8, "boredom")], temps), mode="aggregate")
    assert agg[0].thermal_tokens.shape == (1, 16) and agg[0].au_tokens.shape == (1, 72)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_windows_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    th, au, segs = random_streams(rng)
    got = [(w.participant_id, w.start_s, w.label) for w in slide_windows(th, au, segs)]
    assert got == brute_force_windows(th, au, segs)


def test_gap_free_count_is_s_minus_6(rng):
    for s in rng.integers(7, 60, size=10):
        assert len(slide_windows(*_stream("P", int(s), [(0, int(s), "frustration")]))) == s - 6


# -- context alignment --------------------------------------------------------


def _windows(n=3, pid="P"):
    return slide_windows(*_stream(pid, n + 6, [(0, n + 6, "boredom")]))


def test_attach_context_matching_record():
    ws = _windows()
    recs = [(w.key, np.full(CONTEXT_DIM, 0.5)) for w in ws]
    out = attach_context(ws, recs)
    assert all(w.context_embedding.shape == (CONTEXT_DIM,) and w.context_present for w in out)


def test_attach_context_disabled():
    out = attach_context(_windows(), None)
    assert all(not w.context_present and not w.context_embedding.any() for w in out)


def test_attach_context_duplicate_key():
    ws = _windows()
    recs = [(w.key, np.zeros(CONTEXT_DIM)) for w in ws] + [(ws[0].key, np.ones(CONTEXT_DIM))]
    with pytest.raises(AmbiguityError):
        attach_context(ws, recs)


def test_attach_context_missing_and_wrong_dim():
    ws = _windows()
    with pytest.raises(AlignmentError):
        attach_context(ws, [(ws[0].key, np.zeros(CONTEXT_DIM))])
    with pytest.raises(DimensionError):
        attach_context(ws, [(w.key, np.zeros(10)) for w in ws])


# -- folds --------------------------------------------------------------------


def _multi_group(groups):
    ws = []
    for g in groups:
        ws += _windows(4, g)
    return ws


def test_three_groups_three_folds():
    ws = _multi_group(["A", "B", "C"])
    folds = split_by_group(ws, 3)
    assert [f.test_groups for f in folds] == [("A",), ("B",), ("C",)]
    union = np.sort(np.concatenate([f.test_idx for f in folds]))
    np.testing.assert_array_equal(union, np.arange(len(ws)))


def test_twenty_nine_groups():
    groups = [f"P{i:02d}" for i in range(29)]
    ws = _multi_group(groups)
    folds = split_by_group(ws, 29)
    assert len(folds) == 29
    assert sorted(g for f in folds for g in f.test_groups) == groups
    for f in folds:
        tr = {ws[i].group for i in f.train_idx}
        te = {ws[i].group for i in f.test_idx}
        assert len(te) == 1 and not tr & te


def test_bad_k():
    ws = _multi_group(["A", "B", "C"])
    with pytest.raises(ConfigurationError):
        split_by_group(ws, 2)
    with pytest.raises(ConfigurationError):
        split_by_group(ws, 4, leave_one_group_out=False)
    folds = split_by_group(ws, 2, leave_one_group_out=False)
    assert [f.test_groups for f in folds] == [("A", "C"), ("B",)]


def test_labels_cover_all_classes():
    assert LABELS == ("baseline", "enjoyment", "boredom", "frustration")

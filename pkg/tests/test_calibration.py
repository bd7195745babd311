import json
import logging

import pytest
from hypothesis import given, strategies as st

from cranekit.calibration import (
    CalibrationError,
    CalibrationExample,
    expand_neighborhood,
    format_support,
    load_calibration,
    save_calibration,
    select,
    summarize,
)


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def test_paper_sized_sets_load_with_summary(tmp_path, caplog):
    recs = [{"tokens": [1, 2, 3], "mask": [0, 1, 1], "set": t} for t, n in (("R", 36), ("A", 16)) for _ in range(n)]
    recs += [{"tokens": [1, 2, 3], "mask": [0, 1, 0], "set": "F"}] * 430
    p = tmp_path / "c.jsonl"
    write_jsonl(p, recs)
    with caplog.at_level(logging.INFO):
        ex = load_calibration(p)
    assert summarize(ex) == "R=36 / A=16 / F=430"
    assert "R=36 / A=16 / F=430" in caplog.text
    assert len(select(ex, "F")) == 430


def test_error_names_the_line(tmp_path):
    p = tmp_path / "c.jsonl"
    write_jsonl(p, [{"tokens": [1, 2], "mask": [0, 1], "set": "R"}, {"tokens": [1, 2], "mask": [0, 1, 1], "set": "R"}])
    with pytest.raises(CalibrationError, match=r"c\.jsonl:2"):
        load_calibration(p)


@pytest.mark.parametrize(
    "tokens, mask, tag",
    [([1, 2, 3], [0, 0, 0], "R"), ([1, 2, 3], [0, 0, 0], "A"), ([1, 2], [1, 1], "R"), ([1, 2], [0, 2], "F"), ([1], [0], "X")],
)
def test_invalid_examples(tokens, mask, tag):
    with pytest.raises(CalibrationError):
        CalibrationExample(tokens, mask, tag)


def test_empty_file_rejected(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("\n")
    with pytest.raises(CalibrationError, match="no calibration"):
        load_calibration(p)


def test_save_load_round_trip(tmp_path):
    ex = [CalibrationExample([4, 5, 6], [0, 1, 0], "A"), CalibrationExample([1, 1], [1, 0], "F")]
    save_calibration(ex, tmp_path / "x.jsonl")
    assert load_calibration(tmp_path / "x.jsonl") == ex


def test_format_support_examples():
    assert format_support([CalibrationExample([1, 2, 3], [0, 0, 0], "F")]).sorted() == []
    assert format_support([CalibrationExample([1, 2, 3, 4], [0, 1, 0, 1], "F")]).sorted() == [(0, 1), (0, 3)]
    two = [CalibrationExample([1, 2], [1, 0], "F"), CalibrationExample([1, 2, 3], [0, 0, 1], "F")]
    assert format_support(two).sorted() == [(0, 0), (1, 2)]


def test_neighborhood_examples():
    ex = [CalibrationExample([1, 2, 3, 4], [0, 0, 1, 0], "F")]
    sup = format_support(ex)
    assert expand_neighborhood(sup, 0, [4]).positions == sup.positions
    assert expand_neighborhood(sup, 2, [4]).sorted() == [(0, 0), (0, 1), (0, 2), (0, 3)]
    adj = format_support([CalibrationExample([0] * 8, [0, 0, 1, 1, 0, 0, 0, 0], "F")])
    assert expand_neighborhood(adj, 1, [8]).sorted() == [(0, 1), (0, 2), (0, 3), (0, 4)]
    with pytest.raises(ValueError):
        expand_neighborhood(sup, -1, [4])


@given(st.lists(st.lists(st.booleans(), min_size=1, max_size=12), min_size=1, max_size=4), st.integers(0, 3))
def test_neighborhood_size_bound(masks, rho):
    ex = [CalibrationExample([0] * len(m), [int(b) for b in m], "F") for m in masks]
    sup = format_support(ex)
    hood = expand_neighborhood(sup, rho, [len(m) for m in masks])
    assert len(hood) <= len(sup.positions) * (2 * rho + 1)
    assert sup.positions <= hood.positions
    assert all(0 <= s < len(masks[i]) for i, s in hood.positions)

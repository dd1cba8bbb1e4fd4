import csv
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fusionfilter.errors import DataError, ShapeError, UsageError
from fusionfilter.fusionmodel import predict_frames
from fusionfilter.metrics import (
    TradeoffRow,
    build_tradeoff_curve,
    data_efficiency,
    evaluate_filtered,
    interpolate_quality_loss,
    macro_f1,
    per_label_f1,
    quality_loss,
    write_curve_csv,
)

BYTES = (921_600, 307_200)


def test_hand_computed_macro_f1():
    labels = np.array([[1, 1], [1, 0], [0, 1], [0, 0]])
    preds = np.array([[1, 1], [0, 0], [0, 1], [0, 0]])
    np.testing.assert_array_equal(per_label_f1(preds, labels), [2 / 3, 1.0])
    assert macro_f1(preds, labels) == pytest.approx(5 / 6, abs=1e-15)


def test_trivial_macro_f1():
    labels = np.array([[1, 0, 1], [0, 1, 1], [1, 1, 0]])
    assert macro_f1(labels, labels) == 1.0
    assert macro_f1(1 - labels, labels) == 0.0


def test_vacuous_and_empty_classes():
    y = np.array([[1, 0], [0, 0]])
    assert per_label_f1(y, y).tolist() == [1.0, 1.0]  # column 2 has no positives anywhere
    assert per_label_f1([[0, 1], [0, 0]], y).tolist() == [0.0, 0.0]
    with pytest.raises(ShapeError):
        macro_f1(np.zeros((3, 2)), np.zeros((3, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.int8, (12, 4), elements=st.integers(0, 1)), arrays(np.int8, (12, 4), elements=st.integers(0, 1)), st.randoms())
def test_macro_f1_permutation_invariant(pred, label, rnd):
    rows = list(range(12))
    cols = list(range(4))
    rnd.shuffle(rows)
    rnd.shuffle(cols)
    a = macro_f1(pred, label)
    assert macro_f1(pred[rows], label[rows]) == a
    assert macro_f1(pred[:, cols], label[:, cols]) == pytest.approx(a, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.int8, st.tuples(st.integers(1, 40), st.just(2)), elements=st.integers(0, 1)), st.integers(0, 10**6), st.integers(1, 10**6))
def test_data_efficiency_is_exact(send, b0, b1):
    sent = int(send[:, 0].sum()) * b0 + int(send[:, 1].sum()) * b1
    exact = 1 - Fraction(sent, len(send) * (b0 + b1))
    assert abs(data_efficiency(send, (b0, b1)) - float(exact)) <= 1e-12


def test_drop_depth_is_a_quarter():
    send = np.tile([1, 0], (37, 1))
    assert data_efficiency(send, BYTES) == 0.25
    assert data_efficiency(np.ones((5, 2)), BYTES) == 0.0
    assert data_efficiency(np.zeros((5, 2)), BYTES) == 1.0


def test_quality_loss_definition():
    assert quality_loss(0.8, 0.6) == pytest.approx(0.25)
    assert quality_loss(0.8, 0.9) < 0
    with pytest.raises(UsageError):
        quality_loss(0.0, 0.0)


def test_all_keep_is_identity(small_system):
    fs = small_system["dataset"].test
    row = evaluate_filtered(small_system["server"], fs, np.ones((len(fs), 2), np.int8), BYTES)
    assert row.data_efficiency == 0.0 and row.quality_loss == 0.0
    assert row.sent_fraction == [1.0, 1.0]


def test_all_drop_matches_constant_response(small_system):
    server = small_system["server"]
    fs = small_system["dataset"].test
    row = evaluate_filtered(server, fs, np.zeros((len(fs), 2), np.int8), BYTES)
    _, full = predict_frames(server, fs)
    f1_full = macro_f1(full, fs.labels)
    # constant response: the server's decision on an all-zero frame, repeated
    _, const = predict_frames(server, fs, keep=np.zeros(2, np.int8))
    assert np.all(const == const[0])
    f1_const = macro_f1(const, fs.labels)
    assert row.data_efficiency == 1.0
    assert row.quality_loss == (f1_full - f1_const) / f1_full


def test_missing_decisions_are_a_data_error(small_system):
    fs = small_system["dataset"].test
    with pytest.raises(DataError):
        evaluate_filtered(small_system["server"], fs, np.ones((len(fs) - 1, 2)), BYTES)


def test_named_byte_map(small_system):
    fs = small_system["dataset"].test
    send = np.tile([1, 0], (len(fs), 1))
    row = evaluate_filtered(small_system["server"], fs, send, {"depth": 1, "rgb": 3}, names=("rgb", "depth"))
    assert row.data_efficiency == 0.25
    with pytest.raises(UsageError):
        evaluate_filtered(small_system["server"], fs, send, {"depth": 1, "rgb": 3})


@pytest.mark.parametrize("kind", ["near", "uni"])
def test_curve_rows(small_system, kind):
    fs = small_system["dataset"].test
    grid = np.linspace(0, 1, 11)
    rows = build_tradeoff_curve(small_system["server"], small_system[kind], fs, grid, BYTES)
    assert len(rows) == 11 and [r.tau for r in rows] == list(grid)
    assert rows[0].data_efficiency == 0.0 and rows[0].quality_loss == 0.0
    assert rows[-1].data_efficiency == 1.0
    effs = [r.data_efficiency for r in rows]
    assert effs == sorted(effs)  # bytes sent never grow with tau
    with pytest.raises(UsageError):
        build_tradeoff_curve(small_system["server"], small_system[kind], fs, [], BYTES)


def _row(eff, loss):
    return TradeoffRow(0.0, eff, loss, [1.0, 1.0], 1.0, 1.0 - loss)


def test_interpolation():
    rows = [_row(0.0, 0.0), _row(0.2, 0.1), _row(0.2, 0.3), _row(0.6, 0.4)]
    assert interpolate_quality_loss(rows, 0.2) == pytest.approx(0.2)
    assert interpolate_quality_loss(rows, 0.4) == pytest.approx(0.3)
    assert interpolate_quality_loss(rows[::-1], 0.1) == pytest.approx(0.1)
    with pytest.raises(UsageError):
        interpolate_quality_loss(rows, 0.7)


def test_curve_csv(tmp_path):
    path = tmp_path / "c.csv"
    write_curve_csv([_row(0.25, 0.125)], path, ("rgb", "depth"), {"seed": 3})
    with path.open() as fh:
        header, row = list(csv.reader(fh))
    assert header == ["tau", "data_efficiency", "quality_loss", "sent_rgb", "sent_depth", "f1_full", "f1_filtered", "seed"]
    assert row[1:3] == ["0.25", "0.125"] and row[-1] == "3"

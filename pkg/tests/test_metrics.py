import numpy as np
import pytest

from efcn.belief import PignisticDist
from efcn.errors import ConfigurationError, InvalidLabelError, ShapeError
from efcn.frame import ClassSet, build_act_list
from efcn.metrics import (
    SegResult,
    calibration,
    calibration_from_arrays,
    confidence,
    confidence_map,
    evaluate,
    label_universe,
    mean_iou,
    novelty_stats,
    pixel_utility,
    sweep_gamma,
    uiou,
)
from efcn.utility import UtilityTable

OMEGA = 0b111


def uniform_betp(labels, M=3):
    return np.full(np.shape(labels) + (M,), 1.0 / M)


def result_of(assigned, labels, betp=None):
    assigned = np.array(assigned, dtype=np.uint64)
    labels = np.array(labels, dtype=np.uint64)
    return SegResult(assigned, uniform_betp(labels) if betp is None else betp, labels)


def test_perfect_segmentation(table3):
    result = result_of([1, 2, 4, 4], [1, 2, 4, 4])
    assert pixel_utility(result, table3) == pytest.approx(1.0)
    assert uiou(result, table3) == pytest.approx(1.0)


def test_all_wrong_precise(table3):
    result = result_of([2, 4, 1], [1, 2, 4])
    assert pixel_utility(result, table3) == pytest.approx(0.0)
    assert uiou(result, table3) == pytest.approx(0.0)


def test_half_rejected_to_omega(table3):
    result = result_of([1, 2, OMEGA, OMEGA], [1, 2, 1, 4])
    assert pixel_utility(result, table3) == pytest.approx(0.841, abs=1e-3)


def test_uiou_with_imprecise_assignments(table3):
    result = result_of([1, 1, 3, 3], [1, 1, 1, 1])
    assert label_universe(result) == [ClassSet(1), ClassSet(3)]
    assert uiou(result, table3) == pytest.approx(0.45)
    assert uiou(result, table3, [ClassSet(1), ClassSet(2)]) == pytest.approx(0.45)
    assert uiou(result, table3, [ClassSet(4)]) == 0.0


def test_uiou_matches_mean_iou_for_precise_maps(frame3, rng):
    table = UtilityTable.build(frame3, build_act_list(frame3), 0.8)
    for _ in range(20):
        labels = np.left_shift(1, rng.integers(0, 3, size=(6, 7))).astype(np.uint64)
        assigned = np.left_shift(1, rng.integers(0, 3, size=(6, 7))).astype(np.uint64)
        result = SegResult(assigned, uniform_betp(labels), labels)
        assert uiou(result, table) == pytest.approx(mean_iou(assigned, labels, 3))


def test_mean_iou_rejects_sets():
    with pytest.raises(InvalidLabelError):
        mean_iou(np.array([3], dtype=np.uint64), np.array([1], dtype=np.uint64), 3)


def test_unknown_pixels_are_not_scored(table3):
    result = result_of([1, 2, OMEGA], [1, 2, 0])
    assert pixel_utility(result, table3) == pytest.approx(1.0)
    assert calibration(result, table3).bin_counts.sum() == 2


def test_confidence():
    betp = PignisticDist([0.5, 0.3, 0.2])
    assert confidence(betp, ClassSet(0b011)) == pytest.approx(0.8)
    assert confidence(betp, ClassSet(OMEGA)) == pytest.approx(1.0)
    with pytest.raises(InvalidLabelError):
        confidence(betp, ClassSet(0))
    betp_map = np.array([[[0.5, 0.3, 0.2], [0.1, 0.1, 0.8]]])
    labels = np.array([[1, 6]], dtype=np.uint64)
    np.testing.assert_allclose(confidence_map(betp_map, labels), [[0.5, 0.9]])


def test_ece_hand_computed():
    confidences = [0.4] * 4 + [0.9] * 6
    utilities = [0.3] * 4 + [0.85] * 6
    report = calibration_from_arrays(confidences, utilities, Q=2)
    assert report.ece == pytest.approx(0.07)
    np.testing.assert_array_equal(report.bin_counts, [4, 6])
    np.testing.assert_allclose(report.bin_confidence, [0.4, 0.9])
    np.testing.assert_allclose(report.bin_utility, [0.3, 0.85])


def test_ece_extremes():
    assert calibration_from_arrays(np.ones(5), np.ones(5)).ece == pytest.approx(0.0)
    assert calibration_from_arrays(np.ones(5), np.zeros(5)).ece == pytest.approx(1.0)
    assert calibration_from_arrays([], []).ece == 0.0


def test_ece_is_permutation_invariant(rng):
    confidences = rng.random(200)
    utilities = rng.random(200)
    order = rng.permutation(200)
    assert calibration_from_arrays(confidences, utilities).ece == pytest.approx(
        calibration_from_arrays(confidences[order], utilities[order]).ece
    )


def test_bins_are_closed_on_the_right():
    report = calibration_from_arrays([0.0, 0.5, 0.5000001, 1.0], np.zeros(4), Q=2)
    np.testing.assert_array_equal(report.bin_counts, [2, 2])
    frame = report.to_frame()
    assert list(frame.columns) == [
        "q",
        "lower",
        "upper",
        "count",
        "fraction",
        "confidence",
        "utility",
        "gap",
    ]
    np.testing.assert_allclose(frame["fraction"], [0.5, 0.5])
    with pytest.raises(ConfigurationError):
        calibration_from_arrays([0.5], [0.5], Q=0)


def test_result_validation():
    with pytest.raises(ShapeError):
        SegResult(np.ones(3), np.ones((3, 3)) / 3, np.ones(2))
    with pytest.raises(ShapeError):
        SegResult(np.ones(3), np.ones((2, 3)) / 3, np.ones(3))
    with pytest.raises(InvalidLabelError):
        SegResult(np.array([0, 1]), np.ones((2, 3)) / 3, np.ones(2))


def test_evaluation_report(table3):
    betp = np.array([[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.4, 0.4, 0.2]])
    labels = np.array([1, 2, 3], dtype=np.uint64)
    result = SegResult.from_betp(betp, labels, table3)
    assert result.assigned.tolist() == [1, 2, 3]
    report = evaluate(result, table3)
    assert report.pu == pytest.approx(1.0)
    frame = report.to_frame()
    assert frame["metric"].tolist()[:3] == ["PU", "UIoU", "ECE"]
    assert (frame["metric"] == "bin").sum() == 10


def test_novelty_statistics(frame3):
    result = result_of([1, OMEGA, OMEGA, 2, OMEGA, 4], [1, 2, 0, 0, 0, 0])
    report = novelty_stats(result, frame3, novel=np.array([0, 0, 1, 1, 2, 2]))
    assert report.unknown_pixels == 4
    assert report.known_pixels == 2
    assert report.unknown_omega_rate == pytest.approx(0.5)
    assert report.known_omega_rate == pytest.approx(0.5)
    assert sorted(report.assignments["unknown"].unique()) == [1, 2]
    first = report.containing[report.containing["unknown"] == 1]
    np.testing.assert_allclose(first["fraction"], [0.5, 1.0, 0.5])

    grouped = novelty_stats(result, frame3)
    assert grouped.assignments["unknown"].unique().tolist() == [1]
    omega_row = grouped.assignments[grouped.assignments["assigned"] == "omega"]
    assert omega_row["fraction"].iloc[0] == pytest.approx(0.5)


def test_gamma_extremes_control_rejection(frame3, rng):
    acts = build_act_list(frame3)
    betp = rng.dirichlet(np.ones(3), size=(4, 5))
    labels = np.zeros((4, 5), dtype=np.uint64)
    labels[:2] = 1
    for gamma, rate in ((0.5, 0.0), (1.0, 1.0)):
        table = UtilityTable.build(frame3, acts, gamma)
        result = SegResult.from_betp(betp, labels, table)
        report = novelty_stats(result, frame3)
        assert report.unknown_omega_rate == rate
        assert report.known_omega_rate == rate


def test_sweep_gamma(frame3, acts3, rng):
    betp = rng.dirichlet(np.ones(3), size=(3, 4))
    labels = np.left_shift(1, rng.integers(0, 3, size=(3, 4))).astype(np.uint64)
    frame = sweep_gamma(betp, labels, frame3, acts3, gammas=(0.5, 0.8, 1.0))
    assert list(frame.columns) == [
        "gamma",
        "pu",
        "uiou",
        "ece",
        "known_omega_rate",
        "unknown_omega_rate",
        "imprecise_rate",
    ]
    assert frame["gamma"].tolist() == [0.5, 0.8, 1.0]
    assert frame["imprecise_rate"].iloc[-1] == pytest.approx(1.0)
    assert frame["known_omega_rate"].iloc[0] == 0.0

import math

import numpy as np
import pytest

from src.core.models.state import Trajectory
from src.core.services.metrics import (
    CurvePoint,
    TrackPoint,
    auc,
    match_operating_point,
    precision_recall_vs_threshold,
    roc_pr,
    tpr_at_fpr,
    tracking_scores,
)
from src.utils.errors import DomainError, ShapeError


def _labels(rng, n_images=4, shape=(32, 32), k=10):
    masks = []
    for _ in range(n_images):
        mask = np.zeros(shape, dtype=bool)
        mask.flat[rng.choice(mask.size, k, replace=False)] = True
        masks.append(mask)
    return masks


def test_perfect_scores_give_unit_auc(rng):
    labels = _labels(rng)
    scores = [m.astype(float) for m in labels]
    points = roc_pr(scores, labels)
    assert auc(points) == pytest.approx(1.0)
    assert tpr_at_fpr(points, 1e-4) == pytest.approx(1.0)


def test_uninformative_scores_give_half_auc(rng):
    labels = _labels(rng, n_images=2, shape=(256, 256), k=2000)
    scores = [rng.random(m.shape) for m in labels]
    points = roc_pr(scores, labels, thresholds=np.linspace(0, 1, 201), tol=0)
    assert auc(points) == pytest.approx(0.5, abs=0.02)


def test_threshold_above_max_score_finds_nothing(rng):
    labels = _labels(rng)
    scores = [rng.random(m.shape) for m in labels]
    (point,) = roc_pr(scores, labels, thresholds=[1.5])
    assert point.tpr == 0.0 and point.fpr == 0.0
    assert point.precision == 1.0


def test_rates_fall_as_threshold_rises(rng):
    labels = _labels(rng)
    scores = [0.5 * m + rng.random(m.shape) for m in labels]
    points = roc_pr(scores, labels)
    thresholds = [p.threshold for p in points]
    assert thresholds == sorted(thresholds)
    assert np.all(np.diff([p.tpr for p in points]) <= 0)
    assert np.all(np.diff([p.fpr for p in points]) <= 0)
    for p in points:
        assert 0.0 <= p.tpr <= 1.0 and 0.0 <= p.fpr <= 1.0 and 0.0 <= p.precision <= 1.0


def test_bleed_tolerance():
    mask = np.zeros((9, 9), dtype=bool)
    mask[4, 4] = True
    score = np.zeros((9, 9))
    score[4, 5] = 1.0
    (loose,) = roc_pr([score], [mask], thresholds=[0.5], tol=1)
    assert loose.tpr == 1.0 and loose.fpr == 0.0
    (strict,) = roc_pr([score], [mask], thresholds=[0.5], tol=0)
    assert strict.tpr == 0.0 and strict.fpr == pytest.approx(1 / 80)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        roc_pr([np.zeros((4, 4))], [np.zeros((4, 5), dtype=bool)])
    with pytest.raises(ShapeError):
        roc_pr([np.zeros((4, 4))], [])


def test_tpr_interpolation():
    points = [CurvePoint(1.0, 0.0, 0.0, 1.0, 0.0), CurvePoint(0.5, 0.6, 0.2, 0.8, 0.6)]
    assert tpr_at_fpr(points, 0.1) == pytest.approx(0.3)
    assert tpr_at_fpr(points, 0.6) == pytest.approx(0.8)


def test_operating_point_matches_recall():
    cfar = [CurvePoint(10.0, 0.9, 0.1, 0.5, 0.9), CurvePoint(30.0, 0.7, 0.01, 0.9, 0.7)]
    unet = [CurvePoint(t, r, 0.0, 1.0, r) for t, r in [(0.2, 0.95), (0.5, 0.72), (0.8, 0.4)]]
    op = match_operating_point(unet, cfar, 30.0)
    assert op["unet_threshold"] == 0.5
    assert op["cfar_recall"] == pytest.approx(0.7)


def test_precision_recall_frame(rng):
    labels = _labels(rng)
    frame = precision_recall_vs_threshold(roc_pr([m.astype(float) for m in labels], labels))
    assert list(frame.columns) == ["threshold", "precision", "recall"]


def _truth(object_id, start, velocity, steps=10):
    times = np.arange(steps, dtype=float)
    pos = np.asarray(start, dtype=float) + np.outer(times, velocity)
    states = np.hstack([pos, np.tile(velocity, (steps, 1))])
    return Trajectory(times=times, states=states, object_id=object_id)


def _follow(truth, track_id, offset=(0.0, 0.0, 0.0), steps=None):
    steps = range(len(truth)) if steps is None else steps
    return [TrackPoint(float(truth.times[k]), track_id, tuple(truth.states[k, :3] + np.asarray(offset)))
            for k in steps]


def test_perfect_track():
    truth = _truth(0, (100.0, 200.0, 0.0), (3.0, -1.0, 0.0))
    scores = tracking_scores(_follow(truth, 7), [truth])
    assert (scores.tac, scores.trc, scores.tap, scores.trp, scores.le_km) == (1.0, 1.0, 1.0, 1.0, 0.0)
    assert scores.false_tracks == 0


def test_two_tracks_split_one_truth():
    truth = _truth(0, (0.0, 0.0, 0.0), (5.0, 0.0, 0.0))
    tracks = _follow(truth, 1, steps=range(5)) + _follow(truth, 2, steps=range(5, 10))
    scores = tracking_scores(tracks, [truth])
    assert scores.tac == 1.0
    assert scores.trp == 1.0
    assert scores.trc == 1.0
    assert scores.tap == 0.5


def test_constant_offset_localization_error():
    truth = _truth(0, (0.0, 0.0, 0.0), (1.0, 1.0, 0.0))
    scores = tracking_scores(_follow(truth, 0, offset=(0.0, 3.0, 0.0)), [truth])
    assert scores.le_km == pytest.approx(0.003)


def test_tracks_outside_gate_score_zero():
    truth = _truth(0, (0.0, 0.0, 0.0), (1.0, 0.0, 0.0))
    scores = tracking_scores(_follow(truth, 0, offset=(60.0, 0.0, 0.0)), [truth], association_distance=50.0)
    assert scores.tac == 0.0 and scores.trp == 0.0 and scores.trc == 0.0
    assert scores.false_tracks == 1
    assert math.isnan(scores.le_km)


def test_false_tracks_counts_tracks_without_a_dominant_truth():
    truths = [_truth(0, (0.0, 0.0, 0.0), (2.0, 0.0, 0.0)), _truth(1, (500.0, 0.0, 0.0), (-2.0, 0.0, 0.0))]
    tracks = _follow(truths[0], 1)
    # Track 2 is shadowed by track 1 for five steps, then sits on truth 1: share exactly one half.
    tracks += _follow(truths[0], 2, offset=(10.0, 0.0, 0.0), steps=range(5))
    tracks += _follow(truths[1], 2, offset=(10.0, 0.0, 0.0), steps=range(5, 10))
    tracks += [TrackPoint(float(k), 3, (5000.0, 5000.0, 0.0)) for k in range(4)]
    scores = tracking_scores(tracks, truths)
    assert scores.false_tracks == 2
    assert scores.as_row()["false_tracks"] == 2


def test_empty_truth_raises():
    with pytest.raises(DomainError):
        tracking_scores([], [])


def test_scores_invariant_to_relabeling_and_time_reversal(rng):
    truths = [_truth(0, (0.0, 0.0, 0.0), (4.0, 1.0, 0.0)), _truth(1, (30.0, 10.0, 0.0), (-2.0, 3.0, 0.0))]
    tracks = []
    for k, truth in enumerate(truths):
        tracks += _follow(truth, 10 + k, offset=tuple(rng.normal(0, 5, 3)))
    tracks += _follow(truths[0], 12, offset=(20.0, 0.0, 0.0), steps=range(3, 7))
    base = tracking_scores(tracks, truths)

    relabel = {10: 5, 11: 99, 12: 0}
    shuffled = [tracks[i] for i in rng.permutation(len(tracks))]
    renamed = [TrackPoint(p.time, relabel[p.track_id], p.position) for p in shuffled]
    assert tracking_scores(renamed, truths) == base

    reversed_truths = [Trajectory(times=-t.times[::-1], states=t.states[::-1], object_id=t.object_id + 3)
                       for t in truths]
    reversed_tracks = [TrackPoint(-p.time, p.track_id, p.position) for p in tracks]
    reversed_scores = tracking_scores(reversed_tracks, reversed_truths).as_row()
    assert reversed_scores == pytest.approx(base.as_row(), rel=1e-12)

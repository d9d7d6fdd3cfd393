"""Track-oriented multiple hypothesis tracking.

Every track family is a tree of association histories; a global hypothesis picks at most one leaf
per family and assigns each detection of a scan to one track, a new track or a false alarm.
Children of a hypothesis come from Murty's k-best assignments over a cost matrix whose columns are
live tracks, then one new-track and one false-alarm column per detection.
"""
import heapq
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from src.config.schemas import TrackerConfig
from src.core.models.detection import Detection
from src.core.models.state import EnuState, MotionModel
from src.core.services.scenario import beam_gain
from src.core.services.tracker import (
    Track,
    TrackAnchor,
    TrackStatus,
    ekf_predict,
    ekf_update,
    gate_threshold,
    initial_state,
    innovation,
    two_point_state,
)
from src.core.services.geometry import measure
from src.utils.errors import DomainError, NumericalError
from src.utils.logging import logger

FORBIDDEN = 1e12


@dataclass(frozen=True)
class ScanContext:
    """Where the beam looked at one scan and which (range, range-rate) box it covered."""
    time: float
    platform: EnuState
    aim_azimuth: float
    beamwidth: float
    range_limits: Tuple[float, float]
    range_rate_limits: Tuple[float, float]


@dataclass
class TrackNode:
    """One association history of a family; `track` is the filtered state after this scan."""
    node_id: int
    family: int
    parent: Optional["TrackNode"]
    scan: int
    track: Track
    detection: Optional[int] = None

    def ancestor_at(self, scan: int) -> "TrackNode":
        node = self
        while node.parent is not None and node.scan > scan:
            node = node.parent
        return node


@dataclass
class GlobalHypothesis:
    score: float
    leaves: Dict[int, TrackNode] = field(default_factory=dict)

    def key(self) -> Tuple[int, ...]:
        return tuple(sorted(n.node_id for n in self.leaves.values()))


@dataclass(frozen=True)
class TrackReport:
    time: float
    track_id: int
    status: TrackStatus
    mean: np.ndarray
    cov: np.ndarray


def _solve(cost: np.ndarray) -> Optional[Tuple[float, Tuple[int, ...]]]:
    rows, cols = linear_sum_assignment(cost)
    picked = cost[rows, cols]
    if np.any(picked >= FORBIDDEN):
        return None
    assignment = [0] * cost.shape[0]
    for r, c in zip(rows, cols):
        assignment[r] = int(c)
    return float(picked.sum()), tuple(assignment)


def ranked_assignments(cost: np.ndarray) -> Iterator[Tuple[float, Tuple[int, ...]]]:
    """Murty's ranked assignments of every row to a distinct column, lowest cost first.

    Entries >= FORBIDDEN are disallowed. Yields (cost, row->column) lazily.
    """
    n = cost.shape[0]
    if n == 0:
        yield 0.0, ()
        return
    first = _solve(cost)
    if first is None:
        return
    counter = itertools.count()
    heap = [(first[0], first[1], next(counter), cost)]
    while heap:
        total, assignment, _, matrix = heapq.heappop(heap)
        yield total, assignment
        work = matrix.copy()
        for i in range(n):
            sub = work.copy()
            sub[i, assignment[i]] = FORBIDDEN
            solved = _solve(sub)
            if solved is not None:
                heapq.heappush(heap, (solved[0], solved[1], next(counter), sub))
            col = assignment[i]
            keep = work[i, col]
            work[i, :] = FORBIDDEN
            work[:, col] = FORBIDDEN
            work[i, col] = keep


def k_best_assignments(cost: np.ndarray, k: int) -> List[Tuple[float, Tuple[int, ...]]]:
    return list(itertools.islice(ranked_assignments(cost), max(k, 0)))


class HypothesisCutoff:
    """Score floor over the best `capacity` distinct hypothesis keys offered during one scan.

    Re-offering a key with a better score replaces its entry; the superseded heap entry is skipped
    lazily so it can neither set the floor nor be evicted in place of a live key.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.scores: Dict[Tuple[int, ...], float] = {}
        self._heap: List[Tuple[float, Tuple[int, ...], Tuple[int, ...]]] = []

    @property
    def full(self) -> bool:
        return len(self.scores) >= self.capacity

    def _drop_stale(self):
        while self._heap and self.scores.get(self._heap[0][2]) != self._heap[0][0]:
            heapq.heappop(self._heap)

    def floor(self) -> float:
        if not self.full:
            return -math.inf
        self._drop_stale()
        return self._heap[0][0]

    def offer(self, key: Tuple[int, ...], score: float) -> bool:
        old = self.scores.get(key)
        if old is not None and old >= score:
            return False
        if old is None and self.full and score <= self.floor():
            return False
        self.scores[key] = score
        # Ties evict the larger key first, matching the (-score, key) ranking.
        heapq.heappush(self._heap, (score, tuple(-k for k in key), key))
        if len(self.scores) > self.capacity:
            self._drop_stale()
            _, _, evicted = heapq.heappop(self._heap)
            del self.scores[evicted]
        return True


class MultiHypothesisTracker:
    """Scan-by-scan MHT over (range, range-rate) detections with per-detection covariances."""

    def __init__(
        self,
        cfg: TrackerConfig,
        false_alarm_density: float,
        target_altitude: float = 0.0
    ):
        if false_alarm_density <= 0:
            raise DomainError(f"False alarm density must be positive, got {false_alarm_density}")
        self.cfg = cfg
        self.beta_fa = false_alarm_density
        self._motion: Dict[float, MotionModel] = {}
        self.target_altitude = target_altitude
        self.gate_d2 = gate_threshold(cfg.gate_probability, 2)
        self.new_track_llr = math.log(cfg.new_track_density / false_alarm_density)
        self.hypotheses: List[GlobalHypothesis] = [GlobalHypothesis(score=0.0)]
        self.scan = -1
        self._node_ids = itertools.count()
        self._family_ids = itertools.count()

    def motion(self, dt: float) -> MotionModel:
        key = round(dt, 9)
        if key not in self._motion:
            self._motion[key] = MotionModel.constant_velocity(
                dt, self.cfg.process_noise_pos_std, self.cfg.process_noise_vel_std, vertical=False
            )
        return self._motion[key]

    # Per-scan node construction; results are shared by every hypothesis holding the same leaf.

    def _detection_gain(self, track: Track, ctx: ScanContext) -> float:
        try:
            z = measure(track.state, ctx.platform)
        except DomainError:
            return 0.0
        (r0, r1), (v0, v1) = ctx.range_limits, ctx.range_rate_limits
        if not (r0 <= z.range <= r1 and v0 <= z.range_rate <= v1):
            return 0.0
        return beam_gain(z.azimuth, ctx.aim_azimuth, ctx.beamwidth)

    def _advance(self, track: Track, hit: Optional[bool], score_delta: float) -> Track:
        """Book-keeping for a counted hit/miss (hit=None: scan not counted)."""
        cfg = self.cfg
        track.score += score_delta
        if hit is None:
            return track
        track.history = (track.history + (hit,))[-cfg.confirm_n:]
        track.misses = 0 if hit else track.misses + 1
        if track.status is TrackStatus.TENTATIVE and sum(track.history) >= cfg.confirm_m:
            track.status = TrackStatus.CONFIRMED
        if track.misses >= cfg.delete_misses:
            track.status = TrackStatus.DELETED
        elif (track.status is TrackStatus.TENTATIVE and len(track.history) == cfg.confirm_n
              and sum(track.history) < cfg.confirm_m):
            track.status = TrackStatus.DELETED
        return track

    def _new_node(self, family: int, parent: Optional[TrackNode], track: Track,
                  detection: Optional[int]) -> TrackNode:
        return TrackNode(next(self._node_ids), family, parent, self.scan, track, detection)

    def _expand_leaf(self, leaf: TrackNode, detections: Sequence[Detection], ctx: ScanContext):
        """Return (miss node, miss LLR, {det index: (node, continuation LLR)})."""
        predicted = ekf_predict(leaf.track, self.motion(ctx.time - leaf.track.time), time=ctx.time)
        g = self._detection_gain(predicted, ctx)
        pd = self.cfg.p_detection * g
        counted = g > 0
        miss_llr = math.log1p(-pd)
        miss_track = self._advance(replace(predicted), False if counted else None, miss_llr)
        miss = self._new_node(leaf.family, leaf, miss_track, None)
        continuations = {}
        if not counted:
            return miss, miss_llr, continuations
        for j, det in enumerate(detections):
            try:
                inn = innovation(predicted, det.z, det.R, ctx.platform)
            except (DomainError, NumericalError) as e:
                logger.debug(f"Skipping detection {j} for track {predicted.id}: {e}")
                continue
            if inn.d2 > self.gate_d2:
                continue
            llr = math.log(pd) - 0.5 * inn.log_det_2pi_s - 0.5 * inn.d2 - math.log(self.beta_fa)
            try:
                updated = self._update(predicted, det, ctx)
            except (DomainError, NumericalError) as e:
                logger.debug(f"Skipping detection {j} for track {predicted.id}: {e}")
                continue
            updated = self._advance(updated, True, llr)
            continuations[j] = (self._new_node(leaf.family, leaf, updated, j), llr)
        return miss, miss_llr, continuations

    def _update(self, predicted: Track, det: Detection, ctx: ScanContext) -> Track:
        """EKF update; a track holding only its first fix is re-seeded by two-point differencing."""
        if predicted.anchor is None:
            return ekf_update(predicted, det.z, det.R, ctx.platform)[0]
        mean, cov = two_point_state(predicted.anchor, ctx.platform, ctx.aim_azimuth, ctx.beamwidth, det.z, det.R,
                                    ctx.time, self.cfg.init_velocity_std, self.target_altitude)
        seeded = replace(predicted, mean=mean, cov=cov, anchor=None)
        z, R = np.asarray(det.z, dtype=np.float64), np.asarray(det.R, dtype=np.float64)
        return ekf_update(seeded, z[1:2], R[1:2, 1:2], ctx.platform, rows=(1,))[0]

    def _birth(self, j: int, det: Detection, ctx: ScanContext) -> TrackNode:
        mean, cov = initial_state(ctx.platform, ctx.aim_azimuth, ctx.beamwidth, det.z, det.R,
                                  self.cfg.init_velocity_std, self.target_altitude)
        family = next(self._family_ids)
        track = Track(id=family, mean=mean, cov=cov, time=ctx.time, score=self.new_track_llr,
                      history=(True,), misses=0, anchor=TrackAnchor(mean[:3].copy(), cov[:3, :3].copy(), ctx.time))
        if self.cfg.confirm_m <= 1:
            track.status = TrackStatus.CONFIRMED
        return self._new_node(family, None, track, j)

    def step(self, detections: Sequence[Detection], ctx: ScanContext) -> List[TrackReport]:
        """Process one scan; returns the confirmed tracks of the best global hypothesis."""
        self.scan += 1
        n = len(detections)
        cfg = self.cfg

        expansions: Dict[int, tuple] = {}
        for hyp in self.hypotheses:
            for leaf in hyp.leaves.values():
                if leaf.track.alive and leaf.node_id not in expansions:
                    expansions[leaf.node_id] = self._expand_leaf(leaf, detections, ctx)
        births: Dict[int, TrackNode] = {}

        cutoff = HypothesisCutoff(cfg.max_hypotheses)
        children: Dict[Tuple[int, ...], GlobalHypothesis] = {}
        order = sorted(range(len(self.hypotheses)), key=lambda h: (-self.hypotheses[h].score, self.hypotheses[h].key()))
        for h in order:
            hyp = self.hypotheses[h]
            live = sorted((f for f, leaf in hyp.leaves.items() if leaf.track.alive))
            base = hyp.score + sum(expansions[hyp.leaves[f].node_id][1] for f in live)
            cost = np.full((n, len(live) + 2 * n), FORBIDDEN)
            for t, f in enumerate(live):
                miss_llr = expansions[hyp.leaves[f].node_id][1]
                for j, (_, llr) in expansions[hyp.leaves[f].node_id][2].items():
                    cost[j, t] = -(llr - miss_llr)
            for j in range(n):
                cost[j, len(live) + j] = -self.new_track_llr
                cost[j, len(live) + n + j] = 0.0

            for total, assignment in itertools.islice(ranked_assignments(cost), cfg.max_hypotheses):
                score = base - total
                if cutoff.full and score <= cutoff.floor():
                    break
                leaves: Dict[int, TrackNode] = {
                    f: leaf for f, leaf in hyp.leaves.items() if not leaf.track.alive
                }
                assigned = {}
                for j, col in enumerate(assignment):
                    if col < len(live):
                        assigned[live[col]] = j
                    elif col < len(live) + n:
                        if j not in births:
                            births[j] = self._birth(j, detections[j], ctx)
                        leaves[births[j].family] = births[j]
                for f in live:
                    miss, _, conts = expansions[hyp.leaves[f].node_id]
                    leaves[f] = conts[assigned[f]][0] if f in assigned else miss
                child = GlobalHypothesis(score=score, leaves=leaves)
                if cutoff.offer(child.key(), score):
                    children[child.key()] = child

        ranked = sorted(children.values(), key=lambda c: (-c.score, c.key()))[:cfg.max_hypotheses]
        self.hypotheses = self._n_scan_prune(ranked) if ranked else [GlobalHypothesis(score=0.0)]
        best = self.hypotheses[0]
        reports = [
            TrackReport(ctx.time, leaf.family, leaf.track.status, leaf.track.mean.copy(), leaf.track.cov.copy())
            for f, leaf in sorted(best.leaves.items())
            if leaf.track.status is TrackStatus.CONFIRMED
        ]
        logger.debug(
            f"Scan {self.scan} t={ctx.time:.1f}: {n} detections, {len(self.hypotheses)} hypotheses, "
            f"{len(reports)} confirmed tracks, best score {best.score:.2f}"
        )
        return reports

    def _n_scan_prune(self, ranked: List[GlobalHypothesis]) -> List[GlobalHypothesis]:
        """Keep hypotheses agreeing with the best one on every decision older than N scans."""
        horizon = self.scan - self.cfg.n_scan
        best = ranked[0]
        if horizon < 0:
            return ranked

        def commitments(hyp: GlobalHypothesis) -> Dict[int, int]:
            out = {}
            for f, leaf in hyp.leaves.items():
                root = leaf.ancestor_at(horizon)
                if root.scan <= horizon:
                    out[f] = root.node_id
            return out

        reference = commitments(best)
        kept = [h for h in ranked if commitments(h) == reference]
        for hyp in kept:
            stale = [f for f, leaf in hyp.leaves.items()
                     if leaf.track.status is TrackStatus.DELETED and leaf.scan < horizon]
            for f in stale:
                del hyp.leaves[f]
        return kept

    @property
    def best(self) -> GlobalHypothesis:
        return self.hypotheses[0]

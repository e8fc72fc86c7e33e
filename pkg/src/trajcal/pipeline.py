"""The iterative calibration loop, session scoring, and cross-session fusion.

One calibration session: match positions by motion features, prune with the
semantic filters, vote whole-trajectory pairs, then alternate between solving
the space-time transform from the current pairs and re-deriving the pairs
from the matched trajectories, until matched trajectories agree to within a
distance threshold or iterations run out.

Initialization is the fragile part: raw feature matches are temporally
scrambled along feature-flat (straight, constant-speed) tracks, so the first
transform comes from a scan over candidate clock offsets with a consensus
spatial refit at each one; genuinely paired trajectories agree on a
transform only at the true offset, and offsets are ranked by how many pairs
agree. If the finished session still self-scores poorly, the remaining scan
candidates are retried.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import estimator
from .errors import (
    BothZeroScore,
    DegenerateGeometry,
    InsufficientOverlap,
    NoCandidateMatches,
    TooFewPairs,
)
from .features import extract_features
from .matching import MatchWeights, apply_semantic_filters, motion_match
from .model import TrajectoryDatabase, Transform4D, blend_transforms


@dataclass(frozen=True)
class PipelineConfig:
    max_iterations: int = 20
    trajectory_distance_threshold: float = 0.5  # meters
    feature_window: int = 3
    match_weights: MatchWeights = MatchWeights()
    box_tolerance: float = 0.5
    neighbor_radius: float = 15.0
    count_tolerance: int = 1
    hist_frames: int = 5
    hist_tolerance: int = 4
    search_halfwidth: float | None = None  # None -> 2 * frame_period
    initial_scan_halfwidth: float = 2.5  # seconds, first-pass offset search
    min_trajectory_votes: int = 3
    score_match_radius: float = 1.0  # meters, same-object gate when scoring
    max_hypotheses: int = 4
    retry_score_threshold: float = 0.5  # retry next offset basin below this

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.max_hypotheses < 1:
            raise ValueError("max_hypotheses must be >= 1")
        for name in ("trajectory_distance_threshold", "initial_scan_halfwidth",
                     "score_match_radius", "neighbor_radius", "box_tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class CalibrationSession:
    """Outcome of one calibration pass, kept for continuous calibration."""

    transform: Transform4D
    score: float
    n_pp: int
    n_po: int
    iterations_used: int
    converged: bool
    created_at: float

    def to_dict(self) -> dict:
        return {
            "transform": self.transform.to_dict(),
            "score": self.score,
            "n_pp": self.n_pp,
            "n_po": self.n_po,
            "iterations_used": self.iterations_used,
            "converged": self.converged,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationSession":
        return cls(
            transform=Transform4D.from_dict(d["transform"]),
            score=float(d["score"]),
            n_pp=int(d["n_pp"]),
            n_po=int(d["n_po"]),
            iterations_used=int(d["iterations_used"]),
            converged=bool(d["converged"]),
            created_at=float(d["created_at"]),
        )


# ---------------------------------------------------------------------------
# internal steps of the loop


def _trimmed_solve(corr: estimator.CorrespondenceSet, max_rounds: int = 5):
    """Spatial solve with residual trimming; gross outliers among the pairs
    would otherwise drag the least-squares fit."""
    keep = np.ones(len(corr), dtype=bool)
    sol = None
    for _ in range(max_rounds):
        subset = estimator.CorrespondenceSet(
            corr.p_xyz[keep], corr.q_xyz[keep], corr.p_times[keep], corr.q_times[keep],
            None if corr.weights is None else corr.weights[keep],
        )
        sol = estimator.solve_spatial(subset)
        res = np.linalg.norm(
            corr.p_xyz - (corr.q_xyz @ sol.rotation.T + sol.translation), axis=1
        )
        gate = 3.0 * float(np.median(res[keep])) + 1e-9
        new_keep = res <= gate
        if new_keep.sum() < 6 or np.array_equal(new_keep, keep):
            break
        keep = new_keep
    return sol, keep


def _vote_trajectory_pairs(
    pairs: np.ndarray, scores: np.ndarray, db_p, db_q, min_votes: int, top_k: int = 1
):
    """Each Q trajectory pairs with the P trajectory holding the plurality of
    its matched positions; ties break toward the smaller mean pair score.
    Class labels must agree (tracker semantics are trusted that far).
    ``top_k`` > 1 also returns runner-up candidates (for hypothesis seeding)."""
    tally: dict[int, dict[int, list]] = {}
    for (ti, _, tj, _), s in zip(pairs, scores):
        by_p = tally.setdefault(int(tj), {})
        entry = by_p.setdefault(int(ti), [0, 0.0])
        entry[0] += 1
        entry[1] += float(s)
    out = []
    for tj in sorted(tally):
        candidates = sorted(
            ((cnt, total / cnt, ti) for ti, (cnt, total) in tally[tj].items()),
            key=lambda c: (-c[0], c[1], c[2]),
        )
        for cnt, _, ti in candidates[:top_k]:
            if cnt >= min_votes and (
                db_p.trajectories[ti].class_label == db_q.trajectories[tj].class_label
            ):
                out.append((ti, tj))
    return out


def _matched_objects(db_p, db_q, traj_pairs):
    return [(db_p.trajectories[ti], db_q.trajectories[tj]) for ti, tj in traj_pairs]


def _pair_interp_arrays(matched, dt: float):
    """Per matched trajectory pair: P samples inside the overlap at offset
    ``dt`` and the interpolated raw-Q counterparts, with variance weights."""
    out = []
    for traj_p, traj_q in matched:
        if len(traj_q) < 2:
            continue
        q_t = traj_q.times
        s = traj_p.times - dt
        mask = (s >= q_t[0]) & (s <= q_t[-1])
        if mask.sum() < 2:
            continue
        q_raw, var_factor = estimator._interp_with_variance(s[mask], q_t, traj_q.xyz)
        out.append((traj_p.xyz[mask], q_raw, 1.0 / var_factor))
    return out


_INLIER_GATE = 1.5  # meters of mean per-pair residual for consensus voting
_MAX_PROPOSALS = 8  # solo-fit proposers per candidate offset


class _OffsetGeometry:
    """Concatenated per-pair interpolation arrays at one candidate offset,
    with segment bookkeeping so per-pair residual means vectorize."""

    def __init__(self, arrays):
        self.n_pairs = len(arrays)
        self.p = np.vstack([a[0] for a in arrays])
        self.q = np.vstack([a[1] for a in arrays])
        counts = np.array([len(a[0]) for a in arrays])
        self.counts = counts
        self.starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
        # equal total weight per trajectory pair: long wrong tracks cannot swamp
        self.weights = np.concatenate([a[2] / len(a[2]) for a in arrays])
        self.slices = [slice(s, s + c) for s, c in zip(self.starts, counts)]

    def pair_means(self, sol) -> np.ndarray:
        res = np.linalg.norm(self.p - (self.q @ sol.rotation.T + sol.translation), axis=1)
        return np.add.reduceat(res, self.starts) / self.counts

    def subset(self, active) -> estimator.CorrespondenceSet:
        idx = np.concatenate([np.arange(s.start, s.stop) for s in (self.slices[i] for i in active)])
        zeros = np.zeros(len(idx))
        return estimator.CorrespondenceSet(
            self.p[idx], self.q[idx], zeros, zeros, self.weights[idx]
        )


def _solve_at_offset(matched, dt: float, gate: float = _INLIER_GATE):
    """Consensus spatial solve against Q interpolated at the candidate
    offset. Each shape-rich trajectory pair proposes a transform on its own;
    the proposal most other pairs agree with (mean residual within ``gate``)
    wins and is refit on its supporters. Mostly-wrong trajectory votes
    therefore cannot drag the fit, which a jointly trimmed least squares
    could not guarantee.

    Returns (solution, inlier count, mean inlier residual) or None; ranking
    candidate offsets lexicographically by (-inliers, residual) rewards the
    offset at which the most trajectory pairs genuinely lie on each other."""
    arrays = _pair_interp_arrays(matched, dt)
    if len(arrays) < 2:
        return None
    geo = _OffsetGeometry(arrays)

    proposers = np.argsort(-geo.counts)[:_MAX_PROPOSALS]
    best = None  # ((inlier count, -mean), inlier list)
    for k in proposers:
        try:
            solo = estimator.solve_spatial(geo.subset([int(k)]))
        except (DegenerateGeometry, TooFewPairs):
            continue  # straight snippet: cannot propose, can still support
        means = geo.pair_means(solo)
        inliers = [i for i in range(geo.n_pairs) if means[i] <= gate]
        if len(inliers) < 2:
            continue
        key = (len(inliers), -float(np.mean(means[inliers])))
        if best is None or key > best[0]:
            best = (key, inliers)
    if best is None:
        # no curved pair to propose from (shape-poor scene): jointly trimmed fit
        inliers = list(range(geo.n_pairs))
        sol = None
        for _ in range(3):
            try:
                sol = estimator.solve_spatial(geo.subset(inliers))
            except (DegenerateGeometry, TooFewPairs):
                return None
            means = geo.pair_means(sol)
            trim_gate = 3.0 * float(np.median(means[inliers])) + 1e-9
            new_inliers = [i for i in range(geo.n_pairs) if means[i] <= trim_gate]
            if len(new_inliers) < 2 or new_inliers == inliers:
                break
            inliers = new_inliers
    else:
        inliers = best[1]
        sol = None
        for _ in range(3):
            try:
                sol = estimator.solve_spatial(geo.subset(inliers))
            except (DegenerateGeometry, TooFewPairs):
                return None
            means = geo.pair_means(sol)
            new_inliers = [i for i in range(geo.n_pairs) if means[i] <= gate]
            if len(new_inliers) < 2 or new_inliers == inliers:
                break
            inliers = new_inliers
    means = geo.pair_means(sol)
    supporters = means <= gate
    if not supporters.any():
        return None
    return sol, int(supporters.sum()), float(np.mean(means[supporters]))


def _offset_hypotheses(matched, raw_gaps: np.ndarray, halfwidth: float,
                       frame_period: float, max_n: int):
    """Candidate clock offsets from a two-stage consensus scan (spatial refit
    + inlier count at every grid offset). The coarse range comes from the
    spread of raw timestamp gaps, so a biased median cannot push the true
    offset out of view. The coarse stage votes with a widened gate because a
    quarter-second of offset error already moves traffic by meters; fine
    scans around the strongest cells then resolve to half a frame."""
    margin = max(halfwidth, 2.0)
    lo = float(np.percentile(raw_gaps, 2)) - margin
    hi = float(np.percentile(raw_gaps, 98)) + margin
    coarse_step = max(0.25, frame_period)
    coarse_gate = _INLIER_GATE + 12.0 * coarse_step  # ~typical speed * step
    coarse = np.arange(lo, hi + 0.5 * coarse_step, coarse_step)
    keys = []
    for i, d in enumerate(coarse):
        solved = _solve_at_offset(matched, float(d), gate=coarse_gate)
        if solved is not None:
            keys.append(((-solved[1], solved[2]), float(d)))
    keys.sort()
    fine_step = 0.5 * frame_period
    candidates: list[tuple[tuple, float]] = []
    seen: list[float] = []
    for _, center in keys[: 3 * max_n]:
        if any(abs(center - s) <= coarse_step for s in seen):
            continue
        seen.append(center)
        best = None
        for d in np.arange(center - coarse_step, center + coarse_step + 0.5 * fine_step, fine_step):
            solved = _solve_at_offset(matched, float(d))
            if solved is None:
                continue
            key = (-solved[1], solved[2])
            if best is None or key < best[0]:
                best = (key, float(d))
        if best is not None:
            candidates.append(best)
    candidates.sort()
    chosen: list[float] = []
    for _, dt in candidates:
        if all(abs(dt - c) > 2 * fine_step for c in chosen):
            chosen.append(dt)
        if len(chosen) >= max_n:
            break
    return chosen


def _alignment_stats(db_p, db_q, traj_pairs, tf: Transform4D):
    """Per matched-trajectory-pair mean point-to-interpolated-point distance
    under the candidate transform, plus the pooled mean."""
    pair_means = []
    total, count = 0.0, 0
    for ti, tj in traj_pairs:
        traj_p = db_p.trajectories[ti]
        traj_q = db_q.trajectories[tj]
        if len(traj_q) < 2:
            pair_means.append(math.inf)
            continue
        tq = traj_q.times + tf.time_offset
        q_xyz = tf.apply_points(traj_q.xyz)
        mask = (traj_p.times >= tq[0]) & (traj_p.times <= tq[-1])
        if not mask.any():
            pair_means.append(math.inf)
            continue
        interp, _ = estimator._interp_with_variance(traj_p.times[mask], tq, q_xyz)
        dists = np.linalg.norm(traj_p.xyz[mask] - interp, axis=1)
        pair_means.append(float(dists.mean()))
        total += float(dists.sum())
        count += int(mask.sum())
    pooled = total / count if count else math.inf
    return pair_means, pooled


def _reassociate(db_p, db_q, traj_pairs, tf: Transform4D, gate: float, time_gate: float):
    """Fresh position pairs: time-nearest samples inside each matched
    trajectory's overlap, gated by spatial residual."""
    rows, residuals = [], []
    for ti, tj in traj_pairs:
        traj_p = db_p.trajectories[ti]
        traj_q = db_q.trajectories[tj]
        tq = traj_q.times + tf.time_offset
        q_xyz = tf.apply_points(traj_q.xyz)
        j = np.searchsorted(tq, traj_p.times)
        j_lo = np.clip(j - 1, 0, len(tq) - 1)
        j_hi = np.clip(j, 0, len(tq) - 1)
        nearer = np.where(
            np.abs(tq[j_hi] - traj_p.times) < np.abs(tq[j_lo] - traj_p.times), j_hi, j_lo
        )
        dt_ok = np.abs(tq[nearer] - traj_p.times) <= time_gate
        res = np.linalg.norm(traj_p.xyz - q_xyz[nearer], axis=1)
        ok = dt_ok & (res <= gate)
        for pi in np.nonzero(ok)[0]:
            rows.append((ti, int(pi), tj, int(nearer[pi])))
            residuals.append(float(res[pi]))
    if not rows:
        return np.empty((0, 4), dtype=np.int64), np.empty(0)
    return np.array(rows, dtype=np.int64), np.array(residuals)


def _pairs_to_correspondences(pairs: np.ndarray, db_p, db_q) -> estimator.CorrespondenceSet:
    return estimator.CorrespondenceSet(
        np.array([db_p.trajectories[ti].xyz[pi] for ti, pi in pairs[:, :2]]),
        np.array([db_q.trajectories[tj].xyz[pj] for tj, pj in pairs[:, 2:]]),
        np.array([db_p.trajectories[ti].times[pi] for ti, pi in pairs[:, :2]]),
        np.array([db_q.trajectories[tj].times[pj] for tj, pj in pairs[:, 2:]]),
    )


def _drop_outlier_pairs(traj_pairs, pair_means, threshold: float):
    """Matched trajectories whose own alignment is far off the consensus are
    false pairs; S3's mandate includes removing them."""
    finite = [m for m in pair_means if math.isfinite(m)]
    if not finite:
        return traj_pairs
    gate = max(3.0 * float(np.median(finite)), threshold)
    kept = [tp for tp, m in zip(traj_pairs, pair_means) if m <= gate]
    return kept if kept else traj_pairs


def _run_loop(db_p, db_q, cfg: PipelineConfig, tf0: Transform4D, halfwidth: float):
    """S1/S2/S3 iterations from one initial transform hypothesis.

    Returns (transform, traj_pairs, rms, iterations, converged) for the best
    iterate, or None when the hypothesis collapses (too few pairs to go on).
    """
    frame_period = db_p.frame_period
    time_gate = 0.6 * frame_period
    tf = tf0
    gate = None  # set from the first solve's rms
    best = None
    converged = False
    iterations = 0
    pairs = None
    all_ti = range(len(db_p.trajectories))
    all_tj = range(len(db_q.trajectories))
    traj_pairs = [(ti, tj) for ti in all_ti for tj in all_tj
                  if db_p.trajectories[ti].class_label == db_q.trajectories[tj].class_label]
    # first association casts a wide net over every class-compatible pair;
    # the residual gate keeps only tracks that actually lie on each other
    wide_gate = max(4.0 * cfg.trajectory_distance_threshold, 2.0)
    for it in range(1, cfg.max_iterations + 1):
        iterations = it
        # S3 (and initial association): position pairs from trajectory pairs
        new_pairs, _ = _reassociate(
            db_p, db_q, traj_pairs, tf, gate if gate is not None else wide_gate, time_gate
        )
        if len(new_pairs) < 3:
            break
        stalled = pairs is not None and np.array_equal(new_pairs, pairs)
        pairs = new_pairs
        # S1: transform from current pairs
        try:
            sol, keep = _trimmed_solve(_pairs_to_correspondences(pairs, db_p, db_q))
        except (DegenerateGeometry, TooFewPairs):
            break
        kept_pairs = pairs[keep]
        res = np.linalg.norm(
            np.array([db_p.trajectories[ti].xyz[pi] for ti, pi in kept_pairs[:, :2]])
            - (np.array([db_q.trajectories[tj].xyz[pj] for tj, pj in kept_pairs[:, 2:]])
               @ sol.rotation.T + sol.translation),
            axis=1,
        )
        gate = 3.0 * sol.rms_residual + 1e-9
        # S2: trajectory pairing by majority vote + alignment distance
        voted = _vote_trajectory_pairs(
            kept_pairs, res, db_p, db_q, cfg.min_trajectory_votes
        )
        if not voted:
            break
        p_t = np.array([db_p.trajectories[ti].times[pi] for ti, pi in kept_pairs[:, :2]])
        q_t = np.array([db_q.trajectories[tj].times[pj] for tj, pj in kept_pairs[:, 2:]])
        dt0 = float(np.median(p_t - q_t))
        matched = _matched_objects(db_p, db_q, voted)
        try:
            dt = estimator.refine_time_offset(
                matched, sol.rotation, sol.translation, dt0, halfwidth, tol=1e-7
            )
        except InsufficientOverlap:
            dt = dt0
        tf = Transform4D.from_matrix(sol.rotation, sol.translation, dt)
        pair_means, pooled = _alignment_stats(db_p, db_q, voted, tf)
        voted = _drop_outlier_pairs(voted, pair_means, cfg.trajectory_distance_threshold)
        if len(voted) < len(pair_means):
            _, pooled = _alignment_stats(db_p, db_q, voted, tf)
        traj_pairs = voted
        if best is None or pooled < best[0]:
            best = (pooled, tf, traj_pairs, sol.rms_residual)
        if pooled < cfg.trajectory_distance_threshold:
            converged = True
            break
        if stalled:
            break
    if best is None:
        return None
    _, tf, traj_pairs, rms = best
    return tf, traj_pairs, rms, iterations, converged


def _polish(db_p, db_q, cfg, tf, traj_pairs, rms, halfwidth):
    """Final pass: re-associate under the best iterate and hand the pairs to
    the estimator's alternating interpolated solve."""
    final_pairs, _ = _reassociate(
        db_p, db_q, traj_pairs, tf,
        gate=3.0 * rms + 1e-9, time_gate=0.6 * db_p.frame_period,
    )
    if len(final_pairs) >= 3:
        try:
            return estimator.solve(
                _pairs_to_correspondences(final_pairs, db_p, db_q),
                _matched_objects(db_p, db_q, traj_pairs),
                search_halfwidth=halfwidth,
            )
        except (DegenerateGeometry, TooFewPairs, InsufficientOverlap):
            pass
    return tf


# ---------------------------------------------------------------------------
# public operations


def calibrate(
    db_p: TrajectoryDatabase,
    db_q: TrajectoryDatabase,
    cfg: PipelineConfig | None = None,
    prior: "CalibrationSession | Transform4D | None" = None,
) -> CalibrationSession:
    """Run one full calibration session; the returned transform maps Q-frame
    positions and timestamps into P's frame and clock.

    ``prior`` (a stored session or transform from earlier passes) is tried as
    the first initialization hypothesis: a continuous-calibration system that
    already holds a decent estimate should not have to re-earn it from
    scratch, and a bad prior costs nothing because every hypothesis is
    score-checked.

    Raises NoCandidateMatches when fewer than 3 pairs survive the filters.
    Non-convergence is not an error: the session comes back with
    ``converged=False`` and its honest score.
    """
    cfg = cfg or PipelineConfig()
    w = cfg.match_weights
    fp = extract_features(db_p, cfg.feature_window)
    fq = extract_features(db_q, cfg.feature_window)
    raw = motion_match(fp, fq, w)
    kept = apply_semantic_filters(
        raw,
        fp,
        fq,
        db_p,
        db_q,
        weights=w,
        box_tolerance=cfg.box_tolerance,
        neighbor_radius=cfg.neighbor_radius,
        count_tolerance=cfg.count_tolerance,
        hist_frames=cfg.hist_frames,
        hist_tolerance=cfg.hist_tolerance,
    )
    if len(kept) < 3:
        raise NoCandidateMatches(len(raw), len(kept))

    frame_period = db_p.frame_period
    halfwidth = cfg.search_halfwidth if cfg.search_halfwidth is not None else 2.0 * frame_period

    def _index_pairs(matches):
        idx = np.array(
            [(m.ref[0], m.ref[1], m.cand[0], m.cand[1]) for m in matches], dtype=np.int64
        )
        return idx, np.array([m.feature_distance for m in matches])

    pairs, scores = _index_pairs(kept)

    # initialization: a loose trajectory vote (runner-up candidates included,
    # two supporting matches suffice) straight off the filtered matches, then
    # candidate clock offsets from the consensus scan; the consensus solve is
    # built to ignore the wrong candidates, so recall matters more than
    # precision here
    loose_votes = max(2, cfg.min_trajectory_votes - 1)
    candidates = _vote_trajectory_pairs(pairs, scores, db_p, db_q, loose_votes, top_k=2)
    if len(candidates) < 3:
        # dense traffic makes neighbor counts flicker and the neighborhood
        # filters starve the vote; retry them with relaxed tolerances before
        # giving up on a structured initialization
        relaxed = apply_semantic_filters(
            raw, fp, fq, db_p, db_q,
            weights=w,
            box_tolerance=cfg.box_tolerance,
            neighbor_radius=cfg.neighbor_radius,
            count_tolerance=cfg.count_tolerance + 2,
            hist_frames=cfg.hist_frames,
            hist_tolerance=3 * cfg.hist_tolerance,
        )
        if len(relaxed) > len(kept):
            kept = relaxed
            pairs, scores = _index_pairs(kept)
            candidates = _vote_trajectory_pairs(pairs, scores, db_p, db_q, loose_votes, top_k=2)
    raw_gaps = np.array(
        [db_p.trajectories[ti].times[pi] for ti, pi in pairs[:, :2]]
    ) - np.array([db_q.trajectories[tj].times[pj] for tj, pj in pairs[:, 2:]])
    dt_center = float(np.median(raw_gaps))
    hypotheses: list[Transform4D] = []
    if prior is not None:
        hypotheses.append(prior.transform if isinstance(prior, CalibrationSession) else prior)
    if candidates:
        matched0 = _matched_objects(db_p, db_q, candidates)
        for dt_h in _offset_hypotheses(
            matched0, raw_gaps, cfg.initial_scan_halfwidth, frame_period, cfg.max_hypotheses
        ):
            solved = _solve_at_offset(matched0, dt_h)
            if solved is not None:
                hypotheses.append(
                    Transform4D.from_matrix(solved[0].rotation, solved[0].translation, dt_h)
                )
    if not hypotheses:
        # fallback: plain trimmed solve on the (scrambled) filtered matches
        try:
            sol, _ = _trimmed_solve(_pairs_to_correspondences(pairs, db_p, db_q))
            hypotheses.append(Transform4D.from_matrix(sol.rotation, sol.translation, dt_center))
        except (DegenerateGeometry, TooFewPairs) as exc:
            raise NoCandidateMatches(len(raw), len(kept)) from exc

    best_session = None
    for tf0 in hypotheses:
        outcome = _run_loop(db_p, db_q, cfg, tf0, halfwidth)
        if outcome is None:
            continue
        tf, traj_pairs, rms, iterations, converged = outcome
        tf = _polish(db_p, db_q, cfg, tf, traj_pairs, rms, halfwidth)
        score, n_pp, n_po = score_session(tf, db_p, db_q, match_radius=cfg.score_match_radius)
        session = CalibrationSession(
            transform=tf,
            score=score,
            n_pp=n_pp,
            n_po=n_po,
            iterations_used=iterations,
            converged=converged,
            created_at=time.time(),
        )
        if best_session is None or session.score > best_session.score:
            best_session = session
        if session.score >= cfg.retry_score_threshold:
            break
    if best_session is None:
        raise NoCandidateMatches(len(raw), len(kept))
    return best_session


def derive_position_pairs(
    db_p: TrajectoryDatabase,
    db_q: TrajectoryDatabase,
    transform: Transform4D,
    spatial_gate: float = 1.0,
) -> estimator.CorrespondenceSet:
    """Same-instant position pairs implied by a calibration: for each P
    position, the time-nearest Q position (mapped through the transform)
    within half a frame and ``spatial_gate`` meters."""
    all_pairs = [
        (ti, tj)
        for ti in range(len(db_p.trajectories))
        for tj in range(len(db_q.trajectories))
        if db_p.trajectories[ti].class_label == db_q.trajectories[tj].class_label
    ]
    pairs, _ = _reassociate(
        db_p, db_q, all_pairs, transform,
        gate=spatial_gate, time_gate=0.5 * db_p.frame_period + 1e-9,
    )
    if len(pairs) == 0:
        return estimator.CorrespondenceSet(
            np.empty((0, 3)), np.empty((0, 3)), np.empty(0), np.empty(0)
        )
    return _pairs_to_correspondences(pairs, db_p, db_q)


def score_session(
    transform: Transform4D,
    db_p: TrajectoryDatabase,
    db_q: TrajectoryDatabase,
    match_radius: float = 1.0,
) -> tuple[float, int, int]:
    """Self-assessment of a transform without ground truth.

    ``n_po`` counts positions from both databases that fall inside both
    sensors' range discs once mapped into the common frame; ``n_pp`` counts
    P positions with a same-instant Q position within ``match_radius``.
    Score is min(1, 2 * n_pp / n_po).
    """
    r_p, r_q = db_p.sensing_range, db_q.sensing_range
    q_origin_in_p = transform.translation

    def _stack(db):
        if db.n_positions == 0:
            return np.empty((0, 3)), np.empty(0)
        xyz = np.vstack([t.xyz for t in db.trajectories])
        times = np.concatenate([t.times for t in db.trajectories])
        return xyz, times

    p_xyz, p_t = _stack(db_p)
    q_xyz, q_t = _stack(db_q)
    q_in_p = transform.apply_points(q_xyz) if len(q_xyz) else q_xyz
    q_t_in_p = q_t + transform.time_offset

    n_po = 0
    p_overlap = np.zeros(len(p_xyz), dtype=bool)
    if len(p_xyz):
        p_overlap = (np.linalg.norm(p_xyz, axis=1) <= r_p) & (
            np.linalg.norm(p_xyz - q_origin_in_p, axis=1) <= r_q
        )
        n_po += int(p_overlap.sum())
    if len(q_xyz):
        q_overlap = (np.linalg.norm(q_xyz, axis=1) <= r_q) & (
            np.linalg.norm(q_in_p, axis=1) <= r_p
        )
        n_po += int(q_overlap.sum())

    n_pp = 0
    if len(p_xyz) and len(q_xyz):
        order = np.argsort(q_t_in_p)
        qt_sorted = q_t_in_p[order]
        qx_sorted = q_in_p[order]
        half_frame = 0.5 * db_p.frame_period + 1e-9
        for i in np.nonzero(p_overlap)[0]:
            lo = np.searchsorted(qt_sorted, p_t[i] - half_frame, side="left")
            hi = np.searchsorted(qt_sorted, p_t[i] + half_frame, side="right")
            if hi > lo and np.any(
                np.linalg.norm(qx_sorted[lo:hi] - p_xyz[i], axis=1) <= match_radius
            ):
                n_pp += 1
    score = min(1.0, 2.0 * n_pp / n_po) if n_po > 0 else 0.0
    return score, n_pp, n_po


def fuse_sessions(
    sessions, min_score: float = 0.5
) -> CalibrationSession | None:
    """Fold sessions oldest-first into one estimate. Sessions scoring below
    ``min_score`` never update an existing fused state (a poor pass must not
    drag a good calibration); they can only seed it when nothing better
    exists yet."""
    fused = None
    for session in sessions:
        if fused is None:
            fused = session
            continue
        if session.score < min_score and fused.score >= session.score:
            continue
        try:
            fused = update_continuous(fused, session)
        except BothZeroScore:
            continue
    return fused


def update_continuous(
    prev: CalibrationSession, new: CalibrationSession
) -> CalibrationSession:
    """Score-weighted fusion of two sessions; a zero-score session
    contributes nothing and the fused score keeps the best evidence."""
    s_prev, s_new = prev.score, new.score
    if s_prev + s_new <= 0:
        raise BothZeroScore("cannot fuse two sessions that both scored zero")
    if s_prev == 0:
        return new
    if s_new == 0:
        return prev
    fused_tf = blend_transforms(
        prev.transform, new.transform, s_prev / (s_prev + s_new), s_new / (s_prev + s_new)
    )
    base = prev if s_prev >= s_new else new
    return replace(
        base,
        transform=fused_tf,
        score=max(s_prev, s_new),
        created_at=max(prev.created_at, new.created_at),
    )


# ---------------------------------------------------------------------------
# session persistence


class SessionStore:
    """Append-only session log plus the current fused estimate, as files."""

    def __init__(self, directory, min_fuse_score: float = 0.5):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.sessions_path = self.directory / "sessions.jsonl"
        self.fused_path = self.directory / "fused.json"
        self.min_fuse_score = min_fuse_score

    def _locked(self):
        import fcntl
        from contextlib import contextmanager

        @contextmanager
        def guard():
            lock_path = self.directory / ".lock"
            with open(lock_path, "w") as fh:
                fcntl.flock(fh, fcntl.LOCK_EX)
                try:
                    yield
                finally:
                    fcntl.flock(fh, fcntl.LOCK_UN)

        return guard()

    def append(self, session: CalibrationSession) -> None:
        import json

        with self._locked():
            with open(self.sessions_path, "a") as fh:
                fh.write(json.dumps(session.to_dict()) + "\n")

    def sessions(self) -> list[CalibrationSession]:
        import json

        if not self.sessions_path.exists():
            return []
        out = []
        with open(self.sessions_path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(CalibrationSession.from_dict(json.loads(line)))
        return out

    def load_fused(self) -> CalibrationSession | None:
        import json

        if not self.fused_path.exists():
            return None
        with open(self.fused_path) as fh:
            return CalibrationSession.from_dict(json.load(fh))

    def save_fused(self, session: CalibrationSession) -> None:
        import json

        with self._locked():
            with open(self.fused_path, "w") as fh:
                json.dump(session.to_dict(), fh, indent=2)
                fh.write("\n")

    def record(self, session: CalibrationSession) -> CalibrationSession:
        """Append the session and fold it into the stored fused estimate;
        sessions scoring under the store's threshold are logged but do not
        update the fused state."""
        self.append(session)
        fused = self.load_fused()
        if fused is None:
            fused = session
        elif session.score >= self.min_fuse_score or session.score > fused.score:
            try:
                fused = update_continuous(fused, session)
            except BothZeroScore:
                pass
        self.save_fused(fused)
        return fused

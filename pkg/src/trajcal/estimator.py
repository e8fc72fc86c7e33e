"""Closed-form rigid solve and time-offset estimation from matched pairs.

The spatial part is the classic cross-covariance/SVD least-squares fit
(rotation + translation, no scale). The temporal part is deliberately
decoupled: a robust coarse estimate (median of pairwise timestamp gaps)
followed by a 1D search that slides the transformed source trajectories in
time against linear interpolation until the spatial mismatch bottoms out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateGeometry, InsufficientOverlap, TooFewPairs
from .matching import PositionMatch
from .model import Trajectory, TrajectoryDatabase, Transform4D

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0

# rank test: second singular value of the centered cross-covariance relative
# to the largest; traffic scenes are near-planar, so only true collinearity
# (rank < 2) is fatal
_COLLINEAR_RTOL = 1e-6

TrajectoryPair = tuple[Trajectory, Trajectory]


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Matched position pairs as parallel arrays (P side, Q side)."""

    p_xyz: np.ndarray
    q_xyz: np.ndarray
    p_times: np.ndarray
    q_times: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.p_xyz, dtype=float).reshape(-1, 3)
        q = np.asarray(self.q_xyz, dtype=float).reshape(-1, 3)
        pt = np.asarray(self.p_times, dtype=float).reshape(-1)
        qt = np.asarray(self.q_times, dtype=float).reshape(-1)
        if not (len(p) == len(q) == len(pt) == len(qt)):
            raise ValueError("correspondence arrays must have equal length")
        w = self.weights
        if w is not None:
            w = np.asarray(w, dtype=float).reshape(-1)
            if len(w) != len(p):
                raise ValueError("weights length must match pair count")
            if np.any(w < 0) or w.sum() <= 0:
                raise ValueError("weights must be non-negative with positive sum")
        for name, arr in (("p_xyz", p), ("q_xyz", q), ("p_times", pt), ("q_times", qt)):
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.p_times)

    @classmethod
    def from_matches(
        cls,
        matches: Sequence[PositionMatch],
        db_p: TrajectoryDatabase,
        db_q: TrajectoryDatabase,
        weights: np.ndarray | None = None,
    ) -> "CorrespondenceSet":
        p_xyz = np.array([db_p.trajectories[ti].xyz[pi] for ti, pi in (m.ref for m in matches)])
        q_xyz = np.array([db_q.trajectories[ti].xyz[pi] for ti, pi in (m.cand for m in matches)])
        p_t = np.array([db_p.trajectories[ti].times[pi] for ti, pi in (m.ref for m in matches)])
        q_t = np.array([db_q.trajectories[ti].times[pi] for ti, pi in (m.cand for m in matches)])
        return cls(p_xyz, q_xyz, p_t, q_t, weights)


@dataclass(frozen=True, eq=False)
class SpatialSolution:
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    rms_residual: float


def solve_spatial(c: CorrespondenceSet) -> SpatialSolution:
    """Least-squares rigid transform minimizing sum ||p - (R q + T)||^2."""
    n = len(c)
    if n < 3:
        raise TooFewPairs(f"spatial solve needs at least 3 pairs, got {n}")
    if c.weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = c.weights / c.weights.sum()
    p_bar = w @ c.p_xyz
    q_bar = w @ c.q_xyz
    p0 = c.p_xyz - p_bar
    q0 = c.q_xyz - q_bar
    cov = (q0 * w[:, None]).T @ p0  # sum w * q0 p0^T
    u, s, vt = np.linalg.svd(cov)
    if s[0] <= 0 or s[1] < _COLLINEAR_RTOL * s[0]:
        raise DegenerateGeometry(
            "correspondences are collinear; rotation about the line is unobservable"
        )
    d = float(np.sign(np.linalg.det(vt.T @ u.T)))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    trans = p_bar - rot @ q_bar
    res = c.p_xyz - (c.q_xyz @ rot.T + trans)
    rms = float(np.sqrt(w @ np.sum(res * res, axis=1)))
    return SpatialSolution(rot, trans, rms)


def estimate_time_offset_coarse(c: CorrespondenceSet) -> float:
    """(Weighted) median of the pairwise timestamp gaps t_p - t_q."""
    if len(c) < 1:
        raise TooFewPairs("coarse time offset needs at least 1 pair")
    gaps = c.p_times - c.q_times
    if c.weights is None:
        return float(np.median(gaps))
    order = np.argsort(gaps)
    cum = np.cumsum(c.weights[order])
    k = int(np.searchsorted(cum, 0.5 * cum[-1]))
    return float(gaps[order[min(k, len(gaps) - 1)]])


def golden_section(f: Callable[[float], float], a: float, b: float, tol: float = 1e-9) -> float:
    """Minimize a unimodal function on [a, b]."""
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while abs(b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def _pair_arrays(
    matched_trajectories: Sequence[TrajectoryPair], rotation: np.ndarray, translation: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    out = []
    for traj_p, traj_q in matched_trajectories:
        q_mapped = traj_q.xyz @ np.asarray(rotation).T + np.asarray(translation)
        out.append((traj_p.times, traj_p.xyz, traj_q.times, q_mapped))
    return out


def _interp_with_variance(sm: np.ndarray, q_t: np.ndarray, q_xyz: np.ndarray):
    """Linear interpolation plus the per-sample noise-variance factor of the
    residual: 1 + (1-u)^2 + u^2 for interpolation fraction u. Comparing a
    noisy point against a blend of two noisy points is least noisy mid-gap,
    which would bias a raw squared objective toward half-frame alignment."""
    j = np.clip(np.searchsorted(q_t, sm, side="right") - 1, 0, len(q_t) - 2)
    u = (sm - q_t[j]) / (q_t[j + 1] - q_t[j])
    interp = q_xyz[j] * (1.0 - u)[:, None] + q_xyz[j + 1] * u[:, None]
    var_factor = 1.0 + (1.0 - u) ** 2 + u**2
    return interp, var_factor


def _offset_objective(pairs, d: float) -> tuple[float, int]:
    """Mean variance-normalized squared distance between P samples and the Q
    track interpolated at t_p - d, over samples inside the Q time span."""
    total = 0.0
    count = 0
    for p_t, p_xyz, q_t, q_xyz in pairs:
        s = p_t - d
        mask = (s >= q_t[0]) & (s <= q_t[-1])
        if not mask.any():
            continue
        interp, var_factor = _interp_with_variance(s[mask], q_t, q_xyz)
        diff = p_xyz[mask] - interp
        total += float(np.sum(np.sum(diff * diff, axis=1) / var_factor))
        count += int(mask.sum())
    if count == 0:
        return math.inf, 0
    return total / count, count


def refine_time_offset(
    matched_trajectories: Sequence[TrajectoryPair],
    rotation: np.ndarray,
    translation: np.ndarray,
    coarse: float,
    search_halfwidth: float,
    *,
    grid_step: float | None = None,
    tol: float = 1e-9,
) -> float:
    """Sub-frame time offset: grid scan over [coarse - hw, coarse + hw]
    followed by golden-section around the best cell."""
    if not matched_trajectories:
        raise InsufficientOverlap("no matched trajectories to refine against")
    pairs = [
        (pt, pxyz, qt, qxyz)
        for (pt, pxyz, qt, qxyz) in _pair_arrays(matched_trajectories, rotation, translation)
        if len(qt) >= 2
    ]
    if not pairs:
        raise InsufficientOverlap("matched trajectories are too short to interpolate")
    if grid_step is None:
        dts = np.concatenate([np.diff(qt) for _, _, qt, _ in pairs])
        grid_step = 0.5 * float(np.median(dts))
    grid_step = min(grid_step, max(search_halfwidth, 1e-12))
    grid = np.arange(coarse - search_halfwidth, coarse + search_halfwidth + 0.5 * grid_step, grid_step)
    values = [_offset_objective(pairs, float(d))[0] for d in grid]
    if all(math.isinf(v) for v in values):
        raise InsufficientOverlap("no temporal overlap anywhere in the search window")
    best = int(np.argmin(values))
    lo = grid[max(0, best - 1)]
    hi = grid[min(len(grid) - 1, best + 1)]
    refined = golden_section(lambda d: _offset_objective(pairs, d)[0], float(lo), float(hi), tol)
    return float(np.clip(refined, coarse - search_halfwidth, coarse + search_halfwidth))


def interpolated_correspondences(
    matched_trajectories: Sequence[TrajectoryPair],
    rotation: np.ndarray,
    translation: np.ndarray,
    time_offset: float,
    *,
    residual_gate: float | None = None,
) -> CorrespondenceSet:
    """Pair each P sample with the Q track linearly interpolated at its
    instant (raw Q coordinates, so the result feeds a fresh spatial solve)."""
    rot = np.asarray(rotation)
    trans = np.asarray(translation)
    p_list, q_list, pt_list, qt_list, w_list = [], [], [], [], []
    for traj_p, traj_q in matched_trajectories:
        if len(traj_q) < 2:
            continue
        q_t = traj_q.times
        s = traj_p.times - time_offset
        mask = (s >= q_t[0]) & (s <= q_t[-1])
        if not mask.any():
            continue
        sm = s[mask]
        q_raw, var_factor = _interp_with_variance(sm, q_t, traj_q.xyz)
        p_sel = traj_p.xyz[mask]
        if residual_gate is not None:
            res = np.linalg.norm(p_sel - (q_raw @ rot.T + trans), axis=1)
            keep = res <= residual_gate
            p_sel, q_raw, sm, var_factor = p_sel[keep], q_raw[keep], sm[keep], var_factor[keep]
        if len(sm) == 0:
            continue
        p_list.append(p_sel)
        q_list.append(q_raw)
        pt_list.append(sm + time_offset)
        qt_list.append(sm)
        w_list.append(1.0 / var_factor)
    if not p_list:
        return CorrespondenceSet(
            np.empty((0, 3)), np.empty((0, 3)), np.empty(0), np.empty(0)
        )
    return CorrespondenceSet(
        np.vstack(p_list),
        np.vstack(q_list),
        np.concatenate(pt_list),
        np.concatenate(qt_list),
        weights=np.concatenate(w_list),
    )


def solve(
    c: CorrespondenceSet,
    matched_trajectories: Sequence[TrajectoryPair] = (),
    *,
    search_halfwidth: float | None = None,
    polish_rounds: int = 12,
) -> Transform4D:
    """Full 4D solve: spatial fit, coarse offset, then alternate sub-frame
    offset refinement with interpolated re-solves until they agree."""
    sol = solve_spatial(c)
    dt = estimate_time_offset_coarse(c)
    if matched_trajectories:
        if search_halfwidth is None:
            gaps = [np.diff(tq.times) for _, tq in matched_trajectories if len(tq) >= 2]
            if gaps:
                search_halfwidth = 2.0 * float(np.median(np.concatenate(gaps)))
        if search_halfwidth:
            for _ in range(polish_rounds):
                dt_new = refine_time_offset(
                    matched_trajectories, sol.rotation, sol.translation, dt, search_halfwidth
                )
                corr = interpolated_correspondences(
                    matched_trajectories,
                    sol.rotation,
                    sol.translation,
                    dt_new,
                    residual_gate=max(3.0 * sol.rms_residual, 1e-9),
                )
                moved = abs(dt_new - dt)
                dt = dt_new
                if len(corr) >= 3:
                    sol = solve_spatial(corr)
                if moved < 1e-11:
                    break
    return Transform4D.from_matrix(sol.rotation, sol.translation, dt)

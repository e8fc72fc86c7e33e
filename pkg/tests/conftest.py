import numpy as np
import pytest

from trajcal.model import Position, Trajectory, TrajectoryDatabase, Transform4D


def make_position(x, y, z, t, frame=0, bbox=(4.5, 1.8, 1.5), label="car", track="t0"):
    return Position(
        x=x, y=y, z=z, t=t, frame_index=frame, bbox=bbox, class_label=label, track_id=track
    )


def make_trajectory(points, track="t0", t0=0.0, dt=0.1, bbox=(4.5, 1.8, 1.5), label="car"):
    """Trajectory from an (n, 3) array sampled every ``dt`` seconds."""
    points = np.asarray(points, dtype=float)
    return Trajectory(
        track,
        tuple(
            make_position(x, y, z, t0 + i * dt, frame=i, bbox=bbox, label=label, track=track)
            for i, (x, y, z) in enumerate(points)
        ),
    )


def straight_trajectory(speed=10.0, n=30, dt=0.1, track="t0", origin=(0.0, 0.0, 1.0),
                        direction=(1.0, 0.0, 0.0), **kw):
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    pts = np.asarray(origin) + np.outer(np.arange(n) * dt * speed, d)
    return make_trajectory(pts, track=track, dt=dt, **kw)


def arc_trajectory(radius=20.0, angular_rate=0.5, n=30, dt=0.1, track="arc", z=1.0, **kw):
    angles = np.arange(n) * dt * angular_rate
    pts = np.column_stack([radius * np.cos(angles), radius * np.sin(angles), np.full(n, z)])
    return make_trajectory(pts, track=track, dt=dt, **kw)


def accelerating_trajectory(v0=5.0, accel=1.0, n=30, dt=0.1, track="acc", origin=(0.0, 0.0, 1.0)):
    """Straight track with linearly growing speed: every position gets a
    distinct velocity-mean feature (no nearest-neighbor ties)."""
    t = np.arange(n) * dt
    x = v0 * t + 0.5 * accel * t * t
    pts = np.asarray(origin) + np.column_stack([x, np.zeros(n), np.zeros(n)])
    return make_trajectory(pts, track=track, dt=dt)


def make_database(trajectories, sensor_id="S", frame_period=0.1, sensing_range=50.0):
    return TrajectoryDatabase(
        sensor_id=sensor_id,
        trajectories=tuple(trajectories),
        frame_period=frame_period,
        sensing_range=sensing_range,
    )


def random_transform(rng: np.random.Generator) -> Transform4D:
    q = rng.normal(size=4)
    while np.linalg.norm(q) < 1e-3:
        q = rng.normal(size=4)
    return Transform4D(q, rng.uniform(-50, 50, size=3), float(rng.uniform(-20, 20)))


def random_position(rng: np.random.Generator, track="r", frame=0) -> Position:
    x, y, z = rng.uniform(-100, 100, size=3)
    return make_position(x, y, z, float(rng.uniform(0, 100)), frame=frame, track=track)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)

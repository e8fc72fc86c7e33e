"""Exception types shared across the calibration package."""


class CalibrationError(Exception):
    """Base class for calibration-specific failures."""


class EmptyTrajectory(CalibrationError):
    """Trajectory has too few positions for the requested computation."""


class DegenerateTimestep(CalibrationError):
    """Non-increasing timestamps inside a trajectory."""


class DegenerateSegment(CalibrationError):
    """Two consecutive positions coincide; segment direction is undefined."""


class InvalidFeature(CalibrationError):
    """A feature flagged invalid was used where a valid one is required."""


class TooFewPairs(CalibrationError):
    """Not enough correspondences for the requested solve."""


class DegenerateGeometry(CalibrationError):
    """Correspondences are collinear; rotation about the line is unobservable."""


class InsufficientOverlap(CalibrationError):
    """Matched trajectories share no usable temporal overlap."""


class NoCandidateMatches(CalibrationError):
    """The filtered match set is too small to attempt calibration."""

    def __init__(self, raw_count: int, filtered_count: int):
        self.raw_count = raw_count
        self.filtered_count = filtered_count
        super().__init__(
            f"only {filtered_count} matches survived filtering "
            f"({raw_count} raw candidates); need at least 3"
        )


class BothZeroScore(CalibrationError):
    """Continuous update called with two zero-score sessions."""

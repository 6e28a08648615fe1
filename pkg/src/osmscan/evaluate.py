"""Trajectory files and absolute error metrics.

Trajectories are text files with one sample per line, `t x y z qx qy qz
qw`. Absolute pose error compares positions of timestamp-associated
samples in the shared world frame; no alignment step is applied, since the
estimate is anchored to the same frame as the reference by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import PoseSE3
from .scene_sim import TrajectorySample


class EvaluationError(ValueError):
    """No associated samples between the two trajectories."""


def save_trajectory(path, samples) -> None:
    with open(path, "w") as f:
        for s in samples:
            q = Rotation.from_matrix(s.pose.rotation).as_quat()
            t = s.pose.translation
            f.write(
                "%.6f %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n"
                % (s.time, t[0], t[1], t[2], q[0], q[1], q[2], q[3])
            )


def load_trajectory(path) -> list:
    samples = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(x) for x in line.split()]
            if len(vals) != 8:
                raise ValueError("trajectory line must have 8 fields: %r" % line)
            rot = Rotation.from_quat(vals[4:8]).as_matrix()
            samples.append(TrajectorySample(vals[0], PoseSE3(rot, vals[1:4])))
    return samples


def associate(times_a, times_b, tol: float):
    """Greedy nearest-timestamp pairing within tol, monotone in both lists."""
    pairs = []
    j = 0
    for i, ta in enumerate(times_a):
        while j + 1 < len(times_b) and abs(times_b[j + 1] - ta) <= abs(times_b[j] - ta):
            j += 1
        if j < len(times_b) and abs(times_b[j] - ta) <= tol:
            pairs.append((i, j))
    return pairs


@dataclass
class ApeReport:
    mean_ape: float
    rmse_xyz: np.ndarray
    times: np.ndarray
    errors: np.ndarray  # (N, 3) per-frame position error

    @property
    def error_norms(self) -> np.ndarray:
        return np.linalg.norm(self.errors, axis=1)


def compute_ape(estimate, reference, association_tol: float | None = None) -> ApeReport:
    """Mean absolute position error and per-axis RMSE.

    association_tol defaults to half the median reference frame period.
    """
    if association_tol is None:
        ref_times = np.array([s.time for s in reference])
        if len(ref_times) < 2:
            raise EvaluationError("reference trajectory too short")
        association_tol = 0.5 * float(np.median(np.diff(ref_times)))
    est_times = [s.time for s in estimate]
    ref_times = [s.time for s in reference]
    pairs = associate(est_times, ref_times, association_tol)
    if not pairs:
        raise EvaluationError("no associated samples within tolerance")
    errors = np.array(
        [
            estimate[i].pose.translation - reference[j].pose.translation
            for i, j in pairs
        ]
    )
    times = np.array([est_times[i] for i, _ in pairs])
    mean_ape = float(np.mean(np.linalg.norm(errors, axis=1)))
    rmse = np.sqrt(np.mean(errors**2, axis=0))
    return ApeReport(mean_ape, rmse, times, errors)

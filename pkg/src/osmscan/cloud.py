"""Weighted point clouds with per-point class labels and text IO.

Classes distinguish where a point came from: "local" for live sensor
returns, "facade"/"ground" for prior-map points. Normals are optional per
point and stored as NaN rows when absent. The on-disk format is one point
per line: x y z nx ny nz w class, 9 significant digits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASS_LOCAL = 0
CLASS_FACADE = 1
CLASS_GROUND = 2

CLASS_NAMES = {CLASS_LOCAL: "local", CLASS_FACADE: "facade", CLASS_GROUND: "ground"}
CLASS_CODES = {name: code for code, name in CLASS_NAMES.items()}

_UNIT_TOL = 1e-6


@dataclass
class WeightedCloud:
    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    classes: np.ndarray

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        n = len(self.points)
        self.normals = np.asarray(self.normals, dtype=float).reshape(n, 3)
        self.weights = np.asarray(self.weights, dtype=float).reshape(n)
        self.classes = np.asarray(self.classes, dtype=np.uint8).reshape(n)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points must be finite")
        norms = np.linalg.norm(self.normals, axis=1)
        present = ~np.isnan(norms)
        if np.any(np.abs(norms[present] - 1.0) > _UNIT_TOL):
            raise ValueError("normals must be unit length where present")
        if np.any(self.weights <= 0.0) or np.any(self.weights > 1.0):
            raise ValueError("weights must lie in (0, 1]")

    @classmethod
    def empty(cls) -> "WeightedCloud":
        return cls(
            np.empty((0, 3)), np.empty((0, 3)), np.empty(0), np.empty(0, dtype=np.uint8)
        )

    @classmethod
    def build(cls, points, normals=None, weights=None, point_class=CLASS_LOCAL) -> "WeightedCloud":
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        n = len(points)
        if normals is None:
            normals = np.full((n, 3), np.nan)
        if weights is None:
            weights = np.ones(n)
        classes = np.full(n, point_class, dtype=np.uint8)
        return cls(points, normals, weights, classes)

    def __len__(self) -> int:
        return len(self.points)

    def has_normal(self) -> np.ndarray:
        return ~np.isnan(self.normals[:, 0])

    def select(self, mask) -> "WeightedCloud":
        return WeightedCloud(
            self.points[mask], self.normals[mask], self.weights[mask], self.classes[mask]
        )

    def transformed(self, pose) -> "WeightedCloud":
        """Rigidly transform points and rotate normals where present."""
        normals = self.normals.copy()
        present = self.has_normal()
        normals[present] = normals[present] @ pose.rotation.T
        return WeightedCloud(pose.apply(self.points), normals, self.weights, self.classes)

    @classmethod
    def concat(cls, clouds) -> "WeightedCloud":
        clouds = [c for c in clouds]
        if not clouds:
            return cls.empty()
        return cls(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.normals for c in clouds]),
            np.concatenate([c.weights for c in clouds]),
            np.concatenate([c.classes for c in clouds]),
        )


def save_cloud(path, cloud: WeightedCloud) -> None:
    with open(path, "w") as f:
        for p, n, w, c in zip(cloud.points, cloud.normals, cloud.weights, cloud.classes):
            f.write(
                "%.9g %.9g %.9g %.9g %.9g %.9g %.9g %s\n"
                % (p[0], p[1], p[2], n[0], n[1], n[2], w, CLASS_NAMES[int(c)])
            )


def load_cloud(path) -> WeightedCloud:
    points, normals, weights, classes = [], [], [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError("cloud line must have 8 fields: %r" % line)
            points.append([float(x) for x in parts[0:3]])
            normals.append([float(x) for x in parts[3:6]])
            weights.append(float(parts[6]))
            classes.append(CLASS_CODES[parts[7]])
    if not points:
        return WeightedCloud.empty()
    return WeightedCloud(
        np.array(points), np.array(normals), np.array(weights), np.array(classes, dtype=np.uint8)
    )

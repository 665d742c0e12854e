"""
Rigid transforms, rotated BEV boxes, IoU / NMS and feature-map warping.

Poses are 4x4 ego-to-world matrices (row-major, meters). BEV grids index rows
along x and columns along y; cell (i, j) is centered at
(x_min + (i + 0.5) * cell, y_min + (j + 0.5) * cell).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial.transform import Rotation
from shapely.geometry import Polygon

CLASS_NAMES = ("vehicle", "cyclist", "pedestrian")
UNCLEAR = "unclear"
BACKGROUND = "background"
# index 0 is background in every per-cell class map
CLASS_INDEX = {BACKGROUND: 0, **{name: i + 1 for i, name in enumerate(CLASS_NAMES)}}
NUM_CLASSES = len(CLASS_INDEX)

POSE_TOLERANCE = 1e-6


def wrap_angle(angle):
    """Wrap radians into (-pi, pi]."""
    return math.pi - (math.pi - angle) % (2 * math.pi)


@dataclass
class RotatedBox:
    """A BEV-rotated 3D box: center and dims in meters, yaw in radians."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float
    label: str
    score: float = 1.0

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dims must be strictly positive, got l={self.l} w={self.w} h={self.h}")
        if self.label not in CLASS_NAMES and self.label != UNCLEAR:
            raise ValueError(f"unknown box class {self.label!r}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"box score must lie in [0, 1], got {self.score}")
        self.cx, self.cy, self.cz = float(self.cx), float(self.cy), float(self.cz)
        self.l, self.w, self.h = float(self.l), float(self.w), float(self.h)
        self.yaw = wrap_angle(float(self.yaw))
        self.score = float(self.score)

    @property
    def bev_range(self):
        return math.hypot(self.cx, self.cy)

    def corners(self):
        """BEV corners, counter-clockwise, shape (4, 2)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        half = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=np.float64) * [self.l / 2, self.w / 2]
        rot = np.array([[c, -s], [s, c]])
        return half @ rot.T + [self.cx, self.cy]

    def polygon(self):
        return Polygon(self.corners())

    def to_dict(self):
        return {"cx": self.cx, "cy": self.cy, "cz": self.cz, "l": self.l, "w": self.w, "h": self.h,
                "yaw": self.yaw, "class": self.label, "score": self.score}

    @classmethod
    def from_dict(cls, data):
        return cls(data["cx"], data["cy"], data["cz"], data["l"], data["w"], data["h"], data["yaw"],
                   data["class"], data.get("score", 1.0))


# ---------------------------------------------------------------------------
# Poses
# ---------------------------------------------------------------------------

def validate_pose(pose, tolerance=POSE_TOLERANCE):
    """Raise ValueError unless ``pose`` is a finite 4x4 rigid transform."""
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise ValueError(f"pose must be 4x4, got shape {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise ValueError("pose contains non-finite values")
    if not np.allclose(pose[3], [0, 0, 0, 1], atol=tolerance, rtol=0):
        raise ValueError(f"pose last row must be (0, 0, 0, 1), got {pose[3]}")
    rot = pose[:3, :3]
    if not np.allclose(rot.T @ rot, np.eye(3), atol=tolerance, rtol=0):
        raise ValueError("pose rotation block is not orthonormal")
    if np.linalg.det(rot) <= 0:
        raise ValueError("pose rotation block is a reflection")
    return pose


def make_pose(x=0.0, y=0.0, yaw=0.0, z=0.0):
    """Ego-to-world pose for a planar position and heading."""
    pose = np.eye(4)
    pose[:3, :3] = Rotation.from_euler("z", yaw).as_matrix()
    pose[:3, 3] = (x, y, z)
    return pose


def relative_transform(pose_now, pose_prev):
    """
    (pose_now)^-1 . pose_prev: maps previous-frame coordinates into the current frame.
    """
    pose_now = validate_pose(pose_now)
    pose_prev = validate_pose(pose_prev)
    if np.array_equal(pose_now, pose_prev):
        return np.eye(4)
    inverse = np.eye(4)
    inverse[:3, :3] = pose_now[:3, :3].T
    inverse[:3, 3] = -pose_now[:3, :3].T @ pose_now[:3, 3]
    return inverse @ pose_prev


class Transform2D(NamedTuple):
    """BEV part of a relative pose: rotation block and translation in meters."""

    r11: float
    r12: float
    r21: float
    r22: float
    tx: float
    ty: float

    def as_array(self, dtype=np.float64):
        return np.array(self, dtype=dtype)

    @property
    def rotation(self):
        return np.array([[self.r11, self.r12], [self.r21, self.r22]])

    @property
    def translation(self):
        return np.array([self.tx, self.ty])

    def inverse(self):
        rot_t = self.rotation.T
        t = -rot_t @ self.translation
        return Transform2D(rot_t[0, 0], rot_t[0, 1], rot_t[1, 0], rot_t[1, 1], t[0], t[1])


IDENTITY_2D = Transform2D(1.0, 0.0, 0.0, 1.0, 0.0, 0.0)


def extract_2d(rel):
    """Read (r11, r12, r21, r22, tx, ty) out of a 4x4 relative pose."""
    rel = np.asarray(rel, dtype=np.float64)
    if not np.allclose(rel[:2, :2].T @ rel[:2, :2], np.eye(2), atol=POSE_TOLERANCE, rtol=0):
        raise ValueError("relative pose has a non-planar rotation; its 2x2 block is not orthonormal")
    return Transform2D(*(float(v) for v in (rel[0, 0], rel[0, 1], rel[1, 0], rel[1, 1], rel[0, 3], rel[1, 3])))


def transform_points(points, rel):
    """
    Apply a homogeneous transform to the xyz columns of ``points``.

    Extra columns (intensity, ...) are carried through unchanged.
    """
    points = np.asarray(points)
    rel = np.asarray(rel, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] < 3:
        raise ValueError(f"points must be (N, >=3), got shape {points.shape}")
    out = points.copy()
    xyz = points[:, :3].astype(np.float64)
    out[:, :3] = xyz @ rel[:3, :3].T + rel[:3, 3]
    return out


# ---------------------------------------------------------------------------
# IoU and NMS
# ---------------------------------------------------------------------------

def rotated_iou_bev(a, b):
    """Exact BEV intersection-over-union of two rotated rectangles."""
    pa, pb = a.polygon(), b.polygon()
    if pa.area <= 0 or pb.area <= 0:
        return 0.0
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return float(inter / union) if union > 0 else 0.0


def _may_overlap(anchor, others):
    """Circumscribed-circle test; boxes failing it have IoU exactly 0."""
    if not others:
        return np.zeros(0, dtype=bool)
    centers = np.array([[o.cx, o.cy] for o in others])
    radii = np.array([math.hypot(o.l, o.w) / 2 for o in others])
    dist = np.hypot(centers[:, 0] - anchor.cx, centers[:, 1] - anchor.cy)
    return dist <= radii + math.hypot(anchor.l, anchor.w) / 2


def nms(boxes, iou_threshold):
    """
    Greedy per-class non-maximum suppression on rotated BEV IoU.

    Boxes are visited by descending score (lower index first on ties); a box
    is dropped when it overlaps an already kept box of its class with
    IoU >= iou_threshold.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept = {}
    survivors = []
    for i in order:
        box = boxes[i]
        same_class = kept.setdefault(box.label, [])
        near = _may_overlap(box, same_class)
        if any(rotated_iou_bev(box, same_class[k]) >= iou_threshold for k in np.flatnonzero(near)):
            continue
        same_class.append(box)
        survivors.append(box)
    return survivors


# ---------------------------------------------------------------------------
# Feature-map warping
# ---------------------------------------------------------------------------

class GridMeta(NamedTuple):
    """Placement of a feature map in the ego frame: lower corner and cell size (m)."""

    x_min: float
    y_min: float
    cell: float


def _snap(coords, tolerance=1e-9):
    rounded = np.round(coords)
    return np.where(np.abs(coords - rounded) < tolerance, rounded, coords)


def warp_feature_map(features, rel2d, grid_meta):
    """
    Resample a BEV feature map into the frame reached through ``rel2d``.

    Each output cell reads the input at the inverse-transformed location with
    bilinear interpolation; samples outside the grid read as 0.

    Args:
        features: (H, W, C) or (B, H, W, C) map expressed in the previous frame;
            every batch entry is warped by the same transform
        rel2d: Transform2D mapping previous-frame to current-frame coordinates
        grid_meta: GridMeta of the map

    Returns:
        Array shaped like ``features``, expressed in the current frame
    """
    if features.ndim == 4:
        return np.stack([warp_feature_map(fmap, rel2d, grid_meta) for fmap in features])
    if features.ndim != 3:
        raise ValueError(f"feature map must be (H, W, C) or (B, H, W, C), got {features.shape}")
    height, width, channels = features.shape
    x_min, y_min, cell = grid_meta

    ii, jj = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    now = np.stack([x_min + (ii + 0.5) * cell, y_min + (jj + 0.5) * cell], axis=-1)
    prev = (now - rel2d.translation) @ rel2d.rotation  # R^T (p - t), row-vector form
    rows = _snap((prev[..., 0] - x_min) / cell - 0.5)
    cols = _snap((prev[..., 1] - y_min) / cell - 0.5)

    out = np.empty_like(features)
    for c in range(channels):
        out[..., c] = map_coordinates(features[..., c], [rows, cols], order=1, mode="grid-constant", cval=0.0)
    return out

"""
Scans, sequences, their on-disk format, the global point budget, and the
synthetic scene generator used in place of a recorded dataset.

On disk a sequence is a folder holding one binary file per scan plus a
``manifest.json``; a dataset is a folder of sequences with an ``index.json``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CLASS_NAMES, UNCLEAR, RotatedBox, make_pose, validate_pose

SCAN_MAGIC = b"TPSCAN1\0"
SCAN_VERSION = 1
SCAN_HEADER = struct.Struct("<8sII")
POINT_DTYPE = np.dtype("<f4")
MANIFEST_NAME = "manifest.json"
INDEX_NAME = "index.json"
MAX_PAST_SCANS = 10


class SequenceFormatError(ValueError):
    """A scan file or sequence manifest does not follow the expected format."""


@dataclass
class Scan:
    """One LiDAR sweep: (N, 4) points x, y, z, intensity in the ego frame."""

    points: np.ndarray
    pose: np.ndarray
    timestamp: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 4:
            raise ValueError(f"scan points must be (N, 4), got shape {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("scan points contain non-finite values")
        self.pose = validate_pose(self.pose)
        self.timestamp = float(self.timestamp)


@dataclass
class Sequence:
    """Past scans followed by the annotated core frame."""

    scans: list
    annotations: list = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        if not self.scans:
            raise ValueError("a sequence needs at least the core scan")
        if len(self.scans) > MAX_PAST_SCANS + 1:
            raise ValueError(f"a sequence holds at most {MAX_PAST_SCANS} past scans, got {len(self.scans) - 1}")
        stamps = [s.timestamp for s in self.scans]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise SequenceFormatError(f"scan timestamps must be strictly increasing, got {stamps}")

    @property
    def core(self):
        return self.scans[-1]

    @property
    def past(self):
        return self.scans[:-1]

    def tail(self, n_scans):
        """The last ``n_scans`` scans (core included) as a new sequence."""
        return Sequence(self.scans[-n_scans:], self.annotations, self.name)


# ---------------------------------------------------------------------------
# Point budget
# ---------------------------------------------------------------------------

def apply_point_budget(points, budget, seed=0):
    """
    Match a cloud to the global point budget N_t.

    Clouds above the budget are subsampled uniformly without replacement
    (original order kept); smaller clouds are returned unchanged. Nothing is
    ever truncated or padded per pillar.
    """
    if budget <= 0:
        raise ValueError(f"point budget must be positive, got {budget}")
    if len(points) <= budget:
        return points
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(points), size=budget, replace=False))
    return points[keep]


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SceneConfig:
    """
    Knobs of the synthetic scene generator.

    ``point_density`` is the expected number of surface points an object of
    that class returns at 1 m; the count falls off with the squared range.
    """

    object_counts: dict = field(default_factory=lambda: {
        "vehicle": 6, "cyclist": 3, "pedestrian": 4, "unclear": 1})
    size_priors: dict = field(default_factory=lambda: {
        "vehicle": [4.5, 1.9, 1.6], "cyclist": [1.8, 0.7, 1.5],
        "pedestrian": [0.6, 0.6, 1.7], "unclear": [1.0, 1.0, 1.0]})
    size_jitter: float = 0.2
    speed_ranges: dict = field(default_factory=lambda: {
        "vehicle": [0.0, 15.0], "cyclist": [0.0, 6.0], "pedestrian": [0.0, 1.5], "unclear": [0.0, 0.0]})
    point_density: dict = field(default_factory=lambda: {
        "vehicle": 20000.0, "cyclist": 6000.0, "pedestrian": 4000.0, "unclear": 3000.0})
    ground_points: int = 3000
    ego_speed_range: list = field(default_factory=lambda: [0.0, 20.0])
    ego_yaw_rate_range: list = field(default_factory=lambda: [-0.2, 0.2])
    placement_x: list = field(default_factory=lambda: [2.0, 46.0])
    placement_y: list = field(default_factory=lambda: [-14.0, 14.0])
    min_gap: float = 1.0
    max_range: float = 200.0
    jitter: float = 0.03
    scan_period: float = 0.1
    n_scans: int = 3
    seed: int = 0

    def validate(self):
        if not 1 <= self.n_scans <= MAX_PAST_SCANS:
            raise ValueError(f"n_scans must lie in [1, {MAX_PAST_SCANS}], got {self.n_scans}")
        if any(v < 0 for v in self.point_density.values()) or self.ground_points < 0:
            raise ValueError("point densities must be nonnegative")
        active = [c for c, n in self.object_counts.items() if n > 0 and self.point_density.get(c, 0) > 0]
        if not active and self.ground_points == 0:
            raise ValueError("scene config is infeasible: zero point density everywhere")
        for label in self.object_counts:
            if label not in CLASS_NAMES and label != UNCLEAR:
                raise ValueError(f"unknown object class {label!r}")
            if label not in self.size_priors or label not in self.point_density:
                raise ValueError(f"class {label!r} needs a size prior and a point density")
        if self.scan_period <= 0:
            raise ValueError("scan_period must be positive")


def expected_point_count(density, distance):
    """Inverse-square return count, distances clamped at 1 m."""
    return density / max(distance, 1.0) ** 2


def sample_box_surface(rng, dims, n, jitter):
    """``n`` points on the four sides and top of a box centered at the origin."""
    l, w, h = dims
    areas = np.array([l * h, l * h, w * h, w * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    pts = rng.uniform(-0.5, 0.5, size=(n, 3)) * [l, w, h]
    pts[face == 0, 1] = w / 2
    pts[face == 1, 1] = -w / 2
    pts[face == 2, 0] = l / 2
    pts[face == 3, 0] = -l / 2
    pts[face == 4, 2] = h / 2
    return pts + rng.normal(0.0, jitter, size=pts.shape)


def _ego_pose(t, speed, yaw_rate):
    heading = yaw_rate * t
    if abs(yaw_rate) < 1e-9:
        return make_pose(speed * t, 0.0, 0.0)
    radius = speed / yaw_rate
    return make_pose(radius * math.sin(heading), radius * (1.0 - math.cos(heading)), heading)


def _place_objects(rng, config):
    placed = []
    for label, count in config.object_counts.items():
        prior = np.asarray(config.size_priors[label], dtype=np.float64)
        for _ in range(count):
            for _attempt in range(100):
                dims = prior * (1.0 + rng.uniform(-config.size_jitter, config.size_jitter, size=3))
                x = rng.uniform(*config.placement_x)
                y = rng.uniform(*config.placement_y)
                radius = math.hypot(dims[0], dims[1]) / 2
                if all(math.hypot(x - o["x"], y - o["y"]) > radius + o["radius"] + config.min_gap for o in placed):
                    break
            else:
                continue
            placed.append({
                "label": label, "x": x, "y": y, "dims": dims, "radius": radius,
                "yaw": rng.uniform(-math.pi, math.pi),
                "speed": rng.uniform(*config.speed_ranges.get(label, [0.0, 0.0])),
            })
    return placed


def generate_scene(config):
    """
    Build one synthetic sequence: ego motion, moving boxes, range-decaying returns.

    The generator is deterministic for a fixed ``config.seed``. Objects move
    with constant velocity, the ego with constant speed and yaw rate. Each
    object returns max(1, Poisson(density / range^2)) surface points while it
    is within ``max_range``. Annotations live in the core frame's ego
    coordinates and list every object with at least one point in the core scan.
    """
    config.validate()
    layout_seq, *scan_seqs = np.random.SeedSequence(config.seed).spawn(config.n_scans + 1)
    rng = np.random.default_rng(layout_seq)

    times = np.arange(config.n_scans) * config.scan_period
    speed = rng.uniform(*config.ego_speed_range)
    yaw_rate = rng.uniform(*config.ego_yaw_rate_range)
    poses = [_ego_pose(t, speed, yaw_rate) for t in times]
    core_pose, core_time = poses[-1], times[-1]
    core_heading = yaw_rate * core_time

    objects = _place_objects(rng, config)
    for obj in objects:
        obj["cz"] = obj["dims"][2] / 2
        obj["world"] = core_pose @ np.array([obj["x"], obj["y"], obj["cz"], 1.0])
        heading = core_heading + obj["yaw"]
        obj["velocity"] = obj["speed"] * np.array([math.cos(heading), math.sin(heading), 0.0])

    scans = []
    core_hits = {}
    for k, (t, pose) in enumerate(zip(times, poses)):
        scan_rng = np.random.default_rng(scan_seqs[k])
        to_ego = np.linalg.inv(pose)
        heading = yaw_rate * t
        chunks = []
        for n_obj, obj in enumerate(objects):
            center = obj["world"].copy()
            center[:3] += obj["velocity"] * (t - core_time)
            center_ego = (to_ego @ center)[:3]
            distance = math.hypot(center_ego[0], center_ego[1])
            if distance > config.max_range:
                continue
            n = max(1, int(scan_rng.poisson(expected_point_count(config.point_density[obj["label"]], distance))))
            yaw_ego = core_heading + obj["yaw"] - heading
            c, s = math.cos(yaw_ego), math.sin(yaw_ego)
            local = sample_box_surface(scan_rng, obj["dims"], n, config.jitter)
            xyz = local @ np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]]) + center_ego
            intensity = np.clip(scan_rng.normal(0.6, 0.15, size=(n, 1)), 0.0, 1.0)
            chunks.append(np.hstack([xyz, intensity]))
            if k == config.n_scans - 1:
                core_hits[n_obj] = n
        if config.ground_points:
            chunks.append(_ground_points(scan_rng, config))
        points = np.vstack(chunks) if chunks else np.zeros((0, 4))
        scans.append(Scan(points.astype(np.float32), pose, float(t)))

    annotations = [
        RotatedBox(obj["x"], obj["y"], obj["cz"], *obj["dims"], obj["yaw"], obj["label"])
        for n_obj, obj in enumerate(objects) if core_hits.get(n_obj, 0) > 0
    ]
    return Sequence(scans, annotations, name=f"synthetic_{config.seed}")


def _ground_points(rng, config):
    # per-annulus density ~ 1/r gives per-area density ~ 1/r^2
    r_min = 2.0
    ranges = r_min * np.exp(rng.uniform(0.0, math.log(config.max_range / r_min), size=config.ground_points))
    angles = rng.uniform(-math.pi, math.pi, size=config.ground_points)
    z = rng.normal(0.0, 0.02, size=config.ground_points)
    intensity = rng.uniform(0.0, 0.2, size=config.ground_points)
    return np.column_stack([ranges * np.cos(angles), ranges * np.sin(angles), z, intensity])


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_scan(path, points):
    points = np.asarray(points)
    with open(path, "wb") as f:
        f.write(SCAN_HEADER.pack(SCAN_MAGIC, SCAN_VERSION, len(points)))
        f.write(points.astype(POINT_DTYPE).tobytes())


def read_scan(path):
    """Read the (N, 4) float32 points of one scan file."""
    raw = Path(path).read_bytes()
    if len(raw) < SCAN_HEADER.size:
        raise SequenceFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, count = SCAN_HEADER.unpack_from(raw)
    if magic != SCAN_MAGIC:
        raise SequenceFormatError(f"{path}: bad magic {magic!r}, expected {SCAN_MAGIC!r}")
    if version != SCAN_VERSION:
        raise SequenceFormatError(f"{path}: unsupported scan version {version}")
    expected = SCAN_HEADER.size + count * 4 * POINT_DTYPE.itemsize
    if len(raw) != expected:
        raise SequenceFormatError(f"{path}: expected {expected} bytes for {count} points, found {len(raw)}")
    points = np.frombuffer(raw, dtype=POINT_DTYPE, offset=SCAN_HEADER.size).reshape(count, 4)
    return points.astype(np.float32)


def save_sequence(sequence, path):
    """Write a sequence folder (scan files + manifest). Returns the manifest path."""
    folder = Path(path)
    folder.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, scan in enumerate(sequence.scans):
        name = f"scan_{k:02d}.bin"
        write_scan(folder / name, scan.points)
        entries.append({"file": name, "pose": [float(v) for v in scan.pose.reshape(-1)],
                        "timestamp": scan.timestamp})
    manifest = {
        "name": sequence.name,
        "scans": entries,
        "core_annotations": [
            {k: v for k, v in box.to_dict().items() if k != "score"} for box in sequence.annotations
        ],
    }
    manifest_path = folder / MANIFEST_NAME
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    return manifest_path


def load_sequence(path):
    """Load a sequence from its folder or its manifest file."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    if not manifest_path.exists():
        raise FileNotFoundError(f"sequence manifest not found: {manifest_path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise SequenceFormatError(f"{manifest_path}: invalid JSON ({e})") from e

    try:
        scans = []
        for entry in manifest["scans"]:
            pose = np.asarray(entry["pose"], dtype=np.float64)
            if pose.size != 16:
                raise SequenceFormatError(f"{manifest_path}: pose of {entry['file']} has {pose.size} values, expected 16")
            points = read_scan(manifest_path.parent / entry["file"])
            scans.append(Scan(points, pose.reshape(4, 4), entry["timestamp"]))
        annotations = [RotatedBox.from_dict(a) for a in manifest["core_annotations"]]
    except KeyError as e:
        raise SequenceFormatError(f"{manifest_path}: missing field {e}") from e
    except SequenceFormatError:
        raise
    except ValueError as e:
        raise SequenceFormatError(f"{manifest_path}: {e}") from e
    return Sequence(scans, annotations, name=manifest.get("name", manifest_path.parent.name))


def save_dataset(sequences, out_dir):
    """Write ``seq_00000 ...`` folders plus ``index.json``. Returns the index path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, sequence in enumerate(sequences):
        name = f"seq_{i:05d}"
        save_sequence(sequence, out_dir / name)
        names.append(name)
    index_path = out_dir / INDEX_NAME
    with open(index_path, "w", encoding="utf-8") as f:
        json.dump({"sequences": names}, f, indent=2)
    return index_path


def list_dataset(data_dir):
    """Sequence folders listed by a dataset's ``index.json``."""
    data_dir = Path(data_dir)
    index_path = data_dir / INDEX_NAME
    if not index_path.exists():
        raise FileNotFoundError(f"dataset index not found: {index_path}")
    with open(index_path, "r", encoding="utf-8") as f:
        index = json.load(f)
    return [data_dir / name for name in index["sequences"]]


def load_dataset(data_dir):
    return [load_sequence(p) for p in list_dataset(data_dir)]

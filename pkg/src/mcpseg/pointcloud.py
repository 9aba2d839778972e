"""Labeled point clouds: core types, text I/O, colored PLY export and PCA colors."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

NUM_CLASSES = 13

CLASS_NAMES = (
    "ceiling", "floor", "wall", "beam", "column", "window", "door",
    "table", "chair", "sofa", "bookcase", "board", "clutter",
)

CLASS_COLORS = np.array([
    [214, 214, 214],  # ceiling
    [140, 98, 57],    # floor
    [64, 130, 199],   # wall
    [255, 214, 0],    # beam
    [163, 73, 164],   # column
    [0, 210, 210],    # window
    [230, 60, 40],    # door
    [40, 170, 70],    # table
    [250, 140, 20],   # chair
    [120, 60, 140],   # sofa
    [110, 110, 30],   # bookcase
    [20, 40, 90],     # board
    [90, 90, 90],     # clutter
], dtype=np.uint8)


class PointCloudError(ValueError):
    """Raised for malformed or invalid point-cloud input."""


@dataclass(frozen=True)
class LabeledPoint:
    position: np.ndarray
    color: np.ndarray
    gt_class: int
    gt_instance: int


@dataclass(frozen=True)
class ClassLegend:
    names: tuple = CLASS_NAMES
    colors: np.ndarray = CLASS_COLORS

    def __post_init__(self):
        if len(self.names) != NUM_CLASSES or len(self.colors) != NUM_CLASSES:
            raise PointCloudError("legend must have exactly 13 entries")
        if len({tuple(c) for c in np.asarray(self.colors).tolist()}) != NUM_CLASSES:
            raise PointCloudError("legend colors must be pairwise distinct")

    def color_of(self, class_id: int) -> np.ndarray:
        return np.asarray(self.colors[class_id], dtype=np.uint8)


class PointCloud:
    """Struct-of-arrays labeled cloud.

    ``positions`` (n, 3) float64 metres, ``colors`` (n, 3) float64 in [0, 1],
    ``classes`` and ``instances`` (n,) int64.
    """

    def __init__(self, positions, colors=None, classes=None, instances=None):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.colors = (np.zeros((n, 3)) if colors is None
                       else np.asarray(colors, dtype=np.float64).reshape(-1, 3))
        self.classes = (np.zeros(n, dtype=np.int64) if classes is None
                        else np.asarray(classes, dtype=np.int64).reshape(-1))
        self.instances = (np.zeros(n, dtype=np.int64) if instances is None
                          else np.asarray(instances, dtype=np.int64).reshape(-1))
        if not (len(self.colors) == len(self.classes) == len(self.instances) == n):
            raise PointCloudError("column lengths differ")

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i) -> LabeledPoint:
        return LabeledPoint(self.positions[i].copy(), self.colors[i].copy(),
                            int(self.classes[i]), int(self.instances[i]))

    def subset(self, index) -> "PointCloud":
        return PointCloud(self.positions[index], self.colors[index],
                          self.classes[index], self.instances[index])

    @classmethod
    def concatenate(cls, clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls(np.zeros((0, 3)))
        return cls(np.concatenate([c.positions for c in clouds]),
                   np.concatenate([c.colors for c in clouds]),
                   np.concatenate([c.classes for c in clouds]),
                   np.concatenate([c.instances for c in clouds]))

    @classmethod
    def from_points(cls, points) -> "PointCloud":
        points = list(points)
        return cls([p.position for p in points], [p.color for p in points],
                   [p.gt_class for p in points], [p.gt_instance for p in points])


@dataclass
class Environment:
    cloud: PointCloud
    floor_z: float

    def __post_init__(self):
        if len(self.cloud) == 0:
            raise PointCloudError("no points")
        if self.floor_z > self.cloud.positions[:, 2].min() + 0.01:
            raise PointCloudError(
                f"floor_z {self.floor_z} lies above the lowest point")


def quantize_colors(colors) -> np.ndarray:
    """Map [0, 1] colors to uint8 with floor(c * 255 + 0.5)."""
    c = np.clip(np.asarray(colors, dtype=np.float64), 0.0, 1.0)
    return np.floor(c * 255.0 + 0.5).astype(np.uint8)


def _parse_rows(path: Path, min_cols: int):
    """Yield (line_number, fields) for data lines, plus header key/values."""
    header = {}
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                parts = s[1:].split()
                if len(parts) == 2:
                    header[parts[0]] = parts[1]
                continue
            fields = s.split()
            if len(fields) < min_cols:
                raise PointCloudError(
                    f"{path}:{lineno}: expected {min_cols} fields, got {len(fields)}")
            rows.append((lineno, fields))
    return header, rows


def read_cloud(path) -> tuple[PointCloud, dict]:
    """Read an 8-column ``x y z r g b class_id instance_id`` text file.

    Returns the cloud and any ``# key value`` header entries.
    """
    path = Path(path)
    header, rows = _parse_rows(path, 8)
    if not rows:
        return PointCloud(np.zeros((0, 3))), header
    data = np.empty((len(rows), 8), dtype=np.float64)
    for k, (lineno, fields) in enumerate(rows):
        if len(fields) != 8:
            raise PointCloudError(
                f"{path}:{lineno}: expected 8 fields, got {len(fields)}")
        try:
            data[k] = [float(f) for f in fields]
        except ValueError as exc:
            raise PointCloudError(f"{path}:{lineno}: {exc}") from None
        cls = data[k, 6]
        if cls != int(cls) or not 0 <= cls < NUM_CLASSES:
            raise PointCloudError(
                f"{path}:{lineno}: class_id {fields[6]} outside [0, 12]")
        if data[k, 7] < 0 or data[k, 7] != int(data[k, 7]):
            raise PointCloudError(
                f"{path}:{lineno}: instance_id {fields[7]} is not a non-negative integer")
    cloud = PointCloud(data[:, :3], data[:, 3:6] / 255.0,
                       data[:, 6].astype(np.int64), data[:, 7].astype(np.int64))
    return cloud, header


def write_cloud(path, cloud: PointCloud, header: dict | None = None):
    path = Path(path)
    rgb = quantize_colors(cloud.colors)
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key} {value}\n")
        for p, c, cls, inst in zip(cloud.positions, rgb, cloud.classes, cloud.instances):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} "
                     f"{c[0]} {c[1]} {c[2]} {cls} {inst}\n")


def load_environment(path) -> Environment:
    """Load a labeled environment; ``# floor_z <v>`` overrides the floor height."""
    cloud, header = read_cloud(path)
    if len(cloud) == 0:
        raise PointCloudError(f"{path}: no points")
    if "floor_z" in header:
        floor_z = float(header["floor_z"])
    else:
        floor_z = float(cloud.positions[:, 2].min())
    return Environment(cloud, floor_z)


def save_environment(path, env: Environment):
    write_cloud(path, env.cloud, {"floor_z": repr(float(env.floor_z))})


def instance_color(instance_id: int) -> np.ndarray:
    """Deterministic pseudo-random color for an instance ID (unset -> grey)."""
    if instance_id < 0:
        return np.array([128, 128, 128], dtype=np.uint8)
    # splitmix64 finaliser, kept in Python ints to avoid overflow warnings
    z = (int(instance_id) + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    z ^= z >> 31
    rgb = [(z >> s) & 0xFF for s in (0, 8, 16)]
    # keep colors away from black so small clusters stay visible
    return np.array([40 + (v * 215) // 255 for v in rgb], dtype=np.uint8)


def write_ply(path, positions, rgb):
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    rgb = np.asarray(rgb, dtype=np.uint8).reshape(-1, 3)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(positions)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for p, c in zip(positions, rgb):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read the ASCII PLY layout produced by :func:`write_ply`."""
    with open(path, "r", encoding="ascii") as fh:
        if fh.readline().strip() != "ply":
            raise PointCloudError(f"{path}: not a PLY file")
        n = None
        for line in fh:
            s = line.strip()
            if s.startswith("format") and s != "format ascii 1.0":
                raise PointCloudError(f"{path}: only ASCII PLY is supported")
            if s.startswith("element vertex"):
                n = int(s.split()[2])
            if s == "end_header":
                break
        if n is None:
            raise PointCloudError(f"{path}: missing vertex element")
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2, max_rows=n)
    if n == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8)
    return data[:, :3], data[:, 3:6].astype(np.uint8)


def export_colored(positions, labels, mode: str, path, legend: ClassLegend | None = None):
    """Write a PLY colored by class, instance or embedding color.

    ``labels`` is a sequence of class IDs (``mode="class"``), instance IDs
    (``mode="instance"``) or an (n, 3) array of colors in [0, 1]
    (``mode="embedding"``).
    """
    legend = legend or ClassLegend()
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if mode == "class":
        rgb = np.asarray(legend.colors, dtype=np.uint8)[np.asarray(labels, dtype=np.int64)]
    elif mode == "instance":
        cache = {}
        rgb = np.empty((len(positions), 3), dtype=np.uint8)
        for k, inst in enumerate(np.asarray(labels, dtype=np.int64).tolist()):
            if inst not in cache:
                cache[inst] = instance_color(inst)
            rgb[k] = cache[inst]
    elif mode == "embedding":
        colors = np.asarray(labels, dtype=np.float64).reshape(-1, 3)
        if colors.min(initial=0.0) < 0.0 or colors.max(initial=0.0) > 1.0:
            raise PointCloudError("embedding colors must lie in [0, 1]")
        rgb = quantize_colors(colors)
    else:
        raise PointCloudError(f"unknown export mode {mode!r}")
    if len(rgb) != len(positions):
        raise PointCloudError("labels and positions differ in length")
    write_ply(path, positions, rgb)


def pca_to_rgb(embeddings) -> np.ndarray:
    """Project embeddings onto their top three principal axes, rescaled to [0, 1].

    Components with (numerically) zero variance, or missing because there are
    fewer than three points, are filled with 0.5.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    x = x.reshape(len(x), -1)
    n = len(x)
    out = np.full((n, 3), 0.5)
    if n < 2:
        return out
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    scale = max(float(evals[0]), 0.0)
    for k in range(min(3, x.shape[1], n - 1)):
        if evals[k] <= 1e-12 * max(scale, 1e-300) or evals[k] <= 1e-300:
            break
        proj = centered @ evecs[:, k]
        lo, hi = proj.min(), proj.max()
        if hi - lo <= 0.0:
            break
        out[:, k] = (proj - lo) / (hi - lo)
    return out

"""Simulated rotating laser scanner over a voxelized labeled environment.

Rays are walked through an occupancy grid cell by cell (Amanatides & Woo
incremental traversal) and stop at the first occupied cell. The returned
point is one of the original environment points stored in that cell, so the
grid only acts as a lookup table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pointcloud import Environment, PointCloud, PointCloudError, read_cloud, write_cloud

DEFAULT_CELL = 0.1
DEFAULT_MAX_RANGE = 30.0
DEFAULT_SPACING = 0.2


def voxel_keys(positions, cell_size: float) -> np.ndarray:
    return np.floor(np.asarray(positions, dtype=np.float64) / cell_size).astype(np.int64)


class OccupancyIndex:
    """Voxel key -> indices of the environment points falling in that cell.

    Besides the dict used by the scalar walker, a dense boolean grid over the
    occupied bounding box and a CSR layout (points sorted by cell) back the
    vectorized sweep.
    """

    def __init__(self, cloud: PointCloud, cell_size: float = DEFAULT_CELL):
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.cloud = cloud
        self.cell_size = float(cell_size)
        n = len(cloud)
        keys = voxel_keys(cloud.positions, self.cell_size)
        self.keys = keys
        if n == 0:
            self.cells = {}
            self.lo = np.zeros(3, dtype=np.int64)
            self.shape = (0, 0, 0)
            self.occupied = np.zeros((0, 0, 0), dtype=bool)
            self._slot = np.zeros((0, 0, 0), dtype=np.int64)
            self._start = np.zeros(1, dtype=np.int64)
            self._order = np.zeros(0, dtype=np.int64)
            return
        self.lo = keys.min(axis=0)
        hi = keys.max(axis=0)
        self.shape = tuple(int(v) for v in hi - self.lo + 1)
        local = keys - self.lo
        flat = np.ravel_multi_index(local.T, self.shape)
        # stable sort keeps point-index order inside each cell
        order = np.argsort(flat, kind="stable")
        uniq, start = np.unique(flat[order], return_index=True)
        self._order = order
        self._start = np.append(start, n).astype(np.int64)
        self.occupied = np.zeros(self.shape, dtype=bool)
        self.occupied.reshape(-1)[uniq] = True
        self._slot = np.full(self.shape, -1, dtype=np.int64)
        self._slot.reshape(-1)[uniq] = np.arange(len(uniq))
        self.cells = {}
        for s, u in enumerate(uniq.tolist()):
            key = tuple(int(v) for v in np.unravel_index(u, self.shape) + self.lo)
            self.cells[key] = order[self._start[s]:self._start[s + 1]].tolist()

    def __len__(self):
        return len(self.cells)

    def points_in(self, key) -> list[int]:
        return self.cells.get(tuple(int(k) for k in key), [])

    def is_occupied(self, key) -> bool:
        return tuple(int(k) for k in key) in self.cells


def build_occupancy(env: Environment | PointCloud, cell_size: float = DEFAULT_CELL) -> OccupancyIndex:
    cloud = env.cloud if isinstance(env, Environment) else env
    if len(cloud) == 0:
        raise PointCloudError("no points")
    return OccupancyIndex(cloud, cell_size)


@dataclass(frozen=True)
class Hit:
    key: tuple
    point_index: int
    position: np.ndarray
    t_enter: float


def _nearest_to_line(points: np.ndarray, origin, direction) -> int:
    rel = points - origin
    # squared distance to the infinite line through origin
    along = rel @ direction
    d2 = np.einsum("ij,ij->i", rel, rel) - along * along
    return int(np.argmin(d2))  # argmin picks the lowest index on ties


def cast_ray(origin, direction, index: OccupancyIndex, max_range: float = DEFAULT_MAX_RANGE) -> Hit | None:
    """Return the first occupied cell entered by the ray within ``max_range``."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    norm = float(np.linalg.norm(d))
    if norm == 0.0:
        raise ValueError("ray direction must be non-zero")
    if abs(norm - 1.0) > 1e-9:
        raise ValueError("ray direction must be a unit vector")
    if max_range <= 0:
        raise ValueError("max_range must be positive")
    if not index.cells:
        return None

    s = index.cell_size
    key = [math.floor(o[a] / s) for a in range(3)]
    step = [0, 0, 0]
    t_max = [math.inf] * 3
    t_delta = [math.inf] * 3
    for a in range(3):
        if d[a] > 0:
            step[a] = 1
            t_max[a] = ((key[a] + 1) * s - o[a]) / d[a]
            t_delta[a] = s / d[a]
        elif d[a] < 0:
            step[a] = -1
            t_max[a] = (key[a] * s - o[a]) / d[a]
            t_delta[a] = -s / d[a]
    lo = index.lo.tolist()
    hi = [lo[a] + index.shape[a] - 1 for a in range(3)]

    t = 0.0
    while True:
        cell = index.cells.get(tuple(key))
        if cell is not None:
            pts = index.cloud.positions[cell]
            j = cell[_nearest_to_line(pts, o, d)]
            return Hit(tuple(key), j, index.cloud.positions[j].copy(), t)
        # axis with the nearest boundary; ties go to the lowest axis
        a = 0
        if t_max[1] < t_max[a]:
            a = 1
        if t_max[2] < t_max[a]:
            a = 2
        t = t_max[a]
        if t > max_range:
            return None
        key[a] += step[a]
        t_max[a] += t_delta[a]
        # walking away from the occupied box can never hit anything
        if (key[a] < lo[a] and step[a] < 0) or (key[a] > hi[a] and step[a] > 0):
            return None


def cast_rays(origins, directions, index: OccupancyIndex, max_range: float = DEFAULT_MAX_RANGE):
    """Vectorized :func:`cast_ray` over many rays.

    Returns ``(point_index, keys)`` where ``point_index`` is -1 for misses.
    """
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    r = len(d)
    o = np.broadcast_to(np.asarray(origins, dtype=np.float64), (r, 3)).copy()
    hit_point = np.full(r, -1, dtype=np.int64)
    hit_key = np.zeros((r, 3), dtype=np.int64)
    if r == 0 or not index.cells:
        return hit_point, hit_key

    s = index.cell_size
    key = np.floor(o / s).astype(np.int64)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = (key + (step > 0)) * s
        t_max = np.where(step != 0, (bound - o) / d, np.inf)
        t_delta = np.where(step != 0, s / np.abs(d), np.inf)

    lo = index.lo
    hi = index.lo + np.asarray(index.shape) - 1
    shape = np.asarray(index.shape)
    occ = index.occupied.reshape(-1)
    slot_of = index._slot.reshape(-1)
    active = np.arange(r)
    hit_slot = np.full(r, -1, dtype=np.int64)
    rows = np.arange(r)

    while len(active):
        k = key[active]
        local = k - lo
        inside = np.all((local >= 0) & (local < shape), axis=1)
        flat = np.zeros(len(active), dtype=np.int64)
        flat[inside] = np.ravel_multi_index(local[inside].T, index.shape)
        hit = inside.copy()
        hit[inside] = occ[flat[inside]]
        if hit.any():
            ids = active[hit]
            hit_slot[ids] = slot_of[flat[hit]]
            hit_key[ids] = k[hit]
        keep = ~hit
        active = active[keep]
        if not len(active):
            break
        tm = t_max[active]
        axis = np.argmin(tm, axis=1)
        sub = rows[:len(active)]
        t_next = tm[sub, axis]
        step_a = step[active, axis]
        new_k = key[active, axis] + step_a
        lo_a, hi_a = lo[axis], hi[axis]
        alive = (t_next <= max_range) & ~((new_k < lo_a) & (step_a < 0)) & ~((new_k > hi_a) & (step_a > 0))
        key[active, axis] = new_k
        t_max[active, axis] = t_next + t_delta[active, axis]
        active = active[alive]

    got = np.nonzero(hit_slot >= 0)[0]
    if len(got):
        hit_point[got] = _representatives(index, o[got], d[got], hit_slot[got])
    return hit_point, hit_key


def _representatives(index: OccupancyIndex, o, d, slots) -> np.ndarray:
    """For each (ray, cell slot) pick the cell point nearest to the ray line."""
    start = index._start[slots]
    count = index._start[slots + 1] - start
    ray = np.repeat(np.arange(len(slots)), count)
    offs = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
    pidx = index._order[np.repeat(start, count) + offs]
    rel = index.cloud.positions[pidx] - o[ray]
    along = np.einsum("ij,ij->i", rel, d[ray])
    d2 = np.einsum("ij,ij->i", rel, rel) - along * along
    order = np.lexsort((pidx, d2, ray))
    first = np.ones(len(order), dtype=bool)
    first[1:] = ray[order][1:] != ray[order][:-1]
    return pidx[order][first]


def sweep_directions(h_res: float = 1.0, v_res: float = 1.0) -> np.ndarray:
    """Unit ray directions: azimuth [0, 360) outer loop, elevation [-90, 90] inner."""
    n_az = 360.0 / h_res
    n_el = 180.0 / v_res
    if abs(n_az - round(n_az)) > 1e-9 or abs(n_el - round(n_el)) > 1e-9:
        raise ValueError("360 and 180 must be divisible by the angular resolutions")
    az = np.deg2rad(np.arange(int(round(n_az))) * h_res)
    el = np.deg2rad(-90.0 + np.arange(int(round(n_el)) + 1) * v_res)
    az, el = np.meshgrid(az, el, indexing="ij")
    dirs = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
    dirs = dirs.reshape(-1, 3)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


@dataclass
class ScanPose:
    position: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.position)):
            raise ValueError("pose must be finite")


@dataclass
class Scan:
    pose: ScanPose
    cloud: PointCloud
    source_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    rays_cast: int = 0

    def __len__(self):
        return len(self.cloud)


def simulate_scan(pose, index: OccupancyIndex, h_res: float = 1.0, v_res: float = 1.0,
                  max_range: float = DEFAULT_MAX_RANGE) -> Scan:
    pose = pose if isinstance(pose, ScanPose) else ScanPose(pose)
    dirs = sweep_directions(h_res, v_res)
    hit_point, _ = cast_rays(pose.position, dirs, index, max_range)
    hits = hit_point[hit_point >= 0]
    # keep first occurrence in ray order
    _, first = np.unique(hits, return_index=True)
    src = hits[np.sort(first)]
    return Scan(pose, index.cloud.subset(src), src, rays_cast=len(dirs))


def resample_polyline(waypoints, spacing: float = DEFAULT_SPACING) -> np.ndarray:
    """Points at arc lengths 0, spacing, 2*spacing, ... along the polyline."""
    w = np.asarray(waypoints, dtype=np.float64).reshape(-1, 3)
    if len(w) == 0:
        raise ValueError("need at least one waypoint")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    seg = np.linalg.norm(np.diff(w, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    count = int(math.floor(total / spacing + 1e-9)) + 1
    s = np.arange(count) * spacing
    out = np.empty((count, 3))
    for k, sk in enumerate(s):
        j = int(np.searchsorted(cum, sk, side="right")) - 1
        j = min(max(j, 0), len(seg) - 1) if len(seg) else 0
        if not len(seg) or seg[j] == 0.0:
            out[k] = w[j]
            continue
        frac = min(max((sk - cum[j]) / seg[j], 0.0), 1.0)
        out[k] = w[j] + frac * (w[j + 1] - w[j])
    return out


def simulate_trajectory(waypoints, index: OccupancyIndex, spacing: float = DEFAULT_SPACING,
                        h_res: float = 1.0, v_res: float = 1.0,
                        max_range: float = DEFAULT_MAX_RANGE) -> list[Scan]:
    return [simulate_scan(ScanPose(p), index, h_res, v_res, max_range)
            for p in resample_polyline(waypoints, spacing)]


# -- file formats --------------------------------------------------------

def load_trajectory(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 3:
                raise PointCloudError(f"{path}:{lineno}: expected 'x y z'")
            rows.append([float(v) for v in parts])
    if not rows:
        raise PointCloudError(f"{path}: no waypoints")
    return np.array(rows)


def save_trajectory(path, waypoints):
    with open(path, "w", encoding="utf-8") as fh:
        for p in np.asarray(waypoints, dtype=np.float64).reshape(-1, 3):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")


MANIFEST = "manifest.txt"


def write_dataset(out_dir, scans: list[Scan], floor_z: float) -> Path:
    """One 8-column text file per scan plus ``manifest.txt`` listing them in order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"# floor_z {float(floor_z)!r}\n"]
    for k, scan in enumerate(scans):
        name = f"scan_{k:05d}.txt"
        write_cloud(out / name, scan.cloud)
        p = scan.pose.position
        lines.append(f"{name} {p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")
    manifest = out / MANIFEST
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest


def read_manifest(path) -> tuple[list[tuple[Path, np.ndarray]], float | None]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    floor_z = None
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            parts = s[1:].split()
            if len(parts) == 2 and parts[0] == "floor_z":
                floor_z = float(parts[1])
            continue
        parts = s.split()
        if len(parts) != 4:
            raise PointCloudError(f"{path}:{lineno}: expected 'scan_file x y z'")
        entries.append((path.parent / parts[0], np.array([float(v) for v in parts[1:]])))
    return entries, floor_z


def load_scans(manifest_path) -> tuple[list[Scan], float | None]:
    entries, floor_z = read_manifest(manifest_path)
    scans = []
    for scan_path, pose in entries:
        if not scan_path.exists():
            raise FileNotFoundError(f"missing scan file: {scan_path}")
        cloud, _ = read_cloud(scan_path)
        scans.append(Scan(ScanPose(pose), cloud))
    return scans, floor_z

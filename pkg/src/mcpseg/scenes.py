"""Procedural labeled indoor scenes for experiments and demos.

Surfaces are sampled on jittered grids so every surface voxel is filled.
Class IDs follow the 13-class legend (ceiling 0, floor 1, wall 2, door 6,
table 7, clutter 12).
"""

from __future__ import annotations

import numpy as np

from .pointcloud import Environment, PointCloud

CEILING, FLOOR, WALL, DOOR, TABLE, CLUTTER = 0, 1, 2, 6, 7, 12


class _Builder:
    def __init__(self, rng, spacing):
        self.rng = rng
        self.spacing = spacing
        self.parts = []
        self.next_instance = 1

    def new_instance(self):
        inst = self.next_instance
        self.next_instance += 1
        return inst

    def rect(self, origin, u, v, cls, color, inst, noise=0.04):
        """Jittered grid over the parallelogram origin + s*u + t*v, s,t in [0,1]."""
        origin, u, v = (np.asarray(a, dtype=np.float64) for a in (origin, u, v))
        lu, lv = np.linalg.norm(u), np.linalg.norm(v)
        nu = max(int(np.ceil(lu / self.spacing)), 1)
        nv = max(int(np.ceil(lv / self.spacing)), 1)
        s = (np.arange(nu) + 0.5) / nu
        t = (np.arange(nv) + 0.5) / nv
        s, t = np.meshgrid(s, t, indexing="ij")
        s = np.clip(s.ravel() + self.rng.uniform(-0.3, 0.3, s.size) / nu, 0.0, 1.0)
        t = np.clip(t.ravel() + self.rng.uniform(-0.3, 0.3, t.size) / nv, 0.0, 1.0)
        pts = origin + s[:, None] * u + t[:, None] * v
        normal = np.cross(u, v)
        normal /= np.linalg.norm(normal)
        pts += normal * self.rng.normal(0.0, 0.003, (len(pts), 1))
        col = np.clip(np.asarray(color) + self.rng.normal(0.0, noise, (len(pts), 3)), 0.0, 1.0)
        self.parts.append(PointCloud(pts, col, np.full(len(pts), cls), np.full(len(pts), inst)))

    def box(self, lo, hi, cls, color, inst, bottom=False, noise=0.04):
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        dx, dy, dz = hi - lo
        ex, ey, ez = np.diag([dx, dy, dz])
        self.rect(lo + ez, ex, ey, cls, color, inst, noise)           # top
        if bottom:
            self.rect(lo, ex, ey, cls, color, inst, noise)
        self.rect(lo, ex, ez, cls, color, inst, noise)                # -y
        self.rect(lo + ey, ex, ez, cls, color, inst, noise)           # +y
        self.rect(lo, ey, ez, cls, color, inst, noise)                # -x
        self.rect(lo + ex, ey, ez, cls, color, inst, noise)           # +x

    def table(self, x0, y0, w, d, height=0.75, color=(0.55, 0.38, 0.22)):
        inst = self.new_instance()
        top = 0.04
        self.box((x0, y0, height - top), (x0 + w, y0 + d, height), TABLE, color, inst, bottom=True)
        leg = 0.06
        for lx, ly in ((x0, y0), (x0 + w - leg, y0), (x0, y0 + d - leg), (x0 + w - leg, y0 + d - leg)):
            self.box((lx, ly, 0.0), (lx + leg, ly + leg, height - top), TABLE, color, inst)

    def clutter(self, lo, hi):
        color = self.rng.uniform(0.15, 0.95, 3)
        self.box(lo, hi, CLUTTER, color, self.new_instance(), noise=0.06)

    def wall_with_openings(self, start, end, height, openings, color):
        """Vertical wall from ``start`` to ``end`` (x-y), minus door-sized openings.

        ``openings`` is a list of (s0, s1, top) in metres along the wall.
        """
        inst = self.new_instance()
        start, end = np.asarray(start, dtype=np.float64), np.asarray(end, dtype=np.float64)
        length = np.linalg.norm(end - start)
        along = (end - start) / length
        cuts = sorted(openings)
        s = 0.0
        for s0, s1, top in cuts:
            if s0 > s:
                self.rect(np.r_[start + along * s, 0.0], np.r_[along * (s0 - s), 0.0],
                          (0, 0, height), WALL, color, inst)
            self.rect(np.r_[start + along * s0, top], np.r_[along * (s1 - s0), 0.0],
                      (0, 0, height - top), WALL, color, inst)
            s = s1
        if s < length:
            self.rect(np.r_[start + along * s, 0.0], np.r_[along * (length - s), 0.0],
                      (0, 0, height), WALL, color, inst)

    def finish(self) -> Environment:
        cloud = PointCloud.concatenate(self.parts)
        return Environment(cloud, float(cloud.positions[:, 2].min()))


def two_room_scene(seed: int = 0, spacing: float = 0.085, height: float = 2.6) -> Environment:
    """Two adjoining 4 m x 4 m rooms joined by an open doorway (~20k points)."""
    rng = np.random.default_rng(seed)
    b = _Builder(rng, spacing)
    floor_c, ceil_c, wall_c = (0.52, 0.42, 0.30), (0.92, 0.92, 0.90), (0.80, 0.79, 0.74)
    for x0 in (0.0, 4.0):
        b.rect((x0, 0, 0.0), (4, 0, 0), (0, 4, 0), FLOOR, floor_c, b.new_instance())
        b.rect((x0, 0, height), (4, 0, 0), (0, 4, 0), CEILING, ceil_c, b.new_instance())
    b.wall_with_openings((0, 0), (8, 0), height, [], wall_c)
    b.wall_with_openings((0, 4), (8, 4), height, [], (0.76, 0.78, 0.80))
    b.wall_with_openings((0, 0), (0, 4), height, [], (0.82, 0.80, 0.72))
    b.wall_with_openings((8, 0), (8, 4), height, [], (0.78, 0.80, 0.76))
    b.wall_with_openings((4, 0), (4, 4), height, [(1.5, 2.5, 2.1)], (0.80, 0.78, 0.76))

    door_c = (0.45, 0.30, 0.18)
    # open door leaf swung into room B, hinged at the doorway edge
    b.box((4.02, 2.45, 0.0), (4.92, 2.5, 2.08), DOOR, door_c, b.new_instance())
    # closed doors set slightly proud of the outer walls
    b.box((1.0, 0.0, 0.0), (1.9, 0.05, 2.08), DOOR, door_c, b.new_instance())
    b.box((6.2, 3.95, 0.0), (7.1, 4.0, 2.08), DOOR, (0.50, 0.33, 0.20), b.new_instance())

    b.table(1.2, 2.4, 1.4, 0.8)
    b.table(5.6, 0.9, 1.2, 0.8, color=(0.58, 0.40, 0.24))
    for lo, hi in (((1.4, 2.55, 0.75), (1.7, 2.85, 0.95)),
                   ((2.1, 2.7, 0.75), (2.3, 2.9, 1.05)),
                   ((0.2, 0.3, 0.0), (0.7, 0.8, 0.45)),
                   ((3.2, 3.3, 0.0), (3.7, 3.8, 0.9)),
                   ((5.8, 1.1, 0.75), (6.1, 1.4, 0.85)),
                   ((7.2, 3.0, 0.0), (7.8, 3.7, 0.6)),
                   ((4.4, 0.2, 0.0), (5.0, 0.6, 1.1))):
        b.clutter(lo, hi)
    return b.finish()


# through the doorway, seeing both rooms; kept short so 100 epochs fit a desk budget
TWO_ROOM_TRAIN = np.array([[2.2, 1.8, 1.2], [4.0, 2.0, 1.2], [5.6, 2.2, 1.2]])
TWO_ROOM_HELDOUT = np.array([
    [1.0, 3.5, 1.1], [0.8, 1.8, 1.1], [2.8, 1.0, 1.1], [3.6, 1.8, 1.1],
    [5.2, 1.9, 1.1], [7.0, 3.0, 1.1],
])


def corridor_scene(seed: int = 0, length: float = 22.0, width: float = 2.4,
                   spacing: float = 0.1, height: float = 2.5) -> Environment:
    """Straight corridor with doors and clutter along both walls."""
    rng = np.random.default_rng(seed)
    b = _Builder(rng, spacing)
    b.rect((0, 0, 0.0), (length, 0, 0), (0, width, 0), FLOOR, (0.5, 0.45, 0.4), b.new_instance())
    b.rect((0, 0, height), (length, 0, 0), (0, width, 0), CEILING, (0.9, 0.9, 0.9), b.new_instance())
    for x0 in np.arange(0.0, length, 4.0):
        x1 = min(x0 + 4.0, length)
        b.wall_with_openings((x0, 0), (x1, 0), height, [], (0.8, 0.8, 0.75))
        b.wall_with_openings((x0, width), (x1, width), height, [], (0.78, 0.8, 0.8))
        dx = x0 + rng.uniform(0.5, 2.5)
        if dx + 0.9 < x1:
            b.box((dx, 0.0, 0.0), (dx + 0.9, 0.05, 2.05), DOOR, (0.45, 0.3, 0.2), b.new_instance())
        cx = x0 + rng.uniform(0.3, 3.0)
        side = rng.integers(0, 2)
        y0 = 0.1 if side == 0 else width - 0.6
        b.clutter((cx, y0, 0.0), (cx + 0.5, y0 + 0.5, rng.uniform(0.3, 1.2)))
    b.wall_with_openings((0, 0), (0, width), height, [], (0.8, 0.8, 0.8))
    b.wall_with_openings((length, 0), (length, width), height, [], (0.8, 0.8, 0.8))
    return b.finish()

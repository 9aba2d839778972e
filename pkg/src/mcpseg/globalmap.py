"""Global voxel lookup table holding one point per 0.1 m cell.

Cells are grouped into dense 16^3 blocks of point ids so that neighbor
(Chebyshev 1) and context (Chebyshev 3) queries over a whole scan reduce to
array gathers on a small local grid, independent of how large the map is.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pointcloud import PointCloudError, quantize_colors

BLOCK = 16
EMBED_DIM = 50


@dataclass
class GlobalPoint:
    id: int
    position: np.ndarray
    color: np.ndarray
    gt_class: int
    gt_instance: int
    pred_class: int | None = None
    instance_id: int | None = None
    last_embedding: np.ndarray | None = None


def chebyshev_offsets(radius: int, include_center: bool = False) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    off = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    if not include_center:
        off = off[np.any(off != 0, axis=1)]
    return off


class LocalGrid:
    """Dense id grid covering keys ``lo .. lo + shape - 1`` (-1 = empty)."""

    def __init__(self, lo, ids):
        self.lo = np.asarray(lo, dtype=np.int64)
        self.ids = ids

    def lookup(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        local = keys - self.lo
        shape = np.asarray(self.ids.shape)
        inside = np.all((local >= 0) & (local < shape), axis=-1)
        out = np.full(keys.shape[:-1], -1, dtype=np.int64)
        li = local[inside]
        out[inside] = self.ids[li[:, 0], li[:, 1], li[:, 2]]
        return out


class GlobalMap:
    def __init__(self, cell_size: float = 0.1, embed_dim: int = EMBED_DIM):
        self.cell_size = float(cell_size)
        self.embed_dim = embed_dim
        self._blocks: dict[tuple, np.ndarray] = {}
        self._n = 0
        cap = 1024
        self.positions = np.zeros((cap, 3))
        self.colors = np.zeros((cap, 3))
        self.keys = np.zeros((cap, 3), dtype=np.int64)
        self.gt_class = np.zeros(cap, dtype=np.int64)
        self.gt_instance = np.zeros(cap, dtype=np.int64)
        self.pred_class = np.full(cap, -1, dtype=np.int64)
        self.instance_id = np.full(cap, -1, dtype=np.int64)
        self.embeddings = np.zeros((cap, embed_dim))
        self.has_embedding = np.zeros(cap, dtype=bool)

    # -- storage ---------------------------------------------------------

    def __len__(self):
        return self._n

    @property
    def next_id(self) -> int:
        return self._n

    def _grow(self, need: int):
        cap = len(self.positions)
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        for name in ("positions", "colors", "keys", "gt_class", "gt_instance",
                     "pred_class", "instance_id", "embeddings", "has_embedding"):
            old = getattr(self, name)
            fill = -1 if name in ("pred_class", "instance_id") else 0
            new = np.full((cap,) + old.shape[1:], fill, dtype=old.dtype)
            new[:self._n] = old[:self._n]
            setattr(self, name, new)

    def key_of(self, positions) -> np.ndarray:
        return np.floor(np.asarray(positions, dtype=np.float64) / self.cell_size).astype(np.int64)

    def _block(self, bkey, create=False):
        blk = self._blocks.get(bkey)
        if blk is None and create:
            blk = np.full((BLOCK, BLOCK, BLOCK), -1, dtype=np.int64)
            self._blocks[bkey] = blk
        return blk

    def local_grid(self, lo, hi) -> LocalGrid:
        """Dense copy of the id grid for keys in [lo, hi] (inclusive)."""
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        ids = np.full(tuple(hi - lo + 1), -1, dtype=np.int64)
        blo = np.floor_divide(lo, BLOCK)
        bhi = np.floor_divide(hi, BLOCK)
        for bx in range(blo[0], bhi[0] + 1):
            for by in range(blo[1], bhi[1] + 1):
                for bz in range(blo[2], bhi[2] + 1):
                    blk = self._blocks.get((bx, by, bz))
                    if blk is None:
                        continue
                    base = np.array([bx, by, bz]) * BLOCK
                    a = np.maximum(lo, base)
                    b = np.minimum(hi, base + BLOCK - 1)
                    ids[a[0] - lo[0]:b[0] - lo[0] + 1,
                        a[1] - lo[1]:b[1] - lo[1] + 1,
                        a[2] - lo[2]:b[2] - lo[2] + 1] = \
                        blk[a[0] - base[0]:b[0] - base[0] + 1,
                            a[1] - base[1]:b[1] - base[1] + 1,
                            a[2] - base[2]:b[2] - base[2] + 1]
        return LocalGrid(lo, ids)

    def lookup(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        if len(keys) == 0:
            return np.zeros(0, dtype=np.int64)
        return self.local_grid(keys.min(axis=0), keys.max(axis=0)).lookup(keys)

    # -- operations --------------------------------------------------------

    def insert_scan(self, cloud) -> tuple[np.ndarray, np.ndarray]:
        """Add points whose voxel is still empty; the first point in scan order wins.

        Returns ``(new_ids, point_ids)``: ids created by this call (ascending)
        and, for every input point, the id of the map point owning its voxel.
        Points in already-occupied voxels are re-observations of that owner.
        """
        n = len(cloud)
        if n == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        keys = self.key_of(cloud.positions)
        grid = self.local_grid(keys.min(axis=0), keys.max(axis=0))
        local = keys - grid.lo
        flat = np.ravel_multi_index(local.T, grid.ids.shape)
        existing = grid.ids.reshape(-1)[flat]
        _, first = np.unique(flat, return_index=True)
        first = np.sort(first)
        fresh = first[existing[first] < 0]
        new_ids = np.arange(self._n, self._n + len(fresh), dtype=np.int64)
        self._grow(self._n + len(fresh))
        sl = slice(self._n, self._n + len(fresh))
        self.positions[sl] = cloud.positions[fresh]
        self.colors[sl] = cloud.colors[fresh]
        self.keys[sl] = keys[fresh]
        self.gt_class[sl] = cloud.classes[fresh]
        self.gt_instance[sl] = cloud.instances[fresh]
        self._n += len(fresh)

        grid_flat = grid.ids.reshape(-1)
        grid_flat[flat[fresh]] = new_ids
        self._write_blocks(keys[fresh], new_ids)
        return new_ids, grid_flat[flat]

    def _write_blocks(self, keys, ids):
        if len(ids) == 0:
            return
        bkeys = np.floor_divide(keys, BLOCK)
        inner = keys - bkeys * BLOCK
        uniq, inverse = np.unique(bkeys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        for u, bk in enumerate(uniq):
            sel = inverse == u
            blk = self._block(tuple(int(v) for v in bk), create=True)
            i = inner[sel]
            blk[i[:, 0], i[:, 1], i[:, 2]] = ids[sel]

    def point(self, pid: int) -> GlobalPoint:
        if not 0 <= pid < self._n:
            raise KeyError(pid)
        return GlobalPoint(
            id=int(pid),
            position=self.positions[pid].copy(),
            color=self.colors[pid].copy(),
            gt_class=int(self.gt_class[pid]),
            gt_instance=int(self.gt_instance[pid]),
            pred_class=None if self.pred_class[pid] < 0 else int(self.pred_class[pid]),
            instance_id=None if self.instance_id[pid] < 0 else int(self.instance_id[pid]),
            last_embedding=self.embeddings[pid].copy() if self.has_embedding[pid] else None,
        )

    def _around(self, pid: int, radius: int) -> np.ndarray:
        if not 0 <= pid < self._n:
            raise KeyError(pid)
        k = self.keys[pid]
        ids = self.local_grid(k - radius, k + radius).ids.reshape(-1)
        ids = ids[(ids >= 0) & (ids != pid)]
        return np.sort(ids)

    def neighbors(self, pid: int) -> np.ndarray:
        """Ids of stored points at Chebyshev key distance 1 (excluding ``pid``)."""
        return self._around(pid, 1)

    def context(self, pid: int, exclude=()) -> np.ndarray:
        """Ids within Chebyshev key distance 3, minus ``pid`` and ``exclude``."""
        ids = self._around(pid, 3)
        if len(exclude):
            ids = ids[~np.isin(ids, np.fromiter(exclude, dtype=np.int64))]
        return ids

    def update_labels(self, ids, pred_classes, embeddings=None):
        """Overwrite predicted class and embedding; later entries win."""
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        pred = np.asarray(pred_classes, dtype=np.int64).reshape(-1)
        if len(ids) != len(pred):
            raise ValueError("ids and pred_classes differ in length")
        if len(ids) == 0:
            return
        if ids.min() < 0 or ids.max() >= self._n:
            bad = ids[(ids < 0) | (ids >= self._n)][0]
            raise KeyError(f"unknown point id {int(bad)}")
        # numpy fancy assignment keeps the last write for repeated ids
        self.pred_class[ids] = pred
        if embeddings is not None:
            emb = np.asarray(embeddings, dtype=np.float64).reshape(len(ids), -1)
            self.embeddings[ids] = emb
            self.has_embedding[ids] = True

    # -- snapshot ----------------------------------------------------------

    def snapshot_array(self) -> np.ndarray:
        n = self._n
        return np.column_stack([
            self.positions[:n], quantize_colors(self.colors[:n]),
            self.gt_class[:n], self.gt_instance[:n],
            self.pred_class[:n], self.instance_id[:n],
        ])

    def write_snapshot(self, path):
        n = self._n
        rgb = quantize_colors(self.colors[:n])
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# x y z r g b gt_class gt_instance pred_class instance_id\n")
            for i in range(n):
                p = self.positions[i]
                c = rgb[i]
                fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]} "
                         f"{self.gt_class[i]} {self.gt_instance[i]} "
                         f"{self.pred_class[i]} {self.instance_id[i]}\n")


@dataclass
class Snapshot:
    positions: np.ndarray
    colors: np.ndarray
    gt_class: np.ndarray
    gt_instance: np.ndarray
    pred_class: np.ndarray
    instance_id: np.ndarray


def read_snapshot(path) -> Snapshot:
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 10:
            raise PointCloudError(
                f"{path}:{lineno}: expected 10 columns "
                f"(x y z r g b gt_class gt_instance pred_class instance_id), got {len(parts)}")
        rows.append([float(v) for v in parts])
    if not rows:
        raise PointCloudError(f"{path}: no points")
    a = np.array(rows)
    return Snapshot(a[:, :3], a[:, 3:6] / 255.0, a[:, 6].astype(np.int64),
                    a[:, 7].astype(np.int64), a[:, 8].astype(np.int64),
                    a[:, 9].astype(np.int64))

"""Incremental agglomerative instance clustering and a region-growing baseline."""

from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .globalmap import GlobalMap, chebyshev_offsets


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


class ClusterSet:
    """Union-find over global point ids with one instance ID per root.

    Roots carry a member list (merged small-into-large) so that relabeling
    after a merge touches only the points whose instance ID changes.
    """

    def __init__(self):
        self.parent: dict[int, int] = {}
        self.size: dict[int, int] = {}
        self.members: dict[int, list] = {}
        self.instance_of_root: dict[int, int] = {}
        self.root_of_instance: dict[int, int] = {}
        self.next_instance = 1
        self.merges = 0

    def __contains__(self, pid) -> bool:
        return pid in self.parent

    def __len__(self):
        return len(self.instance_of_root)

    def find(self, pid: int) -> int:
        parent = self.parent
        root = pid
        while parent[root] != root:
            root = parent[root]
        while parent[pid] != root:
            parent[pid], pid = root, parent[pid]
        return root

    def label(self, pid: int) -> int:
        return self.instance_of_root[self.find(pid)]

    def labels(self, ids) -> np.ndarray:
        return np.array([self.label(int(i)) for i in ids], dtype=np.int64)

    def make_cluster(self, pid: int) -> int:
        self.parent[pid] = pid
        self.size[pid] = 1
        self.members[pid] = [pid]
        inst = self.next_instance
        self.next_instance += 1
        self.instance_of_root[pid] = inst
        self.root_of_instance[inst] = pid
        return inst

    def add_to(self, pid: int, root: int):
        self.parent[pid] = root
        self.size[root] += 1
        self.members[root].append(pid)

    def merge(self, roots) -> tuple[int, list]:
        """Union the given roots; the survivor keeps the smallest instance ID.

        Returns ``(root, relabeled_ids)``.
        """
        roots = sorted(set(roots), key=lambda r: self.size[r], reverse=True)
        big = roots[0]
        keep_inst = min(self.instance_of_root[r] for r in roots)
        relabeled = []
        if self.instance_of_root[big] != keep_inst:
            relabeled.extend(self.members[big])
        for r in roots[1:]:
            self.parent[r] = big
            self.size[big] += self.size.pop(r)
            mem = self.members.pop(r)
            if self.instance_of_root[r] != keep_inst:
                relabeled.extend(mem)
            self.members[big].extend(mem)
            del self.root_of_instance[self.instance_of_root.pop(r)]
            self.merges += 1
        del self.root_of_instance[self.instance_of_root[big]]
        self.instance_of_root[big] = keep_inst
        self.root_of_instance[keep_inst] = big
        return big, relabeled

    def partition(self) -> dict[int, int]:
        return {pid: self.label(pid) for pid in self.parent}


def candidate_edges(gmap: GlobalMap, new_ids, labeled_mask=None):
    """Vectorized Chebyshev-1 neighbor pairs ``(new_id, neighbor_id, cosine)``.

    A neighbor is eligible when it already holds an instance label or is an
    earlier new point of the same batch (lower id).
    """
    new_ids = np.asarray(new_ids, dtype=np.int64)
    if len(new_ids) == 0:
        z = np.zeros(0, dtype=np.int64)
        return z, z, np.zeros(0)
    keys = gmap.keys[new_ids]
    grid = gmap.local_grid(keys.min(axis=0) - 1, keys.max(axis=0) + 1)
    offs = chebyshev_offsets(1)
    nb = grid.lookup(keys[:, None, :] + offs[None, :, :])   # (P, 26)
    src = np.repeat(new_ids, nb.shape[1])
    dst = nb.reshape(-1)
    ok = dst >= 0
    src, dst = src[ok], dst[ok]
    labeled = gmap.instance_id[dst] >= 0 if labeled_mask is None else labeled_mask[dst]
    pos = np.searchsorted(new_ids, dst)
    pos_c = np.minimum(pos, len(new_ids) - 1)
    is_new = new_ids[pos_c] == dst
    eligible = (labeled & ~is_new) | (is_new & (dst < src))
    src, dst = src[eligible], dst[eligible]
    e = gmap.embeddings
    norms = np.linalg.norm(e[src], axis=1) * np.linalg.norm(e[dst], axis=1)
    cos = np.einsum("ij,ij->i", e[src], e[dst]) / np.maximum(norms, 1e-300)
    return src, dst, cos


def assign_new_points(clusters: ClusterSet, new_ids, gmap: GlobalMap, beta: float = 0.9,
                      embeddings=None) -> list[tuple[int, int]]:
    """Label newly inserted map points by the three connection rules.

    Points are processed in id order. Each connects to eligible neighbors
    (labeled map points, or earlier points of this batch) whose embedding
    cosine exceeds ``beta``. No connection seeds a new instance; one cluster
    is joined; several clusters are merged under their smallest instance ID.
    Instance IDs in ``gmap`` are kept in sync. Returns the final
    ``(id, instance)`` for every new point.
    """
    new_ids = np.sort(np.asarray(new_ids, dtype=np.int64))
    if embeddings is not None:
        gmap.update_labels(new_ids, gmap.pred_class[new_ids], embeddings)
    if len(new_ids) and not gmap.has_embedding[new_ids].all():
        raise RuntimeError("new points are missing embeddings")
    src, dst, cos = candidate_edges(gmap, new_ids)
    if len(dst) and not gmap.has_embedding[dst].all():
        raise RuntimeError("labeled neighbors are missing embeddings")
    conn = cos > beta
    src, dst = src[conn], dst[conn]
    order = np.argsort(src, kind="stable")
    src, dst = src[order], dst[order]
    starts = np.searchsorted(src, new_ids, side="left")
    ends = np.searchsorted(src, new_ids, side="right")

    inst = gmap.instance_id
    for pid, a, b in zip(new_ids.tolist(), starts.tolist(), ends.tolist()):
        if a == b:
            inst[pid] = clusters.make_cluster(pid)
            continue
        roots = {clusters.find(q) for q in dst[a:b].tolist()}
        if len(roots) == 1:
            root = roots.pop()
            clusters.add_to(pid, root)
            inst[pid] = clusters.instance_of_root[root]
            continue
        root, relabeled = clusters.merge(roots)
        clusters.add_to(pid, root)
        label = clusters.instance_of_root[root]
        if relabeled:
            inst[np.asarray(relabeled, dtype=np.int64)] = label
        inst[pid] = label
    return [(int(p), int(inst[p])) for p in new_ids]


# -- region-growing baseline -----------------------------------------------

def estimate_normals(positions, cell_size: float = 0.1) -> np.ndarray:
    """PCA normals over Chebyshev-1 voxel neighbors (smallest-eigenvalue axis).

    Points with fewer than 3 neighbors get +z.
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = len(pos)
    normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    if n == 0:
        return normals
    src, dst = voxel_adjacency(pos, cell_size)
    starts = np.searchsorted(src, np.arange(n), "left")
    ends = np.searchsorted(src, np.arange(n), "right")
    for i in np.nonzero(ends - starts >= 3)[0]:
        pts = pos[np.append(dst[starts[i]:ends[i]], i)]
        c = pts - pts.mean(axis=0)
        _, vecs = np.linalg.eigh(c.T @ c)
        normals[i] = vecs[:, 0]
    return normals


def voxel_adjacency(positions, cell_size: float = 0.1):
    """Directed edges ``(src, dst)`` between distinct points whose voxel keys
    are within Chebyshev distance 1, sorted by ``src`` then ``dst``."""
    pos = np.asarray(positions, dtype=np.float64)
    n = len(pos)
    keys = np.floor(pos / cell_size).astype(np.int64)
    lo = keys.min(axis=0) - 1
    local = keys - lo
    shape = tuple(local.max(axis=0) + 2)
    flat = np.ravel_multi_index(local.T, shape)
    order = np.argsort(flat, kind="stable")
    sorted_flat = flat[order]
    offs = chebyshev_offsets(1, include_center=True)
    nbr = np.ravel_multi_index((local[:, None, :] + offs[None]).reshape(-1, 3).T, shape)
    a = np.searchsorted(sorted_flat, nbr, "left")
    b = np.searchsorted(sorted_flat, nbr, "right")
    count = b - a
    src = np.repeat(np.repeat(np.arange(n), len(offs)), count)
    within = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
    dst = order[np.repeat(a, count) + within]
    keep = src != dst
    src, dst = src[keep], dst[keep]
    o = np.lexsort((dst, src))
    return src[o], dst[o]


def region_grow_baseline(positions, colors, normals=None, angle_thresh: float = 15.0,
                         color_thresh: float = 0.25, cell_size: float = 0.1) -> np.ndarray:
    """Connected components over voxel adjacency gated by normal angle and color.

    Normal directions are compared up to sign. Returns labels 0..k-1 in
    order of first appearance.
    """
    pos = np.asarray(positions, dtype=np.float64)
    col = np.asarray(colors, dtype=np.float64)
    n = len(pos)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if normals is None:
        normals = estimate_normals(pos, cell_size)
    normals = np.asarray(normals, dtype=np.float64)
    src, dst = voxel_adjacency(pos, cell_size)
    cos_lim = np.cos(np.deg2rad(angle_thresh))
    dots = np.abs(np.einsum("ij,ij->i", normals[src], normals[dst]))
    dcol = np.linalg.norm(col[src] - col[dst], axis=1)
    keep = (dots >= cos_lim - 1e-12) & (dcol <= color_thresh)
    g = coo_matrix((np.ones(keep.sum()), (src[keep], dst[keep])), shape=(n, n))
    _, comp = connected_components(g, directed=False)
    _, first = np.unique(comp, return_index=True)
    remap = np.empty(len(first), dtype=np.int64)
    remap[np.argsort(first)] = np.arange(len(first))
    return remap[comp]

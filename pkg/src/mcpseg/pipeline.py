"""Online per-scan segmentation loop.

For every incoming scan: keep points near the robot, normalize them, add
unseen voxels to the global map, run the network in fixed-size batches
(with context points from earlier scans when MCP is enabled), write class
predictions and embeddings back to the map, and cluster the new points.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import ClusterSet, assign_new_points
from .globalmap import GlobalMap, chebyshev_offsets
from .metrics import EvalPair, Report, evaluate, write_report
from .network import Batch, NetworkParams, forward
from .raytrace import Scan, load_scans


@dataclass
class PipelineConfig:
    radius: float = 2.0
    batch_n: int = 256
    context_m: int = 50
    beta: float = 0.9
    use_mcp: bool = True
    seed: int = 0
    cell_size: float = 0.1
    horizontal: bool = True
    checkpoint: str | None = None

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.batch_n < 2:
            raise ValueError("batch_n must be at least 2")
        if self.context_m < 1:
            raise ValueError("context_m must be at least 1")


def normalize(positions, colors, pose, floor_z) -> np.ndarray:
    """Rows ``(x - pose.x, y - pose.y, z - floor_z, r, g, b)``."""
    pos = np.asarray(positions, dtype=np.float64)
    out = np.empty(pos.shape[:-1] + (6,))
    out[..., 0] = pos[..., 0] - pose[0]
    out[..., 1] = pos[..., 1] - pose[1]
    out[..., 2] = pos[..., 2] - floor_z
    out[..., 3:] = colors
    return out


def preprocess_scan(scan: Scan, floor_z: float, radius: float = 2.0, horizontal: bool = True):
    """Drop points farther than ``radius`` from the pose (x-y distance by default).

    Returns ``(inputs, kept)``: normalized (k, 6) rows and indices into the scan.
    """
    pose = scan.pose.position
    rel = scan.cloud.positions - pose
    dist2 = (rel[:, :2] ** 2).sum(axis=1) if horizontal else (rel ** 2).sum(axis=1)
    kept = np.nonzero(dist2 <= radius * radius)[0]
    inputs = normalize(scan.cloud.positions[kept], scan.cloud.colors[kept], pose, floor_z)
    return inputs, kept


@dataclass
class BatchIndex:
    index: np.ndarray   # (N,) rows into the scan's kept points
    real: np.ndarray    # (N,) False for resampled padding rows


def make_batches(n_points: int, batch_n: int, rng) -> list[BatchIndex]:
    """Shuffle and split into ceil(k / N) batches; pad the last by resampling."""
    if n_points < 1:
        return []
    perm = rng.permutation(n_points)
    out = []
    for start in range(0, n_points, batch_n):
        idx = perm[start:start + batch_n]
        real = np.ones(len(idx), dtype=bool)
        if len(idx) < batch_n:
            pad = rng.integers(0, n_points, size=batch_n - len(idx))
            idx = np.concatenate([idx, pad])
            real = np.concatenate([real, np.zeros(len(pad), dtype=bool)])
        out.append(BatchIndex(idx, real))
    return out


_CONTEXT_OFFSETS = chebyshev_offsets(3, include_center=True)


def context_candidates(gmap: GlobalMap, keys, own_ids, exclude_from: int):
    """Candidate context ids per point: stored points within Chebyshev key
    distance 3, excluding the point's own map entry and ids >= ``exclude_from``
    (points added by the current scan).

    Returns ``(flat_ids, counts)`` with candidates grouped by point in offset order.
    """
    keys = np.asarray(keys, dtype=np.int64)
    grid = gmap.local_grid(keys.min(axis=0) - 3, keys.max(axis=0) + 3)
    cand = grid.lookup(keys[:, None, :] + _CONTEXT_OFFSETS[None, :, :])
    valid = (cand >= 0) & (cand < exclude_from) & (cand != np.asarray(own_ids)[:, None])
    return cand[valid], valid.sum(axis=1)


def assemble_context(inputs, keys, own_ids, gmap: GlobalMap, exclude_from: int, context_m: int,
                     rng, pose, floor_z) -> np.ndarray:
    """(k, M, 6) context tensor sampled with replacement from earlier scans.

    Context rows share the current scan's normalization frame. Points with no
    candidates get their own input row repeated M times.
    """
    k = len(inputs)
    flat, counts = context_candidates(gmap, keys, own_ids, exclude_from)
    u = rng.random((k, context_m))
    ctx = np.repeat(np.asarray(inputs, dtype=np.float64)[:, None, :], context_m, axis=1)
    has = counts > 0
    if has.any():
        starts = np.cumsum(counts) - counts
        pick = np.minimum((u[has] * counts[has, None]).astype(np.int64), counts[has, None] - 1)
        ids = flat[starts[has, None] + pick]
        ctx[has] = normalize(gmap.positions[ids], gmap.colors[ids], pose, floor_z)
    return ctx


@dataclass
class ScanStats:
    index: int
    points_kept: int
    new_points: int
    clusters_merged: int
    instances: int
    ms_elapsed: float = 0.0
    network_ms: float = 0.0

    CSV_HEADER = "index,points_kept,new_points,clusters_merged,instances"

    def csv_row(self) -> str:
        return f"{self.index},{self.points_kept},{self.new_points},{self.clusters_merged},{self.instances}"


def process_scan(scan: Scan, gmap: GlobalMap, clusters: ClusterSet, params: NetworkParams,
                 config: PipelineConfig, floor_z: float, scan_index: int = 0) -> ScanStats:
    t0 = time.perf_counter()
    inputs, kept = preprocess_scan(scan, floor_z, config.radius, config.horizontal)
    if len(kept) == 0:
        return ScanStats(scan_index, 0, 0, 0, len(clusters),
                         (time.perf_counter() - t0) * 1e3, 0.0)
    cloud = scan.cloud.subset(kept)
    first_new = gmap.next_id
    new_ids, point_ids = gmap.insert_scan(cloud)
    rng = np.random.default_rng([config.seed, scan_index])
    batches = make_batches(len(kept), config.batch_n, rng)

    t_net = time.perf_counter()
    ctx = None
    if params.use_mcp:
        keys = gmap.key_of(cloud.positions)
        ctx = assemble_context(inputs, keys, point_ids, gmap, first_new, config.context_m,
                               rng, scan.pose.position, floor_z)
    upd_ids, upd_cls, upd_emb = [], [], []
    for b in batches:
        fr = forward(inputs[b.index], params, None if ctx is None else ctx[b.index])
        rows = b.index[b.real]
        upd_ids.append(point_ids[rows])
        upd_cls.append(fr.logits[b.real].argmax(axis=1))
        upd_emb.append(fr.embeddings[b.real])
    network_ms = (time.perf_counter() - t_net) * 1e3
    gmap.update_labels(np.concatenate(upd_ids), np.concatenate(upd_cls), np.concatenate(upd_emb))

    merges_before = clusters.merges
    assign_new_points(clusters, new_ids, gmap, config.beta)
    return ScanStats(scan_index, len(kept), len(new_ids), clusters.merges - merges_before,
                     len(clusters), (time.perf_counter() - t0) * 1e3, network_ms)


def stage_training_batches(scans: list[Scan], floor_z: float, config: PipelineConfig,
                           with_context: bool = True) -> list[Batch]:
    """Replay scans through a fresh map and emit labeled network batches.

    Context tensors are drawn exactly as at inference time (earlier scans
    only), so one staged dataset can train both network variants.
    """
    gmap = GlobalMap(config.cell_size)
    out = []
    for k, scan in enumerate(scans):
        inputs, kept = preprocess_scan(scan, floor_z, config.radius, config.horizontal)
        if len(kept) == 0:
            continue
        cloud = scan.cloud.subset(kept)
        first_new = gmap.next_id
        _, point_ids = gmap.insert_scan(cloud)
        rng = np.random.default_rng([config.seed, k])
        batches = make_batches(len(kept), config.batch_n, rng)
        ctx = None
        if with_context:
            ctx = assemble_context(inputs, gmap.key_of(cloud.positions), point_ids, gmap,
                                   first_new, config.context_m, rng, scan.pose.position, floor_z)
        for b in batches:
            out.append(Batch(inputs[b.index],
                             None if ctx is None else ctx[b.index],
                             cloud.classes[b.index], cloud.instances[b.index]))
    return out


@dataclass
class RunResult:
    gmap: GlobalMap
    clusters: ClusterSet
    stats: list
    report: Report | None = None


def run(scans, floor_z: float, params: NetworkParams, config: PipelineConfig,
        out_dir=None, log=None) -> RunResult:
    """Process scans in order and evaluate the final map against ground truth.

    ``scans`` is a list of :class:`Scan` or a manifest path. With ``out_dir``
    the map snapshot, metrics report, per-scan stats and timings are written.
    """
    if isinstance(scans, (str, Path)):
        scans, manifest_floor = load_scans(scans)
        if floor_z is None:
            floor_z = manifest_floor
    if not scans:
        raise ValueError("empty manifest: no scans to process")
    if floor_z is None:
        raise ValueError("floor_z unknown")
    gmap = GlobalMap(config.cell_size)
    clusters = ClusterSet()
    stats = []
    for k, scan in enumerate(scans):
        st = process_scan(scan, gmap, clusters, params, config, floor_z, k)
        stats.append(st)
        if log is not None:
            log(st)
    report = None
    if len(gmap):
        report = evaluate(EvalPair.from_map(gmap))
    if out_dir is not None:
        write_outputs(out_dir, gmap, stats, report)
    return RunResult(gmap, clusters, stats, report)


def write_outputs(out_dir, gmap: GlobalMap, stats, report):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gmap.write_snapshot(out / "snapshot.txt")
    (out / "stats.csv").write_text(
        ScanStats.CSV_HEADER + "\n" + "".join(s.csv_row() + "\n" for s in stats), encoding="utf-8")
    (out / "timing.csv").write_text(
        "index,ms_elapsed,network_ms\n"
        + "".join(f"{s.index},{s.ms_elapsed:.3f},{s.network_ms:.3f}\n" for s in stats),
        encoding="utf-8")
    if report is not None:
        write_report(out / "report.csv", report)

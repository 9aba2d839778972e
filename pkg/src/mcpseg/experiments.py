"""Scaled-down experiments on the procedural scenes.

``desk_scale_learning`` trains the network with and without context pooling
on one trajectory through the two-room scene and scores both on a second,
unseen trajectory. ``throughput_run`` times the online loop over a long
corridor walk.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .network import Batch, TrainConfig, forward, train
from .pipeline import PipelineConfig, run, stage_training_batches
from .raytrace import build_occupancy, simulate_trajectory
from .scenes import TWO_ROOM_HELDOUT, TWO_ROOM_TRAIN, corridor_scene, two_room_scene


def batch_accuracy(batches, params) -> float:
    correct = total = 0
    for b in batches:
        pred = forward(b, params).logits.argmax(axis=1)
        correct += int((pred == b.gt_class).sum())
        total += len(pred)
    return correct / total


def strip_context(batches):
    return [Batch(b.inputs, None, b.gt_class, b.gt_instance) for b in batches]


@dataclass
class LearningResult:
    n_points: int
    n_train_scans: int
    n_heldout_scans: int
    n_batches: int
    train_acc: dict
    heldout_acc: dict
    heldout_reports: dict
    histories: dict
    seconds: float


def desk_scale_learning(epochs: int = 100, seed: int = 0, dtype=np.float32, log=None) -> LearningResult:
    t0 = time.perf_counter()
    env = two_room_scene(seed)
    index = build_occupancy(env)
    train_scans = simulate_trajectory(TWO_ROOM_TRAIN, index)
    held_scans = simulate_trajectory(TWO_ROOM_HELDOUT, index)
    pcfg = PipelineConfig(seed=seed)
    staged = stage_training_batches(train_scans, env.floor_z, pcfg)
    variants = {"mcp": staged, "plain": strip_context(staged)}

    train_acc, held_acc, reports, histories = {}, {}, {}, {}
    for name, batches in variants.items():
        use_mcp = name == "mcp"
        cfg = TrainConfig(epochs=epochs, seed=seed, use_mcp=use_mcp)
        res = train(batches, cfg, dtype=dtype,
                    log=None if log is None else (lambda row, nm=name: log(nm, row)))
        histories[name] = res.history
        train_acc[name] = batch_accuracy(batches, res.params)
        rr = run(held_scans, env.floor_z, res.params,
                 PipelineConfig(seed=seed, use_mcp=use_mcp))
        reports[name] = rr.report
        held_acc[name] = rr.report.point_acc
    return LearningResult(len(env.cloud), len(train_scans), len(held_scans), len(staged),
                          train_acc, held_acc, reports, histories, time.perf_counter() - t0)


@dataclass
class ThroughputResult:
    seconds: np.ndarray        # wall time per scan
    points_kept: np.ndarray
    map_size: np.ndarray       # global map size after each scan


def throughput_run(params, n_scans: int = 100, seed: int = 0, spacing: float = 0.2) -> ThroughputResult:
    """Walk the corridor and time every ``process_scan`` call."""
    length = spacing * (n_scans - 1) + 2.0
    env = corridor_scene(seed, length=length)
    index = build_occupancy(env)
    waypoints = np.array([[1.0, 1.2, 1.3], [1.0 + spacing * (n_scans - 1), 1.2, 1.3]])
    scans = simulate_trajectory(waypoints, index, spacing=spacing)
    sizes = []
    res = run(scans, env.floor_z, params, PipelineConfig(seed=seed, use_mcp=params.use_mcp),
              log=lambda st: sizes.append(st.new_points))
    secs = np.array([s.ms_elapsed / 1e3 for s in res.stats])
    kept = np.array([s.points_kept for s in res.stats])
    return ThroughputResult(secs, kept, np.cumsum(sizes))

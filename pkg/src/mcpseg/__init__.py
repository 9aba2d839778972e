"""Online semantic and instance segmentation of indoor laser scans.

Modules: ``pointcloud`` (labeled clouds, file formats), ``raytrace`` (scan
simulation), ``globalmap`` (voxel-deduplicated map), ``network`` (numpy
segmentation network with context pooling), ``clustering`` (incremental
instance clustering), ``metrics``, ``pipeline`` (the per-scan loop) and
``cli``.
"""

from .clustering import ClusterSet, assign_new_points, region_grow_baseline
from .globalmap import GlobalMap, read_snapshot
from .metrics import EvalPair, Report, ami, ari, evaluate, nmi
from .network import (Batch, NetworkParams, TrainConfig, forward, init_params, load_checkpoint,
                      save_checkpoint, train)
from .pipeline import PipelineConfig, process_scan, run, stage_training_batches
from .pointcloud import (CLASS_NAMES, NUM_CLASSES, Environment, PointCloud, export_colored,
                         load_environment, pca_to_rgb, read_cloud, write_cloud)
from .raytrace import (build_occupancy, cast_ray, cast_rays, load_scans, simulate_scan,
                       simulate_trajectory, write_dataset)
from .scenes import corridor_scene, two_room_scene

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES", "NUM_CLASSES", "Batch", "ClusterSet", "Environment", "EvalPair", "GlobalMap",
    "NetworkParams", "PipelineConfig", "PointCloud", "Report", "TrainConfig",
    "ami", "ari", "assign_new_points", "build_occupancy", "cast_ray", "cast_rays",
    "corridor_scene", "evaluate", "export_colored", "forward", "init_params", "load_checkpoint",
    "load_environment", "load_scans", "nmi", "pca_to_rgb", "process_scan", "read_cloud",
    "read_snapshot", "region_grow_baseline", "run", "save_checkpoint", "simulate_scan",
    "simulate_trajectory", "stage_training_batches", "train", "two_room_scene", "write_cloud",
    "write_dataset",
]

"""
Training the network and segmenting a held-out walk
====================================================

Scans from one trajectory through the two-room scene are replayed through a
fresh global map to stage training batches; context tensors are drawn from
earlier scans only, exactly as at run time. A few epochs are enough to see
the losses fall. The trained weights then run online over a second
trajectory, and the final map is scored and exported as colored PLY files.

Pass an epoch count as the first argument (default 5; the full schedule is
100).
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from mcpseg import (CLASS_NAMES, PipelineConfig, TrainConfig, build_occupancy, export_colored,
                    pca_to_rgb, run, simulate_trajectory, stage_training_batches, train,
                    two_room_scene)
from mcpseg.scenes import TWO_ROOM_HELDOUT, TWO_ROOM_TRAIN

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5

env = two_room_scene(0)
index = build_occupancy(env)
train_scans = simulate_trajectory(TWO_ROOM_TRAIN, index)
held_scans = simulate_trajectory(TWO_ROOM_HELDOUT, index)
print(f"{len(train_scans)} training scans, {len(held_scans)} held-out scans")

batches = stage_training_batches(train_scans, env.floor_z, PipelineConfig(seed=0))
print(f"{len(batches)} batches of {len(batches[0].inputs)} points, "
      f"context {batches[0].context.shape[1]} points each")

res = train(batches, TrainConfig(epochs=epochs, seed=0), dtype=np.float32,
            log=lambda r: print(f"epoch {r['epoch']:3d}  ce {r['ce']:.3f}  "
                                f"triplet {r['triplet']:.3f}  acc {r['accuracy']:.3f}"))

out = Path(tempfile.mkdtemp())
run_res = run(held_scans, env.floor_z, res.params, PipelineConfig(seed=0), out_dir=out)
rep = run_res.report
print("held-out:", "  ".join(f"{k} {v:.3f}" for k, v in rep.summary().items()))
for c in np.nonzero(~np.isnan(rep.per_class_iou))[0]:
    print(f"  {CLASS_NAMES[c]:>8} IOU {rep.per_class_iou[c]:.3f}")

gm = run_res.gmap
n = len(gm)
export_colored(gm.positions[:n], gm.pred_class[:n], "class", out / "class.ply")
export_colored(gm.positions[:n], gm.instance_id[:n], "instance", out / "instance.ply")
export_colored(gm.positions[:n], pca_to_rgb(gm.embeddings[:n]), "embedding", out / "embedding.ply")
print("snapshot, report and PLY files in", out)

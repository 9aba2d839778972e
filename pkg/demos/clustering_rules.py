"""
Incremental clustering, one rule at a time
===========================================

New map points join clusters through their voxel neighbours whose embedding
cosine similarity exceeds beta. A point with no such neighbour seeds a new
instance, a point touching one cluster joins it, and a point touching
several merges them under the smallest instance ID.
"""

import numpy as np

from mcpseg import ClusterSet, GlobalMap, PointCloud, assign_new_points

CELL = 0.1
red, blue = np.eye(50)[0], np.eye(50)[1]


def add(gm, clusters, keys, emb, beta=0.9):
    cloud = PointCloud((np.asarray(keys, dtype=float) + 0.5) * CELL)
    new, _ = gm.insert_scan(cloud)
    assign_new_points(clusters, new, gm, beta, embeddings=np.asarray(emb))
    return [(int(p), int(gm.instance_id[p])) for p in new]


gm, clusters = GlobalMap(CELL), ClusterSet()

# two isolated seeds, and a blue point far away
print("seed:  ", add(gm, clusters, [[0, 0, 0], [4, 0, 0], [9, 9, 9]], [red, red, blue]))

# next to voxel (0,0,0) with a similar embedding: joins instance 1
close = 0.95 * red + np.sqrt(1 - 0.95 ** 2) * blue
print("join:  ", add(gm, clusters, [[1, 0, 0]], [close]))

# touches (1,0,0) but points the other way: new instance despite adjacency
print("reject:", add(gm, clusters, [[1, 1, 0]], [blue]))

# (2,0,0) and (3,0,0) arrive in one scan and close the gap between
# instances 1 and 2; everything collapses to the smaller ID
print("bridge:", add(gm, clusters, [[2, 0, 0], [3, 0, 0]], [red, red]))
print("final labels:", gm.instance_id[:len(gm)].tolist(), "merges:", clusters.merges)

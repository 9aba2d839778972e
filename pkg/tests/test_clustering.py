import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcpseg.clustering import (ClusterSet, assign_new_points, cosine_similarity,
                               estimate_normals, region_grow_baseline, voxel_adjacency)
from mcpseg.globalmap import GlobalMap
from mcpseg.pointcloud import PointCloud

from harness import feed, incremental_partition, offline_partition, random_scenario, unit
from oracles import offline_components, same_partition


def test_incremental_equals_offline_components():
    rng = np.random.default_rng(0)
    for _ in range(20):
        keys, emb, beta = random_scenario(rng)
        want = offline_partition(keys, emb, beta)
        for _ in range(3):
            got, _, _ = incremental_partition(keys, emb, beta, rng.permutation(len(keys)),
                                              int(rng.integers(1, 8)))
            assert (got > 0).all()
            assert same_partition(got.tolist(), want)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_order_robust_partition(seed):
    rng = np.random.default_rng(seed)
    keys, emb, beta = random_scenario(rng)
    a, _, _ = incremental_partition(keys, emb, beta, rng.permutation(len(keys)), 4)
    b, _, _ = incremental_partition(keys, emb, beta, rng.permutation(len(keys)), 2)
    assert same_partition(a.tolist(), b.tolist())


def test_scans_only_merge():
    rng = np.random.default_rng(1)
    keys, emb, beta = random_scenario(rng)
    gm, clusters = GlobalMap(), ClusterSet()
    seen = []
    for part in np.array_split(rng.permutation(len(keys)), 6):
        feed(gm, clusters, keys[part], emb[part], beta)
        now = gm.instance_id[:len(gm)].copy()
        for prev in seen:
            n = len(prev)
            # same label before -> same label after
            for lab in np.unique(prev):
                assert len(np.unique(now[:n][prev == lab])) == 1
        seen.append(now)


def test_union_find_invariants():
    rng = np.random.default_rng(2)
    keys, emb, beta = random_scenario(rng)
    labels, gm, clusters = incremental_partition(keys, emb, beta, np.arange(len(keys)), 3)
    part = clusters.partition()
    assert all(part[p] == gm.instance_id[p] for p in part)
    assert len(clusters) == len(np.unique(labels))
    for p in part:
        assert clusters.find(clusters.find(p)) == clusters.find(p)


def test_isolated_point_seeds_instance():
    gm, clusters = GlobalMap(), ClusterSet()
    feed(gm, clusters, [[0, 0, 0]], unit([[1] + [0] * 49]), 0.9)
    feed(gm, clusters, [[5, 5, 5]], unit([[1] + [0] * 49]), 0.9)
    assert gm.instance_id[:2].tolist() == [1, 2]


def test_single_neighbor_join_and_strict_threshold():
    a = np.zeros(50)
    a[0] = 1
    b = np.zeros(50)
    b[0], b[1] = 0.95, np.sqrt(1 - 0.95 ** 2)
    assert cosine_similarity(a, b) == pytest.approx(0.95)
    gm, clusters = GlobalMap(), ClusterSet()
    feed(gm, clusters, [[0, 0, 0]], [a], 0.9)
    feed(gm, clusters, [[1, 0, 0]], [b], 0.9)
    assert gm.instance_id[1] == gm.instance_id[0] == 1
    # cos exactly at beta does not connect
    gm, clusters = GlobalMap(), ClusterSet()
    feed(gm, clusters, [[0, 0, 0]], [a], 0.5)
    feed(gm, clusters, [[1, 0, 0]], [a], 1.0)
    assert gm.instance_id[:2].tolist() == [1, 2]


def test_bridge_keeps_smallest_id():
    e = unit(np.eye(50)[0])
    gm, clusters = GlobalMap(), ClusterSet()
    far = unit(np.eye(50)[1])
    # clusters 1 and 3 two cells apart, an unrelated cluster 2 in between in id order
    feed(gm, clusters, [[0, 0, 0], [10, 10, 10], [2, 0, 0]], [e, far, e], 0.9)
    assert gm.instance_id[:3].tolist() == [1, 2, 3]
    feed(gm, clusters, [[1, 0, 0]], [e], 0.9)
    assert gm.instance_id[:4].tolist() == [1, 2, 1, 1]
    assert clusters.merges == 1


def test_beta_extremes():
    rng = np.random.default_rng(3)
    keys = np.stack(np.meshgrid(range(4), range(4), range(2), indexing="ij"), -1).reshape(-1, 3)
    emb = unit(rng.normal(size=(len(keys), 50)))
    labels, _, _ = incremental_partition(keys, emb, 1.0, rng.permutation(len(keys)), 3)
    assert len(np.unique(labels)) == len(keys)
    labels, _, _ = incremental_partition(keys, emb, -1.0, rng.permutation(len(keys)), 3)
    assert len(np.unique(labels)) == 1


def test_missing_embedding_is_error():
    gm, clusters = GlobalMap(), ClusterSet()
    new, _ = gm.insert_scan(PointCloud([[0.05, 0.05, 0.05]]))
    with pytest.raises(RuntimeError):
        assign_new_points(clusters, new, gm)


def test_cosine_examples():
    e = np.eye(50)
    assert cosine_similarity(e[0], e[0]) == 1.0
    assert cosine_similarity(e[0], e[1]) == 0.0
    assert cosine_similarity(e[0], -e[0]) == -1.0
    assert cosine_similarity([3, 4], [6, 8]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        cosine_similarity(np.zeros(50), e[0])


# -- baseline ----------------------------------------------------------------

def plane(x0, x1, y0, y1, z, step=0.1):
    xs, ys = np.meshgrid(np.arange(x0, x1, step), np.arange(y0, y1, step), indexing="ij")
    return np.column_stack([xs.ravel(), ys.ravel(), np.full(xs.size, z)]) + 0.05


def test_baseline_single_plane():
    pts = plane(0, 1, 0, 1, 0)
    assert set(region_grow_baseline(pts, np.full((len(pts), 3), 0.4)).tolist()) == {0}


def test_baseline_parallel_planes():
    pts = np.vstack([plane(0, 1, 0, 1, 0), plane(0, 1, 0, 1, 1)])
    labels = region_grow_baseline(pts, np.full((len(pts), 3), 0.4))
    assert len(np.unique(labels)) == 2 and labels[0] == 0


def test_baseline_color_split_matches_brute_force():
    pts = plane(0, 2, 0, 1, 0)
    col = np.where((pts[:, 0] < 1)[:, None], 0.0, 1.0) * np.ones(3)
    labels = region_grow_baseline(pts, col, color_thresh=0.3)
    keys = np.floor(pts / 0.1).astype(int)
    edges = [(i, j) for i in range(len(pts)) for j in range(i + 1, len(pts))
             if np.abs(keys[i] - keys[j]).max() <= 1 and np.linalg.norm(col[i] - col[j]) <= 0.3]
    assert same_partition(labels.tolist(), offline_components(len(pts), edges))
    assert len(np.unique(labels)) == 2


def test_baseline_normal_angle_split():
    # floor meeting a wall along an edge
    floor = plane(0, 1, 0, 1, 0)
    wall = plane(0, 1, 0, 1, 0)[:, [0, 2, 1]] + [0, 1.0, 0.1]
    pts = np.vstack([floor, wall])
    normals = np.vstack([np.tile([0, 0, 1.0], (len(floor), 1)), np.tile([0, -1.0, 0], (len(wall), 1))])
    labels = region_grow_baseline(pts, np.full((len(pts), 3), 0.5), normals)
    assert len(np.unique(labels)) == 2
    # flipped normal sign is the same plane
    labels = region_grow_baseline(floor, np.full((len(floor), 3), 0.5),
                                  np.where(np.arange(len(floor))[:, None] % 2, 1, -1) * [0, 0, 1.0])
    assert len(np.unique(labels)) == 1


def test_estimated_normals():
    pts = plane(0, 1, 0, 1, 0.3)
    n = estimate_normals(pts)
    assert np.allclose(np.abs(n[:, 2]), 1)
    lone = estimate_normals([[0, 0, 0], [5, 5, 5]])
    assert lone.tolist() == [[0, 0, 1], [0, 0, 1]]


def test_voxel_adjacency_brute_force():
    rng = np.random.default_rng(4)
    pts = rng.uniform(0, 0.6, size=(150, 3))
    src, dst = voxel_adjacency(pts)
    keys = np.floor(pts / 0.1).astype(int)
    want = [(i, j) for i in range(150) for j in range(150)
            if i != j and np.abs(keys[i] - keys[j]).max() <= 1]
    assert list(zip(src.tolist(), dst.tolist())) == want

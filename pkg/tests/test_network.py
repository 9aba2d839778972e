import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcpseg.network import (AdamState, Batch, NetworkError, NetworkParams, TrainConfig, adam_step,
                            first_argmax, forward, init_params, load_checkpoint, loss_and_grad,
                            loss_classification, loss_triplet_semihard, mcp_forward,
                            read_checkpoint_header, save_checkpoint, semihard_triplets, softmax,
                            train)

from harness import gradient_checks, tiny_batch
from oracles import brute_force_triplet


def unit_rows(rng, n, d=50):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# -- losses ------------------------------------------------------------------

def test_ce_uniform_is_log13():
    assert abs(loss_classification(np.zeros((5, 13)), [0, 3, 12, 7, 7]) - math.log(13)) <= 1e-9


def test_ce_confident_limit():
    logits = np.eye(13)[[2, 5]] * 1000
    assert loss_classification(logits, [2, 5]) < 1e-12


def test_ce_hand_summed():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 13))
    gt = [1, 0, 12, 5]
    hand = sum(-logits[i, g] + math.log(sum(math.exp(v) for v in logits[i])) for i, g in enumerate(gt)) / 4
    assert loss_classification(logits, gt) == pytest.approx(hand, abs=1e-12)
    with pytest.raises(NetworkError):
        loss_classification(logits, [1, 2])


def test_triplet_identical_embeddings_gives_margin():
    e = np.tile(unit_rows(np.random.default_rng(1), 1), (6, 1))
    assert loss_triplet_semihard(e, [0, 0, 0, 1, 1, 1], 1.0) == pytest.approx(1.0, abs=1e-12)
    assert loss_triplet_semihard(e, [0, 0, 0, 1, 1, 1], 0.3) == pytest.approx(0.3, abs=1e-12)


def test_triplet_separated_is_zero():
    e = np.zeros((4, 50))
    e[:2, 0] = 1
    e[2:, 1] = 1
    assert loss_triplet_semihard(e, [0, 0, 1, 1]) == 0.0


def test_triplet_degenerate_batches():
    e = unit_rows(np.random.default_rng(2), 4)
    assert loss_triplet_semihard(e, [0, 1, 2, 3]) == 0.0
    assert loss_triplet_semihard(e, [5, 5, 5, 5]) == 0.0


def test_triplet_brute_force_6_points():
    rng = np.random.default_rng(3)
    for _ in range(200):
        e = unit_rows(rng, 6, int(rng.integers(2, 8)))
        y = rng.permutation([0, 0, 0, 1, 1, 1])
        assert abs(loss_triplet_semihard(e, y) - brute_force_triplet(e, y)) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 24), st.integers(1, 5))
def test_triplet_brute_force_general(seed, n, k):
    rng = np.random.default_rng(seed)
    # small integers: distance ties are common and both distance routes are exact
    e = rng.integers(-2, 3, size=(n, 3)).astype(float)
    y = rng.integers(0, k, n)
    assert abs(loss_triplet_semihard(e, y) - brute_force_triplet(e, y)) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_triplet_bounded_for_unit_embeddings(seed):
    rng = np.random.default_rng(seed)
    e = unit_rows(rng, 20, 4)
    y = rng.integers(0, 3, 20)
    assert 0.0 <= loss_triplet_semihard(e, y, 1.0) <= 1.0 + 4.0


def test_semihard_ties_pick_lowest_index():
    # anchor 0 with positive 1 at distance 1; negatives 2 and 3 tie at 4
    e = np.array([[0.0, 0], [1, 0], [2, 0], [-2, 0]])
    a, p, n, _, _ = semihard_triplets(e, [0, 0, 1, 2])
    assert dict(zip(zip(a, p), n))[(0, 1)] == 2
    # no negative farther than the positive: farthest, lowest index among equals
    e = np.array([[0.0, 0], [5, 0], [1, 0], [-1, 0]])
    a, p, n, _, _ = semihard_triplets(e, [0, 0, 1, 2])
    assert dict(zip(zip(a, p), n))[(0, 1)] == 2


def test_first_argmax_ties():
    x = np.array([[[1.0, 2.0], [3.0, 2.0], [3.0, 0.0]]])
    assert first_argmax(x, x.max(axis=1)).tolist() == [[1, 0]]
    rng = np.random.default_rng(0)
    x = rng.integers(0, 3, size=(7, 5, 4)).astype(float)
    assert (first_argmax(x, x.max(axis=1)) == np.argmax(x, axis=1)).all()


# -- forward -----------------------------------------------------------------

@pytest.mark.parametrize("use_mcp", [True, False])
def test_forward_contracts(use_mcp):
    rng = np.random.default_rng(4)
    params = init_params(use_mcp, rng)
    batch = tiny_batch(rng, use_mcp, n=16, m=4)
    fr = forward(batch, params)
    assert np.allclose(fr.probs.sum(axis=1), 1, atol=1e-9) and (fr.probs > 0).all()
    assert np.allclose(np.linalg.norm(fr.embeddings, axis=1), 1, atol=1e-9)
    perm = rng.permutation(16)
    fp = forward(Batch(batch.inputs[perm], None if batch.context is None else batch.context[perm]), params)
    assert np.allclose(fp.logits, fr.logits[perm], atol=1e-12)


def test_single_point_global_feature():
    rng = np.random.default_rng(5)
    params = init_params(False, rng)
    fr = forward(rng.normal(size=(1, 6)), params, keep_cache=True)
    assert np.allclose(fr.cache["u"][0, 50:], fr.cache["h"][0])


def test_mcp_order_and_duplicate_invariance():
    rng = np.random.default_rng(6)
    params = init_params(True, rng)
    ctx = rng.normal(size=(5, 4, 6))
    base = mcp_forward(ctx, params)
    assert np.array_equal(mcp_forward(ctx[:, rng.permutation(4)], params), base)
    assert np.array_equal(mcp_forward(np.concatenate([ctx, ctx[:, :2]], axis=1), params), base)


def test_forward_shape_errors():
    rng = np.random.default_rng(7)
    with pytest.raises(NetworkError):
        forward(rng.normal(size=(3, 5)), init_params(False, rng))
    with pytest.raises(NetworkError):
        forward(rng.normal(size=(3, 6)), init_params(True, rng))
    with pytest.raises(NetworkError):
        forward(rng.normal(size=(3, 6)), init_params(False, rng), use_mcp=True)
    with pytest.raises(NetworkError):
        mcp_forward(np.zeros((3, 0, 6)), init_params(True, rng))


def test_param_validation():
    params = init_params(True, 0)
    assert params.trunk_in == 206 and init_params(False, 0).trunk_in == 6
    bad = dict(params.tensors)
    bad["embed_W"] = np.zeros((3, 3))
    with pytest.raises(NetworkError):
        NetworkParams(True, bad)


# -- gradients ---------------------------------------------------------------

@pytest.mark.parametrize("use_mcp", [False, True])
def test_gradients_match_finite_differences(use_mcp):
    checks, _ = gradient_checks(use_mcp, wanted=2)
    assert len(checks) == 2
    for c in checks:
        assert c.forward_gap < 1e-10
        assert c.max_rel_err < 1e-3, c.per_tensor


def test_zero_network_classifier_bias_gradient():
    params = init_params(True, 0)
    for v in params.tensors.values():
        v[...] = 0
    rng = np.random.default_rng(8)
    batch = tiny_batch(rng, True)
    _, _, grads, fr = loss_and_grad(batch, params)
    assert np.allclose(fr.probs, 1 / 13)
    expect = (np.full((8, 13), 1 / 13) - np.eye(13)[batch.gt_class]).mean(axis=0)
    assert np.allclose(grads["class_b"], expect, atol=1e-15)


def test_lambda_zero_ignores_triplet():
    rng = np.random.default_rng(9)
    params = init_params(True, rng)
    batch = tiny_batch(rng, True)
    _, parts, g0, _ = loss_and_grad(batch, params, lam=0.0)
    _, _, g_ce, _ = loss_and_grad(Batch(batch.inputs, batch.context, batch.gt_class, None), params)
    assert parts["triplet"] == 0.0
    for k in g0:
        assert np.array_equal(g0[k], g_ce[k])


# -- optimizer ---------------------------------------------------------------

def test_adam_first_step():
    params = init_params(False, 0)
    before = params.copy()
    grads = {k: np.ones_like(v) for k, v in params.tensors.items()}
    adam_step(params, grads, AdamState(lr=0.001))
    for k in grads:
        assert np.allclose(params[k] - before[k], -0.001, atol=1e-10)


def test_adam_zero_gradient_and_elementwise():
    params = init_params(False, 1)
    before = params.copy()
    state = AdamState()
    for _ in range(5):
        adam_step(params, {k: np.zeros_like(v) for k, v in params.tensors.items()}, state)
    for k in params.names():
        assert np.array_equal(params[k], before[k])
    params["class_b"][:] = 0
    state = AdamState()
    rng = np.random.default_rng(2)
    for _ in range(4):
        g = {k: rng.normal(size=v.shape) for k, v in params.tensors.items()}
        g["class_b"][:] = g["class_b"][0]
        adam_step(params, g, state)
    assert np.all(params["class_b"] == params["class_b"][0])


def test_adam_shape_mismatch():
    params = init_params(False, 0)
    with pytest.raises(NetworkError):
        adam_step(params, {k: np.zeros(2) for k in params.names()}, AdamState())


# -- training ----------------------------------------------------------------

def two_class_batches(rng, use_mcp, n_batches=4, n=32):
    out = []
    for _ in range(n_batches):
        cls = rng.integers(0, 2, n)
        x = rng.normal(scale=0.3, size=(n, 6))
        x[:, 3] += np.where(cls == 1, 2.0, -2.0)
        ctx = x[:, None, :] + rng.normal(scale=0.1, size=(n, 3, 6)) if use_mcp else None
        out.append(Batch(x, ctx, cls, cls + 10 * rng.integers(0, 2, n)))
    return out


def test_train_reduces_ce_and_is_deterministic():
    rng = np.random.default_rng(10)
    batches = two_class_batches(rng, True)
    cfg = TrainConfig(epochs=6, lr=0.005, seed=3)
    a = train(batches, cfg)
    b = train(batches, cfg)
    assert a.history[-1]["ce"] < a.history[0]["ce"]
    assert a.history == b.history
    with pytest.raises(NetworkError):
        train([], cfg)


def test_train_resume_replays_same_run(tmp_path):
    rng = np.random.default_rng(11)
    batches = two_class_batches(rng, False)
    cfg = TrainConfig(epochs=4, seed=1, use_mcp=False, checkpoint_every=2)
    full = train(batches, cfg)
    half = train(batches, TrainConfig(epochs=2, seed=1, use_mcp=False), checkpoint_path=tmp_path / "c.ckpt")
    params, state, epoch = load_checkpoint(tmp_path / "c.ckpt")
    assert epoch == 2 and state.step == half.state.step == 2 * len(batches)
    rest = train(batches, cfg, params=params, state=state, start_epoch=epoch)
    assert [r["epoch"] for r in rest.history] == [3, 4]
    assert rest.history[-1]["step"] == full.history[-1]["step"]
    for k in full.params.names():
        assert np.array_equal(rest.params[k], full.params[k])


def test_checkpoint_roundtrip_and_bytes(tmp_path):
    rng = np.random.default_rng(12)
    batches = two_class_batches(rng, True, n_batches=2)
    res = train(batches, TrainConfig(epochs=1, seed=5))
    save_checkpoint(tmp_path / "a.ckpt", res.params, res.state, 1)
    save_checkpoint(tmp_path / "b.ckpt", res.params, res.state, 1)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    header = read_checkpoint_header(tmp_path / "a.ckpt")
    assert header["use_mcp"] == "1" and header["trunk_in"] == "206" and header["epoch"] == "1"
    params, state, epoch = load_checkpoint(tmp_path / "a.ckpt")
    for k in params.names():
        assert np.array_equal(params[k], res.params[k])
        assert np.array_equal(state.m[k], res.state.m[k])
    save_checkpoint(tmp_path / "p.ckpt", init_params(False, 0).astype(np.float32))
    header = read_checkpoint_header(tmp_path / "p.ckpt")
    assert header["trunk_in"] == "6" and header["dtype"] == "float32"
    (tmp_path / "junk").write_bytes(b"hello\n")
    with pytest.raises(NetworkError):
        load_checkpoint(tmp_path / "junk")


def test_train_config_file(tmp_path):
    (tmp_path / "c.txt").write_text("epochs = 3  # short\nlr=0.01\nuse_mcp=false\n\n", encoding="utf-8")
    cfg = TrainConfig.from_file(tmp_path / "c.txt")
    assert (cfg.epochs, cfg.lr, cfg.use_mcp, cfg.batch_n) == (3, 0.01, False, 256)
    assert TrainConfig.from_file(_write(tmp_path / "d.txt", cfg.to_text())) == cfg
    with pytest.raises(NetworkError, match=":1:"):
        TrainConfig.from_file(_write(tmp_path / "e.txt", "speed=9\n"))


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_softmax_stable():
    p = softmax(np.array([[1000.0, 0.0], [-1000.0, -1000.0]]))
    assert np.allclose(p, [[1, 0], [0.5, 0.5]])

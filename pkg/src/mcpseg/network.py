"""Point-wise segmentation network with multi-view context pooling, in numpy.

All "1D convolutions" are shared per-point affine maps (kernel size 1).
Layout::

    context (N, M, 6) -> relu(6->64) -> relu(64->200) -> max over M -> (N, 200)
    [input (N, 6) | mcp (N, 200)] -> relu(->200) = trunk features h
    h -> affine(200->50) -> L2 normalize = embedding e
    max over N of h = global feature g (broadcast)
    [e | g] (N, 250) -> affine(250->13) = logits

Gradients are exact (hand-written backprop), max-pool subgradients go to the
lowest winning index.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pointcloud import NUM_CLASSES

IN_DIM = 6
FEAT_DIM = 200
EMBED_DIM = 50
MCP_HIDDEN = 64

PARAM_ORDER = ("mcp1_W", "mcp1_b", "mcp2_W", "mcp2_b", "trunk_W", "trunk_b",
               "embed_W", "embed_b", "class_W", "class_b")


class NetworkError(ValueError):
    pass


def param_shapes(use_mcp: bool) -> dict[str, tuple]:
    trunk_in = IN_DIM + FEAT_DIM if use_mcp else IN_DIM
    shapes = {
        "trunk_W": (trunk_in, FEAT_DIM), "trunk_b": (FEAT_DIM,),
        "embed_W": (FEAT_DIM, EMBED_DIM), "embed_b": (EMBED_DIM,),
        "class_W": (EMBED_DIM + FEAT_DIM, NUM_CLASSES), "class_b": (NUM_CLASSES,),
    }
    if use_mcp:
        shapes.update({
            "mcp1_W": (IN_DIM, MCP_HIDDEN), "mcp1_b": (MCP_HIDDEN,),
            "mcp2_W": (MCP_HIDDEN, FEAT_DIM), "mcp2_b": (FEAT_DIM,),
        })
    return {k: shapes[k] for k in PARAM_ORDER if k in shapes}


@dataclass
class NetworkParams:
    use_mcp: bool
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.use_mcp)
        if set(self.tensors) != set(expected):
            raise NetworkError(f"parameter names {sorted(self.tensors)} != {sorted(expected)}")
        for k, shape in expected.items():
            if self.tensors[k].shape != shape:
                raise NetworkError(f"{k}: shape {self.tensors[k].shape} != {shape}")

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    @property
    def dtype(self):
        return self.tensors["trunk_W"].dtype

    @property
    def trunk_in(self) -> int:
        return self.tensors["trunk_W"].shape[0]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.use_mcp, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.use_mcp, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def init_params(use_mcp: bool, rng=None, dtype=np.float64) -> NetworkParams:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(rng)
    tensors = {}
    for name, shape in param_shapes(use_mcp).items():
        if name.endswith("_W"):
            tensors[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / shape[0])).astype(dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return NetworkParams(use_mcp, tensors)


@dataclass
class Batch:
    inputs: np.ndarray                 # (N, 6)
    context: np.ndarray | None         # (N, M, 6) or None without MCP
    gt_class: np.ndarray | None = None
    gt_instance: np.ndarray | None = None


@dataclass
class ForwardResult:
    embeddings: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


def _relu(x):
    return np.maximum(x, 0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def mcp_forward(context, params: NetworkParams, cache: dict | None = None):
    """Pool M context points per row into a 200-d feature."""
    c = np.asarray(context, dtype=params.dtype)
    if c.ndim != 3 or c.shape[2] != IN_DIM or c.shape[1] < 1:
        raise NetworkError(f"context must be (N, M>=1, 6), got {c.shape}")
    n, m, _ = c.shape
    flat = c.reshape(n * m, IN_DIM)
    # in-place bias and ReLU: these (N*M, C) buffers dominate the step time
    h1 = flat @ params["mcp1_W"]
    h1 += params["mcp1_b"]
    np.maximum(h1, 0, out=h1)
    h2 = h1 @ params["mcp2_W"]
    h2 += params["mcp2_b"]
    np.maximum(h2, 0, out=h2)
    h2 = h2.reshape(n, m, FEAT_DIM)
    out = h2.max(axis=1)
    if cache is not None:
        cache.update(ctx_flat=flat, h1=h1, h2=h2, mcp_out=out, mcp_shape=(n, m))
    return out


def first_argmax(x, x_max):
    """Index of the first maximum along axis 1 of an (N, M, C) array.

    ``x_max`` is ``x.max(axis=1)``. A reverse scan over M is several times
    faster than ``np.argmax`` on the middle axis and keeps the first index
    on ties.
    """
    idx = np.zeros(x_max.shape, dtype=np.int64)
    for j in range(x.shape[1] - 1, 0, -1):
        np.putmask(idx, x[:, j] == x_max, j)
    np.putmask(idx, x[:, 0] == x_max, 0)
    return idx


def forward(batch: Batch | np.ndarray, params: NetworkParams, context=None,
            use_mcp: bool | None = None, keep_cache: bool = False) -> ForwardResult:
    if isinstance(batch, Batch):
        inputs, context = batch.inputs, batch.context
    else:
        inputs = batch
    use_mcp = params.use_mcp if use_mcp is None else use_mcp
    if use_mcp and not params.use_mcp:
        raise NetworkError("parameters have no MCP sub-network")
    x = np.asarray(inputs, dtype=params.dtype)
    if x.ndim != 2 or x.shape[1] != IN_DIM or len(x) == 0:
        raise NetworkError(f"inputs must be (N>=1, 6), got {x.shape}")
    cache = {} if keep_cache else None
    if use_mcp:
        if context is None or len(context) != len(x):
            raise NetworkError("context tensor missing or of wrong length")
        pooled = mcp_forward(context, params, cache)
        trunk_in = np.concatenate([x, pooled], axis=1)
    else:
        trunk_in = x
    if trunk_in.shape[1] != params.trunk_in:
        raise NetworkError(f"trunk expects {params.trunk_in} inputs, got {trunk_in.shape[1]}")
    at = trunk_in @ params["trunk_W"] + params["trunk_b"]
    h = _relu(at)
    z = h @ params["embed_W"] + params["embed_b"]
    norm = np.sqrt(np.einsum("ij,ij->i", z, z))[:, None]
    norm_safe = np.maximum(norm, 1e-12)
    e = z / norm_safe
    gwin = np.argmax(h, axis=0)
    g = h[gwin, np.arange(FEAT_DIM)]
    u = np.concatenate([e, np.broadcast_to(g, (len(x), FEAT_DIM))], axis=1)
    logits = u @ params["class_W"] + params["class_b"]
    probs = softmax(logits)
    if keep_cache:
        cache.update(trunk_in=trunk_in, at=at, h=h, norm=norm_safe, e=e,
                     gwin=gwin, u=u, use_mcp=use_mcp)
    return ForwardResult(e, logits, probs, cache or {})


def loss_classification(logits, gt_class) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    gt = np.asarray(gt_class, dtype=np.int64)
    if len(logits) != len(gt):
        raise NetworkError("logits and labels differ in length")
    ls = log_softmax(logits)
    return float(-ls[np.arange(len(gt)), gt].mean())


def pairwise_sq_dist(e):
    sq = np.einsum("ij,ij->i", e, e)
    d = sq[:, None] + sq[None, :] - 2.0 * (e @ e.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def semihard_triplets(embeddings, labels):
    """Select the semihard negative for every ordered anchor-positive pair.

    Returns ``(anchor, positive, negative, d_ap, d_an)`` arrays. For each
    pair the negative is the closest one strictly farther than the positive;
    when no such negative exists the farthest negative is used. Ties go to
    the lowest index.
    """
    e = np.asarray(embeddings)
    y = np.asarray(labels)
    n = len(y)
    empty = np.zeros(0, dtype=np.int64)
    same = y[:, None] == y[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    if not pos_mask.any() or not neg_mask.any():
        return empty, empty, empty, np.zeros(0), np.zeros(0)
    d = pairwise_sq_dist(e)
    a_idx, p_idx = np.nonzero(pos_mask)
    n_neg = neg_mask.sum(axis=1)
    keep = n_neg[a_idx] > 0
    a_idx, p_idx = a_idx[keep], p_idx[keep]
    # negatives of each anchor by ascending distance (stable), padded with inf
    dn = np.where(neg_mask, d, np.inf)
    order = np.argsort(dn, axis=1, kind="stable")
    dn_sorted = np.take_along_axis(dn, order, axis=1)
    d_ap = d[a_idx, p_idx]
    # rank of the first negative strictly farther than the positive
    k = np.zeros(len(a_idx), dtype=np.int64)
    for lo in range(0, len(a_idx), 4096):
        sl = slice(lo, lo + 4096)
        k[sl] = np.count_nonzero(dn_sorted[a_idx[sl]] <= d_ap[sl, None], axis=1)
    # fallback: the farthest negative, lowest index among equals
    rows = np.arange(n)
    far = dn_sorted[rows, np.maximum(n_neg - 1, 0)]
    first_far = np.count_nonzero(dn_sorted < far[:, None], axis=1)
    k = np.where(k >= n_neg[a_idx], first_far[a_idx], k)
    neg = order[a_idx, k]
    return a_idx, p_idx, neg, d_ap, d[a_idx, neg]


def loss_triplet_semihard(embeddings, gt_instance, margin: float = 1.0, return_grad: bool = False):
    """Mean semihard triplet loss over all ordered anchor-positive pairs."""
    e = np.asarray(embeddings)
    a, p, ng, d_ap, d_an = semihard_triplets(e, gt_instance)
    if len(a) == 0:
        return (0.0, np.zeros_like(e)) if return_grad else 0.0
    per_pair = np.maximum(d_ap - d_an + margin, 0.0)
    loss = float(per_pair.mean())
    if not return_grad:
        return loss
    active = per_pair > 0
    w = np.zeros((len(e), len(e)), dtype=e.dtype)
    inv = 1.0 / len(a)
    np.add.at(w, (a[active], p[active]), inv)
    np.add.at(w, (a[active], ng[active]), -inv)
    s = w + w.T
    grad = 2.0 * (s.sum(axis=1)[:, None] * e - s @ e)
    return loss, grad


def loss_and_grad(batch: Batch, params: NetworkParams, margin: float = 1.0, lam: float = 1.0):
    """Joint loss ``CE + lam * triplet`` and its exact gradient.

    Returns ``(total, {"ce": .., "triplet": ..}, grads, forward_result)``.
    """
    fr = forward(batch, params, keep_cache=True)
    c = fr.cache
    gt = np.asarray(batch.gt_class, dtype=np.int64)
    ce = loss_classification(fr.logits, gt)
    if lam != 0.0 and batch.gt_instance is not None:
        trip, de_trip = loss_triplet_semihard(fr.embeddings, batch.gt_instance, margin, return_grad=True)
    else:
        trip, de_trip = 0.0, None
    grads = backward(params, c, fr.probs, gt, de_trip, lam)
    return ce + lam * trip, {"ce": ce, "triplet": trip}, grads, fr


def backward(params: NetworkParams, cache: dict, probs, gt_class, de_triplet=None, lam: float = 1.0):
    """Gradients of ``CE + lam * triplet`` given a cached forward pass.

    ``de_triplet`` is d(triplet)/d(embeddings) as returned by
    :func:`loss_triplet_semihard`.
    """
    dt = params.dtype
    n = len(probs)
    gt = np.asarray(gt_class, dtype=np.int64)
    grads = {}

    dlogits = probs.copy()
    dlogits[np.arange(n), gt] -= 1.0
    dlogits /= n
    grads["class_W"] = cache["u"].T @ dlogits
    grads["class_b"] = dlogits.sum(axis=0)
    du = dlogits @ params["class_W"].T
    de = du[:, :EMBED_DIM]
    if de_triplet is not None and lam != 0.0:
        de = de + lam * de_triplet
    dg = du[:, EMBED_DIM:].sum(axis=0)

    e, norm = cache["e"], cache["norm"]
    dz = (de - e * np.einsum("ij,ij->i", e, de)[:, None]) / norm
    h = cache["h"]
    grads["embed_W"] = h.T @ dz
    grads["embed_b"] = dz.sum(axis=0)
    dh = dz @ params["embed_W"].T
    dh[cache["gwin"], np.arange(FEAT_DIM)] += dg

    dat = dh * (cache["at"] > 0)
    grads["trunk_W"] = cache["trunk_in"].T @ dat
    grads["trunk_b"] = dat.sum(axis=0)

    if cache.get("use_mcp"):
        dmcp = dat @ params["trunk_W"][IN_DIM:].T
        nn, m = cache["mcp_shape"]
        out = cache["mcp_out"]
        win = first_argmax(cache["h2"], out)
        # only the winning context point of each channel receives gradient,
        # and none does when the channel's max sits at the ReLU floor
        dmcp = dmcp * (out > 0)
        da2 = np.zeros((nn, m, FEAT_DIM), dtype=dt)
        np.put_along_axis(da2, win[:, None, :], dmcp[:, None, :].astype(dt, copy=False), axis=1)
        da2 = da2.reshape(nn * m, FEAT_DIM)
        grads["mcp2_W"] = cache["h1"].T @ da2
        grads["mcp2_b"] = dmcp.sum(axis=0)
        da1 = da2 @ params["mcp2_W"].T
        np.multiply(da1, cache["h1"] > 0, out=da1)
        grads["mcp1_W"] = cache["ctx_flat"].T @ da1
        grads["mcp1_b"] = da1.sum(axis=0)
    return {k: grads[k].astype(dt, copy=False) for k in params.names()}


# -- optimizer -------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: NetworkParams, grads: dict, state: AdamState) -> NetworkParams:
    """Bias-corrected ADAM update, applied in place; returns ``params``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in params.names():
        g = grads[name]
        p = params.tensors[name]
        if g.shape != p.shape:
            raise NetworkError(f"{name}: gradient shape {g.shape} != {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# -- training --------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 0.001
    batch_n: int = 256
    context_m: int = 50
    margin: float = 1.0
    lam: float = 1.0
    seed: int = 0
    use_mcp: bool = True
    checkpoint_every: int = 10

    _casts = {"epochs": int, "lr": float, "batch_n": int, "context_m": int,
              "margin": float, "lam": float, "seed": int, "checkpoint_every": int}

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        values = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            if "=" not in s:
                raise NetworkError(f"{path}:{lineno}: expected key=value")
            key, value = (t.strip() for t in s.split("=", 1))
            if key == "use_mcp":
                values[key] = value.lower() in ("1", "true", "yes", "on")
            elif key in cls._casts:
                values[key] = cls._casts[key](value)
            else:
                raise NetworkError(f"{path}:{lineno}: unknown key {key!r}")
        return cls(**values)

    def to_text(self) -> str:
        keys = ("epochs", "lr", "batch_n", "context_m", "margin", "lam", "seed",
                "use_mcp", "checkpoint_every")
        return "".join(f"{k}={int(getattr(self, k)) if k == 'use_mcp' else getattr(self, k)}\n"
                       for k in keys)


@dataclass
class TrainResult:
    params: NetworkParams
    state: AdamState
    history: list  # one dict per epoch
    epoch: int


def train(batches: list[Batch], config: TrainConfig | None = None, params: NetworkParams | None = None,
          state: AdamState | None = None, start_epoch: int = 0, checkpoint_path=None,
          dtype=np.float64, log=None) -> TrainResult:
    """Jointly optimize classification and embedding losses with ADAM.

    Batch order is reshuffled each epoch from a stream seeded by
    ``(seed, epoch)`` so a resumed run replays the same order.
    """
    config = config or TrainConfig()
    if not batches:
        raise NetworkError("empty training dataset")
    if params is None:
        params = init_params(config.use_mcp, np.random.default_rng([config.seed, 1 << 20]), dtype)
    if params.use_mcp != config.use_mcp:
        raise NetworkError("parameters and config disagree on use_mcp")
    state = state or AdamState(lr=config.lr)
    history = []
    epoch = start_epoch
    for epoch in range(start_epoch + 1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(batches))
        ce_sum = trip_sum = 0.0
        correct = total = 0
        for b in order:
            batch = batches[b]
            loss, parts, grads, fr = loss_and_grad(batch, params, config.margin, config.lam)
            adam_step(params, grads, state)
            ce_sum += parts["ce"]
            trip_sum += parts["triplet"]
            correct += int((fr.logits.argmax(axis=1) == batch.gt_class).sum())
            total += len(batch.gt_class)
        row = {"epoch": epoch, "step": state.step,
               "ce": ce_sum / len(batches), "triplet": trip_sum / len(batches),
               "accuracy": correct / total}
        row["loss"] = row["ce"] + config.lam * row["triplet"]
        history.append(row)
        if log is not None:
            log(row)
        if checkpoint_path is not None and config.checkpoint_every > 0 and (
                epoch % config.checkpoint_every == 0 or epoch == config.epochs):
            save_checkpoint(checkpoint_path, params, state, epoch)
    return TrainResult(params, state, history, epoch)


def predict(batch: Batch, params: NetworkParams):
    fr = forward(batch, params)
    return fr.logits.argmax(axis=1), fr.embeddings


# -- checkpoints -----------------------------------------------------------
#
# Layout: ASCII header lines terminated by "end\n", then the raw little-endian
# tensor bytes in header order. Header lines:
#   MCPNET-CHECKPOINT 1
#   use_mcp <0|1>
#   trunk_in <int>
#   dtype <float32|float64>
#   epoch <int>
#   adam_step <int>
#   adam <lr> <beta1> <beta2> <eps>
#   tensor <name> <dim0> [<dim1>]      # parameters, then adam_m.*, adam_v.*

MAGIC = "MCPNET-CHECKPOINT 1"


def save_checkpoint(path, params: NetworkParams, state: AdamState | None = None, epoch: int = 0):
    state = state or AdamState()
    dt = np.dtype(params.dtype).newbyteorder("<")
    entries = [(k, params.tensors[k]) for k in params.names()]
    if state.m:
        entries += [(f"adam_m.{k}", state.m[k]) for k in params.names()]
        entries += [(f"adam_v.{k}", state.v[k]) for k in params.names()]
    head = [MAGIC, f"use_mcp {int(params.use_mcp)}", f"trunk_in {params.trunk_in}",
            f"dtype {np.dtype(params.dtype).name}", f"epoch {epoch}",
            f"adam_step {state.step}",
            f"adam {state.lr!r} {state.beta1!r} {state.beta2!r} {state.eps!r}"]
    for name, arr in entries:
        head.append("tensor " + name + " " + " ".join(str(s) for s in arr.shape))
    head.append("end")
    buf = io.BytesIO()
    buf.write(("\n".join(head) + "\n").encode("ascii"))
    for _, arr in entries:
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint_header(path) -> dict:
    header = {}
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii").strip()
        if first != MAGIC:
            raise NetworkError(f"{path}: not a checkpoint")
        for raw in fh:
            line = raw.decode("ascii").strip()
            if line == "end":
                break
            key, _, rest = line.partition(" ")
            if key == "tensor":
                header.setdefault("tensors", []).append(rest)
            else:
                header[key] = rest
    return header


def load_checkpoint(path) -> tuple[NetworkParams, AdamState, int]:
    data = Path(path).read_bytes()
    end = data.find(b"\nend\n")
    if not data.startswith(MAGIC.encode()) or end < 0:
        raise NetworkError(f"{path}: not a checkpoint")
    header = read_checkpoint_header(path)
    dt = np.dtype(header["dtype"]).newbyteorder("<")
    offset = end + len(b"\nend\n")
    tensors, moments_m, moments_v = {}, {}, {}
    for spec in header.get("tensors", []):
        parts = spec.split()
        name, shape = parts[0], tuple(int(s) for s in parts[1:])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dt.itemsize
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(shape)
        arr = arr.astype(dt.newbyteorder("="))
        offset += nbytes
        if name.startswith("adam_m."):
            moments_m[name[7:]] = arr
        elif name.startswith("adam_v."):
            moments_v[name[7:]] = arr
        else:
            tensors[name] = arr
    params = NetworkParams(bool(int(header["use_mcp"])), tensors)
    lr, b1, b2, eps = (float(v) for v in header["adam"].split())
    state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=int(header["adam_step"]),
                      m=moments_m, v=moments_v)
    return params, state, int(header["epoch"])

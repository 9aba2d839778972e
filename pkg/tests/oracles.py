"""Independent reference implementations used by the tests.

Nothing here imports the code under test beyond plain data containers, so
each routine is a second, separately written route to the same answer.
"""

from __future__ import annotations

import numpy as np

# -- network: batched single-scalar perturbations ---------------------------

def _affine(x, tensors, wname, bname, perts, K):
    """x @ W + b for stacked parameter copies, each with at most one perturbed scalar.

    ``x`` has leading dimension 1 while no earlier layer was perturbed; it is
    expanded to K copies at the first perturbed layer. ``perts`` maps a tensor
    name to (copy, flat index, delta) arrays. A weight perturbation
    W[i, j] += d shifts output column j by d * x[:, i].
    """
    W, b = tensors[wname], tensors[bname]
    y = x @ W + b
    if wname not in perts and bname not in perts:
        return y
    if y.shape[0] == 1:
        x = np.broadcast_to(x, (K,) + x.shape[1:])
        y = np.repeat(y, K, axis=0)
    if wname in perts:
        k, flat, d = perts[wname]
        i, j = np.unravel_index(flat, W.shape)
        y[k, :, j] += d[:, None] * x[k, :, i]
    if bname in perts:
        k, flat, d = perts[bname]
        y[k, :, flat] += d[:, None]
    return y


def _first_max(x, axis):
    """argmax along a short axis as a loop; np.argmax is slow off the last axis."""
    x = np.moveaxis(x, axis, 0)
    top = x.max(axis=0)
    idx = np.zeros(top.shape, dtype=np.int64)
    for j in range(len(x) - 1, -1, -1):
        idx[x[j] == top] = j
    return idx


def batched_loss(tensors, inputs, context, gt_class, gt_instance, pert_list, margin=1.0, lam=1.0):
    """Joint loss of K parameter copies plus a signature of every discrete choice.

    ``pert_list`` is a list of (tensor name, flat index, delta). The signature
    is a list of arrays (leading axis: copy, or 1 when shared) holding ReLU
    signs, max-pool winners, semihard negatives and active hinges, so copies
    on the same smooth piece of the loss compare equal.
    """
    K = len(pert_list)
    perts = {}
    for name in {p[0] for p in pert_list}:
        ks = np.array([k for k, p in enumerate(pert_list) if p[0] == name])
        perts[name] = (ks, np.array([pert_list[k][1] for k in ks]),
                       np.array([pert_list[k][2] for k in ks], dtype=np.float64))
    n = len(inputs)
    sig = []
    x = inputs[None]
    if context is not None:
        m = context.shape[1]
        a1 = _affine(context.reshape(1, n * m, 6), tensors, "mcp1_W", "mcp1_b", perts, K)
        a2 = _affine(np.maximum(a1, 0), tensors, "mcp2_W", "mcp2_b", perts, K)
        h2 = np.maximum(a2, 0).reshape(len(a2), n, m, -1)
        pooled = h2.max(axis=2)
        sig += [a1 > 0, a2 > 0, _first_max(h2, 2)]
        x = np.concatenate([np.broadcast_to(x, (len(pooled),) + x.shape[1:]), pooled], axis=2)
    at = _affine(x, tensors, "trunk_W", "trunk_b", perts, K)
    h = np.maximum(at, 0)
    z = _affine(h, tensors, "embed_W", "embed_b", perts, K)
    e = z / np.linalg.norm(z, axis=2, keepdims=True)
    g = h.max(axis=1)
    sig += [at > 0, _first_max(h, 1)]
    rows = max(len(e), len(g))
    u = np.concatenate([np.broadcast_to(e, (rows,) + e.shape[1:]),
                        np.broadcast_to(g[:, None, :], (rows, n, g.shape[1]))], axis=2)
    logits = _affine(u, tensors, "class_W", "class_b", perts, K)
    mx = logits.max(axis=2, keepdims=True)
    lse = mx[..., 0] + np.log(np.exp(logits - mx).sum(axis=2))
    ce = (lse - logits[:, np.arange(n), gt_class]).mean(axis=1)

    # semihard triplets with explicit loops over the (fixed) pair structure
    diff = e[:, :, None, :] - e[:, None, :, :]
    d = (diff ** 2).sum(axis=3)
    y = np.asarray(gt_instance)
    terms = []
    for a in range(n):
        negs = np.nonzero(y != y[a])[0]
        if len(negs) == 0:
            continue
        for p in range(n):
            if p == a or y[p] != y[a]:
                continue
            dap = d[:, a, p]
            dn = d[:, a][:, negs]
            farther = dn > dap[:, None]
            masked = np.where(farther, dn, np.inf)
            pick_semi = masked.argmin(axis=1)                  # lowest index on ties
            pick_far = (dn == dn.max(axis=1, keepdims=True)).argmax(axis=1)
            pick = np.where(farther.any(axis=1), pick_semi, pick_far)
            t = dap - dn[np.arange(len(dn)), pick] + margin
            terms.append(np.maximum(t, 0.0))
            sig += [negs[pick], t > 0]
    trip = np.mean(terms, axis=0) if terms else 0.0
    return np.broadcast_to(ce + lam * trip, (K,)), sig


def _same_piece(sig, base_sig):
    return all(np.array_equal(np.broadcast_to(s, (len(s),) + b.shape[1:]),
                              np.broadcast_to(b, (len(s),) + b.shape[1:]))
               for s, b in zip(sig, base_sig))


def finite_difference_grads(tensors, batch, h=1e-4, chunk=1024, margin=1.0, lam=1.0):
    """Central differences for every scalar of every tensor.

    Returns ``(grads, base_loss, kinked)``. ``kinked`` is True when some
    perturbation crosses a non-differentiable point (the signature changes);
    the central difference is then no derivative estimate and the remaining
    work is skipped.
    """
    args = (batch.inputs, batch.context, np.asarray(batch.gt_class), np.asarray(batch.gt_instance))
    base, base_sig = batched_loss(tensors, *args, [("trunk_b", 0, 0.0)], margin, lam)
    fd = {name: np.zeros(tensors[name].shape) for name in tensors}
    for name in tensors:
        size = tensors[name].size
        for lo in range(0, size, chunk // 2):
            idx = range(lo, min(lo + chunk // 2, size))
            plist = [(name, i, h) for i in idx] + [(name, i, -h) for i in idx]
            loss, sig = batched_loss(tensors, *args, plist, margin, lam)
            if not _same_piece(sig, base_sig):
                return fd, float(base[0]), True
            half = len(idx)
            fd[name].flat[lo:lo + half] = (loss[:half] - loss[half:]) / (2 * h)
    return fd, float(base[0]), False


# -- triplet loss: enumerate every triplet ----------------------------------

def brute_force_triplet(embeddings, labels, margin=1.0):
    e = np.asarray(embeddings, dtype=np.float64)
    y = list(labels)
    n = len(y)
    total, count = 0.0, 0
    for a in range(n):
        for p in range(n):
            if a == p or y[a] != y[p]:
                continue
            negs = [q for q in range(n) if y[q] != y[a]]
            if not negs:
                continue
            dap = float(((e[a] - e[p]) ** 2).sum())
            dns = {q: float(((e[a] - e[q]) ** 2).sum()) for q in negs}
            farther = [q for q in negs if dns[q] > dap]
            q = min(farther, key=lambda q: dns[q]) if farther else max(negs, key=lambda q: dns[q])
            total += max(dap - dns[q] + margin, 0.0)
            count += 1
    return total / count if count else 0.0


# -- clustering agreement from the textbook definitions ---------------------

def _counts(labels):
    out = {}
    for v in labels:
        out[v] = out.get(v, 0) + 1
    return out


def _log_factorial(k):
    return float(np.sum(np.log(np.arange(1, k + 1)))) if k > 1 else 0.0


def reference_scores(u, v):
    """(NMI_sqrt, AMI_max, ARI) written directly from the formulas with loops."""
    n = len(u)
    a, b = _counts(u), _counts(v)
    joint = _counts(list(zip(u, v)))
    hu = -sum(c / n * np.log(c / n) for c in a.values())
    hv = -sum(c / n * np.log(c / n) for c in b.values())
    mi = sum(c / n * np.log(n * c / (a[i] * b[j])) for (i, j), c in joint.items())

    emi = 0.0
    for ai in a.values():
        for bj in b.values():
            for nij in range(max(1, ai + bj - n), min(ai, bj) + 1):
                logp = (_log_factorial(ai) + _log_factorial(bj) + _log_factorial(n - ai)
                        + _log_factorial(n - bj) - _log_factorial(n) - _log_factorial(nij)
                        - _log_factorial(ai - nij) - _log_factorial(bj - nij)
                        - _log_factorial(n - ai - bj + nij))
                emi += nij / n * np.log(n * nij / (ai * bj)) * np.exp(logp)

    same_partition = len(joint) == len(a) == len(b)
    if same_partition:
        nmi_v = ami_v = 1.0
    else:
        nmi_v = 0.0 if hu == 0 or hv == 0 else mi / np.sqrt(hu * hv)
        den = max(hu, hv) - emi
        ami_v = 0.0 if abs(den) < 1e-15 else (mi - emi) / den

    def c2(k):
        return k * (k - 1) / 2
    index = sum(c2(c) for c in joint.values())
    sa, sb = sum(c2(c) for c in a.values()), sum(c2(c) for c in b.values())
    expected = sa * sb / c2(n)
    den = 0.5 * (sa + sb) - expected
    ari_v = (1.0 if same_partition else 0.0) if den == 0 else (index - expected) / den
    return nmi_v, ami_v, ari_v


def same_partition(x, y) -> bool:
    """Equality up to relabeling, via a bijection between label values."""
    if len(x) != len(y):
        return False
    fwd, back = {}, {}
    for p, q in zip(x, y):
        if fwd.setdefault(p, q) != q or back.setdefault(q, p) != p:
            return False
    return True


def offline_components(n, edges):
    """Connected components by depth-first search; returns a label per node."""
    adj = [[] for _ in range(n)]
    for s, t in edges:
        adj[s].append(t)
        adj[t].append(s)
    label = [-1] * n
    for start in range(n):
        if label[start] >= 0:
            continue
        stack = [start]
        label[start] = start
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if label[w] < 0:
                    label[w] = start
                    stack.append(w)
    return label


# -- ray marching -----------------------------------------------------------

def march_first_voxel(origin, direction, occupied_keys, cell, max_range, step=1e-3):
    """First occupied voxel met by sampling the ray every ``step`` metres."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    ts = np.arange(0.0, max_range + step, step)
    keys = np.floor((o + ts[:, None] * d) / cell).astype(np.int64)
    for t, k in zip(ts, map(tuple, keys)):
        if k in occupied_keys:
            return k, t
    return None, None


def slab_chord(origin, direction, key, cell):
    """Length of the ray's chord through voxel ``key`` (0 when it misses)."""
    lo = np.asarray(key, dtype=np.float64) * cell
    hi = lo + cell
    t0, t1 = 0.0, np.inf
    for ax in range(3):
        if direction[ax] == 0:
            if not lo[ax] <= origin[ax] < hi[ax]:
                return 0.0
            continue
        a = (lo[ax] - origin[ax]) / direction[ax]
        b = (hi[ax] - origin[ax]) / direction[ax]
        t0, t1 = max(t0, min(a, b)), min(t1, max(a, b))
    return max(t1 - t0, 0.0)

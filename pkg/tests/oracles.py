"""Independent reference computations used by the tests. No tape, plain loops where cheap."""

import math
import struct

import numpy as np

from agmh.tensor import Tape, Tensor


def np_softmax(v):
    e = [math.exp(x - max(v)) for x in v]
    s = sum(e)
    return [x / s for x in e]


def dense_descriptor(T, p):
    C, H, W = T.shape
    out = np.zeros((p.transform2_w.shape[0], H, W))
    w1, b1 = p.transform1_w.data, p.transform1_b.data
    w2, b2 = p.transform2_w.data, p.transform2_b.data
    for h in range(H):
        for w in range(W):
            hid = np.maximum(w1 @ T[:, h, w] + b1, 0.0)
            out[:, h, w] = w2 @ hid + b2
    return out


def dense_siea(F, p):
    """Position-major re-derivation: query rows, recurrent key fusion, double normalisation."""
    C, H, W = F.shape
    N = H * W
    wq, bq = p.query_w.data, p.query_b.data
    Q = np.array([wq @ F[:, n // W, n % W] + bq for n in range(N)])  # N x C'
    P = Q @ p.mem_keys[0].data.T
    for j in range(1, len(p.mem_keys)):
        G = Q @ p.mem_keys[j].data.T
        P = np.hstack([P, G]) @ p.interact[j - 1].data.T
    S = P.shape[1]
    soft = np.zeros_like(P)
    for s in range(S):
        soft[:, s] = np_softmax(list(P[:, s]))
    norm = soft / soft.sum(axis=1, keepdims=True)
    out = norm @ p.mem_value.data  # N x C'
    Fh = np.zeros_like(F)
    for n in range(N):
        Fh[:, n // W, n % W] = out[n]
    return Fh, soft, norm


def dense_fuse(F, Fh, p):
    out = np.zeros_like(F)
    C, H, W = F.shape
    for h in range(H):
        for w in range(W):
            out[:, h, w] = np.maximum(F[:, h, w] + p.align_w.data @ Fh[:, h, w] + p.align_b.data, 0.0)
    return out


def loop_adl(maps, denominator="paper"):
    """Scalar-loop dispersion loss over a list of C x H x W attentive maps."""
    dists = []
    for m in maps:
        C, H, W = m.shape
        agg = [max(m[c, h, w] for c in range(C)) for h in range(H) for w in range(W)]
        dists.append(np_softmax(agg))
    k = len(dists)
    total = 0.0
    for i in range(k):
        for j in range(i + 1, k):
            total += sum(a * b for a, b in zip(dists[i], dists[j]))
    denom = k * (k + 1) / 2 if denominator == "paper" else k * (k - 1) / 2
    return total / denom


def loop_hash_loss(u, Z, S_row, bits, alpha):
    total = 0.0
    for z, s in zip(Z, S_row):
        ip = sum(a * b for a, b in zip(u, z))
        total += (ip - bits * s) ** 2
    q = 0.0
    for a in u:
        b = 1.0 if a >= 0 else -1.0
        q += (a - b) ** 2
    return total + alpha * q


def dense_item_loss(T, head, W, Z, S_row, bits, alpha, beta, siea=True, adl=True,
                    denominator="paper"):
    Fs = [dense_descriptor(T, p) for p in head.descriptors]
    x = np.concatenate([F.mean(axis=(1, 2)) for F in Fs])
    u = np.tanh(W @ x)
    loss = loop_hash_loss(u, Z, S_row, bits, alpha)
    if adl and beta:
        att = []
        for F, p in zip(Fs, head.descriptors):
            att.append(dense_fuse(F, dense_siea(F, p)[0], p) if siea else np.maximum(F, 0.0))
        loss += beta * loop_adl(att, denominator)
    return loss


def brute_force_ap(query, qlabel, db_codes, db_labels):
    """AP from the definition: sort by (distance, index), walk the full list."""
    dist = [sum(1 for a, b in zip(query, c) if a != b) for c in db_codes]
    order = sorted(range(len(db_codes)), key=lambda i: (dist[i], i))
    hits, acc = 0, 0.0
    for pos, i in enumerate(order, start=1):
        if db_labels[i] == qlabel:
            hits += 1
            acc += hits / pos
    return acc / hits


def bit_loop_hamming(a, b):
    return sum(1 for x, y in zip(a, b) if x != y)


def write_features_independently(path, features, labels, ids, split_codes):
    """Feature-file writer built directly from the layout description."""
    n, c, h, w = features.shape
    parts = [b"AGMHFEAT", (1).to_bytes(4, "little"), n.to_bytes(8, "little"),
             c.to_bytes(4, "little"), h.to_bytes(4, "little"), w.to_bytes(4, "little")]
    for i in range(n):
        parts.append(int(ids[i]).to_bytes(8, "little"))
        parts.append(int(labels[i]).to_bytes(4, "little"))
        parts.append(bytes([split_codes[i]]))
        for v in features[i].reshape(-1):
            parts.append(struct.pack("<d", float(v)))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def kink_margin(f, point):
    """Smallest distance to a non-differentiable point seen while evaluating ``f``."""
    with Tape() as tape:
        f(*[Tensor(p.data, requires_grad=True) for p in point])
    return tape.kink_margin


def smooth_points(make_point, f, count, rng, margin=1e-3, max_tries=200):
    """Draw ``count`` points from ``make_point(rng)`` at least ``margin`` away from any kink."""
    pts = []
    for _ in range(max_tries):
        p = make_point(rng)
        if kink_margin(f, p) >= margin:
            pts.append(p)
            if len(pts) == count:
                return pts
    raise RuntimeError("could not find enough kink-free points")


def free_parameter_loss(head, model, T, Z, S, cfg, scale=0.5):
    """Loss over every parameter except the query biases, for gradient checks.

    A query bias adds the same amount to every position of a memory slot, and
    the softmax over positions removes it, so its gradient is identically zero;
    finite differences there only measure roundoff. Returns ``(f, free, point)``
    where ``free`` indexes ``head.tensors() + [W]`` and ``point(rng)`` draws a
    random point for the free tensors.
    """
    from agmh.hashing import HashModel, total_loss_terms

    base = head.tensors() + [model.W]
    fixed = {id(p.query_b) for p in head.descriptors}
    free = [i for i, t in enumerate(base) if id(t) not in fixed]
    n = len(head.tensors())

    def f(*ps):
        full = list(base)
        for i, p in zip(free, ps):
            full[i] = p
        return total_loss_terms([T], [S], Z, HashModel(full[n]), head.with_tensors(full[:n]), cfg)

    def point(rng):
        return [Tensor(rng.normal(scale=scale, size=base[i].shape)) for i in free]

    return f, free, point

"""Attribute descriptors, stepwise interactive external attention and the dispersion loss.

Each of the ``k`` descriptor branches owns its own parameters. A forward pass
turns a backbone map ``T`` (C x H x W) into:

* a descriptor ``F_i = phi_i(T)`` (C' x H x W), two pointwise convs with a relu between;
* an attentive descriptor ``relu(F_i + align_i(attn_i(F_i)))``, used only by the
  dispersion loss;
* the pooled code input ``x``: the per-branch spatial means of ``F_i``, concatenated.

The attention branch never feeds ``x``, so it costs nothing at encoding time.
"""

import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as tk
from .errors import ArgumentError, DimensionError
from .tensor import Tensor


@dataclass
class DescriptorParams:
    transform1_w: Tensor  # C' x C
    transform1_b: Tensor
    transform2_w: Tensor  # C' x C'
    transform2_b: Tensor
    query_w: Tensor  # C' x C'
    query_b: Tensor
    mem_keys: list  # d of S x C'
    interact: list  # d-1 of S x 2S
    mem_value: Tensor  # S x C'
    align_w: Tensor  # C' x C'
    align_b: Tensor

    def tensors(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.extend(v if isinstance(v, list) else [v])
        return out

    @property
    def siea_tensors(self):
        return [self.query_w, self.query_b, *self.mem_keys, *self.interact,
                self.mem_value, self.align_w, self.align_b]

    @classmethod
    def from_tensors(cls, ts, d):
        ts = list(ts)
        head, rest = ts[:6], ts[6:]
        keys, rest = rest[:d], rest[d:]
        inter, rest = rest[:d - 1], rest[d - 1:]
        return cls(*head, keys, inter, *rest)


@dataclass
class AttributeHeadParams:
    descriptors: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.descriptors) < 2:
            raise ArgumentError(f"need at least 2 descriptors, got {len(self.descriptors)}")
        d = self.d
        for p in self.descriptors:
            if len(p.mem_keys) != d or len(p.interact) != d - 1:
                raise ArgumentError("every descriptor needs d key memories and d-1 interaction units")

    @property
    def k(self):
        return len(self.descriptors)

    @property
    def d(self):
        return len(self.descriptors[0].mem_keys)

    @property
    def in_channels(self):
        return self.descriptors[0].transform1_w.shape[1]

    @property
    def channels(self):
        return self.descriptors[0].transform1_w.shape[0]

    @property
    def slots(self):
        return self.descriptors[0].mem_value.shape[0]

    def tensors(self):
        """All parameter tensors, descriptor by descriptor, in field order."""
        return [t for p in self.descriptors for t in p.tensors()]

    def with_tensors(self, ts):
        ts = list(ts)
        per = len(self.descriptors[0].tensors())
        return AttributeHeadParams([
            DescriptorParams.from_tensors(ts[i * per:(i + 1) * per], self.d)
            for i in range(self.k)
        ])


def _he(rng, shape, fan_in):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


def init_head_params(rng, k, in_channels, channels, d, slots):
    """Gaussian init with variance 2/fan_in for weights and memories; zero biases."""
    if k < 2 or d < 1 or slots < 1 or channels < 1 or in_channels < 1:
        raise ArgumentError(
            f"invalid head sizes k={k}, C={in_channels}, C'={channels}, d={d}, S={slots}"
        )
    c, cp, s = in_channels, channels, slots
    zeros = lambda n: Tensor(np.zeros(n))
    descs = []
    for _ in range(k):
        descs.append(DescriptorParams(
            transform1_w=_he(rng, (cp, c), c),
            transform1_b=zeros(cp),
            transform2_w=_he(rng, (cp, cp), cp),
            transform2_b=zeros(cp),
            query_w=_he(rng, (cp, cp), cp),
            query_b=zeros(cp),
            mem_keys=[_he(rng, (s, cp), cp) for _ in range(d)],
            interact=[_he(rng, (s, 2 * s), 2 * s) for _ in range(d - 1)],
            mem_value=_he(rng, (s, cp), s),
            align_w=_he(rng, (cp, cp), cp),
            align_b=zeros(cp),
        ))
    return AttributeHeadParams(descs)


def randomize_attention(params, rng):
    """Copy of ``params`` with every attention and align tensor resampled."""
    new = []
    for p in params.descriptors:
        siea_ids = {id(t) for t in p.siea_tensors}
        new.append(DescriptorParams.from_tensors(
            [Tensor(rng.normal(size=t.shape)) if id(t) in siea_ids else t for t in p.tensors()],
            params.d,
        ))
    return AttributeHeadParams(new)


# --- forward pieces ---------------------------------------------------------


def descriptor(T, p: DescriptorParams):
    h = tk.relu(tk.conv1x1(T, p.transform1_w, p.transform1_b))
    return tk.conv1x1(h, p.transform2_w, p.transform2_b)


def forward_descriptors(T, params: AttributeHeadParams):
    if T.ndim != 3 or T.shape[0] != params.in_channels:
        raise DimensionError(
            f"feature map {T.shape} does not match head input channels {params.in_channels}"
        )
    return [descriptor(T, p) for p in params.descriptors]


def siea_attention(F, p: DescriptorParams):
    """Return ``(softmax over positions, slot-normalised map)``, both N x S."""
    if F.ndim != 3:
        raise DimensionError(f"descriptor must be C' x H x W, got {F.shape}")
    c, h, w = F.shape
    n = h * w
    if n < 1:
        raise DimensionError("descriptor has no spatial positions")
    if p.query_w.shape[1] != c:
        raise DimensionError(f"descriptor channels {c} do not match query projection {p.query_w.shape}")
    q = tk.transpose(tk.reshape(tk.conv1x1(F, p.query_w, p.query_b), (c, n)))
    P = tk.matmul(q, tk.transpose(p.mem_keys[0]))
    for key, mix in zip(p.mem_keys[1:], p.interact):
        G = tk.matmul(q, tk.transpose(key))
        P = tk.matmul(tk.concat([P, G], axis=1), tk.transpose(mix))
    soft = tk.softmax(P, axis=0)
    return soft, tk.l1_normalize(soft, axis=1)


def siea_forward(F, p: DescriptorParams):
    c, h, w = F.shape
    _, attn = siea_attention(F, p)
    out = tk.matmul(attn, p.mem_value)  # N x C'
    return tk.reshape(tk.transpose(out), (c, h, w))


def fuse_skip(F, F_attn, p: DescriptorParams):
    if F.shape != F_attn.shape:
        raise DimensionError(f"skip fusion shape mismatch {F.shape} vs {F_attn.shape}")
    return tk.relu(tk.add(F, tk.conv1x1(F_attn, p.align_w, p.align_b)))


def aggregation_dist(F_att):
    """Channel-max aggregation map turned into a distribution over all H*W positions."""
    _, h, w = F_att.shape
    A = tk.max_channel(F_att)
    return tk.reshape(tk.softmax(tk.reshape(A, (h * w,)), axis=0), (h, w))


def adl_from_dists(dists, denominator="paper"):
    k = len(dists)
    if k < 2:
        raise ArgumentError(f"attention dispersion loss needs k >= 2 maps, got {k}")
    shape = dists[0].shape
    if any(a.shape != shape for a in dists):
        raise DimensionError(f"aggregation maps differ in shape: {[a.shape for a in dists]}")
    if denominator == "paper":
        denom = k * (k + 1) / 2
    elif denominator == "pairs":
        denom = k * (k - 1) / 2
    else:
        raise ArgumentError(f"adl denominator must be 'paper' or 'pairs', got {denominator!r}")
    total = None
    for i in range(k):
        for j in range(i + 1, k):
            ip = tk.inner(dists[i], dists[j])
            total = ip if total is None else tk.add(total, ip)
    return tk.scale(total, 1.0 / denom)


def adl_loss(attentive, denominator="paper"):
    """Mean pairwise overlap of the descriptors' aggregation distributions."""
    if len(attentive) < 2:
        raise ArgumentError(f"attention dispersion loss needs k >= 2 maps, got {len(attentive)}")
    return adl_from_dists([aggregation_dist(F) for F in attentive], denominator)


def pool_concat(descriptors):
    shape = descriptors[0].shape
    for F in descriptors:
        if F.shape != shape:
            raise DimensionError(f"descriptor shapes differ: {[D.shape for D in descriptors]}")
    return tk.concat([tk.mean_spatial(F) for F in descriptors])


@dataclass
class HeadOutputs:
    descriptors: list
    attentive: list
    aggregation_dists: list
    pooled: Tensor


def head_forward(T, params: AttributeHeadParams, siea=True, attention=True):
    """Full head pass. ``attention=False`` skips everything not needed for ``x``.

    With ``siea=False`` the attentive descriptor is ``relu(F_i)``.
    """
    Fs = forward_descriptors(T, params)
    x = pool_concat(Fs)
    if not attention:
        return HeadOutputs(Fs, [], [], x)
    att = []
    for F, p in zip(Fs, params.descriptors):
        att.append(fuse_skip(F, siea_forward(F, p), p) if siea else tk.relu(F))
    dists = [aggregation_dist(a) for a in att]
    return HeadOutputs(Fs, att, dists, x)


def encode_features(T, params):
    """Pooled representation only (no attention work)."""
    return pool_concat(forward_descriptors(T, params))


# --- attention map export -----------------------------------------------------


def write_pgm(path, values):
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"PGM export needs a 2-D map, got shape {a.shape}")
    top = a.max()
    img = np.zeros(a.shape) if top <= 0 else np.rint(a / top * 255.0)
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.clip(img, 0, 255).astype(np.uint8).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in dims.split())
    maxval = int(maxval)
    pixels = np.frombuffer(body[: w * h], dtype=np.uint8)
    return pixels.reshape(h, w), maxval


def export_attention(dists, item_id, out_dir):
    """Write ``attn_<item>_<i>.pgm`` for each aggregation distribution; return the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, a in enumerate(dists, start=1):
        path = os.path.join(out_dir, f"attn_{item_id}_{i}.pgm")
        write_pgm(path, a.data if isinstance(a, Tensor) else a)
        paths.append(path)
    return paths

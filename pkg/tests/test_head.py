import itertools

import numpy as np
import pytest

from agmh import tensor as tk
from agmh.errors import ArgumentError, DimensionError
from agmh.head import (AttributeHeadParams, DescriptorParams, adl_from_dists, adl_loss,
                       aggregation_dist, encode_features, export_attention, forward_descriptors,
                       fuse_skip, head_forward, init_head_params, pool_concat, randomize_attention,
                       read_pgm, siea_attention, siea_forward, write_pgm)
from agmh.tensor import Tape, Tensor, grad_check
from oracles import (dense_descriptor, dense_fuse, dense_siea, loop_adl, np_softmax,
                     smooth_points)


def make_head(seed=0, k=2, c=4, cp=3, d=2, s=3):
    return init_head_params(np.random.default_rng(seed), k, c, cp, d, s)


def rand_desc(rng, c=4, cp=3, d=2, s=3, scale=1.0):
    n = lambda *shape: Tensor(rng.normal(scale=scale, size=shape))
    return DescriptorParams(n(cp, c), n(cp), n(cp, cp), n(cp), n(cp, cp), n(cp),
                            [n(s, cp) for _ in range(d)], [n(s, 2 * s) for _ in range(d - 1)],
                            n(s, cp), n(cp, cp), n(cp))


def zeroed(p, *names):
    return DescriptorParams.from_tensors(
        [Tensor(np.zeros(t.shape)) if any(t is getattr(p, nm) for nm in names) else t
         for t in p.tensors()], len(p.mem_keys))


# --- construction -----------------------------------------------------------


def test_k_below_two_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ArgumentError):
        init_head_params(rng, 1, 4, 3, 2, 3)
    with pytest.raises(ArgumentError):
        AttributeHeadParams([rand_desc(rng)])


def test_init_shapes_and_zero_biases():
    head = make_head(k=3, c=5, cp=4, d=3, s=2)
    assert (head.k, head.in_channels, head.channels, head.d, head.slots) == (3, 5, 4, 3, 2)
    p = head.descriptors[0]
    assert len(p.interact) == 2 and p.interact[0].shape == (2, 4)
    assert not p.transform1_b.data.any() and not p.align_b.data.any()


def test_with_tensors_roundtrip():
    head = make_head(k=3, d=3)
    again = head.with_tensors(head.tensors())
    for a, b in zip(head.tensors(), again.tensors()):
        assert a is b


# --- descriptors ------------------------------------------------------------


def test_zero_transform_gives_zero_descriptors():
    rng = np.random.default_rng(1)
    p = zeroed(rand_desc(rng), "transform1_w", "transform1_b", "transform2_w", "transform2_b")
    head = AttributeHeadParams([p, p])
    for F in forward_descriptors(Tensor(rng.normal(size=(4, 2, 2))), head):
        assert not F.data.any()


def test_identical_branches_agree():
    rng = np.random.default_rng(2)
    p = rand_desc(rng)
    F1, F2 = forward_descriptors(Tensor(rng.normal(size=(4, 3, 2))), AttributeHeadParams([p, p]))
    assert np.array_equal(F1.data, F2.data)


def test_descriptor_vs_per_position_oracle():
    rng = np.random.default_rng(3)
    head = AttributeHeadParams([rand_desc(rng), rand_desc(rng)])
    T = rng.normal(size=(4, 2, 2))
    for F, p in zip(forward_descriptors(Tensor(T), head), head.descriptors):
        assert np.max(np.abs(F.data - dense_descriptor(T, p))) < 1e-12


def test_channel_mismatch_rejected():
    with pytest.raises(DimensionError):
        forward_descriptors(Tensor(np.zeros((5, 2, 2))), make_head(c=4))


# --- SIEA -------------------------------------------------------------------


def test_zero_value_memory_gives_zero_output():
    rng = np.random.default_rng(4)
    p = zeroed(rand_desc(rng, cp=4), "mem_value")
    assert not siea_forward(Tensor(rng.normal(size=(4, 2, 2))), p).data.any()


def test_single_key_is_plain_external_attention():
    rng = np.random.default_rng(5)
    p = rand_desc(rng, cp=4, d=1, s=3)
    F = rng.normal(size=(4, 2, 3))
    # direct external attention with one key memory, no recurrence
    Q = F.reshape(4, -1).T @ p.query_w.data.T + p.query_b.data
    A = Q @ p.mem_keys[0].data.T
    A = np.exp(A - A.max(axis=0))
    A /= A.sum(axis=0)
    A /= A.sum(axis=1, keepdims=True)
    expect = (A @ p.mem_value.data).T.reshape(4, 2, 3)
    assert np.max(np.abs(siea_forward(Tensor(F), p).data - expect)) < 1e-12


def test_siea_vs_dense_oracle():
    rng = np.random.default_rng(6)
    p = rand_desc(rng, cp=4, d=3, s=3)
    F = rng.normal(size=(4, 2, 2))
    got = siea_forward(Tensor(F), p).data
    assert np.max(np.abs(got - dense_siea(F, p)[0])) < 1e-10


def test_siea_double_normalization():
    rng = np.random.default_rng(7)
    for _ in range(20):
        p = rand_desc(rng, cp=3, d=2, s=4)
        soft, norm = siea_attention(Tensor(rng.normal(size=(3, 3, 2))), p)
        assert np.max(np.abs(soft.data.sum(axis=0) - 1)) < 1e-12
        assert np.max(np.abs(norm.data.sum(axis=1) - 1)) < 1e-12


def test_siea_gradient_check():
    rng = np.random.default_rng(8)
    p = rand_desc(rng, cp=3, d=2, s=3, scale=0.5)
    F = Tensor(rng.normal(size=(3, 2, 2)))
    tensors = [F, p.query_w, p.query_b, *p.mem_keys, *p.interact, p.mem_value]

    def f(F, qw, qb, k1, k2, mt, mv):
        q = DescriptorParams(p.transform1_w, p.transform1_b, p.transform2_w, p.transform2_b,
                             qw, qb, [k1, k2], [mt], mv, p.align_w, p.align_b)
        return tk.inner(siea_forward(F, q), Tensor(np.arange(12.0).reshape(3, 2, 2) / 12))

    free = [0, 1, 3, 4, 5, 6]
    g = lambda *ts: f(*[ts[free.index(i)] if i in free else tensors[i] for i in range(7)])
    assert grad_check(g, [tensors[i] for i in free]) < 1e-5

    # a query bias shifts every position of a slot equally, which the softmax over
    # positions cancels: both the tape and finite differences see a zero gradient
    leaves = [Tensor(t.data, requires_grad=True) for t in tensors]
    with Tape() as tape:
        out = f(*leaves)
    assert np.max(np.abs(tape.gradient(out, [leaves[2]])[0])) < 1e-12
    h = 1e-4
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        up = f(*[Tensor(t.data + e) if i == 2 else t for i, t in enumerate(tensors)]).item()
        dn = f(*[Tensor(t.data - e) if i == 2 else t for i, t in enumerate(tensors)]).item()
        assert abs(up - dn) / (2 * h) < 1e-9


# --- skip fusion ------------------------------------------------------------


def test_fuse_zero_align_is_identity_on_nonnegative():
    rng = np.random.default_rng(9)
    p = zeroed(rand_desc(rng), "align_w", "align_b")
    F = np.abs(rng.normal(size=(3, 2, 2)))
    assert np.array_equal(fuse_skip(Tensor(F), Tensor(rng.normal(size=(3, 2, 2))), p).data, F)


def test_fuse_cancellation_and_loop_oracle():
    rng = np.random.default_rng(10)
    p = rand_desc(rng)
    Fh = rng.normal(size=(3, 2, 2))
    aligned = tk.conv1x1(Tensor(Fh), p.align_w, p.align_b).data
    assert not fuse_skip(Tensor(-aligned), Tensor(Fh), p).data.any()
    F = rng.normal(size=(3, 2, 2))
    assert np.array_equal(fuse_skip(Tensor(F), Tensor(Fh), p).data, np.maximum(F + aligned, 0.0))
    assert np.max(np.abs(fuse_skip(Tensor(F), Tensor(Fh), p).data - dense_fuse(F, Fh, p))) < 1e-12
    with pytest.raises(DimensionError):
        fuse_skip(Tensor(F), Tensor(Fh[:, :1]), p)


# --- dispersion loss ----------------------------------------------------------


def test_adl_single_position_is_one_third():
    maps = [Tensor(np.array([[[2.0]]])), Tensor(np.array([[[-1.0]]]))]
    assert abs(adl_loss(maps).item() - 1 / 3) < 1e-15


def test_adl_constant_maps_give_one_sixth():
    maps = [Tensor(np.full((2, 1, 2), 0.7)), Tensor(np.full((3, 1, 2), -2.0))]
    assert abs(adl_loss(maps).item() - 1 / 6) < 1e-15


def test_adl_vs_scalar_loop():
    rng = np.random.default_rng(11)
    maps = [rng.normal(size=(3, 3, 2)) for _ in range(3)]
    for den in ("paper", "pairs"):
        got = adl_loss([Tensor(m) for m in maps], den).item()
        assert abs(got - loop_adl(maps, den)) < 1e-12


def test_adl_rejects_single_map_and_bad_denominator():
    with pytest.raises(ArgumentError):
        adl_loss([Tensor(np.ones((1, 2, 2)))])
    with pytest.raises(ArgumentError):
        adl_loss([Tensor(np.ones((1, 2, 2)))] * 2, "other")
    with pytest.raises(DimensionError):
        adl_from_dists([Tensor(np.ones((2, 2))), Tensor(np.ones((1, 4)))])


def test_adl_bounds_and_permutation_symmetry():
    rng = np.random.default_rng(12)
    for k in (2, 3, 4):
        maps = [Tensor(rng.normal(scale=3, size=(2, 3, 3))) for _ in range(k)]
        v = adl_loss(maps).item()
        assert 0 < v <= (k - 1) / (k + 1)
        for perm in itertools.islice(itertools.permutations(range(k)), 6):
            assert abs(adl_loss([maps[i] for i in perm]).item() - v) < 1e-15


def test_aggregation_dist_sums_to_one():
    rng = np.random.default_rng(13)
    for _ in range(10):
        a = aggregation_dist(Tensor(rng.normal(scale=4, size=(3, 4, 4)))).data
        assert abs(a.sum() - 1) < 1e-10 and np.all(a > 0)


def test_adl_gradient_check():
    rng = np.random.default_rng(14)

    def f(a, b, c):
        return adl_loss([a, b, c])

    pts = smooth_points(lambda r: [Tensor(r.normal(size=(2, 2, 3))) for _ in range(3)], f, 10, rng)
    assert max(grad_check(f, p) for p in pts) < 1e-5


def test_dispersion_pulls_two_maps_apart():
    rng = np.random.default_rng(15)
    maps = [rng.normal(size=(1, 3, 3)) for _ in range(2)]

    def overlap(ms):
        d = [aggregation_dist(Tensor(m)).data for m in ms]
        return float(np.sum(d[0] * d[1])), [int(np.argmax(x)) for x in d]

    start, _ = overlap(maps)
    prev = start
    for _ in range(200):
        leaves = [Tensor(m, requires_grad=True) for m in maps]
        with Tape() as tape:
            loss = adl_loss(leaves)
        grads = tape.gradient(loss, leaves)
        maps = [m - 0.5 * g for m, g in zip(maps, grads)]
        cur, argmaxes = overlap(maps)
        assert cur < prev
        prev = cur
    assert argmaxes[0] != argmaxes[1]


# --- pooling and the full head ----------------------------------------------


def test_pool_concat_constant_and_loop():
    Fs = [Tensor(np.full((2, 2, 2), c)) for c in (1.0, -3.0)]
    assert pool_concat(Fs).data.tolist() == [1.0, 1.0, -3.0, -3.0]
    rng = np.random.default_rng(16)
    maps = [rng.normal(size=(3, 2, 3)) for _ in range(3)]
    expect = []
    for m in maps:
        for c in range(3):
            s = 0.0
            for h in range(2):
                for w in range(3):
                    s += m[c, h, w]
            expect.append(s / 6)
    assert np.max(np.abs(pool_concat([Tensor(m) for m in maps]).data - expect)) < 1e-12
    with pytest.raises(DimensionError):
        pool_concat([Tensor(np.ones((2, 2, 2))), Tensor(np.ones((2, 1, 2)))])


def test_encoding_ignores_attention_parameters():
    rng = np.random.default_rng(17)
    head = make_head(seed=17, k=3, c=4, cp=5, d=3, s=4)
    T = Tensor(rng.normal(size=(4, 3, 3)))
    other = randomize_attention(head, rng)
    assert np.array_equal(encode_features(T, head).data, encode_features(T, other).data)
    assert np.array_equal(head_forward(T, head).pooled.data, encode_features(T, head).data)


def test_head_outputs_and_permutation():
    rng = np.random.default_rng(18)
    head = make_head(seed=18, k=3, c=4, cp=3, d=2, s=3)
    T = Tensor(rng.normal(size=(4, 2, 3)))
    out = head_forward(T, head)
    for a in out.aggregation_dists:
        assert abs(a.data.sum() - 1) < 1e-10
    perm = [2, 0, 1]
    swapped = head_forward(T, AttributeHeadParams([head.descriptors[i] for i in perm]))
    for j, i in enumerate(perm):
        assert np.array_equal(swapped.attentive[j].data, out.attentive[i].data)
    assert abs(adl_loss(swapped.attentive).item() - adl_loss(out.attentive).item()) < 1e-15


def test_siea_off_uses_relu_of_descriptor():
    rng = np.random.default_rng(19)
    head = make_head(seed=19)
    out = head_forward(Tensor(rng.normal(size=(4, 2, 2))), head, siea=False)
    for F, a in zip(out.descriptors, out.attentive):
        assert np.array_equal(a.data, np.maximum(F.data, 0.0))


# --- PGM export ---------------------------------------------------------------


def test_pgm_export_layout(tmp_path):
    a = np.array([[0.1, 0.2, 0.4], [0.05, 0.05, 0.2]])
    paths = export_attention([a, a / 2], 7, tmp_path)
    assert [p.split("/")[-1] for p in paths] == ["attn_7_1.pgm", "attn_7_2.pgm"]
    raw = open(paths[0], "rb").read()
    assert raw.startswith(b"P5\n3 2\n255\n")
    img, maxval = read_pgm(paths[0])
    assert maxval == 255 and img.shape == (2, 3)
    assert img.max() == 255 and img[0].tolist() == [64, 128, 255]
    # a byte equal to an ASCII newline inside the pixels must survive
    write_pgm(tmp_path / "nl.pgm", np.array([[10.0, 255.0]]))
    assert read_pgm(tmp_path / "nl.pgm")[0].tolist() == [[10, 255]]

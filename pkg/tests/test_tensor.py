import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvsm.tensor import (
    AdamWState,
    GradientError,
    LrSchedule,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    adamw_step,
    attention,
    bilinear_resize,
    concat,
    gelu,
    grad_check,
    l2_normalize,
    layer_norm,
    linear,
    lr_at,
    matmul,
    patchify,
    softmax,
    unpatchify,
)
from dvsm.tensor import serialize

f64 = np.float64


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=f64), requires_grad=True)


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    out = matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_unit_selection():
    out = matmul(Tensor([[1.0, 0.0]]), Tensor([[2.0], [3.0]]))
    np.testing.assert_array_equal(out.data, [[2.0]])


def test_matmul_shape_error_lists_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    A, B = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    assert grad_check(lambda a, b: matmul(a, b).sum(), [A, B]) < 1e-6


def test_matmul_broadcast_batch_grad():
    rng = np.random.default_rng(1)
    A, B = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5)))
    assert grad_check(lambda a, b: (matmul(a, b) ** 2).sum(), [A, B]) < 1e-6


# -- layer norm ----------------------------------------------------------------

def test_layer_norm_hand_value():
    out = layer_norm(Tensor([1.0, 2.0, 3.0], dtype=f64), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    expected = np.array([-1, 0, 1]) / math.sqrt(2 / 3 + 1e-6)
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)
    np.testing.assert_allclose(out.data, [-1.2247, 0, 1.2247], atol=1e-4)


def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_zero_gamma_gives_beta():
    beta = np.array([0.1, -0.2, 0.3])
    out = layer_norm(Tensor(np.random.default_rng(0).normal(size=(5, 3))), Tensor(np.zeros(3)), Tensor(beta))
    np.testing.assert_allclose(out.data, np.broadcast_to(beta, (5, 3)), rtol=1e-6)


def test_layer_norm_dim_mismatch():
    with pytest.raises(ShapeError):
        layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_layer_norm_grad():
    rng = np.random.default_rng(2)
    x, g, b = leaf(rng.normal(size=(3, 5))), leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
    w = rng.normal(size=(3, 5))
    assert grad_check(lambda x, g, b: (layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-6


# -- softmax / gelu / l2 ---------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    e = math.e
    np.testing.assert_allclose(softmax(Tensor([1.0, 0.0], dtype=f64)).data, [e / (e + 1), 1 / (e + 1)], rtol=1e-12)
    big = softmax(Tensor([1000.0, 0.0], dtype=f64)).data
    np.testing.assert_allclose(big, [1.0, 0.0], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=16))
def test_softmax_rows_are_distributions(xs):
    out = softmax(Tensor(np.array(xs, dtype=f64))).data
    assert (out >= 0).all()
    assert abs(out.sum() - 1.0) <= 1e-6


def test_gelu_values():
    c = math.sqrt(2 / math.pi)
    expected = 0.5 * (1 + math.tanh(c * (1 + 0.044715)))
    assert gelu(Tensor([0.0])).data[0] == 0.0
    assert gelu(Tensor([1.0], dtype=f64)).data[0] == pytest.approx(expected, rel=1e-12)
    assert gelu(Tensor([1.0], dtype=f64)).data[0] == pytest.approx(0.8412, abs=1e-4)
    assert abs(gelu(Tensor([-10.0], dtype=f64)).data[0]) < 1e-6


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize(Tensor([3.0, 4.0], dtype=f64)).data, [0.6, 0.8], atol=1e-6)
    u = np.array([0.0, 1.0, 0.0])
    np.testing.assert_allclose(l2_normalize(Tensor(u)).data, u, atol=1e-6)
    np.testing.assert_array_equal(l2_normalize(Tensor(np.zeros(3))).data, 0.0)


# -- attention ----------------------------------------------------------------

def test_attention_single_key_returns_value():
    rng = np.random.default_rng(3)
    Q = Tensor(rng.normal(size=(2, 5, 4)))
    K = Tensor(rng.normal(size=(2, 1, 4)))
    V = Tensor(rng.normal(size=(2, 1, 4)))
    out = attention(Q, K, V, Tensor(np.ones(2)))
    np.testing.assert_allclose(out.data, np.broadcast_to(V.data, (2, 5, 4)), rtol=1e-6)


def test_attention_large_scale_selects_aligned_key():
    Q = Tensor([[[1.0, 0.0]]], dtype=f64)
    K = Tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=f64)
    V = Tensor([[[5.0, 1.0], [-3.0, 2.0]]], dtype=f64)
    out = attention(Q, K, V, Tensor([100.0], dtype=f64))
    np.testing.assert_allclose(out.data[0, 0], [5.0, 1.0], atol=1e-12)


def test_attention_unit_scale_weighting():
    Q = Tensor([[[1.0, 0.0]]], dtype=f64)
    K = Tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=f64)
    V = Tensor([[[1.0], [0.0]]], dtype=f64)
    e = math.e
    for norm in (True, False):
        out = attention(Q, K, V, Tensor([1.0], dtype=f64), qk_norm=norm)
        assert out.data[0, 0, 0] == pytest.approx(e / (e + 1), abs=1e-6)
        assert out.data[0, 0, 0] == pytest.approx(0.7311, abs=1e-4)


def test_attention_dim_mismatch():
    with pytest.raises(ShapeError):
        attention(Tensor(np.ones((1, 2, 3))), Tensor(np.ones((1, 2, 4))), Tensor(np.ones((1, 2, 4))), Tensor([1.0]))


def test_attention_grad():
    rng = np.random.default_rng(4)
    Q, K, V = (leaf(rng.normal(size=(2, 3, 4))) for _ in range(3))
    s = leaf([1.5, 2.5])
    w = rng.normal(size=(2, 3, 4))
    assert grad_check(lambda q, k, v, s: (attention(q, k, v, s) * w).sum(), [Q, K, V, s]) < 1e-6


# -- patchify / resize ----------------------------------------------------------

def test_patchify_single_token_row_major():
    img = Tensor(np.arange(4.0).reshape(1, 2, 2))
    tok = patchify(img, 2)
    np.testing.assert_array_equal(tok.data, [[0, 1, 2, 3]])


def test_patchify_token_count():
    assert patchify(Tensor(np.zeros((3, 32, 32))), 8).shape == (16, 192)


def test_patchify_non_divisible():
    with pytest.raises(ShapeError):
        patchify(Tensor(np.zeros((3, 10, 12))), 4)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.sampled_from([1, 2, 4]), st.integers(0, 2**31))
def test_patchify_roundtrip_bitwise(C, gh, gw, p, seed):
    x = np.random.default_rng(seed).normal(size=(C, gh * p, gw * p)).astype(np.float32)
    back = unpatchify(patchify(Tensor(x), p), p, gh * p, gw * p)
    assert back.data.tobytes() == x.tobytes()


def test_bilinear_constant_identity_and_replication():
    const = Tensor(np.full((3, 5, 7), 0.5))
    np.testing.assert_allclose(bilinear_resize(const, 11, 3).data, 0.5, rtol=1e-6)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 6, 4)))
    np.testing.assert_array_equal(bilinear_resize(x, 6, 4).data, x.data)
    one = Tensor(np.array([[[0.25]]]))
    np.testing.assert_allclose(bilinear_resize(one, 2, 2).data, 0.25)


def test_bilinear_matches_pointwise_formula():
    # pointwise align_corners=False reference, written independently
    rng = np.random.default_rng(5)
    img = rng.normal(size=(1, 5, 6))
    H2, W2 = 7, 4
    ref = np.zeros((1, H2, W2))
    for i in range(H2):
        for j in range(W2):
            sy = min(max((i + 0.5) * 5 / H2 - 0.5, 0), 4)
            sx = min(max((j + 0.5) * 6 / W2 - 0.5, 0), 5)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, 4), min(x0 + 1, 5)
            wy, wx = sy - y0, sx - x0
            ref[0, i, j] = ((1 - wy) * (1 - wx) * img[0, y0, x0] + (1 - wy) * wx * img[0, y0, x1]
                            + wy * (1 - wx) * img[0, y1, x0] + wy * wx * img[0, y1, x1])
    out = bilinear_resize(Tensor(img, dtype=f64), H2, W2).data
    np.testing.assert_allclose(out, ref, atol=1e-12)


# -- tape / backward ----------------------------------------------------------

def test_backward_sum_gives_ones():
    x = leaf([1.0, 2.0, 3.0])
    tape = Tape()
    with tape:
        loss = x.sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_square():
    x = leaf([1.0, 2.0])
    tape = Tape()
    with tape:
        loss = (x * x).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_diamond_accumulates_both_paths():
    x = leaf([0.3, -1.2, 2.0])

    def f(x):
        a = x * 3.0
        b = x.tanh()
        return (a * b).sum()

    assert grad_check(f, [x]) < 1e-6


def test_backward_errors():
    x = leaf([1.0, 2.0])
    tape = Tape()
    with tape:
        y = x * 2.0
        loss = y.sum()
    with pytest.raises(GradientError):
        tape.backward(y)
    tape.backward(loss)
    with pytest.raises(GradientError):
        tape.backward(loss)
    with pytest.raises(GradientError):
        Tape().backward(Tensor(1.0).sum())


def test_no_recording_outside_tape():
    x = leaf([1.0])
    y = x * 2.0
    assert not y.requires_grad
    with pytest.raises(GradientError):
        Tape().backward(y.sum())


def test_tape_reset_allows_reuse():
    x = leaf([1.0, 2.0])
    tape = Tape()
    with tape:
        loss = (x * x).sum()
    tape.backward(loss)
    tape.reset()
    x.grad = None
    with tape:
        loss = (x * 3.0).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_nonfinite_forward_raises():
    with pytest.raises(NonFiniteError):
        Tensor([1.0]) / Tensor([0.0])


# -- randomized gradient checks for every differentiable op ---------------------

def _op_cases(rng):
    w = rng.normal(size=(3, 4))
    return {
        "add": (lambda a, b: ((a + b) * w).sum(), [(3, 4), (4,)]),
        "sub": (lambda a, b: ((a - b) * w).sum(), [(3, 4), (3, 1)]),
        "mul": (lambda a, b: (a * b * w).sum(), [(3, 4), (3, 4)]),
        "div": (lambda a, b: ((a / (b * b + 1.0)) * w).sum(), [(3, 4), (4,)]),
        "exp": (lambda a: (a.exp() * w).sum(), [(3, 4)]),
        "tanh": (lambda a: (a.tanh() * w).sum(), [(3, 4)]),
        "sigmoid": (lambda a: (a.sigmoid() * w).sum(), [(3, 4)]),
        "pow": (lambda a: ((a * a + 1.0) ** 1.5 * w).sum(), [(3, 4)]),
        "mean": (lambda a: (a.mean(axis=0) * w[0]).sum(), [(3, 4)]),
        "transpose": (lambda a: (a.T * w.T).sum(), [(3, 4)]),
        "getitem": (lambda a: (a[1:, ::2] * w[1:, ::2]).sum(), [(3, 4)]),
        "concat": (lambda a, b: (concat([a, b], axis=0) * np.vstack([w, w])).sum(), [(3, 4), (3, 4)]),
        "matmul": (lambda a, b: (matmul(a, b) * w[:, :2]).sum(), [(3, 5), (5, 2)]),
        "linear": (lambda a, b: (linear(a, b) * w[:, :2]).sum(), [(3, 5), (5, 2)]),
        "softmax": (lambda a: (softmax(a) * w).sum(), [(3, 4)]),
        "gelu": (lambda a: (gelu(a) * w).sum(), [(3, 4)]),
        "l2_normalize": (lambda a: (l2_normalize(a) * w).sum(), [(3, 4)]),
        "layer_norm": (lambda a, g, b: (layer_norm(a, g, b) * w).sum(), [(3, 4), (4,), (4,)]),
        "patchify": (lambda a: (patchify(a, 2) ** 2).sum(), [(1, 4, 4)]),
        "bilinear_resize": (lambda a: (bilinear_resize(a, 3, 5) ** 2).sum(), [(1, 4, 4)]),
    }


OPS = sorted(_op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("op", OPS)
def test_every_op_passes_grad_check_100_seeds(op):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        fn, shapes = _op_cases(rng)[op]
        inputs = [leaf(rng.normal(size=s)) for s in shapes]
        worst = max(worst, grad_check(fn, inputs))
    assert worst <= 1e-6, f"{op}: {worst:.2e}"


# -- optimizer and schedule --------------------------------------------------------

def test_adamw_first_step_hand_value():
    p = {"w": Tensor([1.0], dtype=f64)}
    st_ = AdamWState(weight_decay=0.0)
    adamw_step(p, {"w": np.array([1.0])}, st_, lr=0.1)
    assert p["w"].data[0] == pytest.approx(0.9, abs=1e-7)
    assert st_.step == 1


def test_adamw_zero_grad_no_decay_is_identity():
    theta = np.random.default_rng(0).normal(size=(3, 3)).astype(np.float32)
    p = {"w": Tensor(theta.copy())}
    st_ = AdamWState(weight_decay=0.0)
    for _ in range(5):
        adamw_step(p, {"w": np.zeros((3, 3), np.float32)}, st_, lr=0.1)
    assert p["w"].data.tobytes() == theta.tobytes()
    assert st_.step == 5


def test_adamw_decoupled_decay():
    p = {"w": Tensor([2.0], dtype=f64)}
    adamw_step(p, {"w": np.array([0.0])}, AdamWState(weight_decay=0.05), lr=0.1)
    assert p["w"].data[0] == pytest.approx(2.0 * (1 - 0.005), rel=1e-12)


def test_adamw_shape_mismatch():
    with pytest.raises(ShapeError):
        adamw_step({"w": Tensor(np.ones(3))}, {"w": np.ones(2)}, AdamWState(), lr=0.1)


def test_lr_schedule_points():
    s = LrSchedule(peak_lr=4e-4, warmup_steps=100, total_steps=1100, min_lr=1e-5)
    assert lr_at(0, s) == 0.0
    assert lr_at(100, s) == pytest.approx(4e-4)
    assert lr_at(1100, s) == pytest.approx(1e-5)
    assert lr_at(600, s) == pytest.approx((4e-4 + 1e-5) / 2)
    with pytest.raises(ValueError):
        lr_at(1101, s)


def test_lr_monotone_after_warmup():
    s = LrSchedule(peak_lr=1.0, warmup_steps=10, total_steps=500, min_lr=0.01)
    vals = [lr_at(t, s) for t in range(10, 501)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


# -- grad_check harness itself ---------------------------------------------------

def test_grad_check_linear_layer():
    rng = np.random.default_rng(7)
    x, w = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=(3, 2)))
    assert grad_check(lambda x, w: (linear(x, w) ** 2).sum(), [x, w]) < 1e-6


def test_grad_check_detects_wrong_gradient():
    from dvsm.tensor.core import _record

    def bad_square(x):
        return _record(x.data ** 2, (x,), lambda g: (g * x.data,), "bad")  # missing factor 2

    assert grad_check(lambda x: bad_square(x).sum(), [leaf([1.0, 2.0])]) > 0.4


# -- container -----------------------------------------------------------------

def test_container_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(2, 3)).astype(np.float32), "b.c": np.float32(rng.normal(size=7)),
               "scalar": np.array(1.5, dtype=np.float32)}
    path = tmp_path / "x.dvsm"
    serialize.save(path, tensors, {"config": {"D": 8}})
    back, meta = serialize.load(path)
    assert meta == {"config": {"D": 8}}
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()
    raw = path.read_bytes()
    assert raw[:4] == b"DVSM"
    assert serialize.dumps(back, meta) == raw


def test_container_rejects_bad_magic():
    buf = bytearray(serialize.dumps({"a": np.ones(2, np.float32)}))
    buf[0] = ord("X")
    with pytest.raises(serialize.ContainerError):
        serialize.loads(bytes(buf))
    with pytest.raises(serialize.ContainerError):
        serialize.loads(serialize.dumps({"a": np.ones(4, np.float32)})[:-3])

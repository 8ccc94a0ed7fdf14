import numpy as np
import pytest

from prognosisex import checkpoint, nn
from prognosisex import tensor as T
from prognosisex.rng import make_rng, truncated_normal

import gradcheck
import graphs


def test_matmul_forward_and_backward():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = T.Tensor([[5.0], [6.0]], requires_grad=True)
    y = a @ b
    np.testing.assert_array_equal(y.data, [[17.0], [39.0]])
    T.backward(T.tsum(y))
    np.testing.assert_array_equal(a.grad, [[5.0, 6.0], [5.0, 6.0]])
    np.testing.assert_array_equal(b.grad, [[4.0], [6.0]])


def test_matmul_shape_error():
    with pytest.raises(T.ShapeError) as e:
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert e.value.op == "matmul"


def test_broadcast_add_reduces_gradient():
    x = T.Tensor(np.ones((3, 4)), requires_grad=True)
    b = T.Tensor(np.zeros(4), requires_grad=True)
    T.backward(T.tsum(x + b))
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    for stride in (1, 2):
        out = T.conv2d(x, w, stride=stride, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ho = (5 + 2 - 3) // stride + 1
        ref = np.zeros((2, 4, ho, ho))
        for i in range(ho):
            for j in range(ho):
                patch = xp[:, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                ref[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w)
        np.testing.assert_allclose(out, ref, atol=1e-12)


def test_upsample_and_silu_values():
    x = T.Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    up = T.upsample2x(x).data[0, 0]
    np.testing.assert_array_equal(up[:2, :2], 0.0)
    np.testing.assert_array_equal(up[2:, 2:], 3.0)
    assert T.silu(T.Tensor([0.0])).data[0] == 0.0


def test_group_norm_normalizes_groups():
    x = np.random.default_rng(1).standard_normal((2, 4, 3, 3)) * 5 + 2
    y = T.group_norm(x, 2, np.ones(4), np.zeros(4)).data.reshape(2, 2, -1)
    np.testing.assert_allclose(y.mean(axis=2), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=2), 1.0, atol=1e-4)


def test_log_floor_blocks_gradient():
    x = T.Tensor([0.0, 0.5], requires_grad=True, dtype=np.float64)
    y = T.log(x, floor=1e-12)
    assert y.data[0] == pytest.approx(np.log(1e-12))
    T.backward(T.tsum(y))
    np.testing.assert_array_equal(x.grad, [0.0, 2.0])


def test_softmax_rows_sum_to_one():
    p = T.softmax(np.array([[1000.0, 1000.0], [0.0, -1000.0]]), axis=1).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    np.testing.assert_allclose(p[0], 0.5)


def test_l1_loss_value():
    assert T.l1_loss(np.array([1.0, -1.0]), np.array([0.0, 1.0])).item() == pytest.approx(1.5)


def test_backward_rejects_non_scalar_and_constant():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(x * 2.0)
    with pytest.raises(ValueError):
        T.backward(T.tsum(T.Tensor(np.ones(3))))


def test_leaf_gradients_accumulate_and_clear():
    x = T.Tensor([2.0], requires_grad=True)
    T.backward(T.tsum(x * 3.0))
    T.backward(T.tsum(x * 3.0))
    np.testing.assert_array_equal(x.grad, [6.0])
    x.zero_grad()
    assert x.grad is None


def test_no_grad_builds_no_graph():
    x = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


@pytest.mark.parametrize("seed", range(24))
def test_gradcheck_random_graphs(seed):
    build, arrays = graphs.random_graph(seed)
    assert gradcheck.check(build, arrays) <= 1e-6


def test_gradcheck_detects_wrong_gradient():
    # sanity of the oracle itself: a deliberately broken op must fail
    def bad(x):
        y = T.silu(x)
        y._backward = lambda g: (2 * g,)
        return T.tsum(y)
    assert gradcheck.check(bad, [np.array([0.3, -0.7])]) > 1e-2


def test_adam_first_step_is_lr_times_sign():
    p = T.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    opt = nn.Adam([p], lr=0.1)
    p.grad = np.array([0.5, -4.0, 0.0])
    opt.step()
    # bias correction makes the first update lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-7)
    assert p.grad is None and opt.t == 1


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(3)
    p = T.Tensor(rng.standard_normal(5), requires_grad=True)
    ref = p.data.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    opt = nn.Adam([p], lr=0.01)
    for t in range(1, 6):
        g = rng.standard_normal(5)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_adam_minimizes_quadratic():
    p = T.Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = nn.Adam([p], lr=0.1)
    for _ in range(300):
        T.backward(T.tsum(p * p))
        opt.step()
    assert np.abs(p.data).max() < 1e-2


def test_adam_without_gradients_raises():
    with pytest.raises(RuntimeError):
        nn.Adam([T.Tensor([1.0], requires_grad=True)]).step()


def test_rng_streams_are_named_and_reproducible():
    a = make_rng(0, "x").standard_normal(4)
    np.testing.assert_array_equal(a, make_rng(0, "x").standard_normal(4))
    assert not np.array_equal(a, make_rng(0, "y").standard_normal(4))
    assert not np.array_equal(a, make_rng(1, "x").standard_normal(4))


def test_truncated_normal_is_bounded():
    x = truncated_normal(make_rng(0, "t"), (1000,), 0.5)
    assert x.dtype == np.float32 and np.abs(x).max() <= 1.0


def test_module_state_round_trip(tmp_path):
    lin = nn.Linear(make_rng(0, "l"), 3, 2)
    state = lin.state_dict()
    assert set(state) == {"weight", "bias"}
    path = tmp_path / "lin.pgxc"
    checkpoint.save(path, state)
    other = nn.Linear(make_rng(1, "l"), 3, 2)
    other.load_state_dict(checkpoint.load(path))
    np.testing.assert_array_equal(other.weight.data, lin.weight.data)


def test_checkpoint_round_trip_and_errors(tmp_path):
    rec = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b.c": np.array([1.5], dtype=np.float32)}
    path = tmp_path / "x.pgxc"
    checkpoint.save(path, rec)
    back = checkpoint.load(path)
    assert list(back) == ["a", "b.c"]
    for k in rec:
        np.testing.assert_array_equal(back[k], rec[k])
    raw = path.read_bytes()
    assert raw[:4] == b"PGXC"
    (tmp_path / "bad.pgxc").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "bad.pgxc")
    (tmp_path / "short.pgxc").write_bytes(raw[:-3])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "short.pgxc")
    h = checkpoint.file_hash(path)
    checkpoint.save(tmp_path / "y.pgxc", rec)
    assert checkpoint.file_hash(tmp_path / "y.pgxc") == h

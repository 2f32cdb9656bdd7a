import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from saghog.autodiff import AdamW, Linear, ShapeError, Tensor, TrainLog, clip_gradients, cosine_warmup_lr, no_grad
from saghog.autodiff import ops as T
from saghog.autodiff import load_checkpoint, read_meta, save_checkpoint
from saghog.autodiff.gradcheck import check_gradients
from saghog.model import Block

TOL = 1e-4


def leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True, dtype=np.float64)


def _cases():
    return {
        "add": lambda r: ((a := leaf(r, 3, 4)), (b := leaf(r, 4)), lambda: a + b),
        "sub": lambda r: ((a := leaf(r, 3, 4)), (b := leaf(r, 3, 1)), lambda: a - b),
        "mul": lambda r: ((a := leaf(r, 3, 4)), (b := leaf(r, 1, 4)), lambda: a * b),
        "div": lambda r: ((a := leaf(r, 3, 4)), (b := leaf(r, 3, 4, positive=True)), lambda: a / b),
        "power": lambda r: ((a := leaf(r, 5, positive=True)), None, lambda: T.power(a, 1.7)),
        "exp": lambda r: ((a := leaf(r, 6)), None, lambda: T.exp(a)),
        "log": lambda r: ((a := leaf(r, 6, positive=True)), None, lambda: T.log(a)),
        "sqrt": lambda r: ((a := leaf(r, 6, positive=True)), None, lambda: T.sqrt(a)),
        "relu": lambda r: ((a := leaf(r, 20)), None, lambda: T.relu(a)),
        "gelu": lambda r: ((a := leaf(r, 20)), None, lambda: T.gelu(a)),
        "where": lambda r: ((a := leaf(r, 4, 5)), None, lambda: T.where(np.arange(20).reshape(4, 5) % 3 > 0, a, -7.0)),
        "sum_axis": lambda r: ((a := leaf(r, 3, 4, 5)), None, lambda: T.tsum(a, axis=1)),
        "mean_keepdims": lambda r: ((a := leaf(r, 3, 4)), None, lambda: T.mean(a, axis=0, keepdims=True)),
        "reshape": lambda r: ((a := leaf(r, 3, 4)), None, lambda: a.reshape(2, 6)),
        "transpose": lambda r: ((a := leaf(r, 2, 3, 4)), None, lambda: a.transpose(2, 0, 1)),
        "swapaxes": lambda r: ((a := leaf(r, 2, 3, 4)), None, lambda: T.swapaxes(a, -1, -2)),
        "broadcast_to": lambda r: ((a := leaf(r, 1, 4)), None, lambda: T.broadcast_to(a, (3, 4))),
        "getitem_slice": lambda r: ((a := leaf(r, 4, 6)), None, lambda: a[1:3, ::2]),
        "getitem_fancy": lambda r: ((a := leaf(r, 5, 3)), None, lambda: a[np.array([0, 2, 2, 4])]),
        "take_along": lambda r: ((a := leaf(r, 2, 5, 3)), None, lambda: T.take_along(a, np.array([[0, 4], [3, 3]]))),
        "embedding": lambda r: ((a := leaf(r, 6, 3)), None, lambda: T.embedding(a, np.array([[1, 5], [1, 0]]))),
        "concat": lambda r: ((a := leaf(r, 2, 3)), (b := leaf(r, 2, 2)), lambda: T.concat([a, b], axis=1)),
        "matmul": lambda r: ((a := leaf(r, 2, 3, 4)), (b := leaf(r, 4, 5)), lambda: T.matmul(a, b)),
        "matmul_batched": lambda r: ((a := leaf(r, 2, 3, 4)), (b := leaf(r, 2, 4, 2)), lambda: T.matmul(a, b)),
        "softmax": lambda r: ((a := leaf(r, 3, 7)), None, lambda: T.softmax(a, axis=-1)),
        "layer_norm": lambda r: (
            (a := leaf(r, 3, 8)),
            (w := leaf(r, 8)),
            lambda: T.layer_norm(a, w, Tensor(np.linspace(-1, 1, 8), requires_grad=True, dtype=np.float64)),
        ),
        "l2_normalize": lambda r: ((a := leaf(r, 3, 5)), None, lambda: T.l2_normalize(a, axis=-1)),
    }


@pytest.mark.parametrize("name", sorted(_cases()))
def test_op_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a, b, f = _cases()[name](rng)
    out_shape = f().shape
    # random linear functional so every output element matters
    w = Tensor(rng.normal(size=out_shape), dtype=np.float64)
    fn = lambda: (f() * w).sum()
    inputs = [t for t in (a, b) if t is not None]
    assert check_gradients(fn, inputs, n_points=10, rng=rng) < TOL


def test_block_gradient():
    rng = np.random.default_rng(0)
    blk = Block(16, 2, 2.0, rng)
    blk.to(np.float64)
    x = leaf(rng, 2, 5, 16)
    w = Tensor(rng.normal(size=(2, 5, 16)), dtype=np.float64)
    fn = lambda: (blk(x) * w).sum()
    assert check_gradients(fn, [x, *blk.parameters()], n_points=10, rng=rng) < TOL


def test_identity_matmul():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True, dtype=np.float64)
    out = T.matmul(x, np.eye(4))
    assert np.array_equal(out.data, x.data)
    out.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


@given(st.integers(1, 30), st.floats(-50, 50))
def test_softmax_constant_uniform(n, c):
    out = T.softmax(Tensor(np.full(n, c), dtype=np.float64))
    assert np.allclose(out.data, 1.0 / n)


def test_shared_subexpression_accumulates():
    rng = np.random.default_rng(1)
    x = leaf(rng, 4)
    y = T.exp(x)
    (y * y + y).sum().backward()
    shared = x.grad.copy()
    # duplicated subgraph: independent copies of exp(x)
    x2 = Tensor(x.data.copy(), requires_grad=True, dtype=np.float64)
    (T.exp(x2) * T.exp(x2) + T.exp(x2)).sum().backward()
    assert np.allclose(shared, x2.grad)
    assert np.allclose(shared, 2 * np.exp(2 * x.data) + np.exp(x.data))


def test_shape_errors_report_both_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 5)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        a + b
    with pytest.raises(ShapeError):
        T.matmul(a, b)


def test_no_grad_builds_no_graph():
    a = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = a * 2.0
    assert not out.requires_grad and out._prev == ()


def test_float32_ops_stay_float32():
    a = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    assert T.gelu(a * 0.5).dtype == np.float32


# -- optimizer -------------------------------------------------------------------


def _scalar(v):
    return Tensor(np.array([v]), requires_grad=True, dtype=np.float64)


def test_adamw_zero_gradient_no_decay_unchanged():
    p = _scalar(1.5)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == 1.5


def test_adamw_first_step_by_hand():
    p = _scalar(1.0)
    opt = AdamW([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8)
    p.grad = np.ones(1)
    opt.step()
    m = 0.1 * 1.0
    v = 0.001 * 1.0
    mhat, vhat = m / (1 - 0.9), v / (1 - 0.999)
    assert math.isclose(p.data[0], 1.0 - 0.1 * mhat / (math.sqrt(vhat) + 1e-8), rel_tol=0, abs_tol=1e-12)


def test_adamw_decoupled_decay():
    p = _scalar(2.0)
    opt = AdamW([p], lr=0.1, weight_decay=0.05)
    p.grad = np.zeros(1)
    opt.step()
    assert math.isclose(p.data[0], 2.0 * (1 - 0.1 * 0.05), abs_tol=1e-12)


def test_adamw_skips_nonfinite():
    p = _scalar(1.0)
    opt = AdamW([p], lr=0.1)
    p.grad = np.array([np.nan])
    assert opt.step() is False and p.data[0] == 1.0 and opt.state.skipped == 1


def test_cosine_schedule_points():
    assert cosine_warmup_lr(0, 5, 100, 1e-3) == 0.0
    assert cosine_warmup_lr(5, 5, 100, 1e-3) == 1e-3
    assert abs(cosine_warmup_lr(52.5, 5, 100, 1e-3) - 0.5e-3) < 1e-9
    assert abs(cosine_warmup_lr(100, 5, 100, 1e-3)) < 1e-15


@given(st.floats(0, 200), st.floats(0, 20), st.floats(21, 300))
def test_cosine_schedule_bounded(step, warmup, total):
    lr = cosine_warmup_lr(step, warmup, total, 1.0)
    assert -1e-12 <= lr <= 1.0 + 1e-12


def _with_grad(g):
    t = Tensor(np.zeros_like(g), requires_grad=True, dtype=np.float64)
    t.grad = np.array(g, dtype=np.float64)
    return t


def test_clip_below_cap_unchanged():
    t = _with_grad([0.006, 0.008])  # norm 0.01
    clip_gradients([t], 0.02)
    assert np.allclose(t.grad, [0.006, 0.008])


def test_clip_halves_when_twice_cap():
    t = _with_grad([0.024, 0.032])  # norm 0.04
    norm = clip_gradients([t], 0.02)
    assert math.isclose(norm, 0.04)
    assert np.allclose(t.grad, [0.012, 0.016]) and math.isclose(np.linalg.norm(t.grad), 0.02)


def test_clip_zero_gradients():
    t = _with_grad([0.0, 0.0])
    clip_gradients([t], 0.02)
    assert not t.grad.any()


def test_seeded_trajectories_identical():
    def run(seed):
        rng = np.random.default_rng(seed)
        lin = Linear(4, 2, rng)
        opt = AdamW(lin.parameters(), lr=0.01)
        x = Tensor(rng.normal(size=(8, 4)))
        for _ in range(5):
            opt.zero_grad()
            ((lin(x) * lin(x)).mean()).backward()
            opt.step()
        return [p.data.copy() for p in lin.parameters()]

    a, b = run(3), run(3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    params = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=(1,)).astype(np.float32)}
    save_checkpoint(tmp_path / "c.sgck", params, {"kind": "x", "n": 1}, {"m.0": np.ones(2, np.float32)})
    p, meta, opt = load_checkpoint(tmp_path / "c.sgck")
    assert meta == {"kind": "x", "n": 1} == read_meta(tmp_path / "c.sgck")
    assert np.array_equal(p["a.weight"], params["a.weight"]) and p["b"].shape == (1,)
    assert np.array_equal(opt["m.0"], np.ones(2))


def test_train_log_csv(tmp_path):
    log = TrainLog()
    log.add(epoch=0, split="train", loss=0.5, lr=1e-3)
    log.to_csv(tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,loss,map,lr" and lines[1].startswith("0,train,")

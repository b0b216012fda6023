import numpy as np
import pytest

from terrex import autograd as ag


def numeric_grad(f, arrays, weights, h=1e-6):
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            keep = a[i]
            a[i] = keep + h
            up = float((f(*arrays) * weights).sum())
            a[i] = keep - h
            dn = float((f(*arrays) * weights).sum())
            a[i] = keep
            g[i] = (up - dn) / (2 * h)
        out.append(g)
    return out


def check(op, *shapes, seed=0):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    ref = op(*[ag.const(a) for a in arrays]).data
    weights = rng.normal(size=ref.shape)
    params = [ag.param(a) for a in arrays]
    op(*params).backward(weights)
    numeric = numeric_grad(lambda *xs: op(*[ag.const(x) for x in xs]).data, arrays, weights)
    for p, n in zip(params, numeric):
        np.testing.assert_allclose(p.grad, n, rtol=1e-6, atol=1e-7)


def test_add_broadcast():
    check(ag.add, (4, 3), (3,))


def test_mul():
    check(ag.mul, (4, 3), (4, 3))


def test_scale():
    check(lambda a: ag.scale(a, -2.5), (3, 2))


def test_matmul_batched():
    check(ag.matmul, (2, 3, 4), (2, 4, 5))


def test_relu_away_from_zero():
    check(lambda a: ag.relu(ag.add(a, ag.const(np.sign(a.data) * 0.1))), (5, 4))


def test_reshape_transpose():
    check(lambda a: ag.transpose(ag.reshape(a, (2, 3, 4)), (1, 0, 2)), (6, 4))


def test_gather_rows_with_repeats():
    idx = np.array([[0, 2], [2, 2], [1, 0]])
    check(lambda a: ag.gather_rows(a, idx), (3, 4))


def test_max_axis():
    check(lambda a: ag.max_axis(a, axis=1), (4, 5, 3))


def test_softmax():
    check(lambda a: ag.softmax(a, axis=-1), (3, 6))


def test_layer_norm():
    check(lambda x, g, b: ag.layer_norm(x, g, b), (5, 6), (6,), (6,))


def test_affine():
    check(ag.affine, (5, 3), (3, 4), (4,))


def test_softmax_rows_sum_to_one():
    s = ag.softmax(ag.const(np.random.default_rng(0).normal(size=(7, 9)) * 50)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert (s >= 0).all()


def test_shared_node_accumulates():
    a = ag.param(np.array([2.0, 3.0]))
    ag.mul(a, a).backward(np.ones(2))
    assert a.grad.tolist() == [4.0, 6.0]


def test_kink_recording():
    with ag.record_kinks() as k:
        ag.relu(ag.const([-1.0, 1.0]))
        ag.max_axis(ag.const([[1.0, 3.0]]), axis=1)
    assert k[0].tolist() == [False, True]
    assert k[1].ravel().tolist() == [1]


def test_max_tie_routes_to_first():
    a = ag.param(np.array([[1.0, 1.0]]))
    ag.max_axis(a, axis=1).backward(np.ones(1))
    assert a.grad.tolist() == [[1.0, 0.0]]


@pytest.mark.parametrize("shape", [(3,), (2, 3)])
def test_const_has_no_grad(shape):
    c = ag.const(np.ones(shape))
    p = ag.param(np.ones(shape))
    ag.mul(c, p).backward(np.ones(shape))
    assert c.grad is None or not c.requires_grad

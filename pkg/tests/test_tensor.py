import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuromatch import tensor as T


def rand(shape, seed):
    return T.Tensor(np.random.default_rng(seed).normal(size=shape))


# ---------------------------------------------------------------------------
# forward values


def test_matmul_ones():
    a = T.Tensor(np.ones((2, 3)))
    b = T.Tensor(np.ones((3, 2)))
    out = T.matmul(a, b)
    assert out.shape == (2, 2)
    assert np.all(out.data == 3.0)


def test_softmax_uniform_row():
    out = T.softmax_rows(T.Tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, np.full((1, 3), 1.0 / 3.0), rtol=0, atol=1e-15)


def test_softmax_rows_sum_to_one():
    x = rand((7, 11), seed=3)
    y = T.softmax_rows(x).data
    np.testing.assert_allclose(y.sum(axis=1), np.ones(7), rtol=0, atol=1e-12)


def test_layer_norm_matches_scalar_reference():
    # independent scalar evaluation of (x - mean) / sqrt(var + eps)
    row = [1.0, 2.0, 3.0]
    mean = sum(row) / 3.0
    var = sum((v - mean) ** 2 for v in row) / 3.0
    expected = [(v - mean) / math.sqrt(var + 1e-5) for v in row]

    out = T.layer_norm(
        T.Tensor([row]), T.Tensor(np.ones((1, 3))), T.Tensor(np.zeros((1, 3)))
    )
    np.testing.assert_allclose(out.data[0], expected, rtol=1e-12)


def test_l2_normalize_rows_unit_norm():
    x = rand((5, 8), seed=4)
    y = T.l2_normalize_rows(x).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), np.ones(5), rtol=0, atol=1e-12)


def test_l2_normalize_zero_row_is_error():
    with pytest.raises(T.DomainError):
        T.l2_normalize_rows(T.Tensor(np.zeros((2, 3))))


def test_log_domain_error():
    with pytest.raises(T.DomainError):
        T.log(T.Tensor([1.0, 0.0]))


def test_shape_errors():
    with pytest.raises(T.ShapeError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))
    with pytest.raises(T.ShapeError):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 2))))
    with pytest.raises(T.ShapeError):
        T.slice_(T.Tensor(np.ones((4, 4))), (0, 5, 0, 2))


# ---------------------------------------------------------------------------
# backprop


def test_backprop_sum_of_squares():
    with T.Tape() as tape:
        x = tape.watch(T.Tensor([3.0]))
        loss = T.sum_all(T.mul(x, x))
        grads = T.backprop(tape, loss)
    np.testing.assert_allclose(grads[x.node_id].data, [6.0])


def test_backprop_sum_is_ones():
    with T.Tape() as tape:
        x = tape.watch(rand((3, 4), seed=0))
        grads = T.backprop(tape, T.sum_all(x))
    np.testing.assert_allclose(grads[x.node_id].data, np.ones((3, 4)))


def test_backprop_softmax_log_pipeline_matches_fd():
    def f(t):
        return T.sum_all(T.log(T.softmax_rows(t)))

    err = T.grad_check(f, rand((3, 4), seed=11), eps=1e-5)
    assert err < 1e-6


def test_backprop_root_must_be_scalar():
    with T.Tape() as tape:
        x = tape.watch(rand((2, 2), seed=1))
        y = T.mul(x, x)
        with pytest.raises(T.TapeError):
            T.backprop(tape, y)


def test_backprop_root_not_on_tape():
    with T.Tape() as tape:
        tape.watch(rand((2,), seed=1))
        with pytest.raises(T.TapeError):
            T.backprop(tape, T.Tensor(1.0))


def test_unreachable_nodes_get_zero_grad():
    with T.Tape() as tape:
        x = tape.watch(rand((3,), seed=2))
        y = tape.watch(rand((3,), seed=3))
        dead = T.mul(y, y)  # never feeds the root
        loss = T.sum_all(T.mul(x, x))
        grads = T.backprop(tape, loss)
    assert np.all(grads[dead.node_id].data == 0.0)
    assert np.all(grads[y.node_id].data == 0.0)
    assert len(grads) == len(tape.nodes)


def test_softmax_jacobian_rows_sum_to_zero():
    # grad of sum(softmax(x)) is J^T 1, which must vanish row-wise
    with T.Tape() as tape:
        x = tape.watch(rand((4, 6), seed=5))
        grads = T.backprop(tape, T.sum_all(T.softmax_rows(x)))
    assert np.abs(grads[x.node_id].data).max() < 1e-10
    # basis-seeded probe: one output coordinate at a time
    onehot = np.zeros((4, 6))
    onehot[2, 3] = 1.0
    with T.Tape() as tape:
        x = tape.watch(rand((4, 6), seed=5))
        s = T.sum_all(T.mul(T.softmax_rows(x), T.constant(onehot)))
        g = T.backprop(tape, s)[x.node_id].data
    assert abs(g[2].sum()) < 1e-10
    assert np.all(g[[0, 1, 3]] == 0.0)


def test_mixed_tape_and_constant_inputs():
    c = T.constant(np.full((2, 2), 2.0))
    with T.Tape() as tape:
        x = tape.watch(rand((2, 2), seed=6))
        grads = T.backprop(tape, T.sum_all(T.mul(x, c)))
    np.testing.assert_allclose(grads[x.node_id].data, c.data)


def test_tape_ids_topologically_ordered():
    with T.Tape() as tape:
        x = tape.watch(rand((2, 2), seed=7))
        y = T.mul(x, x)
        z = T.sum_all(T.add(y, x))
        T.backprop(tape, z)
    for nid, node in enumerate(tape.nodes):
        for iid in node.inputs:
            assert iid is None or iid < nid
    for nid, g in tape.grads.items():
        assert g.shape == tape.nodes[nid].shape


# ---------------------------------------------------------------------------
# finite-difference sweep over every op


def _fd_cases():
    r = np.random.default_rng
    cases = [
        ("matmul", lambda x: T.sum_all(T.matmul(x, T.constant(r(0).normal(size=(4, 3))))), (3, 4)),
        ("matmul_rhs", lambda x: T.sum_all(T.matmul(T.constant(r(1).normal(size=(3, 3))), x)), (3, 4)),
        ("add_bcast", lambda x: T.sum_all(T.mul(T.add(x, T.constant(r(2).normal(size=(1, 4)))), T.constant(r(3).normal(size=(3, 4))))), (3, 4)),
        ("mul_col_bcast", lambda x: T.sum_all(T.mul(T.constant(r(4).normal(size=(3, 4))), T.mul(x, T.constant(r(5).normal(size=(3, 1)))))), (3, 4)),
        ("scale", lambda x: T.sum_all(T.scale(x, -1.7)), (3, 4)),
        ("transpose2d", lambda x: T.sum_all(T.mul(T.transpose2d(x), T.constant(r(6).normal(size=(4, 3))))), (3, 4)),
        ("softmax_rows", lambda x: T.sum_all(T.mul(T.softmax_rows(x), T.constant(r(7).normal(size=(3, 4))))), (3, 4)),
        ("layer_norm", lambda x: T.sum_all(T.mul(T.layer_norm(x, T.constant(r(8).normal(size=(1, 4))), T.constant(r(9).normal(size=(1, 4)))), T.constant(r(10).normal(size=(3, 4))))), (3, 4)),
        ("gelu", lambda x: T.sum_all(T.mul(T.gelu(x), T.constant(r(11).normal(size=(3, 4))))), (3, 4)),
        ("relu", lambda x: T.sum_all(T.mul(T.relu(x), T.constant(r(12).normal(size=(3, 4))))), (3, 4)),
        ("sigmoid", lambda x: T.sum_all(T.mul(T.sigmoid(x), T.constant(r(13).normal(size=(3, 4))))), (3, 4)),
        ("exp", lambda x: T.sum_all(T.mul(T.exp(x), T.constant(r(14).normal(size=(3, 4))))), (3, 4)),
        ("mean_all", lambda x: T.mean_all(T.mul(x, x)), (3, 4)),
        ("l2_normalize_rows", lambda x: T.sum_all(T.mul(T.l2_normalize_rows(x), T.constant(r(15).normal(size=(3, 4))))), (3, 4)),
        ("concat_last_dim", lambda x: T.sum_all(T.mul(T.concat_last_dim([x, T.scale(x, 2.0)]), T.constant(r(16).normal(size=(3, 8))))), (3, 4)),
        ("slice", lambda x: T.sum_all(T.mul(T.slice_(x, (1, 3, 0, 2)), T.constant(r(17).normal(size=(2, 2))))), (3, 4)),
        ("reshape", lambda x: T.sum_all(T.mul(T.reshape(x, (4, 3)), T.constant(r(18).normal(size=(4, 3))))), (3, 4)),
        ("gather", lambda x: T.sum_all(T.mul(T.gather(x, np.array([[0, 2], [2, 5]])), T.constant(r(19).normal(size=(2, 2))))), (6,)),
    ]
    return cases


@pytest.mark.parametrize("name,f,shape", _fd_cases(), ids=[c[0] for c in _fd_cases()])
def test_primitive_gradients_match_finite_differences(name, f, shape):
    for trial in range(20):
        point = T.Tensor(np.random.default_rng(100 + trial).normal(size=shape))
        if name == "relu":
            # keep probes away from the kink
            point = T.Tensor(np.where(np.abs(point.data) < 1e-3, 0.1, point.data))
        err = T.grad_check(f, point, eps=1e-5)
        assert err < 1e-4, f"{name} trial {trial}: max rel err {err}"


def test_log_gradient_on_positive_domain():
    f = lambda x: T.sum_all(T.log(x))
    point = T.Tensor(np.random.default_rng(42).uniform(0.5, 2.0, size=(3, 4)))
    assert T.grad_check(f, point, eps=1e-6) < 1e-4


# ---------------------------------------------------------------------------
# grad_check contract


def test_grad_check_quadratic_is_tight():
    f = lambda x: T.sum_all(T.mul(x, x))
    err = T.grad_check(f, rand((5,), seed=21), eps=1e-5)
    assert err < 1e-8


def test_grad_check_constant_function():
    # constant output never lands on the tape; analytic grads are zero
    f = lambda x: T.constant(1.5)
    assert T.grad_check(f, rand((3,), seed=22)) == 0.0


def test_grad_check_constant_via_zero_scale():
    f = lambda x: T.sum_all(T.scale(x, 0.0))
    assert T.grad_check(f, rand((3,), seed=23)) == 0.0


def test_grad_check_rejects_bad_eps_and_nonscalar():
    f = lambda x: T.sum_all(x)
    with pytest.raises(ValueError):
        T.grad_check(f, rand((2,), seed=0), eps=0.0)
    with pytest.raises(ValueError):
        T.grad_check(lambda x: T.mul(x, x), rand((2,), seed=0))


# ---------------------------------------------------------------------------
# determinism + dispatch


def test_replay_is_bit_identical():
    def run():
        with T.Tape() as tape:
            x = tape.watch(T.Tensor(np.random.default_rng(9).normal(size=(6, 6))))
            y = T.softmax_rows(T.matmul(x, T.transpose2d(x)))
            loss = T.mean_all(T.mul(y, y))
            g = T.backprop(tape, loss)[x.node_id].data
        return loss.data.copy(), g.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1.tobytes() == l2.tobytes()
    assert g1.tobytes() == g2.tobytes()


def test_apply_primitive_dispatch():
    out = T.apply_primitive("matmul", [T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 2)))])
    assert np.all(out.data == 3.0)
    out = T.apply_primitive("scale", [T.Tensor([2.0])], factor=3.0)
    assert out.data[0] == 6.0
    out = T.apply_primitive("slice", [T.Tensor(np.arange(6.0))], bounds=(1, 4))
    np.testing.assert_allclose(out.data, [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        T.apply_primitive("conv2d", [])


@settings(max_examples=30)
@given(st.integers(min_value=1, max_value=6), st.integers(min_value=1, max_value=6), st.integers(0, 2**31 - 1))
def test_softmax_rows_property(rows, cols, seed):
    x = T.Tensor(np.random.default_rng(seed).normal(scale=3.0, size=(rows, cols)))
    y = T.softmax_rows(x).data
    assert np.all(y > 0)
    np.testing.assert_allclose(y.sum(axis=1), np.ones(rows), atol=1e-12)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protoseg import numerics as nx
from protoseg.numerics import ContractError, ShapeError, SparseMatrix

from conftest import numeric_grad, rel_err, tape_grad

PRIMITIVE_TOL = 1e-5


def _check(build, *arrays, tol=PRIMITIVE_TOL):
    grads, scalar = tape_grad(build, *arrays)
    for i, a in enumerate(arrays):
        fd = numeric_grad(scalar(i), a)
        assert rel_err(grads[i], fd) <= tol, f"argument {i}"


# -- forward examples -----------------------------------------------------------

def test_matmul_example():
    a = nx.Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = nx.Tensor([[5.0], [6.0]])
    np.testing.assert_array_equal(nx.matmul(a, b).data, [[17.0], [39.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        nx.matmul(nx.Tensor(np.ones((2, 3))), nx.Tensor(np.ones((2, 3))))


def test_leaky_relu_example():
    out = nx.leaky_relu(nx.Tensor([-1.0, 0.0, 2.0]), 0.2).data
    np.testing.assert_allclose(out, [-0.2, 0.0, 2.0])


def test_leaky_relu_rejects_bad_slope():
    with pytest.raises(ContractError):
        nx.leaky_relu(nx.Tensor([1.0]), 1.0)


def test_softmax_shift_invariant_and_stable():
    x = np.array([[1000.0, 1001.0, 1002.0]])
    s = nx.softmax_rows(nx.Tensor(x)).data
    np.testing.assert_allclose(s, nx.softmax_rows(nx.Tensor(x - 1000)).data)
    assert np.isfinite(s).all()


def test_cross_entropy_uniform_logits():
    loss = nx.cross_entropy(nx.Tensor(np.zeros((4, 3))), np.array([0, 1, 2, 0]))
    assert loss.data == pytest.approx(np.log(3))


def test_cross_entropy_label_range():
    with pytest.raises(ContractError):
        nx.cross_entropy(nx.Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_nonfinite_leaf_rejected():
    with pytest.raises(ContractError):
        nx.Tensor([1.0, np.nan])


def test_rsqrt_or_zero_isolated():
    np.testing.assert_array_equal(nx.rsqrt_or_zero(nx.Tensor([4.0, 0.0])).data, [0.5, 0.0])


def test_segment_mean_empty_segment():
    with pytest.raises(ContractError):
        nx.segment_mean(nx.Tensor(np.ones((2, 2))), np.array([0, 0]), 2)


def test_gather_add_example():
    centre = nx.Tensor([[1.0], [2.0]])
    nbr = nx.Tensor([[10.0], [20.0], [30.0]])
    out = nx.gather_add(centre, nbr, np.array([[0, 2], [1, 1]]))
    np.testing.assert_array_equal(out.data[..., 0], [[11.0, 31.0], [22.0, 22.0]])


def test_gather_add_index_range():
    with pytest.raises(ContractError):
        nx.gather_add(nx.Tensor(np.ones((1, 1))), nx.Tensor(np.ones((2, 1))), np.array([[2]]))


def test_max_axis_routes_gradient_to_first_argmax():
    tape = nx.Tape()
    x = tape.parameter(np.array([[[1.0], [3.0], [3.0]]]), "x")
    g = nx.backward(tape, nx.sum_all(nx.max_axis(x, 1)))["x"]
    np.testing.assert_array_equal(g[0, :, 0], [0.0, 1.0, 0.0])


def test_backward_unused_parameter_gets_zeros():
    tape = nx.Tape()
    a = tape.parameter(np.ones(3), "a")
    tape.parameter(np.ones(2), "b")
    g = nx.backward(tape, nx.sum_all(a))
    np.testing.assert_array_equal(g["b"], np.zeros(2))


def test_backward_requires_scalar_on_same_tape():
    tape = nx.Tape()
    a = tape.parameter(np.ones(3), "a")
    with pytest.raises(ContractError):
        nx.backward(tape, a)
    with pytest.raises(ContractError):
        nx.backward(nx.Tape(), nx.sum_all(a))


def test_constants_do_not_record():
    out = nx.add(nx.Tensor([1.0]), nx.Tensor([2.0]))
    assert out.tape is None


# -- gradients against central differences --------------------------------------

R = np.random.default_rng(7)


def _r(*shape):
    return R.normal(size=shape)


PRIMITIVE_CASES = [
    ("add_broadcast", lambda a, b: nx.add(a, b), (_r(3, 4), _r(1, 4))),
    ("sub", lambda a, b: nx.sub(a, b), (_r(3, 4), _r(3, 4))),
    ("mul_broadcast", lambda a, b: nx.mul(a, b), (_r(3, 4), _r(3, 1))),
    ("scale", lambda a: nx.scale(a, -2.5), (_r(2, 3),)),
    ("matmul", lambda a, b: nx.matmul(a, b), (_r(3, 4), _r(4, 2))),
    ("leaky_relu", lambda a: nx.leaky_relu(a, 0.2), (_r(5, 3) + 0.05,)),
    ("exp", lambda a: nx.exp(a), (_r(3, 3),)),
    ("rsqrt_or_zero", lambda a: nx.rsqrt_or_zero(a), (np.abs(_r(6)) + 0.5,)),
    ("softmax_rows", lambda a: nx.softmax_rows(a), (_r(4, 5),)),
    ("log_softmax_rows", lambda a: nx.log_softmax_rows(a), (_r(4, 5),)),
    ("cross_entropy", lambda a: nx.cross_entropy(a, np.array([0, 2, 1, 2])), (_r(4, 3),)),
    ("sum_all", lambda a: nx.sum_all(a), (_r(3, 2),)),
    ("mean_all", lambda a: nx.mean_all(a), (_r(3, 2),)),
    ("max_axis_3d", lambda a: nx.max_axis(a, 1), (_r(4, 5, 3),)),
    ("max_axis_2d", lambda a: nx.max_axis(a, 0), (_r(4, 3),)),
    ("reshape", lambda a: nx.reshape(a, (6, 2)), (_r(3, 4),)),
    ("transpose", lambda a: nx.transpose(a), (_r(3, 4),)),
    ("concat", lambda a, b: nx.concat([a, b], axis=1), (_r(3, 2), _r(3, 4))),
    ("take", lambda a: nx.take(a, np.array([[0, 2], [2, 1]])), (_r(3, 4),)),
    ("gather_add", lambda c, n: nx.gather_add(c, n, np.array([[0, 3], [3, 3], [1, 2]])), (_r(3, 2), _r(4, 2))),
    ("segment_sum", lambda a: nx.segment_sum(a, np.array([1, 0, 1, 2]), 3), (_r(4, 2),)),
    ("segment_mean", lambda a: nx.segment_mean(a, np.array([1, 0, 1, 2]), 3), (_r(4, 2),)),
    ("sqdist_matrix", lambda a, b: nx.sqdist_matrix(a, b), (_r(4, 3), _r(5, 3))),
    ("pair_sqdist", lambda a: nx.pair_sqdist(a, np.array([0, 1, 2, 3]), np.array([1, 0, 3, 3])), (_r(4, 3),)),
]


@pytest.mark.parametrize("name,build,args", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_gradient(name, build, args):
    _check(build, *args)


def _sym_matrix(rng, n, density=0.4):
    mask = np.triu(rng.uniform(size=(n, n)) < density, 1)
    w = np.where(mask, rng.uniform(0.1, 1.0, (n, n)), 0.0)
    w = w + w.T
    d = w.sum(1)
    d[d == 0] = 1.0
    s = w / np.sqrt(d[:, None] * d[None, :])
    r, c = np.nonzero(s)
    return r, c, s[r, c]


def solve_spd_case():
    """``(build, args)`` differentiating the solve through S's values and Y."""
    rng = np.random.default_rng(3)
    n = 6
    r, c, v = _sym_matrix(rng, n)
    y = rng.normal(size=(n, 2))
    # perturb S symmetrically: entry (i, j) and (j, i) share one free value
    pos = {(i, j): e for e, (i, j) in enumerate(zip(r, c)) if i < j}
    free = {key: k for k, key in enumerate(pos)}
    share = np.array([free[(min(i, j), max(i, j))] for i, j in zip(r, c)])
    u0 = np.array([v[e] for e in pos.values()])

    def build(u, Y):
        return nx.solve_spd(SparseMatrix(n, n, r, c, nx.take(u, share)), 0.9, Y)

    return build, (u0, y)


def test_solve_spd_gradient_values_and_rhs():
    build, args = solve_spd_case()
    _check(build, *args)


@pytest.mark.parametrize("method", ["dense", "cg"])
def test_solve_spd_matches_dense_inverse(method):
    rng = np.random.default_rng(11)
    n = 30
    r, c, v = _sym_matrix(rng, n, 0.2)
    S = SparseMatrix(n, n, r, c, v)
    y = rng.normal(size=(n, 3))
    z = nx.solve_spd(S, 0.99, y, method=method).data
    ref = np.linalg.solve(np.eye(n) - 0.99 * S.to_dense(), y)
    np.testing.assert_allclose(z, ref, atol=1e-7)


def test_solve_spd_two_node_closed_form():
    S = SparseMatrix(2, 2, [0, 1], [1, 0], [1.0, 1.0])
    z = nx.solve_spd(S, 0.99, np.array([[1.0], [0.0]])).data
    # (I - aS)^-1 = [[1, a], [a, 1]] / (1 - a^2)
    np.testing.assert_allclose(z, [[1 / (1 - 0.99**2)], [0.99 / (1 - 0.99**2)]], rtol=1e-12)


def test_solve_spd_contracts():
    S = SparseMatrix(2, 2, [0], [1], [1.0])
    with pytest.raises(ContractError):
        nx.solve_spd(S, 0.5, np.ones(2))
    sym = SparseMatrix(2, 2, [0, 1], [1, 0], [1.0, 1.0])
    with pytest.raises(ContractError):
        nx.solve_spd(sym, 1.0, np.ones(2))


def test_sparse_matrix_rejects_unsorted_or_duplicate():
    with pytest.raises(ContractError):
        SparseMatrix(2, 2, [1, 0], [0, 1], [1.0, 1.0])
    with pytest.raises(ContractError):
        SparseMatrix(2, 2, [0, 0], [1, 1], [1.0, 1.0])
    m = SparseMatrix.from_triples(2, 2, [1, 0], [0, 1], [2.0, 3.0])
    np.testing.assert_array_equal(m.to_dense(), [[0, 3], [2, 0]])


# -- Adam -----------------------------------------------------------------------

def test_adam_first_step_moves_by_lr_times_sign():
    # bias correction makes the first update exactly lr * g / (|g| + eps)
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, -3.0])}
    new, state = nx.adam_step(p, g, nx.AdamState(), 0.1)
    np.testing.assert_allclose(new["w"], [0.9, -1.9], atol=1e-7)
    assert state.step == 1
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_groups_and_untouched_parameters():
    p = {"a": np.zeros(1), "b": np.zeros(1), "c": np.ones(1)}
    g = {"a": np.ones(1), "b": np.ones(1)}
    new, state = nx.adam_step(p, g, nx.AdamState(), {"a": 1e-3, "b": 1e-2})
    np.testing.assert_allclose(new["a"], [-1e-3], rtol=1e-6)
    np.testing.assert_allclose(new["b"], [-1e-2], rtol=1e-6)
    assert new["c"] is p["c"] and "c" not in state.m


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(5)
    w = rng.normal(size=3)
    state = nx.AdamState()
    params = {"w": w.copy()}
    m = v = np.zeros(3)
    ref = w.copy()
    for t in range(1, 6):
        g = rng.normal(size=3)
        params, state = nx.adam_step(params, {"w": g}, state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(params["w"], ref, rtol=1e-12)


# -- properties -----------------------------------------------------------------

finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = nx.softmax_rows(nx.Tensor(x)).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 4)), elements=finite),
       st.integers(1, 4), st.integers(0, 2**31))
def test_segment_sum_matches_bincount(x, n_seg, seed):
    seg = np.random.default_rng(seed).integers(0, n_seg, len(x))
    out = nx.segment_sum(nx.Tensor(x), seg, n_seg).data
    ref = np.stack([x[seg == s].sum(axis=0) for s in range(n_seg)])
    np.testing.assert_allclose(out, ref, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4)), elements=finite),
       arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4)), elements=finite))
def test_sqdist_matrix_nonnegative_and_matches_norms(a, b):
    if a.shape[1] != b.shape[1]:
        b = np.resize(b, (len(b), a.shape[1]))
    d = nx.sqdist_matrix(nx.Tensor(a), nx.Tensor(b)).data
    ref = ((a[:, None] - b[None]) ** 2).sum(-1)
    assert np.all(d >= 0)
    np.testing.assert_allclose(d, ref, rtol=1e-12, atol=1e-12)

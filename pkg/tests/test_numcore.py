import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ngcg import numcore as nc
from ngcg.errors import ContractError, DimensionError, NumericError


def rand(rng, *shape):
    return rng.uniform(-1.0, 1.0, shape)


# -- forward examples --------------------------------------------------------

def test_matmul_identity():
    out = nc.forward_op("matmul", [nc.const([[1, 2], [3, 4]]), nc.const(np.eye(2))])
    assert np.array_equal(out.value, [[1, 2], [3, 4]])


def test_softmax_symmetric_row():
    assert np.array_equal(nc.forward_op("softmax-rows", [nc.const([[0, 0]])]).value, [[0.5, 0.5]])


def test_l2_normalize_345():
    out = nc.forward_op("l2-normalize-rows", [nc.const([[3, 4]])]).value
    np.testing.assert_allclose(out, [[0.6, 0.8]], rtol=0, atol=1e-15)


def test_shape_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        nc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        nc.add(np.ones((2, 3)), np.ones((3, 2)))


def test_non_finite_input_rejected():
    with pytest.raises(NumericError):
        nc.const([[1.0, np.nan]])
    with pytest.raises(NumericError):
        nc.exp(nc.const([[1000.0]]))


def test_unknown_operator():
    with pytest.raises(ContractError):
        nc.forward_op("conv2d", [])


# -- backward examples -------------------------------------------------------

def test_dot_self_gradient():
    x = nc.param([[1.0, 2.0]])
    grads = nc.backward(nc.dot(x, x))
    np.testing.assert_array_equal(grads[x], [[2.0, 4.0]])


def test_zero_scale_gives_zero_gradient():
    x = nc.param([[1.0, -2.0, 3.0]])
    grads = nc.backward(nc.total(nc.scale(x, 0.0)))
    np.testing.assert_array_equal(grads[x], np.zeros((1, 3)))


def test_non_scalar_loss_rejected():
    with pytest.raises(ContractError):
        nc.backward(nc.param(np.ones((2, 2))))


def test_unreachable_parameter_gets_exact_zero():
    x, y = nc.param([[1.0, 2.0]]), nc.param([[5.0, 6.0]])
    grads = nc.backward(nc.dot(x, x), [x, y])
    assert np.array_equal(grads[y], np.zeros((1, 2)))


def test_backward_is_linear():
    rng = np.random.default_rng(3)
    w0 = rand(rng, 4, 3)
    xv = rand(rng, 2, 4)

    def f(w):
        return nc.total(nc.gelu(nc.matmul(nc.const(xv), w)))

    def g(w):
        return nc.total(nc.exp(nc.scale(nc.matmul(nc.const(xv), w), 0.5)))

    wa = nc.param(w0)
    ga = nc.backward(f(wa))[wa]
    wb = nc.param(w0)
    gb = nc.backward(g(wb))[wb]
    wc = nc.param(w0)
    gc = nc.backward(nc.add(f(wc), g(wc)))[wc]
    np.testing.assert_allclose(gc, ga + gb, rtol=1e-14, atol=1e-15)


def test_random_three_layer_composite_matches_finite_differences():
    rng = np.random.default_rng(11)
    x = rand(rng, 5, 4)
    params = [rand(rng, 4, 6), rand(rng, 6, 6), rand(rng, 6, 3)]

    def f(p):
        h = nc.gelu(nc.matmul(nc.const(x), p[0]))
        h = nc.softmax_rows(nc.matmul(h, p[1]))
        return nc.total(nc.log(nc.exp(nc.matmul(h, p[2]))))

    report = nc.gradcheck(f, params, step=1e-5, tol=1e-4)
    assert report.passed, report.lines()


# -- per-operator finite-difference checks ----------------------------------

def _op_cases(rng):
    a34, b34, b43 = rand(rng, 3, 4), rand(rng, 3, 4), rand(rng, 4, 3)
    row4, s11 = rand(rng, 1, 4), rand(rng, 1, 1)
    w = rand(rng, 1, 4)
    pos = rng.uniform(0.2, 2.0, (3, 4))
    ids = np.array([0, 2, 2, 4, 1])
    member = np.array([[1, 1, 0], [0, 1, 1]], dtype=float)
    return {
        "matmul": (lambda p: nc.matmul(p[0], p[1]), [a34, b43]),
        "add": (lambda p: nc.add(p[0], p[1]), [a34, b34]),
        "add-row-broadcast": (lambda p: nc.add(p[0], p[1]), [a34, row4]),
        "scale": (lambda p: nc.scale(p[0], -1.7), [a34]),
        "elementwise-mul": (lambda p: nc.mul(p[0], p[1]), [a34, b34]),
        "elementwise-mul-scalar": (lambda p: nc.mul(p[0], p[1]), [a34, s11]),
        "softmax-rows": (lambda p: nc.softmax_rows(p[0]), [a34]),
        "log-softmax-rows": (lambda p: nc.log_softmax_rows(p[0]), [a34]),
        "layernorm": (lambda p: nc.layernorm(p[0], p[1], p[2]), [a34, row4, rand(rng, 1, 4)]),
        "gelu": (lambda p: nc.gelu(p[0]), [a34]),
        "embedding-lookup": (lambda p: nc.embedding_lookup(p[0], ids), [rand(rng, 5, 4)]),
        "masked-mean-rows": (lambda p: nc.masked_mean_rows(p[0], member), [a34]),
        "concat-rows": (lambda p: nc.concat_rows([p[0], p[1]]), [a34, row4]),
        "slice-row": (lambda p: nc.slice_rows(p[0], [2, 0, 2]), [a34]),
        "dot": (lambda p: nc.dot(p[0], p[1]), [a34, b34]),
        "log": (lambda p: nc.log(p[0]), [pos]),
        "exp": (lambda p: nc.exp(p[0]), [a34]),
        "l2-normalize-rows": (lambda p: nc.l2_normalize_rows(p[0]), [a34]),
        "transpose": (lambda p: nc.transpose(p[0]), [a34]),
        "sum": (lambda p: nc.total(p[0]), [a34]),
    }, w


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("op", list(_op_cases(np.random.default_rng(0))[0]))
def test_operator_gradients(op, seed):
    rng = np.random.default_rng(seed)
    cases, _ = _op_cases(rng)
    build, params = cases[op]
    # weight the output so every entry contributes differently to the scalar
    probe = {}

    def f(p):
        out = build(p)
        if "w" not in probe:
            probe["w"] = rng.uniform(-1, 1, out.shape)
        return nc.dot(out, nc.const(probe["w"]))

    report = nc.gradcheck(f, params, step=1e-5, tol=1e-4)
    assert report.passed, report.lines()


def test_every_registered_operator_is_covered():
    covered = {name.split("-row-broadcast")[0].split("-scalar")[0]
               for name in _op_cases(np.random.default_rng(0))[0]}
    assert set(nc.OPS) <= covered


def test_faulty_backward_fails_gradcheck():
    rng = np.random.default_rng(1)
    params = [rand(rng, 3, 4)]

    def f(p):
        return nc.dot(nc.gelu(p[0]), nc.const(np.ones((3, 4))))

    with nc.faulty_backward("gelu", 2.0):
        bad = nc.gradcheck(f, params)
    assert not bad.passed
    assert bad.checks[0].max_rel_error > 0.3
    assert nc.gradcheck(f, params).passed


def test_gradcheck_dot_passes_and_rejects_bad_arguments():
    assert nc.gradcheck(lambda p: nc.dot(p[0], p[0]), [np.array([[1.0, 2.0]])]).passed
    with pytest.raises(ContractError):
        nc.gradcheck(lambda p: p[0], [np.ones((2, 2))])
    with pytest.raises(ContractError):
        nc.gradcheck(lambda p: nc.total(p[0]), [np.ones((2, 2))], step=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(n, m, seed):
    x = np.random.default_rng(seed).normal(0, 10, (n, m))
    y = nc.softmax_rows(x).value
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


def test_masked_softmax_ignores_masked_entries_exactly():
    scores = np.array([[0.3, -0.2, 5.0, 1.0]])
    bias = np.array([[0.0, 0.0, -1e30, 0.0]])
    y = nc.softmax_rows(nc.add(scores, bias)).value
    assert y[0, 2] == 0.0
    ref = nc.softmax_rows(scores[:, [0, 1, 3]]).value
    np.testing.assert_allclose(y[:, [0, 1, 3]], ref, rtol=0, atol=1e-16)

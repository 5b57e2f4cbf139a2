import numpy as np
import pytest

from melanchor import tensor as tc
from melanchor.gradcheck import grad_check


def _store(seed=0, **arrays):
    st = tc.ParamStore(seed)
    for k, v in arrays.items():
        st.add(k, v)
    return st


def test_softmax_symmetry():
    out = tc.softmax(tc.constant([0.0, 0.0]))
    assert np.allclose(out.value, [0.5, 0.5], atol=0)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    x = tc.constant(rng.normal(size=(7, 5)) * 30)
    s = tc.softmax(x, axis=-1)
    assert np.all(s.value >= 0)
    assert np.allclose(s.value.sum(axis=-1), 1.0, atol=1e-12)


def test_matmul_shape_contract():
    a = tc.constant(np.ones((2, 3)))
    b = tc.constant(np.ones((3, 4)))
    assert tc.matmul(a, b).shape == (2, 4)


def test_matmul_shape_mismatch_raises():
    with pytest.raises(tc.ShapeError):
        tc.matmul(tc.constant(np.ones((2, 3))), tc.constant(np.ones((4, 5))))


def test_conv1d_output_length():
    # len 10, kernel 2, stride 2, pad 0 -> hand-count of strided windows = 5
    x = tc.constant(np.arange(10, dtype=float).reshape(1, 10))
    w = tc.constant(np.ones((1, 1, 2)))
    out = tc.conv1d(x, w, stride=2)
    assert out.shape == (1, 5)
    expected = np.array([[0 + 1, 2 + 3, 4 + 5, 6 + 7, 8 + 9]], dtype=float)
    assert np.allclose(out.value, expected)


def test_backward_sum_is_ones():
    st = _store(p=np.array([1.0, 2.0, 3.0]))
    loss = tc.tsum(st["p"])
    loss.backward()
    assert np.allclose(st["p"].grad, np.ones(3))


def test_backward_at_minimum_is_zero():
    c = np.array([0.5, -1.0, 2.0])
    st = _store(p=c.copy())
    loss = tc.tmean(tc.square(tc.sub(st["p"], tc.constant(c))))
    loss.backward()
    assert np.allclose(st["p"].grad, 0.0)


def test_backward_requires_scalar():
    st = _store(p=np.ones((2, 2)))
    with pytest.raises(tc.ShapeError):
        tc.add(st["p"], 1.0).backward()


def test_backward_accumulates_without_reset():
    st = _store(p=np.array([2.0]))
    loss = tc.tsum(st["p"])
    loss.backward()
    loss2 = tc.tsum(st["p"])
    loss2.backward()
    assert np.allclose(st["p"].grad, [2.0])


def test_gradcheck_quadratic_exact():
    st = _store(p=np.array([1.0, -2.0, 0.3]))

    def build(params):
        return tc.tsum(tc.square(params["p"]))

    rep = grad_check(build, st, eps=1e-5)
    assert rep.max_rel_err < 1e-8


def test_gradcheck_dead_parameter():
    st = _store(p=np.array([1.0]), dead=np.array([5.0]))

    def build(params):
        return tc.tsum(tc.square(params["p"]))

    rep = grad_check(build, st)
    assert rep.per_param["dead"] == 0.0


def test_gradcheck_rejects_nondeterministic_builder():
    st = _store(p=np.array([1.0]))
    state = {"n": 0}

    def build(params):
        state["n"] += 1
        return tc.tsum(tc.mul(params["p"], float(state["n"])))

    with pytest.raises(RuntimeError):
        grad_check(build, st)


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_composite_ops(seed):
    rng = np.random.default_rng(seed)
    st = _store(
        a=rng.normal(size=(3, 4)),
        b=rng.normal(size=(4, 5)),
        c=rng.normal(size=(3, 5)),
        g=rng.normal(size=(5,)) * 0.1 + 1.0,
        bta=rng.normal(size=(5,)) * 0.1,
    )

    def build(params):
        h = tc.matmul(params["a"], params["b"])
        h = tc.layer_norm(h, params["g"], params["bta"])
        h = tc.gelu(tc.add(h, params["c"]))
        h = tc.softmax(h, axis=-1)
        return tc.tmean(tc.square(tc.sub(h, 0.1)))

    rep = grad_check(build, st, eps=1e-5)
    assert rep.max_rel_err < 1e-4, rep


@pytest.mark.parametrize("seed", range(10))
def test_gradcheck_conv_and_misc(seed):
    rng = np.random.default_rng(100 + seed)
    st = _store(
        x=rng.normal(size=(3, 12)),
        w=rng.normal(size=(4, 3, 3)) * 0.5,
        b=rng.normal(size=(4,)),
        dw=rng.normal(size=(4, 1, 5)) * 0.5,
    )

    def build(params):
        h = tc.conv1d(params["x"], params["w"], bias=params["b"], stride=1, pad=1)
        h = tc.conv1d(h, params["dw"], stride=1, dilation=2, pad=4, groups=4)
        h = tc.tanh(h)
        h = tc.glu(tc.concat([h, tc.sin(h)], axis=0), axis=0)
        return tc.tmean(tc.square(h))

    rep = grad_check(build, st, eps=1e-5)
    assert rep.max_rel_err < 1e-4, rep


def test_gradcheck_gather_and_masked_select():
    rng = np.random.default_rng(7)
    st = _store(tbl=rng.normal(size=(2, 6)), z=rng.normal(size=(5, 3)))
    idx = np.array([[0, 5, 2], [1, 1, 4], [3, 0, 2]])
    mask = np.array([True, False, True, True, False])

    def build(params):
        d = tc.index_select_last(params["tbl"], idx)
        zs = tc.masked_select_rows(params["z"], mask)
        return tc.add(tc.tsum(tc.square(d)), tc.tmean(tc.exp(zs)))

    rep = grad_check(build, st, eps=1e-6)
    assert rep.max_rel_err < 1e-4, rep


def test_determinism_bit_identical():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 4))

    def run():
        t = tc.constant(x)
        return tc.softmax(tc.matmul(t, tc.transpose(t)), axis=-1).value

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_forward_op_dispatch():
    out = tc.forward_op("softmax", [tc.constant([0.0, 0.0])])
    assert np.allclose(out.value, [0.5, 0.5])
    with pytest.raises(ValueError):
        tc.forward_op("nope", [])


def test_param_store_rejects_duplicates():
    st = tc.ParamStore()
    st.add("w", np.zeros(2))
    with pytest.raises(KeyError):
        st.add("w", np.zeros(2))


@pytest.mark.parametrize("seed", range(100))
def test_property_random_op_grads(seed):
    # randomized shapes across the supported op set, finite-difference checked
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(2, 6))
    m = int(rng.integers(2, 6))
    st = _store(x=rng.normal(size=(n, m)))
    ops = [tc.exp, tc.tanh, tc.sigmoid, tc.gelu, tc.sin, tc.square,
           lambda t: tc.softmax(t, axis=-1), lambda t: tc.log_softmax(t, axis=0),
           lambda t: tc.log(tc.add(tc.square(t), 1.0)),
           lambda t: tc.sqrt(tc.add(tc.square(t), 0.5)),
           tc.softplus]
    f = ops[int(rng.integers(len(ops)))]

    def build(params):
        return tc.tmean(tc.square(f(params["x"])))

    rep = grad_check(build, st, eps=1e-5)
    assert rep.max_rel_err < 1e-4, rep

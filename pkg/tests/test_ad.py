import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wzlab import ad
from wzlab.ad import DenseNetSpec, ParamStore


def naive_forward(ws, bs, x, slope):
    # plain loops, independent of the vectorised implementation
    h = list(x)
    for layer, (w, b) in enumerate(zip(ws, bs)):
        out = []
        for j in range(w.shape[1]):
            s = b[j]
            for i in range(w.shape[0]):
                s += h[i] * w[i, j]
            out.append(s)
        if layer < len(ws) - 1:
            out = [v if v > 0 else slope * v for v in out]
        h = out
    return np.array(h)


def test_store_layout_is_contiguous_and_covering():
    store = ParamStore({"a": np.ones((2, 3)), "b": np.zeros(4), "c": np.array(5.0)})
    assert store.values.size == store.grads.size == 11
    spans = sorted((lo, hi) for lo, hi, _ in store.layout.values())
    assert spans[0][0] == 0 and spans[-1][1] == 11
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    store.view("b")[...] = 7.0
    assert np.all(store.values[6:10] == 7.0)


def test_forward_zero_net_gives_zero():
    spec = DenseNetSpec((3, 5, 2))
    arrays = {k: np.zeros_like(v) for k, v in ad.init_dense(spec, "n", np.random.default_rng(0)).items()}
    out = ad.forward(spec, ParamStore(arrays), "n", np.array([1.0, -2.0, 3.0]))
    assert np.array_equal(out, np.zeros(2))


def test_forward_identity_layer():
    spec = DenseNetSpec((1, 1))
    store = ParamStore({"n.0.w": np.eye(1), "n.0.b": np.zeros(1)})
    assert ad.forward(spec, store, "n", np.array([1.5])) == pytest.approx([1.5])


def test_forward_matches_naive_loops():
    rng = np.random.default_rng(3)
    spec = DenseNetSpec((2, 16, 1), 0.2)
    arrays = ad.init_dense(spec, "n", rng)
    arrays["n.0.b"] = rng.normal(size=16)
    store = ParamStore(arrays)
    for _ in range(10):
        x = rng.normal(size=2)
        ws = [store.view(f"n.{i}.w") for i in range(2)]
        bs = [store.view(f"n.{i}.b") for i in range(2)]
        assert ad.forward(spec, store, "n", x) == pytest.approx(naive_forward(ws, bs, x, 0.2), abs=1e-12)


def test_forward_dimension_mismatch():
    spec = DenseNetSpec((3, 4, 1))
    store = ParamStore(ad.init_dense(spec, "n", np.random.default_rng(0)))
    with pytest.raises(ValueError):
        ad.forward(spec, store, "n", np.ones(2))
    with pytest.raises(ValueError):
        ad.forward_node(spec, store, "n", np.ones((5, 2)))


def test_backward_square():
    store = ParamStore({"p": np.array([3.0])})
    ad.backward(ad.total(ad.square(ad.param(store, "p"))))
    assert store.grads[0] == pytest.approx(6.0)


def test_backward_log_softmax_identity():
    store = ParamStore({"a": np.array([0.3, -1.2])})
    # d/da of -log softmax(a)[0] is p - onehot(0)
    lp = ad.log_softmax(ad.param(store, "a"))
    ad.backward(-ad.total(ad.take(lp, np.array([0]))))
    p = np.exp(ad.log_softmax_np(store.view("a")))
    assert store.grads == pytest.approx(p - np.array([1.0, 0.0]), abs=1e-14)


def test_backward_untouched_params_get_zero():
    store = ParamStore({"a": np.array([1.0]), "b": np.array([2.0])})
    ad.backward(ad.total(ad.square(ad.param(store, "a"))))
    assert store.view("b")[0] == 2.0 and store.grad_view("b")[0] == 0.0


def test_backward_without_tape_is_an_error():
    with pytest.raises(ad.TapeError):
        ad.backward(ad.Node(np.array(1.0)))
    store = ParamStore({"a": np.ones(3)})
    with pytest.raises(ad.TapeError):
        ad.backward(ad.square(ad.param(store, "a")))  # not a scalar


def test_backward_accumulates_shared_nodes():
    store = ParamStore({"a": np.array([2.0])})
    p = ad.param(store, "a")
    y = p * p + p  # p used three times
    ad.backward(ad.total(y))
    assert store.grads[0] == pytest.approx(5.0)


def test_gradients_of_dense_nets_match_finite_differences(fd_check):
    # 100 random small nets, each a different mix of the recorded ops
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(100):
        widths = (int(rng.integers(1, 4)), *rng.integers(2, 7, size=int(rng.integers(1, 4))),
                  int(rng.integers(1, 5)))
        spec = DenseNetSpec(tuple(int(w) for w in widths), float(rng.uniform(0.05, 0.5)))
        store = ParamStore(ad.init_dense(spec, "n", rng))
        store.values += 0.1 * rng.normal(size=len(store))
        x = rng.normal(size=(5, spec.widths[0]))
        target = rng.integers(0, spec.widths[-1], size=5)
        t = rng.normal(size=(5, spec.widths[-1]))
        kind = trial % 3

        def loss():
            out = ad.forward_node(spec, store, "n", x)
            if kind == 0:
                return ad.mean(ad.square(out - t))
            if kind == 1:
                return -ad.mean(ad.take(ad.log_softmax(out), target))
            return ad.mean(ad.tanh(out) * 0.5 + ad.softplus(out) + ad.sigmoid(out) * 2.0)
        worst = max(worst, fd_check(loss, store))
    assert worst < 1e-4


def test_elementwise_op_gradients(fd_check):
    rng = np.random.default_rng(1)
    store = ParamStore({"a": rng.uniform(0.5, 2.0, size=(4, 3)), "b": rng.normal(size=3)})

    def loss():
        a, b = ad.param(store, "a"), ad.param(store, "b")
        h = ad.log(a) + ad.exp(b * 0.3) - a * b
        h = ad.concat_cols([h, ad.reshape(ad.mean_rows(h), (4, 1))])
        h = ad.gather_rows(h, np.array([0, 2, 2, 3])) - 1.0
        return ad.total(ad.leaky_relu(h, 0.3)) + ad.mean(ad.lower_bound(a, 1.0))
    assert fd_check(loss, store) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_log_softmax_is_normalised(v):
    out = ad.log_softmax_np(np.array(v))
    assert np.all(out <= 0)
    assert abs(np.exp(out).sum() - 1.0) < 1e-9


def test_forward_is_deterministic():
    spec = DenseNetSpec((2, 8, 8, 1))
    s1 = ParamStore(ad.init_dense(spec, "n", np.random.default_rng(5)))
    s2 = ParamStore(ad.init_dense(spec, "n", np.random.default_rng(5)))
    x = np.random.default_rng(1).normal(size=(20, 2))
    assert np.array_equal(ad.forward(spec, s1, "n", x), ad.forward(spec, s2, "n", x))


def test_adam_zero_gradient_leaves_params():
    store = ParamStore({"a": np.array([1.0, -2.0])})
    state = ad.AdamState(2)
    ad.adam_step(store, state)
    assert np.array_equal(store.values, [1.0, -2.0]) and state.step == 1


def test_adam_first_step_by_hand():
    store = ParamStore({"a": np.array([0.5, 0.5])})
    g = np.array([0.3, -4.0])
    store.grads[:] = g
    state = ad.AdamState(2, lr=0.01)
    ad.adam_step(store, state)
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g * g) / (1 - 0.999)
    expected = 0.5 - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert store.values == pytest.approx(expected, abs=1e-15)
    assert np.abs(store.values - 0.5) == pytest.approx([0.01, 0.01], rel=1e-6)
    assert np.all(store.grads == 0)


def test_adam_moves_against_constant_gradient():
    store = ParamStore({"a": np.array([0.0])})
    state = ad.AdamState(1, lr=0.05)
    trace = []
    for _ in range(50):
        store.grads[:] = 2.0
        ad.adam_step(store, state)
        trace.append(store.values[0])
    assert np.all(np.diff(trace) < 0)
    assert state.step == 50

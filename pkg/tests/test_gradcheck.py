"""The finite-difference harness itself: exact cases, detection, determinism."""

import numpy as np
import pytest

from sardino import tensor as T
from sardino.errors import VerificationError
from sardino.gradcheck import check_gradients
from sardino.params import ParamStore


def test_linear_model_is_near_exact():
    store = ParamStore()
    store.add("w", np.array([[2.0], [3.0]], dtype=np.float64))
    x = np.array([[1.5, -0.5]], dtype=np.float64)

    def forward(s):
        return T.matmul(T.as_node(x), s["w"]).sum()

    report = check_gradients(forward, store)
    assert report.max_rel_err < 1e-8
    assert report.n_checked == 2


def test_nonlinear_composition_passes_tolerance():
    rng = np.random.default_rng(3)
    store = ParamStore()
    store.add("w1", rng.standard_normal((4, 6)))
    store.add("b1", rng.standard_normal(6))
    store.add("w2", rng.standard_normal((6, 1)))
    x = rng.standard_normal((3, 4))

    def forward(s):
        h = T.gelu(T.matmul(T.as_node(x), s["w1"]) + s["b1"])
        return T.matmul(h, s["w2"]).sum()

    assert check_gradients(forward, store).max_rel_err < 1e-4


def test_sign_flip_in_backward_is_reported_not_masked():
    store = ParamStore()
    store.add("w", np.array([1.3], dtype=np.float64))

    def bad_square(node):
        out = node.values**2

        def bwd(g, send):
            send(node, -g * 2.0 * node.values)  # deliberately wrong sign

        return T.TensorNode(out, requires_grad=True, _parents=(node,), _backward_fn=bwd)

    def forward(s):
        return bad_square(s["w"]).sum()

    report = check_gradients(forward, store)
    assert report.max_rel_err == pytest.approx(2.0, rel=1e-3)


def test_nondeterministic_closure_rejected():
    store = ParamStore()
    store.add("w", np.ones(1))
    rng = np.random.default_rng()

    def forward(s):
        return (s["w"] * rng.standard_normal()).sum()

    with pytest.raises(VerificationError):
        check_gradients(forward, store)


def test_subsample_checks_requested_coordinate_count():
    rng = np.random.default_rng(5)
    store = ParamStore()
    store.add("w", 0.3 * rng.standard_normal((30, 20)))
    x = rng.standard_normal((2, 30))

    def forward(s):
        return T.gelu(T.matmul(T.as_node(x), s["w"])).sum()

    report = check_gradients(forward, store, sample=250, seed=1)
    assert report.n_checked == 250
    assert report.max_rel_err < 1e-4


def test_values_restored_after_check():
    store = ParamStore()
    store.add("w", np.array([1.0, 2.0], dtype=np.float64))
    before = store["w"].values.copy()

    def forward(s):
        return (s["w"] * s["w"]).sum()

    check_gradients(forward, store)
    assert np.array_equal(store["w"].values, before)

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roma import kernels
from roma.proxy import ProxyNet, adapt_objective_terms, value_and_input_gradient

BACKENDS = list(kernels.backends())


def _setup(rng, C=4, d=3, hidden=6):
    net = ProxyNet.init(d, rng, hidden=hidden)
    theta = net.params + rng.normal(0, 0.01, (C, net.n_params))
    X = rng.normal(size=(C, d))
    return net, theta, X


@pytest.mark.parametrize("backend", BACKENDS)
def test_value_input_grad_matches_reference(backend, rng):
    net, theta, X = _setup(rng)
    f, G = kernels.value_input_grad(theta, net.sizes, X, backend=backend)
    for c in range(theta.shape[0]):
        fr, Gr = value_and_input_gradient(net.with_params(theta[c]), X[c:c + 1])
        assert f[c] == pytest.approx(fr[0], abs=1e-13)
        np.testing.assert_allclose(G[c], Gr[0], atol=1e-13)


@pytest.mark.parametrize("backend", BACKENDS)
def test_adapt_value_matches_reference(backend, rng):
    net, theta, X = _setup(rng)
    f_prev = rng.normal(size=4)
    J, grad = kernels.adapt_value_grad(theta, net.sizes, X, f_prev, 0.7, backend=backend)
    for c in range(4):
        Jr, gr = adapt_objective_terms(net.with_params(theta[c]), X[c:c + 1], f_prev[c:c + 1], 0.7)
        assert J[c] == pytest.approx(Jr[0], rel=1e-12)
        np.testing.assert_allclose(grad[c], gr[0], rtol=1e-10, atol=1e-13)


@pytest.mark.skipif("compiled" not in BACKENDS, reason="extension not built")
@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_backends_agree(depth, rng):
    net = ProxyNet.init(5, rng, hidden=7, depth=depth)
    theta = net.params + rng.normal(0, 0.02, (6, net.n_params))
    X = rng.normal(size=(6, 5))
    f_prev = rng.normal(size=6)
    a = kernels.adapt_pgd(net.params, net.sizes, theta, X, f_prev, 1.0, 1.0, 0.01, 0.001, 15,
                          track=True, backend="python")
    b = kernels.adapt_pgd(net.params, net.sizes, theta, X, f_prev, 1.0, 1.0, 0.01, 0.001, 15,
                          track=True, backend="compiled")
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_pgd_stays_in_ball_and_never_worsens(backend, rng):
    net, _, X = _setup(rng, C=8)
    start = np.tile(net.params, (8, 1))
    f_prev = value_and_input_gradient(net, X)[0] + rng.normal(0, 0.1, 8)
    eps = 0.02
    out, j0, jb, status, excess = kernels.adapt_pgd(net.params, net.sizes, start, X, f_prev,
                                                    1.0, 1.0, eps, eps / 10, 30, track=True,
                                                    backend=backend)
    assert np.all(status == 0)
    assert np.all(jb <= j0)
    assert np.all(excess <= 1e-12)
    radii = eps * net.layer_norms()
    for c in range(8):
        d = net.with_params(out[c]).params - net.params
        norms = [np.linalg.norm(d[net.offsets[k]:net.offsets[k + 1]]) for k in range(net.depth)]
        assert np.all(np.asarray(norms) <= radii * (1 + 1e-12))
    # best value is the objective at the returned point
    J, _ = kernels.adapt_value_grad(out, net.sizes, X, f_prev, 1.0, backend=backend)
    np.testing.assert_allclose(J, jb, rtol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_pgd_zero_steps_returns_start(backend, rng):
    net, theta, X = _setup(rng)
    out, j0, jb, _, _ = kernels.adapt_pgd(net.params, net.sizes, theta, X, np.zeros(4), 1.0, 1.0,
                                          0.01, 0.001, 0, backend=backend)
    np.testing.assert_array_equal(out, theta)
    np.testing.assert_array_equal(j0, jb)


@pytest.mark.parametrize("backend", BACKENDS)
def test_pgd_flags_nonfinite(backend, rng):
    net, theta, X = _setup(rng)
    X[1] = 1e300  # overflows the objective
    f_prev = np.zeros(4)
    out, _, _, status, _ = kernels.adapt_pgd(net.params, net.sizes, theta, X, f_prev, 1.0, 1.0,
                                             0.01, 0.001, 5, backend=backend)
    assert status[1] == 1 and np.all(status[[0, 2, 3]] == 0)
    np.testing.assert_array_equal(out[1], theta[1])


@settings(max_examples=25)
@given(st.integers(0, 2 ** 31), st.floats(0.0, 5.0), st.sampled_from([0.0, 1.0]))
def test_pgd_property_best_not_above_start(seed, alpha, gw):
    rng = np.random.default_rng(seed)
    net, theta, X = _setup(rng, C=3, d=2, hidden=4)
    f_prev = rng.normal(size=3)
    _, j0, jb, status, _ = kernels.adapt_pgd(net.params, net.sizes, theta, X, f_prev, alpha, gw,
                                             0.05, 0.005, 8)
    assert np.all(jb[status == 0] <= j0[status == 0])


@pytest.mark.parametrize("backend", BACKENDS)
def test_shape_mismatch_rejected(backend, rng):
    net, theta, X = _setup(rng)
    with pytest.raises(ValueError):
        kernels.value_input_grad(theta[:, :-1], net.sizes, X, backend=backend)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_env_var_selects_pure_python():
    code = "from roma import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, ROMA_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    assert out.stdout.strip() == "python"
    env["ROMA_PURE_PYTHON"] = "0"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    assert out.stdout.strip() == ("compiled" if "compiled" in BACKENDS else "python")

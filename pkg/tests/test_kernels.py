import os
import subprocess
import sys
from pathlib import Path

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bubbling import _kernels as K

ROOT = Path(__file__).resolve().parents[1]


def _remainder_oracle(x, q):
    mpmath.mp.dps = 40
    x = mpmath.mpf(x)
    base = max(1 + x, 0)
    return float(base ** q - 1 - q * x)


@pytest.mark.parametrize("q", [1.5, 7 / 3, 3.0, 10 / 3])
def test_remainder_against_oracle(q):
    xs = np.concatenate([-np.logspace(-12, -0.01, 40), np.logspace(-12, 1, 40), [-1.5, 0.0]])
    got = K.remainder2(xs, q)
    ref = np.array([_remainder_oracle(x, q) for x in xs])
    scale = np.maximum(np.abs(ref), 1e-300)
    assert np.all(np.abs(got - ref) <= 1e-13 * scale + 1e-300)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0), min_size=1, max_size=40), st.floats(1.1, 5.0))
def test_remainder_parity(xs, q):
    x = np.array(xs)
    # the two backends may differ in the last bit of pow; scale by the cancelled terms
    terms = np.maximum(1.0 + x, 0.0) ** q + 1.0 + q * np.abs(x)
    assert np.all(np.abs(K.remainder2(x, q) - K.remainder2_numpy(x, q)) <= 1e-14 * terms)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(0, 2 ** 31))
def test_tridiag_matvec_parity(size, seed):
    rng = np.random.default_rng(seed)
    off, diag, x = rng.normal(size=size - 1), rng.normal(size=size), rng.normal(size=size)
    dense = np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)
    assert np.allclose(K.tridiag_matvec(off, diag, off, x), dense @ x, rtol=1e-13, atol=1e-13)
    assert np.allclose(K.tridiag_matvec_numpy(off, diag, off, x), dense @ x, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("n", [3, 5, 8])
def test_stiffness_parity(n):
    nodes = np.concatenate([[0.0], np.cumsum(np.linspace(0.1, 1.0, 30))])
    faces = 0.5 * (nodes[1:] + nodes[:-1])
    a = K.stiffness(nodes, faces, n)
    b = K.stiffness_numpy(nodes, faces, n)
    assert np.allclose(a[0], b[0], rtol=1e-14) and np.allclose(a[1], b[1], rtol=1e-14)
    # constants lie in the kernel of the Neumann stiffness matrix
    off, diag = b
    assert np.allclose(K.tridiag_matvec_numpy(off, diag, off, np.ones(nodes.size)), 0.0,
                       atol=1e-12 * np.abs(diag).max())


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 80), st.floats(1.0, 3.0), st.integers(0, 2 ** 31))
def test_scaled_power_sum_parity(size, q, seed):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.0, 1.0, size)
    v = rng.normal(size=size) * 10.0 ** rng.uniform(-200, 200)
    a = K.scaled_power_sum(w, v, q)
    b = K.scaled_power_sum_numpy(w, v, q)
    assert a == pytest.approx(b, rel=1e-12)


def test_scaled_power_sum_zero():
    assert K.scaled_power_sum(np.ones(3), np.zeros(3), 1.5) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2 ** 31))
def test_sturm_count_matches_eigenvalues(size, seed):
    rng = np.random.default_rng(seed)
    off, diag = rng.normal(size=size - 1), rng.normal(size=size)
    dense = np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)
    expected = int(np.sum(np.linalg.eigvalsh(dense) < 0))
    assert K.sturm_count(off, diag) == expected
    assert K.sturm_count_numpy(off, diag) == expected


def _backend_in_subprocess(flag):
    env = dict(os.environ)
    if flag is None:
        env.pop("BUBBLING_DISABLE_NUMBA", None)
    else:
        env["BUBBLING_DISABLE_NUMBA"] = flag
    out = subprocess.run([sys.executable, "-c", "from bubbling import _kernels; print(_kernels.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    return out.stdout.strip()


def test_env_flag_selects_numpy():
    assert _backend_in_subprocess("1") == "numpy"


def test_default_backend():
    try:
        import numba  # noqa: F401
        expected = "numba"
    except ImportError:
        expected = "numpy"
    assert _backend_in_subprocess(None) == expected


def test_benchmark_runs():
    out = subprocess.run([sys.executable, str(ROOT / "benchmarks" / "bench_kernels.py"),
                          "--sizes", "200", "--repeat", "1"],
                         capture_output=True, text=True, check=True)
    assert "remainder2" in out.stdout

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spherelab.linalg import (
    as_mat,
    frobenius_norm,
    matrix_rms,
    newton_schulz_orthogonalize,
    random_orthogonal,
    spectral_norm,
    vector_rms,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)
mats = st.tuples(st.integers(1, 8), st.integers(1, 8)).flatmap(lambda s: arrays(np.float64, s, elements=finite))


def test_frobenius_examples():
    assert frobenius_norm(np.eye(2)) == pytest.approx(1.41421356, abs=1e-8)
    assert frobenius_norm(np.zeros((3, 3))) == 0.0
    assert frobenius_norm([[3, 4], [0, 0]]) == 5.0


def test_matrix_rms_examples():
    assert matrix_rms(np.ones((2, 2))) == 1.0
    assert matrix_rms(np.eye(4)) == 0.5
    assert matrix_rms([[3, 4], [0, 0]]) == 2.5


def test_vector_rms_examples():
    assert vector_rms([1, 1, 1, 1]) == 1.0
    assert vector_rms(np.zeros(5)) == 0.0
    assert vector_rms([3, 4]) == pytest.approx(2.5 * math.sqrt(2))
    with pytest.raises(ValueError):
        vector_rms([])


def test_spectral_examples():
    assert spectral_norm(np.diag([3.0, 1.0])).value == pytest.approx(3.0, rel=1e-10)
    assert spectral_norm(np.eye(5)).value == pytest.approx(1.0, rel=1e-10)
    u = np.array([2.0, 0.0, 0.0])
    v = np.array([0.0, 3.0])
    est = spectral_norm(np.outer(u, v))
    assert est.value == pytest.approx(6.0, rel=1e-10)
    assert est.converged


def test_spectral_reports_nonconvergence():
    rng = np.random.default_rng(0)
    est = spectral_norm(rng.standard_normal((30, 30)), iters=2)
    assert not est.converged and est.iterations == 2 and est.value > 0


def test_spectral_matches_eig_on_psd():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((6, 6))
    psd = a @ a.T
    assert spectral_norm(psd, iters=2000, tol=1e-14).value == pytest.approx(np.linalg.eigvalsh(psd).max(), rel=1e-8)


def test_as_mat_rejects_bad_input():
    with pytest.raises(ValueError):
        as_mat([1.0, 2.0])
    with pytest.raises(ValueError):
        as_mat([[np.nan]])


def test_ns_zero_maps_to_zero():
    assert np.array_equal(newton_schulz_orthogonalize(np.zeros((4, 4))), np.zeros((4, 4)))


def test_ns_diag_contracts_singular_values():
    s = np.linalg.svd(newton_schulz_orthogonalize(np.diag([2.0, 0.5])), compute_uv=False)
    assert np.all((s >= 0.7) & (s <= 1.3))


def test_ns_rotation_is_scaled_rotation():
    # the quintic coefficients overshoot: a rotation comes back as s*Q with s near 1.1
    t = math.pi / 6
    q = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    out = newton_schulz_orthogonalize(q)
    s = np.sum(out * q) / 2.0
    assert 0.7 <= s <= 1.3
    assert np.max(np.abs(out - s * q)) < 1e-12


@pytest.mark.parametrize("shape", [(8, 8), (5, 12), (12, 5)])
def test_ns_condition_100_within_band(shape):
    rng = np.random.default_rng(sum(shape))
    for _ in range(20):
        k = min(shape)
        u = np.linalg.qr(rng.standard_normal((shape[0], k)))[0]
        v = np.linalg.qr(rng.standard_normal((shape[1], k)))[0]
        sv = np.geomspace(1.0, 0.01, k) * rng.uniform(0.1, 10)
        out = newton_schulz_orthogonalize(u @ np.diag(sv) @ v.T)
        s = np.linalg.svd(out, compute_uv=False)
        assert s.min() >= 0.3 and s.max() <= 1.7


def test_random_orthogonal():
    q = random_orthogonal(6, np.random.default_rng(0))
    assert np.allclose(q @ q.T, np.eye(6), atol=1e-12)


@given(mats, finite)
def test_frobenius_homogeneous(m, c):
    assert frobenius_norm(c * m) == pytest.approx(abs(c) * frobenius_norm(m), rel=1e-9, abs=1e-9)


@settings(max_examples=50)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 2**31))
def test_spectral_frobenius_sandwich(r, c, seed):
    m = np.random.default_rng(seed).standard_normal((r, c))
    s = spectral_norm(m, iters=5000, tol=1e-15).value
    f = frobenius_norm(m)
    assert s <= f + 1e-9
    assert f <= math.sqrt(min(r, c)) * s + 1e-9

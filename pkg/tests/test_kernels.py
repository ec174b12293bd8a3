import numpy as np
import pytest

from xmodal import kernels

from conftest import rng_for


def naive_matmul(a, b):
    """Triple-loop oracle, accumulating over k in ascending order."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    previous = kernels.backend_name()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


def test_identity_times_matrix(backend):
    x = rng_for(0).standard_normal((3, 4))
    assert np.array_equal(kernels.mm_nn(np.eye(3), x), x)


def test_one_by_one(backend):
    out = kernels.mm_nn(np.array([[2.0]]), np.array([[3.0]]))
    assert out.shape == (1, 1)
    assert out[0, 0] == 6.0


def test_matmul_matches_triple_loop_oracle(backend):
    rng = rng_for(1)
    for _ in range(10):
        m, k, n = rng.integers(1, 9, size=3)
        a = rng.standard_normal((m, k))
        b = rng.standard_normal((k, n))
        assert np.max(np.abs(kernels.mm_nn(a, b) - naive_matmul(a, b))) < 1e-12


def test_transposed_variants_match_oracle(backend):
    rng = rng_for(2)
    for _ in range(10):
        m, k, n = rng.integers(1, 9, size=3)
        a = rng.standard_normal((m, k))
        bt = rng.standard_normal((n, k))
        at = rng.standard_normal((k, m))
        b = rng.standard_normal((k, n))
        assert np.max(np.abs(kernels.mm_nt(a, bt) - naive_matmul(a, bt.T.copy()))) < 1e-12
        assert np.max(np.abs(kernels.mm_tn(at, b) - naive_matmul(at.T.copy(), b))) < 1e-12


def test_backend_results_are_reproducible(backend):
    rng = rng_for(3)
    a = rng.standard_normal((7, 5))
    b = rng.standard_normal((5, 6))
    first = kernels.mm_nn(a, b)
    second = kernels.mm_nn(a, b)
    assert first.tobytes() == second.tobytes()


@pytest.mark.skipif("ext" not in kernels.available_backends(),
                    reason="compiled kernels not built")
def test_backends_agree_within_1e12():
    rng = rng_for(4)
    previous = kernels.backend_name()
    try:
        for _ in range(20):
            m, k, n = rng.integers(1, 40, size=3)
            a = rng.standard_normal((m, k))
            b = rng.standard_normal((k, n))
            kernels.set_backend("ext")
            ext = kernels.mm_nn(a, b)
            kernels.set_backend("py")
            py = kernels.mm_nn(a, b)
            assert np.max(np.abs(ext - py)) < 1e-12
    finally:
        kernels.set_backend(previous)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")

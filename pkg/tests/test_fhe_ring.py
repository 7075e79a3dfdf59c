import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from iris_he.errors import ParameterError
from iris_he.fhe.params import SchemeParams, default_params, ntt_primes, resolve_params, toy_params
from iris_he.fhe.params import test_params as small_params
from iris_he.fhe.ring import context, negacyclic_schoolbook


def _ntt_mul(ctx, a, b):
    A = ctx.ntt(a.copy())
    B = ctx.ntt(b.copy())
    return ctx.intt(A * B % ctx.modulus(a.shape[-2]))


@pytest.mark.parametrize("n", [8, 32, 64])
def test_ntt_product_matches_schoolbook(n):
    ctx = context(toy_params(n))
    rng = np.random.default_rng(n)
    L = ctx.k + ctx.m
    for _ in range(20):
        a = rng.integers(0, ctx.all[:, None], size=(L, n))
        b = rng.integers(0, ctx.all[:, None], size=(L, n))
        got = _ntt_mul(ctx, a, b)
        for l in range(L):
            assert got[l].tolist() == negacyclic_schoolbook(a[l], b[l], int(ctx.all[l]))


@given(st.integers(0, 2**32 - 1))
def test_ntt_roundtrip(seed):
    ctx = context(toy_params(64))
    rng = np.random.default_rng(seed)
    a = rng.integers(0, ctx.all[:, None], size=(3, ctx.k + ctx.m, 64))
    assert np.array_equal(ctx.intt(ctx.ntt(a.copy())), a)


def test_ntt_roundtrip_full_size():
    ctx = context(small_params())
    rng = np.random.default_rng(0)
    a = rng.integers(0, ctx.q[:, None], size=(2, ctx.k, ctx.n))
    assert np.array_equal(ctx.intt(ctx.ntt(a.copy())), a)
    x = np.zeros((ctx.k, ctx.n), np.int64)
    x[:, 1] = 1  # X * X^(n-1) = -1
    y = np.zeros((ctx.k, ctx.n), np.int64)
    y[:, -1] = 1
    prod = _ntt_mul(ctx, x, y)
    assert np.array_equal(prod[:, 0], ctx.q - 1) and not prod[:, 1:].any()


def _crt(res, primes):
    M = math.prod(int(p) for p in primes)
    v = sum(int(r) * (M // int(p)) * pow(M // int(p), -1, int(p)) for r, p in zip(res, primes)) % M
    return v, M


@given(st.integers(0, 2**32 - 1))
def test_base_extension_is_centred_and_exact(seed):
    ctx = context(toy_params(64))
    rng = np.random.default_rng(seed)
    x = rng.integers(0, ctx.q[:, None], size=(ctx.k, 64))
    out = ctx.q_to_p(x)
    for j in range(0, 64, 7):
        v, Q = _crt(x[:, j], ctx.q)
        centred = v - Q if v > Q // 2 else v
        assert [centred % int(p) for p in ctx.p] == out[:, j].tolist()


def test_rescale_rounds_t_over_q():
    params = toy_params(64)
    ctx = context(params)
    rng = np.random.default_rng(5)
    L = ctx.k + ctx.m
    QP = ctx.Q * ctx.P
    vals = [int(v) for v in rng.integers(-(2**62), 2**62, size=64)]
    vals = [v * (1 << 150) + 12345 for v in vals]  # well inside QP/2
    x = np.array([[v % int(p) for v in vals] for p in ctx.all], dtype=np.int64)
    r = ctx.rescale(x)
    for j, v in enumerate(vals):
        want = (2 * params.t * v + ctx.Q) // (2 * ctx.Q)  # round(t v / Q)
        assert [want % int(q) for q in ctx.q] == r[:, j].tolist()


def test_ntt_primes_are_friendly_and_descending():
    ps = ntt_primes(2048, 5)
    assert ps == sorted(ps, reverse=True)
    assert all(p % 4096 == 1 and p < 2**31 for p in ps)


def test_profiles():
    d = default_params()
    assert d.n == 8192 and len(d.q_primes) == 7 and d.t == 65537
    assert d.security_level == 128
    assert small_params().security_level == 0
    assert resolve_params("toy").n == 64


def test_params_text_roundtrip(tmp_path):
    p = small_params()
    (tmp_path / "p.cfg").write_text(p.to_text())
    back = SchemeParams.load(tmp_path / "p.cfg")
    assert back.digest == p.digest and back.q_primes == p.q_primes


@pytest.mark.parametrize(
    "text",
    ["n=100\nq_primes=12289", "n=64\nq_primes=12", "n=64\nq_primes=263", "q_primes=12289", "n=64\nq_primes=7681,7681", "garbage"],
)
def test_bad_params_rejected(text):
    with pytest.raises(ParameterError):
        SchemeParams.from_text(text)

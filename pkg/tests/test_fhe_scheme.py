import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iris_he.errors import DepthLimitError, KeyMismatchError, NoiseBudgetError, ParameterError
from iris_he.fhe import noise
from iris_he.fhe.params import SchemeParams, ntt_primes, toy_params
from iris_he.fhe.scheme import (
    HEADER_SIZE,
    Ciphertext,
    KeyMaterial,
    add,
    add_plain,
    decrypt,
    decrypt_many,
    deserialize,
    encrypt,
    encrypt_many,
    keygen,
    measured_noise_log2,
    mul,
    mul_plain,
    noise_budget,
    relinearize,
    serialize,
    serialized_size,
    sum_all,
)

T = 65537


@pytest.fixture(scope="module")
def km():
    return keygen(toy_params(64), seed=11)


def test_encrypt_decrypt_roundtrip(km):
    vals = np.array([0, 1, 2, 17, T - 1, 40000])
    ct = encrypt_many(km.public_key, vals, rng=1)
    assert ct.batch_shape == (6,)
    assert decrypt_many(km.secret_key, ct).tolist() == vals.tolist()
    assert decrypt(km.secret_key, encrypt(km.public(), 5, rng=2)) == 5


def test_encryption_is_randomized_but_seeded(km):
    a = encrypt(km.public_key, 1, rng=3)
    b = encrypt(km.public_key, 1, rng=3)
    c = encrypt(km.public_key, 1, rng=4)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_keygen_is_deterministic_per_seed():
    a = keygen(toy_params(64), seed=5)
    b = keygen(toy_params(64), seed=5)
    assert a.to_bytes() == b.to_bytes()


def test_plaintext_range_checked(km):
    with pytest.raises(ValueError):
        encrypt(km.public_key, T)
    with pytest.raises(ValueError):
        encrypt(km.public_key, -1)


@settings(max_examples=30)
@given(st.lists(st.integers(0, T - 1), min_size=2, max_size=2), st.integers(0, 2**32 - 1))
def test_add_and_mul_are_homomorphic(vals, seed):
    km = keygen(toy_params(64), seed=11)
    x, y = vals
    a = encrypt(km.public_key, x, rng=seed)
    b = encrypt(km.public_key, y, rng=seed + 1)
    assert decrypt(km.secret_key, add(a, b)) == (x + y) % T
    assert decrypt(km.secret_key, mul(a, b, km.relin_key)) == x * y % T
    assert decrypt(km.secret_key, mul(a, b, None)) == x * y % T


def test_plain_ops(km):
    a = encrypt(km.public_key, 10, rng=1)
    assert decrypt(km.secret_key, add_plain(a, 7)) == 17
    assert decrypt(km.secret_key, mul_plain(a, -2)) == (-20) % T
    assert decrypt(km.secret_key, mul_plain(a, 3)) == 30
    with pytest.raises(ValueError):
        mul_plain(a, T)


def test_sum_all(km):
    vals = np.arange(50) % 7
    ct = encrypt_many(km.public_key, vals, rng=8)
    assert decrypt(km.secret_key, sum_all(ct)) == int(vals.sum())


def test_depth_two_product_and_limit(km):
    a = encrypt(km.public_key, 3, rng=1)
    b = encrypt(km.public_key, 5, rng=2)
    ab = mul(a, b, km.relin_key)
    abab = mul(ab, ab, km.relin_key)
    assert abab.level == 2
    assert decrypt(km.secret_key, abab) == 225
    with pytest.raises(DepthLimitError):
        mul(abab, a, km.relin_key)


def test_three_part_product_relinearizes(km):
    a = encrypt(km.public_key, 300, rng=1)
    b = encrypt(km.public_key, 200, rng=2)
    raw = mul(a, b, None)
    assert raw.parts == 3
    rel = relinearize(raw, km.relin_key)
    assert rel.parts == 2
    assert decrypt(km.secret_key, raw) == decrypt(km.secret_key, rel) == 60000
    with pytest.raises(ParameterError):
        mul(raw, a, km.relin_key)


def test_tracked_noise_bounds_measured_noise(km):
    a = encrypt_many(km.public_key, np.array([1, 0, 1]), rng=4)
    b = encrypt_many(km.public_key, np.array([1, 1, 0]), rng=5)
    steps = [a, add(a, b), mul(a, b, km.relin_key)]
    steps.append(mul(steps[-1], steps[-1], km.relin_key))
    budgets = []
    for c in steps:
        assert measured_noise_log2(km.secret_key, c) <= c.noise_log2
        budgets.append(noise_budget(c, km.secret_key))
        assert c.noise_budget_bits <= budgets[-1]
        assert budgets[-1] > 0
    assert budgets[0] >= budgets[2] >= budgets[3]


def test_budget_exhaustion_is_refused(km):
    a = encrypt(km.public_key, 1, rng=1)
    spent = Ciphertext(a.params, a.data, a.level, noise.log2_capacity(a.params) + 1)
    with pytest.raises(NoiseBudgetError):
        decrypt(km.secret_key, spent)
    with pytest.raises(NoiseBudgetError):
        mul(spent, a, km.relin_key)


def test_parameter_mismatch(km):
    other = keygen(toy_params(32), seed=1)
    a = encrypt(km.public_key, 1, rng=1)
    b = encrypt(other.public_key, 1, rng=1)
    with pytest.raises(KeyMismatchError):
        add(a, b)
    with pytest.raises(KeyMismatchError):
        decrypt(other.secret_key, a)
    with pytest.raises(KeyMismatchError):
        deserialize(serialize(a), other.params)


def test_keygen_rejects_modulus_too_small_for_template_circuit():
    small = SchemeParams(64, tuple(ntt_primes(64, 2)), T)
    with pytest.raises(ParameterError, match="capacity"):
        keygen(small, seed=0)
    with pytest.raises(ParameterError, match="t ="):
        keygen(SchemeParams(64, tuple(ntt_primes(64, 4)), 257), seed=0)


@given(st.integers(0, T - 1), st.integers(0, 2**32 - 1))
def test_serialization_roundtrip_is_byte_exact(m, seed):
    km = keygen(toy_params(64), seed=11)
    c = encrypt(km.public_key, m, rng=seed)
    data = serialize(c)
    assert len(data) == serialized_size(c.params) == HEADER_SIZE + 4 * 2 * 4 * 64
    back = deserialize(data, c.params)
    assert serialize(back) == data
    assert decrypt(km.secret_key, back) == m


def test_serialized_three_part_and_level(km):
    a = encrypt(km.public_key, 9, rng=1)
    raw = mul(a, a, None)
    back = deserialize(serialize(raw), raw.params)
    assert (back.parts, back.level_tag) == (3, 1)
    assert decrypt(km.secret_key, back) == 81


@pytest.mark.parametrize("cut", [0, 10, HEADER_SIZE, HEADER_SIZE + 4])
def test_truncated_ciphertext_rejected(km, cut):
    data = serialize(encrypt(km.public_key, 1, rng=1))
    with pytest.raises(ValueError):
        deserialize(data[:cut], km.params)


def test_key_material_roundtrip(km):
    back = KeyMaterial.from_bytes(km.to_bytes())
    assert back.params == km.params
    c = encrypt(back.public_key, 42, rng=1)
    assert decrypt(km.secret_key, c) == 42
    assert decrypt(back.secret_key, mul(c, c, back.relin_key)) == 42 * 42

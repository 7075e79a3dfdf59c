import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iris_he.cleartext_matching import MatchPolicy, match_with_shifts, shift_counts
from iris_he.encoding import IrisTemplate, template_rotate
from iris_he.encrypted_matching import (
    FILE_MAGIC,
    EncryptedTemplate,
    decrypt_score,
    decrypt_template,
    encrypt_template,
    encrypted_hd_at_shift,
    homomorphic_xor,
    protocol_match,
    write_timing_csv,
)
from iris_he.errors import KeyMismatchError, TemplateFormatError
from iris_he.fhe.params import toy_params
from iris_he.fhe.scheme import HEADER_SIZE, decrypt, encrypt, encrypt_many, keygen, mul, noise_budget
from iris_he.synthetic import random_template

SHAPE = (2, 48)


@pytest.fixture(scope="module")
def km():
    return keygen(toy_params(64), seed=21)


def test_xor_and_masked_term_truth_table(km):
    bits = list(itertools.product((0, 1), repeat=4))
    a, b, ma, mb = (encrypt_many(km.public_key, np.array(col), rng=i) for i, col in enumerate(zip(*bits)))
    xor = homomorphic_xor(a, b, km.public())
    term = mul(xor, mul(ma, mb, km.relin_key), km.relin_key)
    got = [decrypt(km.secret_key, term[i]) for i in range(16)]
    assert got == [(x ^ y) & p & q for x, y, p, q in bits]


def test_template_encrypt_decrypt_roundtrip(km, tmp_path):
    t = random_template(np.random.default_rng(1), SHAPE, 0.6)
    et = encrypt_template(t, km.public_key, rng=2)
    assert et.layout == SHAPE and et.bits == 96
    assert decrypt_template(et, km.secret_key) == t
    et2 = encrypt_template(t, km.public_key, rng=2, path=tmp_path / "t.ct")
    assert np.array_equal(np.asarray(et2.code), et.code)
    assert decrypt_template(et2, km.secret_key) == t


def test_irisct_file_roundtrip_is_byte_exact(km, tmp_path):
    t = random_template(np.random.default_rng(3), SHAPE, 0.6)
    et = encrypt_template(t, km.public_key, rng=4)
    et.save(tmp_path / "a.ct")
    data = (tmp_path / "a.ct").read_bytes()
    assert data.startswith(FILE_MAGIC)
    assert len(data) == et.nbytes
    back = EncryptedTemplate.load(tmp_path / "a.ct", km.params, mmap=False)
    back.save(tmp_path / "b.ct")
    assert (tmp_path / "b.ct").read_bytes() == data
    assert decrypt_template(back, km.secret_key) == t


def test_irisct_rejects_wrong_params_and_corruption(km, tmp_path):
    t = random_template(np.random.default_rng(3), SHAPE)
    encrypt_template(t, km.public_key, rng=4, path=tmp_path / "a.ct")
    with pytest.raises(KeyMismatchError):
        EncryptedTemplate.load(tmp_path / "a.ct", toy_params(32))
    data = bytearray((tmp_path / "a.ct").read_bytes())
    (tmp_path / "short.ct").write_bytes(bytes(data[:-4]))
    with pytest.raises(TemplateFormatError):
        EncryptedTemplate.load(tmp_path / "short.ct", km.params)
    data[0] = ord("X")
    (tmp_path / "bad.ct").write_bytes(bytes(data))
    with pytest.raises(TemplateFormatError):
        EncryptedTemplate.load(tmp_path / "bad.ct", km.params)
    data = bytearray((tmp_path / "a.ct").read_bytes())
    data[-4:] = b"\xff\xff\xff\xff"
    (tmp_path / "range.ct").write_bytes(bytes(data))
    with pytest.raises(TemplateFormatError):
        EncryptedTemplate.load(tmp_path / "range.ct", km.params)


@settings(max_examples=10)
@given(st.integers(0, 2**32 - 1), st.floats(0.3, 1.0))
def test_encrypted_counts_equal_cleartext(seed, density):
    km = keygen(toy_params(64), seed=21)
    rng = np.random.default_rng(seed)
    a = random_template(rng, SHAPE, density)
    b = random_template(rng, SHAPE, density)
    qa = encrypt_template(a, km.public_key, rng=seed)
    eb = encrypt_template(b, km.public_key, rng=seed + 1)
    s = encrypted_hd_at_shift(qa, eb, 0, km.public(), chunk=13)
    assert decrypt_score(s, km.secret_key, a.code.size) == tuple(shift_counts(a, b, [0])[0])
    assert s.d_ct.level_tag == 2 and s.n_ct.level_tag == 1
    assert noise_budget(s.d_ct, km.secret_key) > 0


def test_server_side_rejects_secret_key_material(km):
    t = random_template(np.random.default_rng(0), SHAPE)
    et = encrypt_template(t, km.public_key, rng=1)
    with pytest.raises(TypeError):
        encrypted_hd_at_shift(et, et, 0, km)


def test_protocol_matches_cleartext_with_rotation(km):
    rng = np.random.default_rng(7)
    enrolled = random_template(rng, SHAPE, 0.8)
    query = template_rotate(enrolled, 2)
    flip = (rng.random(SHAPE) < 0.1).astype(np.uint8)
    query = IrisTemplate(query.code ^ flip, query.mask)
    policy = MatchPolicy(shift_window=3, min_valid_bits=10)
    eb = encrypt_template(enrolled, km.public_key, rng=8)
    rep = protocol_match(query, eb, km, policy, rng=9, chunk=40)
    clear = match_with_shifts(query, enrolled, policy)
    assert rep.result == clear
    assert rep.result.best_shift == -2
    assert [s for s, _, _ in rep.scores] == policy.shifts()
    counts = shift_counts(query, enrolled, policy.shifts())
    assert [(d, n) for _, d, n in rep.scores] == [tuple(c) for c in counts]
    assert set(rep.timings) == {"encrypt", "evaluate", "decrypt"}
    assert rep.bytes["encrypt"] == 7 * 2 * 96 * (HEADER_SIZE + 4 * 2 * 4 * 64)


def test_protocol_rejects_foreign_enrolled_template(km):
    other = keygen(toy_params(32), seed=1)
    t = random_template(np.random.default_rng(0), SHAPE)
    et = encrypt_template(t, other.public_key, rng=1)
    with pytest.raises(KeyMismatchError):
        protocol_match(t, et, km, MatchPolicy(shift_window=0, min_valid_bits=1))


def test_timing_csv(km, tmp_path):
    t = random_template(np.random.default_rng(0), SHAPE)
    rep = protocol_match(t, encrypt_template(t, km.public_key, rng=1), km, MatchPolicy(shift_window=0, min_valid_bits=1), rng=2)
    write_timing_csv(tmp_path / "t.csv", rep)
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["phase", "seconds", "bytes"]
    assert [r[0] for r in rows[1:]] == ["encrypt", "evaluate", "decrypt"]
    assert rep.result.hd == 0.0

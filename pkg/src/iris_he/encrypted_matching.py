"""Bitwise-encrypted templates and the homomorphic masked Hamming distance.

The client encrypts every code and mask bit as its own ciphertext. The
server, holding only public evaluation keys, computes per shift

    D = sum_i (x_i + y_i - 2 x_i y_i) * (m_i * m'_i),   N = sum_i m_i * m'_i

and returns the two ciphertexts; the client decrypts them and forms D / N.
"""

from __future__ import annotations

import csv
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from iris_he.cleartext_matching import MatchPolicy, MatchResult, select_best
from iris_he.encoding import IrisTemplate, template_rotate
from iris_he.errors import CryptoError, KeyMismatchError, NoiseBudgetError, TemplateFormatError
from iris_he.fhe import kernels, noise
from iris_he.fhe.params import SchemeParams
from iris_he.fhe.ring import RingContext, context
from iris_he.fhe.scheme import (
    CT_MAGIC,
    CT_VERSION,
    HEADER_SIZE,
    Ciphertext,
    EvaluationKeys,
    KeyMaterial,
    PublicKey,
    RelinKey,
    SecretKey,
    _HEADER,
    add,
    decrypt,
    decrypt_many,
    encrypt_many,
    make_rng,
    mul,
    mul_plain,
    relinearize_array,
    serialized_size,
)

FILE_MAGIC = b"IRISCT v1\n"
_FILE_HEAD = struct.Struct("<10sHH16sH")  # 32 bytes, keeps record bodies 4-byte aligned
EVAL_MEMORY = 192 << 20


# -- encrypted templates -----------------------------------------------------------


def _record_dtype(params: SchemeParams) -> np.dtype:
    k, n = len(params.q_primes), params.n
    return np.dtype([("length", "<u4"), ("head", "S%d" % HEADER_SIZE), ("body", "<u4", (2, k, n))])


@dataclass(eq=False)
class EncryptedTemplate:
    """Code and mask bit ciphertexts, each array shaped (rows * cols, 2, k, n).

    Arrays may be uint32 memory maps; residues are widened on use.
    """

    params: SchemeParams
    code: np.ndarray
    mask: np.ndarray
    rows: int
    cols: int
    noise_log2: float

    def __post_init__(self):
        k, n = len(self.params.q_primes), self.params.n
        want = (self.rows * self.cols, 2, k, n)
        if self.code.shape != want or self.mask.shape != want:
            raise ValueError(f"ciphertext arrays must have shape {want}")

    @property
    def bits(self) -> int:
        return self.rows * self.cols

    @property
    def params_hash(self) -> bytes:
        return self.params.digest

    @property
    def layout(self) -> tuple[int, int]:
        return self.rows, self.cols

    def code_cts(self) -> Ciphertext:
        return Ciphertext(self.params, self.code, 0, self.noise_log2)

    def mask_cts(self) -> Ciphertext:
        return Ciphertext(self.params, self.mask, 0, self.noise_log2)

    @property
    def nbytes(self) -> int:
        """Size of the IRISCT file holding this template."""
        return _FILE_HEAD.size + 2 * self.bits * (4 + serialized_size(self.params))

    def save(self, path) -> None:
        _write_file(path, self.params, self.rows, self.cols, self.noise_log2, self.code, self.mask)

    @classmethod
    def load(cls, path, params: SchemeParams, mmap: bool = True, verify: bool = True) -> "EncryptedTemplate":
        return _read_file(path, params, mmap, verify)


def _head_bytes(params: SchemeParams, noise_log2: float) -> bytes:
    return _HEADER.pack(CT_MAGIC, CT_VERSION, 2, 0, 0, params.digest, noise_log2)


def _open_records(path, params: SchemeParams, rows: int, cols: int, mode: str):
    return np.memmap(path, dtype=_record_dtype(params), mode=mode, offset=_FILE_HEAD.size, shape=(2 * rows * cols,))


def _write_file(path, params, rows, cols, noise_log2, code, mask) -> None:
    path = Path(path)
    bits = rows * cols
    with open(path, "wb") as fh:
        fh.write(_FILE_HEAD.pack(FILE_MAGIC, rows, cols, params.digest, 0))
        fh.truncate(_FILE_HEAD.size + 2 * bits * _record_dtype(params).itemsize)
    rec = _open_records(path, params, rows, cols, "r+")
    rec["length"] = serialized_size(params)
    rec["head"] = _head_bytes(params, noise_log2)
    step = max(1, EVAL_MEMORY // (8 * rec["body"][0].size))
    for src, base in ((code, 0), (mask, bits)):
        if src is None:
            continue
        for lo in range(0, bits, step):
            hi = min(bits, lo + step)
            rec["body"][base + lo : base + hi] = src[lo:hi]
    rec.flush()
    del rec


def _read_file(path, params: SchemeParams, mmap: bool, verify: bool) -> EncryptedTemplate:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(_FILE_HEAD.size)
    except OSError as exc:
        raise TemplateFormatError(f"cannot read {path}: {exc}") from exc
    if len(head) < _FILE_HEAD.size:
        raise TemplateFormatError("encrypted template file is truncated")
    magic, rows, cols, digest, _ = _FILE_HEAD.unpack(head)
    if magic != FILE_MAGIC:
        raise TemplateFormatError("not an IRISCT v1 file")
    if digest != params.digest:
        raise KeyMismatchError("encrypted template was produced under a different parameter set")
    dt = _record_dtype(params)
    expect = _FILE_HEAD.size + 2 * rows * cols * dt.itemsize
    if path.stat().st_size != expect:
        raise TemplateFormatError(f"file has {path.stat().st_size} bytes, expected {expect}")
    rec = _open_records(path, params, rows, cols, "r")
    if np.any(rec["length"] != serialized_size(params)):
        raise TemplateFormatError("ciphertext record length does not match the parameter set")
    heads = rec["head"]
    first = bytes(heads[0])
    magic_ct, version, parts, level, _, dg, nl = _HEADER.unpack(first.ljust(HEADER_SIZE, b"\0"))
    if magic_ct != CT_MAGIC or version != CT_VERSION or parts != 2 or level != 0 or dg != params.digest:
        raise TemplateFormatError("unexpected ciphertext header in encrypted template")
    if np.any(heads != heads[0]):
        raise TemplateFormatError("ciphertext headers differ within one encrypted template")
    body = rec["body"]
    if verify:
        q = np.array(params.q_primes, dtype=np.uint32)[:, None]
        step = max(1, EVAL_MEMORY // (4 * body[0].size))
        for lo in range(0, body.shape[0], step):
            if np.any(body[lo : lo + step] >= q):
                raise TemplateFormatError("ciphertext coefficient out of range")
    if not mmap:
        body = np.array(body)
    bits = rows * cols
    return EncryptedTemplate(params, body[:bits], body[bits:], rows, cols, nl)


def encrypt_template(t: IrisTemplate, pk: PublicKey | EvaluationKeys, rng=None, path=None) -> EncryptedTemplate:
    """Encrypt code then mask bits in row-major order.

    With `path`, ciphertexts stream straight into an IRISCT file and the
    result is memory-mapped from it (needed when a template exceeds RAM).
    """
    if isinstance(pk, EvaluationKeys):
        pk = pk.public_key
    params = pk.params
    bits = np.concatenate([t.code.reshape(-1), t.mask.reshape(-1)]).astype(np.int64)
    nb = t.rows * t.cols
    fresh = noise.fresh(params)
    if path is None:
        k, n = len(params.q_primes), params.n
        out = np.empty((2 * nb, 2, k, n), dtype=np.uint32)
        encrypt_many(pk, bits, rng, out=out)
        return EncryptedTemplate(params, out[:nb], out[nb:], t.rows, t.cols, fresh)
    _write_file(path, params, t.rows, t.cols, fresh, None, None)
    rec = _open_records(path, params, t.rows, t.cols, "r+")
    encrypt_many(pk, bits, rng, out=rec["body"])
    rec.flush()
    del rec
    return EncryptedTemplate.load(path, params, mmap=True, verify=False)


def decrypt_template(et: EncryptedTemplate, sk: SecretKey) -> IrisTemplate:
    code = decrypt_many(sk, et.code_cts()).reshape(et.rows, et.cols)
    mask = decrypt_many(sk, et.mask_cts()).reshape(et.rows, et.cols)
    if code.max(initial=0) > 1 or mask.max(initial=0) > 1:
        raise CryptoError("decrypted template contains non-bit values")
    return IrisTemplate(code.astype(np.uint8), mask.astype(np.uint8))


# -- homomorphic circuit -------------------------------------------------------------


def homomorphic_xor(a: Ciphertext, b: Ciphertext, keys: EvaluationKeys | RelinKey) -> Ciphertext:
    """Enc(a XOR b) = a + b - 2ab for bit plaintexts; one multiplicative level."""
    return add(add(a, b), mul_plain(mul(a, b, keys), -2))


@dataclass(eq=False)
class EncryptedScore:
    d_ct: Ciphertext
    n_ct: Ciphertext
    shift: int


class _Accumulator:
    """Running encrypted D (kept as an NTT-domain degree-2 sum) and N for one shift."""

    def __init__(self, ctx: RingContext):
        L = ctx.k + ctx.m
        self.d = np.zeros((1, 3, L, ctx.n), dtype=np.int64)
        self.n = np.zeros((2, ctx.k, ctx.n), dtype=np.int64)
        self.count = 0


def _lift_ntt(ctx: RingContext, a: np.ndarray) -> np.ndarray:
    return ctx.ntt(ctx.lift(a))


def _accumulate(ctx: RingContext, rk: RelinKey, qa, ql, ea, el, acc: _Accumulator) -> None:
    """Add one chunk of bits to `acc`.

    qa / ea hold query / enrolled ciphertexts as (2C, 2, k, n) residues,
    code bits first and mask bits second; ql / el are their lifted NTTs.
    """
    C = qa.shape[0] // 2
    L = ctx.k + ctx.m
    qv = ctx.q[:, None]
    T = np.empty((2 * C, 3, L, ctx.n), dtype=np.int64)
    kernels.tensor_pointwise(ql, el, ctx.all, T, False)
    ctx.intt(T)
    R = relinearize_array(ctx, rk, ctx.rescale(T))  # x*y for codes, m*m' for masks
    xy, mm = R[:C], R[C:]
    xor = (qa[:C] + ea[:C] + (qv - 2) * xy) % qv
    acc.n = (acc.n + mm.sum(axis=0)) % qv
    F = _lift_ntt(ctx, np.concatenate([xor, mm]))
    kernels.tensor_pointwise(F[:C], F[C:], ctx.all, acc.d, True)
    acc.count += C


def _finish(ctx: RingContext, rk: RelinKey, acc: _Accumulator, params: SchemeParams, fresh: float, shift: int):
    T = acc.d.copy()
    ctx.intt(T)
    d = relinearize_array(ctx, rk, ctx.rescale(T))[0]
    d_noise = noise.template_circuit(params, acc.count, fresh)
    n_noise = noise.template_count(params, acc.count, fresh)
    return EncryptedScore(Ciphertext(params, d, 2, d_noise), Ciphertext(params, acc.n.copy(), 1, n_noise), shift)


def _check_budget(params: SchemeParams, fresh: float, bits: int) -> None:
    bound = noise.template_circuit(params, bits, fresh)
    if bound >= noise.log2_capacity(params):
        raise NoiseBudgetError(
            f"masked-XOR sum over {bits} bits would reach noise 2^{bound:.1f}, above capacity "
            f"2^{noise.log2_capacity(params):.1f}"
        )


def _chunk_bits(ctx: RingContext, chunk: int | None) -> int:
    if chunk:
        return chunk
    per_bit = 20 * (ctx.k + ctx.m) * ctx.n * 8
    return max(1, EVAL_MEMORY // per_bit)


def _server_keys(keys) -> tuple[SchemeParams, RelinKey]:
    if isinstance(keys, EvaluationKeys):
        return keys.params, keys.relin_key
    if isinstance(keys, RelinKey):
        return keys.params, keys
    raise TypeError("server-side evaluation takes public EvaluationKeys only")


def _check_pair(query: EncryptedTemplate, enrolled: EncryptedTemplate, params: SchemeParams) -> None:
    if query.params_hash != params.digest or enrolled.params_hash != params.digest:
        raise KeyMismatchError("templates and evaluation keys use different parameter sets")
    if query.layout != enrolled.layout:
        raise ValueError(f"layouts differ: {query.layout} vs {enrolled.layout}")


def _pair_chunk(et: EncryptedTemplate, lo: int, hi: int) -> np.ndarray:
    return np.concatenate([et.code[lo:hi], et.mask[lo:hi]]).astype(np.int64)


def encrypted_hd_at_shift(
    query: EncryptedTemplate,
    enrolled: EncryptedTemplate,
    k: int,
    keys: EvaluationKeys,
    chunk: int | None = None,
) -> EncryptedScore:
    """Encrypted (D, N) of a query already rotated by k against the enrolled template."""
    params, rk = _server_keys(keys)
    _check_pair(query, enrolled, params)
    fresh = max(query.noise_log2, enrolled.noise_log2)
    _check_budget(params, fresh, query.bits)
    ctx = context(params)
    acc = _Accumulator(ctx)
    step = _chunk_bits(ctx, chunk)
    for lo in range(0, query.bits, step):
        hi = min(query.bits, lo + step)
        qa, ea = _pair_chunk(query, lo, hi), _pair_chunk(enrolled, lo, hi)
        _accumulate(ctx, rk, qa, _lift_ntt(ctx, qa), ea, _lift_ntt(ctx, ea), acc)
    return _finish(ctx, rk, acc, params, fresh, k)


def decrypt_score(s: EncryptedScore, sk: SecretKey, bits: int | None = None) -> tuple[int, int]:
    d, n = decrypt(sk, s.d_ct), decrypt(sk, s.n_ct)
    if d > n or (bits is not None and n > bits):
        raise CryptoError(f"inconsistent decrypted score D={d}, N={n}")
    return d, n


# -- client/server protocol -------------------------------------------------------------


@dataclass
class ProtocolReport:
    result: MatchResult
    timings: dict[str, float]  # encrypt / evaluate / decrypt seconds
    bytes: dict[str, int]
    scores: list[tuple[int, int, int]] = field(default_factory=list)  # (shift, D, N)

    @property
    def total_seconds(self) -> float:
        return sum(self.timings.values())


def protocol_match(
    query_plain: IrisTemplate,
    enrolled_ct: EncryptedTemplate,
    keys: KeyMaterial,
    policy: MatchPolicy = MatchPolicy(),
    rng=None,
    chunk: int | None = None,
    shifts: list[int] | None = None,
) -> ProtocolReport:
    """Client encrypts every shifted query, server evaluates all shifts, client decrypts.

    Work is streamed in chunks of bits (the outer loop) so that no full
    shifted query needs to be held at once; each shift still receives a
    fresh encryption of its own rotated template and no shift is skipped.
    """
    params = keys.params
    server = keys.public()
    _, rk = _server_keys(server)
    if enrolled_ct.params_hash != params.digest:
        raise KeyMismatchError("enrolled template does not match the key's parameter set")
    if query_plain.shape != enrolled_ct.layout:
        raise ValueError(f"layouts differ: {query_plain.shape} vs {enrolled_ct.layout}")
    rng = make_rng(rng)
    ctx = context(params)
    shifts = policy.shifts() if shifts is None else list(shifts)
    fresh = max(noise.fresh(params), enrolled_ct.noise_log2)
    _check_budget(params, fresh, enrolled_ct.bits)
    rotated = [template_rotate(query_plain, k) for k in shifts]
    flat = [(r.code.reshape(-1), r.mask.reshape(-1)) for r in rotated]
    accs = [_Accumulator(ctx) for _ in shifts]
    t_enc = t_eval = 0.0
    bits = enrolled_ct.bits
    step = _chunk_bits(ctx, chunk)
    for lo in range(0, bits, step):
        hi = min(bits, lo + step)
        t0 = time.perf_counter()
        ea = _pair_chunk(enrolled_ct, lo, hi)
        el = _lift_ntt(ctx, ea)
        t_eval += time.perf_counter() - t0
        for (code, mask), acc in zip(flat, accs):
            t0 = time.perf_counter()
            plain = np.concatenate([code[lo:hi], mask[lo:hi]])
            qa = encrypt_many(server, plain, rng).data
            t1 = time.perf_counter()
            _accumulate(ctx, rk, qa, _lift_ntt(ctx, qa), ea, el, acc)
            t2 = time.perf_counter()
            t_enc += t1 - t0
            t_eval += t2 - t1
    t0 = time.perf_counter()
    scores_ct = [_finish(ctx, rk, acc, params, fresh, k) for k, acc in zip(shifts, accs)]
    t_eval += time.perf_counter() - t0

    t0 = time.perf_counter()
    scores = []
    for s in scores_ct:
        d, n = decrypt_score(s, keys.secret_key, bits)
        scores.append((s.shift, d, n))
    t_dec = time.perf_counter() - t0
    result = select_best(scores, policy)
    ct_size = serialized_size(params)
    return ProtocolReport(
        result,
        {"encrypt": t_enc, "evaluate": t_eval, "decrypt": t_dec},
        {
            "encrypt": len(shifts) * 2 * bits * ct_size,
            "evaluate": enrolled_ct.nbytes,
            "decrypt": len(shifts) * 2 * ct_size,
        },
        scores,
    )


def write_timing_csv(path, report: ProtocolReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "seconds", "bytes"])
        for phase in ("encrypt", "evaluate", "decrypt"):
            w.writerow([phase, f"{report.timings[phase]:.6f}", report.bytes[phase]])

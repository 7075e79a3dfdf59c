"""BFV-style leveled scheme over Z_q[X]/(X^n + 1), one integer per ciphertext.

Ciphertexts carry residues in coefficient form with shape
(*batch, parts, k, n); every operation acts elementwise over the batch axes,
so a whole template of bit encryptions is a single Ciphertext value.
Products use the joint RNS basis Q|P for an exact tensor and rescale by t/Q.
"""

from __future__ import annotations

import math
import secrets
import struct
from dataclasses import dataclass, field

import numpy as np

from iris_he.errors import (
    DepthLimitError,
    KeyMismatchError,
    NoiseBudgetError,
    ParameterError,
)
from iris_he.fhe import kernels, noise
from iris_he.fhe.params import TEMPLATE_BITS, SchemeParams
from iris_he.fhe.ring import RingContext, context

MAX_DEPTH = 2
CT_MAGIC = b"IHCT"
CT_VERSION = 1
_HEADER = struct.Struct("<4sBBBB16sd")  # 36 bytes
HEADER_SIZE = _HEADER.size
CHUNK_BYTES = 48 << 20


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        seed = secrets.randbits(128)
    if isinstance(seed, (bytes, bytearray)):
        seed = int.from_bytes(seed, "little")
    return np.random.default_rng(seed)


def _ternary(rng, shape) -> np.ndarray:
    return rng.integers(-1, 2, size=shape, dtype=np.int64)


def _gauss(rng, shape, sigma: float) -> np.ndarray:
    bound = math.ceil(noise.GAUSS_CLIP * sigma)
    e = np.rint(rng.normal(0.0, sigma, size=shape)).astype(np.int64)
    return np.clip(e, -bound, bound)


def _uniform(rng, ctx: RingContext, shape) -> np.ndarray:
    return rng.integers(0, ctx.q[:, None], size=(*shape, ctx.k, ctx.n), dtype=np.int64)


def _to_rns(poly: np.ndarray, ctx: RingContext) -> np.ndarray:
    """Small signed integer polys (..., n) -> residues (..., k, n)."""
    return np.asarray(poly, dtype=np.int64)[..., None, :] % ctx.q[:, None]


# -- keys ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SecretKey:
    params: SchemeParams
    s: np.ndarray  # (n,) ternary

    def __post_init__(self):
        ctx = context(self.params)
        s_ntt = ctx.ntt(_to_rns(self.s, ctx))
        object.__setattr__(self, "s_ntt", s_ntt)
        s2 = ctx.intt(s_ntt * s_ntt % ctx.q[:, None])[0]
        q0 = int(ctx.q[0])
        s2 = np.where(s2 > q0 // 2, s2 - q0, s2)  # |coefficients| <= n
        # coefficient-0 extraction vectors for x*s and x*s^2 (negacyclic)
        object.__setattr__(self, "s_rev", _rev_coeffs(np.asarray(self.s, dtype=np.int64)))
        object.__setattr__(self, "s2_rev", _rev_coeffs(s2))


def _rev_coeffs(x: np.ndarray) -> np.ndarray:
    """r with (a*x)_0 = sum_j a_j r_j in Z[X]/(X^n+1), for a small signed poly x."""
    r = np.empty_like(x)
    r[0] = x[0]
    r[1:] = -x[:0:-1]
    return r


@dataclass(frozen=True, eq=False)
class PublicKey:
    params: SchemeParams
    ntt: np.ndarray  # (2, k, n): (b, a) with b = -(a*s + e)


@dataclass(frozen=True, eq=False)
class RelinKey:
    params: SchemeParams
    ntt: np.ndarray  # (k digits, 2, k limbs, n)


@dataclass(frozen=True, eq=False)
class EvaluationKeys:
    """Public material: everything the matching server may hold."""

    public_key: PublicKey
    relin_key: RelinKey

    @property
    def params(self) -> SchemeParams:
        return self.public_key.params


@dataclass(frozen=True, eq=False)
class KeyMaterial:
    params: SchemeParams
    secret_key: SecretKey
    public_key: PublicKey
    relin_key: RelinKey

    def public(self) -> EvaluationKeys:
        return EvaluationKeys(self.public_key, self.relin_key)

    def to_bytes(self) -> bytes:
        import io

        buf = io.BytesIO()
        np.savez(
            buf,
            params=np.frombuffer(self.params.to_text().encode(), dtype=np.uint8),
            s=self.secret_key.s.astype(np.int8),
            pk=self.public_key.ntt.astype(np.uint32),
            rk=self.relin_key.ntt.astype(np.uint32),
        )
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "KeyMaterial":
        import io

        z = np.load(io.BytesIO(data))
        params = SchemeParams.from_text(z["params"].tobytes().decode())
        return cls(
            params,
            SecretKey(params, z["s"].astype(np.int64)),
            PublicKey(params, z["pk"].astype(np.int64)),
            RelinKey(params, z["rk"].astype(np.int64)),
        )


def check_params(params: SchemeParams) -> None:
    """Reject parameter sets that cannot run the depth-2 template circuit."""
    need_t = 2 * TEMPLATE_BITS + 1
    if params.t < need_t:
        raise ParameterError(
            f"t = {params.t} cannot hold bit-count sums up to {TEMPLATE_BITS}; need t >= {need_t}"
        )
    final = noise.template_circuit(params)
    cap = noise.log2_capacity(params)
    if final >= cap:
        raise ParameterError(
            f"depth-2 template circuit noise ~2^{final:.1f} exceeds capacity 2^{cap:.1f}; "
            f"q must grow by at least {math.ceil(final - cap) + 1} bits"
        )


def keygen(params: SchemeParams, seed=None) -> KeyMaterial:
    """Deterministic for a given seed (int or bytes)."""
    check_params(params)
    ctx = context(params)
    rng = make_rng(seed)
    qv = ctx.q[:, None]
    sk = SecretKey(params, _ternary(rng, params.n))
    a = _uniform(rng, ctx, ())  # NTT domain directly: uniform is preserved
    e = ctx.ntt(_to_rns(_gauss(rng, params.n, params.sigma), ctx))
    b = (-(a * sk.s_ntt % qv) - e) % qv
    pk = PublicKey(params, np.stack([b, a]))

    s2_ntt = sk.s_ntt * sk.s_ntt % qv
    rk = np.empty((ctx.k, 2, ctx.k, params.n), dtype=np.int64)
    for i in range(ctx.k):
        ai = _uniform(rng, ctx, ())
        ei = ctx.ntt(_to_rns(_gauss(rng, params.n, params.sigma), ctx))
        bi = (-(ai * sk.s_ntt % qv) - ei) % qv
        bi[i] = (bi[i] + s2_ntt[i]) % ctx.q[i]
        rk[i, 0], rk[i, 1] = bi, ai
    return KeyMaterial(params, sk, pk, RelinKey(params, rk))


# -- ciphertexts --------------------------------------------------------------


@dataclass(eq=False)
class Ciphertext:
    """One or many ciphertexts sharing parameters, level and a noise bound."""

    params: SchemeParams
    data: np.ndarray  # (*batch, parts, k, n)
    level: int = 0
    noise_log2: float = field(default=0.0)

    def __post_init__(self):
        if self.data.ndim < 3 or self.data.shape[-2:] != (len(self.params.q_primes), self.params.n):
            raise ParameterError(f"ciphertext array shape {self.data.shape} does not fit params")
        if self.parts not in (2, 3):
            raise ParameterError(f"ciphertext has {self.parts} parts")

    @property
    def parts(self) -> int:
        return self.data.shape[-3]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.data.shape[:-3]

    @property
    def level_tag(self) -> int:
        return self.level

    @property
    def noise_budget_bits(self) -> float:
        return noise.log2_capacity(self.params) - self.noise_log2

    def __len__(self) -> int:
        return self.batch_shape[0] if self.batch_shape else 1

    def __getitem__(self, idx) -> "Ciphertext":
        if not self.batch_shape:
            raise TypeError("scalar ciphertext is not indexable")
        return Ciphertext(self.params, self.data[idx], self.level, self.noise_log2)

    def residues(self) -> np.ndarray:
        return np.asarray(self.data, dtype=np.int64)


def _same_params(*cts: Ciphertext) -> SchemeParams:
    p = cts[0].params
    for c in cts[1:]:
        if c.params.digest != p.digest:
            raise KeyMismatchError("operands use different parameter sets")
    return p


def encrypt_many(pk: PublicKey | EvaluationKeys, values, rng=None, out: np.ndarray | None = None) -> Ciphertext:
    """Encrypt an integer array elementwise; the result's batch shape is values.shape.

    `out` may be a preallocated (values.size, 2, k, n) array of any integer
    dtype wide enough for residues (uint32 suffices), e.g. a memory map.
    """
    if isinstance(pk, EvaluationKeys):
        pk = pk.public_key
    params = pk.params
    ctx = context(params)
    m = np.asarray(values, dtype=np.int64)
    if m.size and (m.min() < 0 or m.max() >= params.t):
        raise ValueError(f"plaintext outside [0, {params.t})")
    rng = make_rng(rng)
    flat = m.reshape(-1)
    shape = (flat.size, 2, ctx.k, params.n)
    if out is None:
        out = np.empty(shape, dtype=np.int64)
    elif out.shape != shape:
        raise ValueError(f"out has shape {out.shape}, expected {shape}")
    step = _chunk(4 * ctx.k * params.n * 8)
    qv = ctx.q[:, None]
    for lo in range(0, flat.size, step):
        hi = min(flat.size, lo + step)
        B = hi - lo
        u = ctx.ntt(_to_rns(_ternary(rng, (B, params.n)), ctx))
        e = _gauss(rng, (B, 2, params.n), params.sigma)
        c = np.empty((B, 2, ctx.k, params.n), dtype=np.int64)
        c[:, 0] = u * pk.ntt[0] % qv
        c[:, 1] = u * pk.ntt[1] % qv
        ctx.intt(c)
        c += _to_rns(e, ctx)
        c[:, 0, :, 0] += flat[lo:hi, None] * ctx.delta_mod_q
        out[lo:hi] = c % qv
    return Ciphertext(params, out.reshape(*m.shape, 2, ctx.k, params.n), 0, noise.fresh(params))


def encrypt(pk: PublicKey | EvaluationKeys, m: int, rng=None) -> Ciphertext:
    return encrypt_many(pk, np.int64(m), rng)


def _chunk(bytes_per_item: int) -> int:
    return max(1, CHUNK_BYTES // max(1, bytes_per_item))


def decrypt_many(sk: SecretKey, c: Ciphertext) -> np.ndarray:
    """Decrypt every ciphertext in the batch; refuses when the tracked budget is gone."""
    if c.params.digest != sk.params.digest:
        raise KeyMismatchError("ciphertext and key use different parameter sets")
    if c.noise_budget_bits <= 0:
        raise NoiseBudgetError(
            f"noise budget exhausted ({c.noise_budget_bits:.1f} bits); decryption would be unreliable"
        )
    ctx = context(c.params)
    x = c.residues().reshape(-1, c.parts, ctx.k, ctx.n)
    acc = x[:, 0, :, 0] + (x[:, 1] @ sk.s_rev) % ctx.q
    if c.parts == 3:
        acc += (x[:, 2] @ sk.s2_rev) % ctx.q
    acc %= ctx.q
    m = kernels.crt_fraction(np.ascontiguousarray(acc), ctx.q, ctx.q_hat_inv, c.params.t)
    return m.reshape(c.batch_shape)


def decrypt(sk: SecretKey, c: Ciphertext) -> int:
    out = decrypt_many(sk, c)
    if out.ndim:
        raise ValueError("decrypt expects a single ciphertext; use decrypt_many")
    return int(out)


def _phase(sk: SecretKey, x: np.ndarray, ctx: RingContext) -> np.ndarray:
    """c0 + c1 s (+ c2 s^2) mod q in coefficient form for one ciphertext (parts, k, n)."""
    qv = ctx.q[:, None]
    acc = x[0].copy()
    rest = ctx.ntt(x[1:].copy())
    acc += ctx.intt(rest[0] * sk.s_ntt % qv)
    if x.shape[0] == 3:
        s2n = sk.s_ntt * sk.s_ntt % qv
        acc += ctx.intt(rest[1] * s2n % qv)
    return acc % qv


def measured_noise_log2(sk: SecretKey, c: Ciphertext) -> float:
    """log2 of the largest centred noise coefficient, maximised over the batch."""
    ctx = context(c.params)
    Q = ctx.Q
    delta = c.params.delta
    hats = [Q // int(q) for q in ctx.q]
    worst = 1
    flat = c.residues().reshape(-1, c.parts, ctx.k, ctx.n)
    msgs = decrypt_many(sk, Ciphertext(c.params, flat, 0, 0.0)).reshape(-1)
    for x, m in zip(flat, msgs):
        ph = _phase(sk, x, ctx)
        y = ph * ctx.q_hat_inv[:, None] % ctx.q[:, None]
        val = [sum(int(y[i, j]) * hats[i] for i in range(ctx.k)) % Q for j in range(ctx.n)]
        val[0] = (val[0] - delta * int(m)) % Q
        worst = max(worst, max(min(v, Q - v) for v in val))
    return math.log2(worst)


def noise_budget(c: Ciphertext, sk: SecretKey) -> float:
    """log2(q / 2t) minus log2 of the measured noise magnitude (needs the secret key)."""
    return noise.log2_capacity(c.params) - measured_noise_log2(sk, c)


# -- homomorphic operations ----------------------------------------------------


def _pad(x: np.ndarray, parts: int) -> np.ndarray:
    if x.shape[-3] == parts:
        return x
    pad = np.zeros((*x.shape[:-3], parts - x.shape[-3], *x.shape[-2:]), dtype=np.int64)
    return np.concatenate([x, pad], axis=-3)


def add(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    params = _same_params(a, b)
    ctx = context(params)
    parts = max(a.parts, b.parts)
    data = (_pad(a.residues(), parts) + _pad(b.residues(), parts)) % ctx.q[:, None]
    return Ciphertext(params, data, max(a.level, b.level), noise.add(params, a.noise_log2, b.noise_log2))


def sum_all(c: Ciphertext) -> Ciphertext:
    """Sum over all batch entries into a single ciphertext."""
    ctx = context(c.params)
    x = c.residues().reshape(-1, c.parts, ctx.k, ctx.n)
    data = x.sum(axis=0) % ctx.q[:, None]  # < 2^31 * 2^31 entries before overflow
    count = x.shape[0]
    bound = math.log2(count * (2.0**c.noise_log2 + c.params.q % c.params.t))
    return Ciphertext(c.params, data, c.level, bound)


def _centred(k: int, t: int) -> int:
    k %= t
    return k - t if k > t // 2 else k


def add_plain(a: Ciphertext, k: int) -> Ciphertext:
    params = a.params
    if abs(k) >= params.t:
        raise ValueError(f"|k| must be < t = {params.t}")
    ctx = context(params)
    data = a.residues().copy()
    kk = k % params.t
    data[..., 0, :, 0] = (data[..., 0, :, 0] + kk * ctx.delta_mod_q) % ctx.q
    return Ciphertext(params, data, a.level, noise.add_plain(params, a.noise_log2))


def mul_plain(a: Ciphertext, k: int) -> Ciphertext:
    """Multiply by a scalar; negative k acts as t - |k| on plaintexts."""
    params = a.params
    if abs(k) >= params.t:
        raise ValueError(f"|k| must be < t = {params.t}")
    ctx = context(params)
    kc = _centred(k, params.t)
    data = a.residues() * (kc % ctx.q[:, None]) % ctx.q[:, None]
    return Ciphertext(params, data, a.level, noise.mul_plain(params, a.noise_log2, kc))


def _tensor_ntt(ctx: RingContext, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Lifted NTT-domain tensor of (B, 2, k, n) operands -> (B, 3, k+m, n)."""
    L = ctx.k + ctx.m
    A = ctx.ntt(ctx.lift(a))
    Bq = ctx.ntt(ctx.lift(b))
    out = np.empty((a.shape[0], 3, L, ctx.n), dtype=np.int64)
    kernels.tensor_pointwise(A, Bq, ctx.all, out, False)
    return out


def relinearize_array(ctx: RingContext, rk: RelinKey, x: np.ndarray) -> np.ndarray:
    """(B, 3, k, n) -> (B, 2, k, n) by RNS-digit key switching."""
    digits = kernels.decompose_digits(np.ascontiguousarray(x[:, 2]), ctx.q)  # (B, k, k, n)
    ctx.ntt(digits)
    acc = ctx.intt(kernels.keyswitch_accumulate(digits, rk.ntt, ctx.q))
    return (x[:, :2] + acc) % ctx.q[:, None]


def _mul_arrays(ctx: RingContext, a: np.ndarray, b: np.ndarray, rk: RelinKey | None) -> np.ndarray:
    T = _tensor_ntt(ctx, a, b)
    ctx.intt(T)
    r = ctx.rescale(T)
    return r if rk is None else relinearize_array(ctx, rk, r)


def _check_mul(a: Ciphertext, b: Ciphertext) -> tuple[SchemeParams, int, float]:
    params = _same_params(a, b)
    if a.parts != 2 or b.parts != 2:
        raise ParameterError("multiply expects relinearized (2-part) operands")
    level = max(a.level, b.level) + 1
    if level > MAX_DEPTH:
        raise DepthLimitError(f"multiplication would reach depth {level} > {MAX_DEPTH}")
    bound = noise.mul(params, a.noise_log2, b.noise_log2)
    if noise.log2_capacity(params) - bound <= 0:
        raise NoiseBudgetError(
            f"product noise ~2^{bound:.1f} would exhaust the budget; refusing to multiply"
        )
    return params, level, bound


def _broadcast(a: Ciphertext, b: Ciphertext):
    shape = np.broadcast_shapes(a.batch_shape, b.batch_shape)
    x = np.broadcast_to(a.data, (*shape, *a.data.shape[-3:]))
    y = np.broadcast_to(b.data, (*shape, *b.data.shape[-3:]))
    return shape, x.reshape(-1, *a.data.shape[-3:]), y.reshape(-1, *b.data.shape[-3:])


def mul(a: Ciphertext, b: Ciphertext, rk: RelinKey | EvaluationKeys | None) -> Ciphertext:
    """Homomorphic product, relinearized to 2 parts (3 parts if rk is None)."""
    if isinstance(rk, EvaluationKeys):
        rk = rk.relin_key
    params, level, bound = _check_mul(a, b)
    if rk is None:
        bound = noise.tensor(params, a.noise_log2, b.noise_log2)
    ctx = context(params)
    shape, x, y = _broadcast(a, b)
    parts = 3 if rk is None else 2
    out = np.empty((x.shape[0], parts, ctx.k, ctx.n), dtype=np.int64)
    step = _chunk(8 * (ctx.k + ctx.m) * ctx.n * 8)
    for lo in range(0, x.shape[0], step):
        hi = min(x.shape[0], lo + step)
        xa = np.asarray(x[lo:hi], dtype=np.int64)
        ya = np.asarray(y[lo:hi], dtype=np.int64)
        out[lo:hi] = _mul_arrays(ctx, xa, ya, rk)
    return Ciphertext(params, out.reshape(*shape, parts, ctx.k, ctx.n), level, bound)


def relinearize(c: Ciphertext, rk: RelinKey | EvaluationKeys) -> Ciphertext:
    if isinstance(rk, EvaluationKeys):
        rk = rk.relin_key
    if c.parts == 2:
        return c
    ctx = context(c.params)
    x = c.residues().reshape(-1, 3, ctx.k, ctx.n)
    out = relinearize_array(ctx, rk, x)
    bound = math.log2(2.0**c.noise_log2 + noise.relin(c.params))
    return Ciphertext(c.params, out.reshape(*c.batch_shape, 2, ctx.k, ctx.n), c.level, bound)


# -- wire format -----------------------------------------------------------------


def serialized_size(params: SchemeParams, parts: int = 2) -> int:
    return HEADER_SIZE + 4 * parts * len(params.q_primes) * params.n


def serialize(c: Ciphertext) -> bytes:
    if c.batch_shape:
        raise ValueError("serialize expects a single ciphertext")
    head = _HEADER.pack(CT_MAGIC, CT_VERSION, c.parts, c.level, 0, c.params.digest, c.noise_log2)
    return head + c.residues().astype("<u4").tobytes()


def deserialize(data: bytes, params: SchemeParams) -> Ciphertext:
    if len(data) < HEADER_SIZE:
        raise ValueError("truncated ciphertext")
    magic, version, parts, level, _, digest, nl = _HEADER.unpack_from(data)
    if magic != CT_MAGIC or version != CT_VERSION:
        raise ValueError("not a serialized ciphertext")
    if digest != params.digest:
        raise KeyMismatchError("ciphertext parameter hash does not match the expected parameter set")
    if parts not in (2, 3) or level > MAX_DEPTH:
        raise ValueError(f"corrupt ciphertext header (parts={parts}, level={level})")
    k, n = len(params.q_primes), params.n
    body = np.frombuffer(data, dtype="<u4", offset=HEADER_SIZE)
    if body.size != parts * k * n:
        raise ValueError("ciphertext body length does not match the header")
    if np.any(body.reshape(parts, k, n) >= np.array(params.q_primes, dtype=np.uint64)[:, None]):
        raise ValueError("ciphertext coefficient out of range")
    return Ciphertext(params, body.astype(np.int64).reshape(parts, k, n), level, nl)

"""RNS ring context: NTT tables, auxiliary basis and conversion constants."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from iris_he.fhe import kernels
from iris_he.fhe.params import TEMPLATE_BITS, SchemeParams, ntt_primes


def _bitrev(i: int, bits: int) -> int:
    return int(format(i, f"0{bits}b")[::-1], 2) if bits else 0


def _root_2n(p: int, n: int) -> int:
    """A primitive 2n-th root of unity mod p."""
    e = (p - 1) // (2 * n)
    for g in range(2, p):
        psi = pow(g, e, p)
        if pow(psi, n, p) == p - 1:
            return psi
    raise ValueError(f"no primitive 2n-th root mod {p}")


def _shoup(w, p) -> np.ndarray:
    """Shoup companions floor(w * 2^32 / p); p may be a scalar or broadcast array."""
    w = np.asarray(w, dtype=object)
    return np.asarray((w * (1 << 32)) // np.asarray(p, dtype=object), dtype=np.int64)


def ntt_tables(p: int, n: int):
    bits = n.bit_length() - 1
    psi = _root_2n(p, n)
    ipsi = pow(psi, -1, p)
    rev = [_bitrev(i, bits) for i in range(n)]
    fw = np.array([pow(psi, r, p) for r in rev], dtype=np.int64)
    iw = np.array([pow(ipsi, r, p) for r in rev], dtype=np.int64)
    return fw, _shoup(fw, p), iw, _shoup(iw, p)



def _u(x: np.ndarray) -> np.ndarray:
    # residues are non-negative, so the uint64 view holds the same values
    return x.view(np.uint64)


class RingContext:
    """Precomputed data for one parameter set.

    The auxiliary basis P is chosen so that an accumulated tensor product of
    up to TEMPLATE_BITS terms, and its rescaled value t*X/Q, are represented
    exactly over Q|P and over P respectively.
    """

    def __init__(self, params: SchemeParams):
        self.params = params
        n, t = params.n, params.t
        self.n = n
        q = [int(x) for x in params.q_primes]
        Q = math.prod(q)
        need = math.log2(Q) + math.log2(t) + math.log2(n) + math.log2(2 * TEMPLATE_BITS) + 4
        below = min(q)
        m = 1
        while True:
            p = ntt_primes(n, m, below=below, exclude=q)
            if sum(math.log2(x) for x in p) > need:
                break
            m += 1
        P = math.prod(p)
        self.k, self.m = len(q), m
        self.q = np.array(q, dtype=np.int64)
        self.p = np.array(p, dtype=np.int64)
        self.all = np.concatenate([self.q, self.p])
        self.Q, self.P = Q, P

        tabs = [ntt_tables(int(x), n) for x in self.all]
        self.psi = np.stack([x[0] for x in tabs])
        self.psi_sh = np.stack([x[1] for x in tabs])
        self.ipsi = np.stack([x[2] for x in tabs])
        self.ipsi_sh = np.stack([x[3] for x in tabs])
        ninv = [pow(n, -1, int(x)) for x in self.all]
        self.ninv = np.array(ninv, dtype=np.int64)
        self.ninv_sh = np.array([(v << 32) // int(x) for v, x in zip(ninv, self.all)], dtype=np.int64)

        # Q -> P extension
        self.q_hat_inv = np.array([pow(Q // qi, -1, qi) for qi in q], dtype=np.int64)
        self.q_inv_f = np.array([1.0 / qi for qi in q])
        self.q_hat_mod_p = np.array([[(Q // qi) % pj for pj in p] for qi in q], dtype=np.int64)
        self.Q_mod_p = np.array([Q % pj for pj in p], dtype=np.int64)
        # P -> Q extension
        self.p_hat_inv = np.array([pow(P // pj, -1, pj) for pj in p], dtype=np.int64)
        self.p_inv_f = np.array([1.0 / pj for pj in p])
        self.p_hat_mod_q = np.array([[(P // pj) % qi for qi in q] for pj in p], dtype=np.int64)
        self.P_mod_q = np.array([P % qi for qi in q], dtype=np.int64)
        self.q_hat_inv_sh = _shoup(self.q_hat_inv, self.q)
        self.q_hat_mod_p_sh = _shoup(self.q_hat_mod_p, self.p[None, :])
        self.p_hat_inv_sh = _shoup(self.p_hat_inv, self.p)
        self.p_hat_mod_q_sh = _shoup(self.p_hat_mod_q, self.q[None, :])
        # round(t X / Q) over Q|P -> P
        self.sc_inv = np.array([pow((Q // qi) * P % qi, -1, qi) for qi in q], dtype=np.int64)
        self.sc_frac = np.array([(t * P % qi) / qi for qi in q])
        self.sc_int = np.array([[(t * P // qi) % pj for pj in p] for qi in q], dtype=np.int64)
        self.sc_tqinv = np.array([t * pow(Q, -1, pj) % pj for pj in p], dtype=np.int64)
        self.sc_inv_sh = _shoup(self.sc_inv, self.q)
        self.sc_int_sh = _shoup(self.sc_int, self.p[None, :])
        self.sc_tqinv_sh = _shoup(self.sc_tqinv, self.p)

        delta = Q // t
        self.delta_mod_q = np.array([delta % qi for qi in q], dtype=np.int64)
        self.r_t = Q % t

    # -- NTT over a prefix (Q) or the whole joint basis ---------------------
    def ntt(self, a: np.ndarray) -> np.ndarray:
        """Forward NTT in place over the last two axes (L, n); L = k or k + m."""
        L = a.shape[-2]
        flat = a.reshape(-1, L, self.n)
        kernels.ntt_forward(_u(flat), _u(self.psi[:L]), _u(self.psi_sh[:L]), _u(self.all[:L]))
        return a

    def intt(self, a: np.ndarray) -> np.ndarray:
        L = a.shape[-2]
        flat = a.reshape(-1, L, self.n)
        kernels.ntt_inverse(
            _u(flat), _u(self.ipsi[:L]), _u(self.ipsi_sh[:L]), _u(self.ninv[:L]), _u(self.ninv_sh[:L]), _u(self.all[:L])
        )
        return a

    def ntt_p(self, a: np.ndarray) -> np.ndarray:
        """Forward NTT for arrays that hold only the P limbs."""
        flat = a.reshape(-1, self.m, self.n)
        k = self.k
        kernels.ntt_forward(_u(flat), _u(self.psi[k:]), _u(self.psi_sh[k:]), _u(self.p))
        return a

    # -- basis conversions ---------------------------------------------------
    def q_to_p(self, x: np.ndarray) -> np.ndarray:
        lead = x.shape[:-2]
        flat = np.ascontiguousarray(x.reshape(-1, self.k, self.n), dtype=np.int64)
        out = kernels.base_extend(
            flat, self.q, self.q_hat_inv, self.q_hat_inv_sh, self.q_inv_f,
            self.q_hat_mod_p, self.q_hat_mod_p_sh, self.Q_mod_p, self.p,
        )
        return out.reshape(*lead, self.m, self.n)

    def p_to_q(self, x: np.ndarray) -> np.ndarray:
        lead = x.shape[:-2]
        flat = np.ascontiguousarray(x.reshape(-1, self.m, self.n), dtype=np.int64)
        out = kernels.base_extend(
            flat, self.p, self.p_hat_inv, self.p_hat_inv_sh, self.p_inv_f,
            self.p_hat_mod_q, self.p_hat_mod_q_sh, self.P_mod_q, self.q,
        )
        return out.reshape(*lead, self.k, self.n)

    def lift(self, x: np.ndarray) -> np.ndarray:
        """Residues mod Q (..., k, n) -> joint basis (..., k + m, n)."""
        return np.concatenate([np.asarray(x, dtype=np.int64), self.q_to_p(x)], axis=-2)

    def rescale(self, x: np.ndarray) -> np.ndarray:
        """round(t X / Q) mod Q for X over the joint basis in coefficient form."""
        lead = x.shape[:-2]
        flat = np.ascontiguousarray(x.reshape(-1, self.k + self.m, self.n))
        in_p = kernels.scale_round(
            flat, self.k, self.q, self.sc_inv, self.sc_inv_sh, self.sc_frac,
            self.sc_int, self.sc_int_sh, self.sc_tqinv, self.sc_tqinv_sh, self.p,
        )
        return self.p_to_q(in_p).reshape(*lead, self.k, self.n)

    def modulus(self, L: int) -> np.ndarray:
        """Prime column vector for broadcasting over (..., L, n)."""
        return self.all[:L, None]


@lru_cache(maxsize=8)
def context(params: SchemeParams) -> RingContext:
    return RingContext(params)


def negacyclic_schoolbook(a, b, p: int) -> list[int]:
    """Reference O(n^2) product in Z_p[X]/(X^n + 1)."""
    n = len(a)
    out = [0] * n
    for i in range(n):
        ai = int(a[i])
        if not ai:
            continue
        for j in range(n):
            k = i + j
            if k < n:
                out[k] += ai * int(b[j])
            else:
                out[k - n] -= ai * int(b[j])
    return [v % p for v in out]

"""Compiled RNS kernels: negacyclic NTT, base extension and BFV rescaling.

All residues are int64 in [0, p) with p < 2^31. Shoup precomputation uses a
32-bit shift, so a multiplicand must be fully reduced (< p) before use.
"""

from __future__ import annotations

import numba as nb
import numpy as np


@nb.njit(cache=True, inline="always")
def _shoup(x, w, w_sh, p):
    # x < p, w < p, w_sh = floor(w * 2^32 / p); result in [0, 2p)
    q = (x * w_sh) >> 32
    return x * w - q * p


# The transforms work on uint64 views so that lazy reductions can be written
# branch-free as min(u, u - p): the subtraction wraps when u < p.


@nb.njit(cache=True, inline="always")
def _ct_span(lo, hi, w, ws, p, p2):
    s = np.uint64(32)
    for j in range(lo.shape[0]):
        u = lo[j]
        u = min(u, u - p2)
        x = hi[j]
        x = min(x, x - p2)
        x = min(x, x - p)
        v = x * w - ((x * ws) >> s) * p
        lo[j] = u + v
        hi[j] = u + p2 - v


@nb.njit(cache=True, inline="always")
def _gs_span(lo, hi, w, ws, p, p2):
    s = np.uint64(32)
    for j in range(lo.shape[0]):
        u = lo[j]
        v = hi[j]
        a = u + v
        lo[j] = min(a, a - p2)
        d = u + p2 - v
        d = min(d, d - p2)
        d = min(d, d - p)
        hi[j] = d * w - ((d * ws) >> s) * p


@nb.njit(cache=True, error_model="numpy", boundscheck=False)
def _ntt_one(a, psi, psi_sh, p):
    n = a.shape[0]
    p2 = np.uint64(2) * p
    t = n
    m = 1
    while m < n:
        t >>= 1
        for i in range(m):
            j1 = 2 * i * t
            _ct_span(a[j1 : j1 + t], a[j1 + t : j1 + 2 * t], psi[m + i], psi_sh[m + i], p, p2)
        m <<= 1
    for j in range(n):
        u = a[j]
        u = min(u, u - p2)
        a[j] = min(u, u - p)


@nb.njit(cache=True, error_model="numpy", boundscheck=False)
def _intt_one(a, ipsi, ipsi_sh, ninv, ninv_sh, p):
    n = a.shape[0]
    p2 = np.uint64(2) * p
    s = np.uint64(32)
    t = 1
    m = n
    while m > 1:
        h = m >> 1
        for i in range(h):
            j1 = 2 * i * t
            _gs_span(a[j1 : j1 + t], a[j1 + t : j1 + 2 * t], ipsi[h + i], ipsi_sh[h + i], p, p2)
        t <<= 1
        m = h
    for j in range(n):
        u = a[j]
        u = min(u, u - p2)
        u = min(u, u - p)
        u = u * ninv - ((u * ninv_sh) >> s) * p
        a[j] = min(u, u - p)


@nb.njit(cache=True)
def ntt_forward(arr, psi, psi_sh, primes):
    """In-place forward NTT of arr (B, L, n); all arguments uint64."""
    for b in range(arr.shape[0]):
        for l in range(arr.shape[1]):
            _ntt_one(arr[b, l], psi[l], psi_sh[l], primes[l])


@nb.njit(cache=True)
def ntt_inverse(arr, ipsi, ipsi_sh, ninv, ninv_sh, primes):
    """In-place inverse NTT of arr (B, L, n); all arguments uint64."""
    for b in range(arr.shape[0]):
        for l in range(arr.shape[1]):
            _intt_one(arr[b, l], ipsi[l], ipsi_sh[l], ninv[l], ninv_sh[l], primes[l])


@nb.njit(cache=True, inline="always")
def _reduce_small(acc, p, pinv):
    # acc in [0, 2^40): quotient estimate from float, then one correction
    r = acc - np.int64(acc * pinv) * p
    if r < 0:
        r += p
    elif r >= p:
        r -= p
    return r


@nb.njit(cache=True)
def base_extend(x, src, hat_inv, hat_inv_sh, inv_src, w, w_sh, prod_mod_dst, dst):
    """Exact centred base extension of (B, k, n) residues to the basis `dst`.

    Represents each coefficient as sum_i y_i * (Q/q_i) - v*Q with
    v = round(sum_i y_i / q_i), which selects the centred representative.
    w[i, j] = (Q/q_i) mod dst_j, with Shoup companions in w_sh.
    """
    B, k, n = x.shape
    m = dst.shape[0]
    out = np.empty((B, m, n), dtype=np.int64)
    y = np.empty((k, n), dtype=np.int64)
    v = np.empty(n, dtype=np.int64)
    f = np.empty(n, dtype=np.float64)
    for b in range(B):
        f[:] = 0.5
        for i in range(k):
            qi = src[i]
            hi = hat_inv[i]
            hs = hat_inv_sh[i]
            iq = inv_src[i]
            for c in range(n):
                yi = _shoup(x[b, i, c], hi, hs, qi)
                if yi >= qi:
                    yi -= qi
                y[i, c] = yi
                f[c] += yi * iq
        for c in range(n):
            v[c] = np.int64(np.floor(f[c]))
        for j in range(m):
            pj = dst[j]
            pinv = 1.0 / pj
            corr = pj - prod_mod_dst[j]
            o = out[b, j]
            for c in range(n):
                o[c] = v[c] * corr
            for i in range(k):
                wij = w[i, j]
                wsh = w_sh[i, j]
                yi = y[i]
                for c in range(n):
                    o[c] += _shoup(yi[c], wij, wsh, pj)
            for c in range(n):
                o[c] = _reduce_small(o[c], pj, pinv)
    return out


@nb.njit(cache=True)
def scale_round(x, k, q, c_inv, c_inv_sh, frac, w, w_sh, tq, tq_sh, p):
    """round(t * X / Q) in basis P, for X given over the joint basis Q|P.

    x has shape (B, k + m, n); rows [0, k) are residues mod q, rows [k, k+m)
    residues mod p. Only the Q limbs contribute a fractional part.
    """
    B = x.shape[0]
    n = x.shape[2]
    m = p.shape[0]
    out = np.empty((B, m, n), dtype=np.int64)
    y = np.empty((k, n), dtype=np.int64)
    r = np.empty(n, dtype=np.int64)
    f = np.empty(n, dtype=np.float64)
    for b in range(B):
        f[:] = 0.5
        for i in range(k):
            qi = q[i]
            ci = c_inv[i]
            cs = c_inv_sh[i]
            fr = frac[i]
            for c in range(n):
                yi = _shoup(x[b, i, c], ci, cs, qi)
                if yi >= qi:
                    yi -= qi
                y[i, c] = yi
                f[c] += yi * fr
        for c in range(n):
            r[c] = np.int64(np.floor(f[c]))
        for j in range(m):
            pj = p[j]
            pinv = 1.0 / pj
            tj = tq[j]
            tsh = tq_sh[j]
            o = out[b, j]
            xj = x[b, k + j]
            for c in range(n):
                o[c] = r[c] + _shoup(xj[c], tj, tsh, pj)
            for i in range(k):
                wij = w[i, j]
                wsh = w_sh[i, j]
                yi = y[i]
                for c in range(n):
                    o[c] += _shoup(yi[c], wij, wsh, pj)
            for c in range(n):
                o[c] = _reduce_small(o[c], pj, pinv)
    return out


@nb.njit(cache=True)
def decompose_digits(c2, q):
    """Centred RNS digits of c2 (B, k, n): out[b, i, j] = [c2 mod q_i] mod q_j."""
    B, k, n = c2.shape
    out = np.empty((B, k, k, n), dtype=np.int64)
    for b in range(B):
        for i in range(k):
            qi = q[i]
            half = qi >> 1
            for c in range(n):
                d = c2[b, i, c]
                if d > half:
                    d -= qi
                for j in range(k):
                    out[b, i, j, c] = d % q[j]
    return out


@nb.njit(cache=True)
def crt_fraction(x, q, hat_inv, t):
    """round(t * X / Q) mod t for (B, k) residues; used to decode constants."""
    B, k = x.shape
    out = np.empty(B, dtype=np.int64)
    for b in range(B):
        whole = 0
        f = 0.0
        for i in range(k):
            yi = (x[b, i] * hat_inv[i]) % q[i]
            prod = yi * t
            whole += prod // q[i]
            f += (prod % q[i]) / q[i]
        whole += np.int64(np.floor(f + 0.5))
        out[b] = whole % t
    return out


@nb.njit(cache=True, inline="always")
def _mm(a, b, p, pinv):
    # a, b in [0, p), p < 2^31: quotient from a float estimate, exact remainder
    q = np.int64(np.float64(a) * np.float64(b) * pinv)
    r = a * b - q * p
    if r < 0:
        r += p
    elif r >= p:
        r -= p
    return r


@nb.njit(cache=True)
def tensor_pointwise(A, B, p, out, accumulate):
    """Degree-2 tensor of NTT-domain pairs: A, B (N, 2, L, n) -> out (N or 1, 3, L, n).

    With accumulate=True the N products are summed into out[0].
    """
    N, _, L, n = A.shape
    for i in range(N):
        o = 0 if accumulate else i
        for l in range(L):
            pl = p[l]
            pinv = 1.0 / pl
            for c in range(n):
                a0 = A[i, 0, l, c]
                a1 = A[i, 1, l, c]
                b0 = B[i, 0, l, c]
                b1 = B[i, 1, l, c]
                r0 = _mm(a0, b0, pl, pinv)
                r1 = _mm(a0, b1, pl, pinv) + _mm(a1, b0, pl, pinv)
                r2 = _mm(a1, b1, pl, pinv)
                if accumulate:
                    r0 += out[0, 0, l, c]
                    r1 += out[0, 1, l, c]
                    r2 += out[0, 2, l, c]
                r0 = r0 - pl if r0 >= pl else r0
                r1 = r1 - pl if r1 >= pl else r1
                r1 = r1 - pl if r1 >= pl else r1
                r2 = r2 - pl if r2 >= pl else r2
                out[o, 0, l, c] = r0
                out[o, 1, l, c] = r1
                out[o, 2, l, c] = r2


@nb.njit(cache=True)
def keyswitch_accumulate(D, K, p):
    """sum_i D[:, i] * K[i] for NTT-domain digits D (N, d, k, n), keys K (d, 2, k, n)."""
    N, d, k, n = D.shape
    out = np.zeros((N, 2, k, n), dtype=np.int64)
    for b in range(N):
        for l in range(k):
            pl = p[l]
            pinv = 1.0 / pl
            for c in range(n):
                s0 = 0
                s1 = 0
                for i in range(d):
                    x = D[b, i, l, c]
                    s0 += _mm(x, K[i, 0, l, c], pl, pinv)
                    s1 += _mm(x, K[i, 1, l, c], pl, pinv)
                out[b, 0, l, c] = s0 % pl
                out[b, 1, l, c] = s1 % pl
    return out

"""High-probability noise bounds, tracked per ciphertext as log2 values.

A ciphertext c with plaintext m satisfies c0 + c1*s (+ c2*s^2) = Delta*m + v
(mod q). Bounds model coefficients of random polynomials as independent
sub-Gaussians and take a tail factor `beta` giving failure probability
2^-40 per ciphertext (union bound over the n coefficients). Sums are bounded
additively (worst case), which stays valid for correlated operands.
"""

from __future__ import annotations

import math

from iris_he.fhe.params import TEMPLATE_BITS, SchemeParams

FAILURE_LOG2 = 40
GAUSS_CLIP = 6.0


def beta(n: int) -> float:
    return math.sqrt(2.0 * (FAILURE_LOG2 * math.log(2) + math.log(2 * n)))


def log2_capacity(params: SchemeParams) -> float:
    """log2(q / (2t)): noise magnitudes below this decrypt correctly."""
    return params.log2_q - math.log2(2 * params.t)


def _log2(x: float) -> float:
    return math.log2(max(x, 1.0))


def fresh_std(params: SchemeParams) -> float:
    """Std of a fresh-noise coefficient v = e1 - e*u + e2*s (ternary u, s)."""
    return params.sigma * math.sqrt(1.0 + 4.0 * params.n / 3.0)


def fresh(params: SchemeParams) -> float:
    return _log2(beta(params.n) * fresh_std(params))


def add(params: SchemeParams, a: float, b: float) -> float:
    r_t = params.q % params.t
    return _log2(2.0**a + 2.0**b + r_t)


def add_plain(params: SchemeParams, a: float) -> float:
    return _log2(2.0**a + params.q % params.t)


def mul_plain(params: SchemeParams, a: float, k: int) -> float:
    """k is the centred representative of the scalar modulo t."""
    r_t = params.q % params.t
    k = abs(k)
    return _log2(k * 2.0**a + r_t * k)


def _wrap_factor(params: SchemeParams) -> float:
    # bound on ||K * v|| / ||v|| where c(s) = Delta*m + v + q*K and K has
    # coefficients of std sqrt(n/18) (c1 uniform mod q times ternary s)
    n = params.n
    return beta(n) * math.sqrt(n) * math.sqrt(n / 18.0)


def rounding(params: SchemeParams) -> float:
    n = params.n
    return beta(n) * math.sqrt((1.0 + 2.0 * n / 3.0) / 12.0 + n * n / 27.0)


def relin(params: SchemeParams) -> float:
    n, k = params.n, len(params.q_primes)
    q_max = max(params.q_primes)
    return beta(n) * math.sqrt(k * n / 12.0) * q_max * params.sigma


def tensor(params: SchemeParams, a: float, b: float) -> float:
    """Noise of the rescaled degree-2 product before relinearization."""
    t = params.t
    r_t = params.q % t
    E = _wrap_factor(params)
    na, nb = 2.0**a, 2.0**b
    grow = t * (E + 1.0) * (na + nb) + t * na * nb / params.q
    wrap = r_t * (t * 2.0 * E + t)
    return _log2(grow + wrap + rounding(params))


def mul(params: SchemeParams, a: float, b: float) -> float:
    return _log2(2.0 ** tensor(params, a, b) + relin(params))


def template_count(params: SchemeParams, bits: int = TEMPLATE_BITS, fresh_log2: float | None = None) -> float:
    """Bound on sum_i m_i * m'_i over `bits` terms (each product relinearized)."""
    f = fresh(params) if fresh_log2 is None else fresh_log2
    return _log2(bits * 2.0 ** mul(params, f, f))


def template_circuit(params: SchemeParams, bits: int = TEMPLATE_BITS, fresh_log2: float | None = None) -> float:
    """Bound on sum_i (x + y - 2xy) * (m * m') over `bits` terms.

    The level-1 products are relinearized; the level-2 products are summed
    before a single rescale and relinearization, so their bound is the sum
    of unrounded tensor bounds plus one relinearization term.
    """
    f = fresh(params) if fresh_log2 is None else fresh_log2
    xy = mul(params, f, f)
    xor = add(params, add(params, f, f), mul_plain(params, xy, -2))
    mm = mul(params, f, f)
    prod = tensor(params, xor, mm)
    return _log2(bits * 2.0**prod + relin(params))

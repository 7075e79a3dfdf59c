"""Scheme parameter sets and their text config format."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

from sympy import isprime

from iris_he.errors import ParameterError

# Largest log2(q) admitted at 128-bit security for a ternary secret and
# sigma = 3.2, per the HomomorphicEncryption.org standard tables.
MAX_LOGQ_128 = {1024: 27, 2048: 54, 4096: 109, 8192: 218, 16384: 438, 32768: 881}

PRIME_BITS = 31
TEMPLATE_BITS = 16384


def ntt_primes(n: int, count: int, below: int = 1 << PRIME_BITS, exclude=()) -> list[int]:
    """Return the `count` largest primes p < `below` with p = 1 mod 2n."""
    step = 2 * n
    p = ((below - 1) // step) * step + 1
    if p >= below:
        p -= step
    found: list[int] = []
    excluded = set(exclude)
    while len(found) < count:
        if p < step:
            raise ParameterError(f"not enough NTT-friendly primes below {below} for n={n}")
        if p not in excluded and isprime(p):
            found.append(p)
        p -= step
    return found


@dataclass(frozen=True)
class SchemeParams:
    """BFV parameters: ring X^n + 1, modulus q = prod(q_primes), plaintext modulus t."""

    n: int
    q_primes: tuple[int, ...]
    t: int = 65537
    sigma: float = 3.2
    name: str = "custom"

    def __post_init__(self):
        if self.n < 2 or self.n & (self.n - 1):
            raise ParameterError(f"n must be a power of two, got {self.n}")
        if not self.q_primes:
            raise ParameterError("q_primes is empty")
        if len(set(self.q_primes)) != len(self.q_primes):
            raise ParameterError("q_primes must be distinct")
        for p in self.q_primes:
            if not (2 < p < (1 << PRIME_BITS)):
                raise ParameterError(f"prime {p} outside (2, 2^{PRIME_BITS})")
            if (p - 1) % (2 * self.n):
                raise ParameterError(f"prime {p} is not 1 mod 2n")
            if not isprime(p):
                raise ParameterError(f"{p} is not prime")
        if not (2 <= self.t < (1 << PRIME_BITS)):
            raise ParameterError(f"t must lie in [2, 2^{PRIME_BITS}), got {self.t}")
        if self.sigma <= 0:
            raise ParameterError("sigma must be positive")

    @property
    def q(self) -> int:
        return math.prod(self.q_primes)

    @property
    def log2_q(self) -> float:
        return sum(math.log2(p) for p in self.q_primes)

    @property
    def delta(self) -> int:
        return self.q // self.t

    @property
    def security_level(self) -> int:
        """Claimed classical security in bits; 0 marks a test-only parameter set."""
        bound = MAX_LOGQ_128.get(self.n)
        if bound is not None and self.log2_q <= bound and self.sigma >= 3.2:
            return 128
        return 0

    def to_text(self) -> str:
        primes = ",".join(str(p) for p in self.q_primes)
        return f"name={self.name}\nn={self.n}\nq_primes={primes}\nt={self.t}\nsigma={self.sigma!r}\n"

    @property
    def digest(self) -> bytes:
        """16-byte hash identifying the parameter set on the wire."""
        canon = f"n={self.n};q={','.join(map(str, self.q_primes))};t={self.t};sigma={self.sigma!r}"
        return hashlib.blake2b(canon.encode(), digest_size=16).digest()

    @classmethod
    def from_text(cls, text: str, name: str = "custom") -> "SchemeParams":
        fields: dict[str, str] = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"malformed config line: {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            fields[key] = value
        missing = {"n", "q_primes"} - fields.keys()
        if missing:
            raise ParameterError(f"config missing {sorted(missing)}")
        try:
            return cls(
                n=int(fields["n"]),
                q_primes=tuple(int(p) for p in fields["q_primes"].split(",") if p.strip()),
                t=int(fields.get("t", 65537)),
                sigma=float(fields.get("sigma", 3.2)),
                name=fields.get("name", name),
            )
        except ValueError as exc:
            raise ParameterError(f"bad config value: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "SchemeParams":
        return cls.from_text(Path(path).read_text(), name=Path(path).stem)


@lru_cache(maxsize=None)
def default_params() -> SchemeParams:
    """n = 8192 with seven 31-bit primes (log2 q ~ 217), t = 65537: 128-bit security."""
    return SchemeParams(8192, tuple(ntt_primes(8192, 7)), 65537, 3.2, name="default")


@lru_cache(maxsize=None)
def test_params() -> SchemeParams:
    """n = 2048 with four 31-bit primes. Not secure; sized for depth-2 template matching."""
    return SchemeParams(2048, tuple(ntt_primes(2048, 4)), 65537, 3.2, name="test")


@lru_cache(maxsize=None)
def toy_params(n: int = 64) -> SchemeParams:
    """Tiny ring for fast unit tests. Not secure."""
    return SchemeParams(n, tuple(ntt_primes(n, 4)), 65537, 3.2, name=f"toy{n}")


PROFILES = {"default": default_params, "test": test_params, "toy": toy_params}


def resolve_params(spec: str | Path | None) -> SchemeParams:
    """Map a profile name or config path to a parameter set."""
    if spec is None:
        return default_params()
    key = str(spec)
    if key in PROFILES:
        return PROFILES[key]()
    return SchemeParams.load(key)

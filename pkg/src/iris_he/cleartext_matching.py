"""Masked fractional Hamming distance, rotational search and database metrics."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from iris_he.encoding import IrisTemplate
from iris_he.errors import EvaluationError, InsufficientOverlapError

DEFAULT_THRESHOLD = 0.35
DEFAULT_SHIFT_WINDOW = 15
DEFAULT_MIN_VALID_BITS = 512


@dataclass(frozen=True)
class MatchPolicy:
    threshold: float = DEFAULT_THRESHOLD
    shift_window: int = DEFAULT_SHIFT_WINDOW
    min_valid_bits: int = DEFAULT_MIN_VALID_BITS

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not 0 <= self.shift_window <= 511:
            raise ValueError(f"shift window must lie in [0, 511], got {self.shift_window}")
        if self.min_valid_bits < 1:
            raise ValueError("min_valid_bits must be >= 1")

    def shifts(self) -> list[int]:
        """Shifts in tie-break order: 0, -1, +1, -2, +2, ..."""
        out = [0]
        for k in range(1, self.shift_window + 1):
            out += [-k, k]
        return out


@dataclass(frozen=True)
class MatchResult:
    hd: float
    numerator: int
    denominator: int
    best_shift: int
    decision: bool  # True = accept

    @classmethod
    def from_counts(cls, numerator: int, denominator: int, shift: int, threshold: float) -> "MatchResult":
        hd = numerator / denominator
        return cls(hd, int(numerator), int(denominator), int(shift), hd < threshold)

    def line(self) -> str:
        verdict = "accept" if self.decision else "reject"
        return (
            f"HD {self.hd:.4f}  D {self.numerator}  N {self.denominator}  "
            f"shift {self.best_shift:+d}  {verdict}"
        )


def _check_shapes(a: IrisTemplate, b: IrisTemplate) -> None:
    if a.shape != b.shape:
        raise ValueError(f"template shapes differ: {a.shape} vs {b.shape}")


def fractional_hd(a: IrisTemplate, b: IrisTemplate, min_valid_bits: int = DEFAULT_MIN_VALID_BITS) -> tuple[int, int]:
    """(popcount((xa ^ xb) & ma & mb), popcount(ma & mb))."""
    _check_shapes(a, b)
    joint = np.packbits(a.mask & b.mask)
    diff = np.packbits(a.code ^ b.code) & joint
    num = int(np.bitwise_count(diff).sum())
    den = int(np.bitwise_count(joint).sum())
    if den < min_valid_bits:
        raise InsufficientOverlapError(f"only {den} jointly valid bits (< {min_valid_bits})")
    return num, den


def _packed(code: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pack the trailing (rows, cols) axes into bytes."""
    lead = code.shape[:-2]
    return (
        np.packbits(code.reshape(*lead, -1), axis=-1),
        np.packbits(mask.reshape(*lead, -1), axis=-1),
    )


def packed_rotations(t: IrisTemplate, shifts: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Packed code and mask of rotate(t, k) for each k: two (len(shifts), bytes) arrays."""
    idx = (np.arange(t.cols)[None, :] - np.asarray(shifts)[:, None]) % t.cols
    code = t.code[:, idx].transpose(1, 0, 2)
    mask = t.mask[:, idx].transpose(1, 0, 2)
    return _packed(code, mask)


def _counts(qc, qm, ec, em) -> np.ndarray:
    """D and N for packed query rotations (..., S, B) against packed enrolled (..., 1, B)."""
    joint = qm & em
    d = np.bitwise_count((qc ^ ec) & joint).sum(axis=-1, dtype=np.int64)
    n = np.bitwise_count(joint).sum(axis=-1, dtype=np.int64)
    return np.stack([d, n], axis=-1)


def shift_counts(query: IrisTemplate, enrolled: IrisTemplate, shifts: Sequence[int]) -> np.ndarray:
    """(len(shifts), 2) array of (D, N) for rotate(query, k) against enrolled."""
    _check_shapes(query, enrolled)
    qc, qm = packed_rotations(query, shifts)
    ec, em = _packed(enrolled.code, enrolled.mask)
    return _counts(qc, qm, ec[None, :], em[None, :])


def select_best(counts: Iterable[tuple[int, int, int]], policy: MatchPolicy) -> MatchResult:
    """Minimum HD over (shift, D, N) triples; ties to smallest |k|, then negative k."""
    best = None
    for k, d, n in counts:
        if n < policy.min_valid_bits:
            continue
        key = (d / n, abs(k), k)
        if best is None or key < best[0]:
            best = (key, k, d, n)
    if best is None:
        raise InsufficientOverlapError(
            f"no shift leaves at least {policy.min_valid_bits} jointly valid bits"
        )
    _, k, d, n = best
    return MatchResult.from_counts(d, n, k, policy.threshold)


def match_with_shifts(query: IrisTemplate, enrolled: IrisTemplate, policy: MatchPolicy = MatchPolicy()) -> MatchResult:
    """Best fractional HD of rotate(query, k) against enrolled over |k| <= window."""
    shifts = policy.shifts()
    counts = shift_counts(query, enrolled, shifts)
    return select_best(((k, int(d), int(n)) for k, (d, n) in zip(shifts, counts)), policy)


# -- database evaluation ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TemplateRecord:
    subject: str
    eye: str
    sample: str
    template: IrisTemplate

    @property
    def key(self) -> str:
        return f"{self.subject}/{self.eye}/{self.sample}"


@dataclass(frozen=True)
class PairResult:
    label_a: str
    label_b: str
    kind: str  # genuine | impostor
    result: MatchResult


@dataclass
class MetricsReport:
    genuine_hd_mean: float
    genuine_hd_std: float
    impostor_hd_mean: float
    impostor_hd_std: float
    eer: float
    roc: list[tuple[float, float, float]]  # (far, frr, threshold), increasing threshold
    auc: float
    d_prime: float
    f1: float
    comparison_count: int
    genuine_count: int = 0
    impostor_count: int = 0
    skipped_count: int = 0
    threshold: float = DEFAULT_THRESHOLD
    pairs: list[PairResult] = field(default_factory=list, repr=False)

    def summary_rows(self) -> list[tuple[str, float | int]]:
        return [
            ("comparisons", self.comparison_count),
            ("genuine_pairs", self.genuine_count),
            ("impostor_pairs", self.impostor_count),
            ("skipped_pairs", self.skipped_count),
            ("genuine_hd_mean", self.genuine_hd_mean),
            ("genuine_hd_std", self.genuine_hd_std),
            ("impostor_hd_mean", self.impostor_hd_mean),
            ("impostor_hd_std", self.impostor_hd_std),
            ("eer", self.eer),
            ("auc", self.auc),
            ("d_prime", self.d_prime),
            ("f1", self.f1),
            ("threshold", self.threshold),
        ]


def roc_points(genuine: np.ndarray, impostor: np.ndarray) -> list[tuple[float, float, float]]:
    """(far, frr, threshold) with accept = hd < threshold, swept over observed values."""
    observed = np.unique(np.concatenate([genuine, impostor, [0.0]]))
    thresholds = np.append(observed, np.nextafter(observed[-1], np.inf))
    g = np.sort(genuine)
    i = np.sort(impostor)
    far = np.searchsorted(i, thresholds, side="left") / i.size
    frr = 1.0 - np.searchsorted(g, thresholds, side="left") / g.size
    return [(float(a), float(b), float(t)) for a, b, t in zip(far, frr, thresholds)]


def equal_error_rate(roc: Sequence[tuple[float, float, float]]) -> float:
    """FAR/FRR crossing, linearly interpolated between adjacent sweep points."""
    far = np.array([p[0] for p in roc])
    frr = np.array([p[1] for p in roc])
    diff = far - frr  # non-decreasing in the threshold
    i = int(np.argmax(diff >= 0))
    if diff[i] < 0:
        return float(far[-1])
    if i == 0 or diff[i] == 0:
        return float((far[i] + frr[i]) / 2)
    a = -diff[i - 1] / (diff[i] - diff[i - 1])
    return float(far[i - 1] + a * (far[i] - far[i - 1]))


def area_under_roc(roc: Sequence[tuple[float, float, float]]) -> float:
    far = np.array([p[0] for p in roc])
    tpr = 1.0 - np.array([p[1] for p in roc])
    return float(np.trapezoid(tpr, far))


def d_prime(genuine: np.ndarray, impostor: np.ndarray) -> float:
    pooled = math.sqrt((genuine.var() + impostor.var()) / 2.0)
    gap = abs(impostor.mean() - genuine.mean())
    if pooled == 0:
        return math.inf if gap > 0 else 0.0
    return float(gap / pooled)


def f1_at(genuine: np.ndarray, impostor: np.ndarray, threshold: float) -> float:
    tp = int((genuine < threshold).sum())
    fn = genuine.size - tp
    fp = int((impostor < threshold).sum())
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def _worker_count() -> int:
    env = os.environ.get("IRIS_HE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _pair_kind(a: TemplateRecord, b: TemplateRecord) -> str | None:
    if a.subject == b.subject:
        return "genuine" if a.eye == b.eye else None
    return "impostor"


def evaluate_database(
    records: Sequence[TemplateRecord], policy: MatchPolicy = MatchPolicy(), workers: int | None = None
) -> MetricsReport:
    """All unordered pairs: same subject and eye are genuine, different subjects impostor.

    Pairs without enough overlap at any shift are skipped and counted.
    """
    pairs = []
    for a, b in combinations(records, 2):
        kind = _pair_kind(a, b)
        if kind is not None:
            pairs.append((a, b, kind))
    n_gen = sum(1 for p in pairs if p[2] == "genuine")
    if n_gen == 0 and len(pairs) == 0:
        raise EvaluationError("no genuine and no impostor pairs")
    if n_gen == 0:
        raise EvaluationError("no genuine pairs (need >= 2 samples of one eye)")
    if n_gen == len(pairs):
        raise EvaluationError("no impostor pairs (need >= 2 subjects)")

    shifts = policy.shifts()
    keys = {id(r): i for i, r in enumerate(records)}
    packed = [_packed(r.template.code, r.template.mask) for r in records]
    partners: dict[int, list[tuple[int, str]]] = {}
    for a, b, kind in pairs:
        partners.setdefault(keys[id(a)], []).append((keys[id(b)], kind))

    def run(i):
        rot_c, rot_m = packed_rotations(records[i].template, shifts)
        js = [j for j, _ in partners[i]]
        ec = np.stack([packed[j][0] for j in js])[:, None, :]
        em = np.stack([packed[j][1] for j in js])[:, None, :]
        counts = _counts(rot_c[None], rot_m[None], ec, em)  # (J, S, 2)
        out = []
        for (j, kind), c in zip(partners[i], counts):
            try:
                res = select_best(((k, int(d), int(n)) for k, (d, n) in zip(shifts, c)), policy)
            except InsufficientOverlapError:
                out.append(None)
                continue
            out.append(PairResult(records[i].key, records[j].key, kind, res))
        return out

    order = sorted(partners)
    workers = workers or _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(run, order))
    else:
        chunks = [run(i) for i in order]
    results = [r for chunk in chunks for r in chunk]
    done = [r for r in results if r is not None]
    gen = np.array([r.result.hd for r in done if r.kind == "genuine"])
    imp = np.array([r.result.hd for r in done if r.kind == "impostor"])
    if gen.size == 0 or imp.size == 0:
        missing = "genuine" if gen.size == 0 else "impostor"
        raise EvaluationError(f"no {missing} pairs with sufficient overlap")
    roc = roc_points(gen, imp)
    return MetricsReport(
        genuine_hd_mean=float(gen.mean()),
        genuine_hd_std=float(gen.std()),
        impostor_hd_mean=float(imp.mean()),
        impostor_hd_std=float(imp.std()),
        eer=equal_error_rate(roc),
        roc=roc,
        auc=area_under_roc(roc),
        d_prime=d_prime(gen, imp),
        f1=f1_at(gen, imp, policy.threshold),
        comparison_count=len(done),
        genuine_count=int(gen.size),
        impostor_count=int(imp.size),
        skipped_count=len(results) - len(done),
        threshold=policy.threshold,
        pairs=done,
    )


# -- CSV output --------------------------------------------------------------------


def write_pairs_csv(path, pairs: Iterable[PairResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label_a", "label_b", "kind", "hd", "numerator", "denominator", "best_shift"])
        for p in pairs:
            r = p.result
            w.writerow([p.label_a, p.label_b, p.kind, f"{r.hd:.6f}", r.numerator, r.denominator, r.best_shift])


def write_summary_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for name, value in report.summary_rows():
            w.writerow([name, f"{value:.6f}" if isinstance(value, float) else value])


def write_roc_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "far", "frr"])
        for far, frr, t in report.roc:
            w.writerow([f"{t:.6f}", f"{far:.6f}", f"{frr:.6f}"])

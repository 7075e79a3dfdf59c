"""Cleartext vs encrypted matching cost for one template pair."""

from __future__ import annotations

import csv
import os
import platform
import statistics
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from iris_he.cleartext_matching import MatchPolicy, MatchResult, match_with_shifts
from iris_he.encoding import IrisTemplate
from iris_he.encrypted_matching import EncryptedTemplate, ProtocolReport, encrypt_template, protocol_match
from iris_he.fhe.scheme import KeyMaterial, serialized_size

DEFAULT_REPETITIONS = 3


@dataclass
class BenchReport:
    cleartext_match_seconds: float
    encrypted_match_seconds: float
    overhead_ratio: float
    encrypt_seconds: float
    decrypt_seconds: float
    ciphertext_bytes_per_template: int
    hardware: str
    params: str = ""
    shifts: int = 0
    repetitions: int = 0
    enroll_encrypt_seconds: float = 0.0
    clear_result: MatchResult | None = field(default=None, repr=False)
    fhe_result: MatchResult | None = field(default=None, repr=False)
    protocol: ProtocolReport | None = field(default=None, repr=False)

    def __post_init__(self):
        if min(self.cleartext_match_seconds, self.encrypted_match_seconds) <= 0:
            raise ValueError("bench timings must be positive")

    @property
    def parity(self) -> bool:
        a, b = self.clear_result, self.fhe_result
        return a is not None and b is not None and (a.numerator, a.denominator, a.best_shift) == (
            b.numerator,
            b.denominator,
            b.best_shift,
        )

    def rows(self) -> list[tuple[str, object]]:
        skip = {"clear_result", "fhe_result", "protocol"}
        return [(k, v) for k, v in asdict(self).items() if k not in skip]


def hardware_note() -> str:
    cpu = platform.processor() or platform.machine()
    try:
        threads = len(os.sched_getaffinity(0))
    except AttributeError:
        threads = os.cpu_count() or 1
    return f"{cpu}; {threads} usable cpu(s); {platform.system()} {platform.release()}; python {platform.python_version()}; numpy {np.__version__}"


def _median_time(fn, repetitions: int):
    times, out = [], None
    for _ in range(repetitions):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def run_bench(
    query: IrisTemplate,
    enrolled: IrisTemplate,
    keys: KeyMaterial,
    policy: MatchPolicy = MatchPolicy(),
    repetitions: int = DEFAULT_REPETITIONS,
    seed: int = 0,
    workdir=None,
    chunk: int | None = None,
) -> BenchReport:
    """Median-of-N timings of the cleartext and the full encrypted protocol.

    The enrolled template is encrypted once, outside the timed region, into
    a file under `workdir` (a temporary directory by default) and memory
    mapped, since at full size it does not fit in memory. Runs are strictly
    sequential.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    params = keys.params
    t_clear, clear = _median_time(lambda: match_with_shifts(query, enrolled, policy), repetitions)
    # a single sub-microsecond call cannot be timed reliably: time a batch
    inner = max(1, int(0.05 / max(t_clear, 1e-7)))
    if inner > 1:
        t_batch, _ = _median_time(lambda: [match_with_shifts(query, enrolled, policy) for _ in range(inner)], repetitions)
        t_clear = t_batch / inner

    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        path = Path(tmp) / "enrolled.ct"
        t0 = time.perf_counter()
        encrypt_template(enrolled, keys.public_key, rng=seed, path=path)
        t_enroll = time.perf_counter() - t0
        ect = EncryptedTemplate.load(path, params, mmap=True, verify=False)
        runs: list[ProtocolReport] = []
        for rep in range(repetitions):
            runs.append(protocol_match(query, ect, keys, policy, rng=seed + 1 + rep, chunk=chunk))
        del ect
    totals = [r.total_seconds for r in runs]
    t_enc = statistics.median(r.timings["encrypt"] for r in runs)
    t_dec = statistics.median(r.timings["decrypt"] for r in runs)
    t_fhe = statistics.median(totals)
    median_run = runs[sorted(range(len(runs)), key=lambda i: totals[i])[len(runs) // 2]]
    return BenchReport(
        cleartext_match_seconds=t_clear,
        encrypted_match_seconds=t_fhe,
        overhead_ratio=t_fhe / t_clear,
        encrypt_seconds=t_enc,
        decrypt_seconds=t_dec,
        ciphertext_bytes_per_template=2 * enrolled.code.size * serialized_size(params),
        hardware=hardware_note(),
        params=f"{params.name} n={params.n} log2q={params.log2_q:.1f}",
        shifts=len(policy.shifts()),
        repetitions=repetitions,
        enroll_encrypt_seconds=t_enroll,
        clear_result=clear,
        fhe_result=median_run.result,
        protocol=median_run,
    )


def write_bench_csv(path, report: BenchReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["field", "value"])
        for name, value in report.rows():
            w.writerow([name, f"{value:.9g}" if isinstance(value, float) else value])


def read_bench_csv(path) -> dict[str, str]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return {k: v for k, v in rows[1:]}

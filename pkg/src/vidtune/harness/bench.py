"""Attention cost benchmark: instrumented pair counts and wall time."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..attention import AttentionKind, DotProductCounter, ProjectionSet, count_dot_products, self_attention
from ..errors import ConfigurationError, IntegrityError
from ..tensor import no_record

FIELDS = ("kind", "m", "N", "dot_products", "closed_form", "time_median_s", "time_std_s")


@dataclass
class BenchRow:
    kind: str
    m: int
    N: int
    dot_products: int
    closed_form: int
    time_median_s: float
    time_std_s: float


def run_benchmark(
    kinds=("frame_individual", "sparse_causal", "causal", "full"),
    ms=(1, 2, 4, 8, 16),
    Ns=(16, 64),
    repetitions: int = 3,
    d_model: int = 16,
    seed: int = 0,
) -> list[BenchRow]:
    """One row per (kind, m, N); raises IntegrityError if a count misses its closed form."""
    if repetitions < 1:
        raise ConfigurationError("repetitions must be >= 1")
    kinds = [AttentionKind.parse(k) for k in kinds]
    rng = np.random.default_rng(seed)
    proj = ProjectionSet.init(d_model, d_model, rng)
    rows = []
    for n in Ns:
        for m in ms:
            if m < 1 or n < 1:
                raise ConfigurationError(f"sizes must be positive, got m={m}, N={n}")
            x = rng.standard_normal((m, n, d_model))
            for kind in kinds:
                counter = DotProductCounter()
                times = []
                with no_record():
                    for r in range(repetitions):
                        c = counter if r == 0 else None
                        t0 = time.perf_counter()
                        self_attention(kind, x, proj, counter=c)
                        times.append(time.perf_counter() - t0)
                closed = count_dot_products(kind, m, n)
                if counter.count != closed:
                    raise IntegrityError(
                        f"{kind.value} m={m} N={n}: counted {counter.count}, closed form {closed}"
                    )
                rows.append(BenchRow(kind.value, m, n, counter.count, closed,
                                     float(np.median(times)), float(np.std(times))))
    return rows


def write_csv(rows: list[BenchRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))
    return path


def read_csv(path) -> list[BenchRow]:
    with Path(path).open(newline="") as fh:
        return [
            BenchRow(r["kind"], int(r["m"]), int(r["N"]), int(r["dot_products"]), int(r["closed_form"]),
                     float(r["time_median_s"]), float(r["time_std_s"]))
            for r in csv.DictReader(fh)
        ]


def time_ratios(rows: list[BenchRow], num: str, den: str, N: int) -> list[tuple[int, float]]:
    """``(m, time[num] / time[den])`` at fixed N, sorted by m."""
    by = {(r.kind, r.m): r.time_median_s for r in rows if r.N == N}
    ms = sorted({m for k, m in by if k == num} & {m for k, m in by if k == den})
    return [(m, by[(num, m)] / by[(den, m)]) for m in ms]


def plot_benchmark(rows: list[BenchRow], path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    Ns = sorted({r.N for r in rows})
    fig, axes = plt.subplots(len(Ns), 2, figsize=(10, 3.6 * len(Ns)), squeeze=False)
    for row_ax, n in zip(axes, Ns):
        for kind in dict.fromkeys(r.kind for r in rows):
            sel = sorted((r for r in rows if r.kind == kind and r.N == n), key=lambda r: r.m)
            ms = [r.m for r in sel]
            row_ax[0].plot(ms, [r.dot_products for r in sel], marker="o", label=kind)
            row_ax[1].plot(ms, [r.time_median_s * 1e3 for r in sel], marker="o", label=kind)
        row_ax[0].set(xscale="log", yscale="log", xlabel="frames m", ylabel="query-key pairs", title=f"N={n}")
        row_ax[1].set(xscale="log", yscale="log", xlabel="frames m", ylabel="median time [ms]", title=f"N={n}")
        row_ax[0].legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path

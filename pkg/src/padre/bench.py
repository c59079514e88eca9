"""Scaling benchmarks: analytic MAC counts plus wall-time measurements.

FLOP columns come from the deterministic ledger (1 MAC = 2 FLOPs), so they
are identical run to run; wall time is measured single-threaded with a
monotonic clock and reported as median/p10/p90 over repetitions.  The
attention reference times the quadratic core (token-token logits, softmax,
value aggregation) plus one output projection, i.e. 2 N^2 D + N D^2 MACs;
the polynomial schemes time the full block, whose ledger is O(N D d).

BLAS thread pools are pinned to one thread around the timed region when
``threadpoolctl`` is available; otherwise set OMP/OpenBLAS thread env vars
to 1 before importing numpy for trustworthy exponents.
"""

from __future__ import annotations

import contextlib
import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .adapters import (
    CastlingParams,
    Conv2FormerParams,
    SimaParams,
    castling_forward,
    conv2former_forward,
    sima_forward,
)
from .block import Grid, Seq1d, build_conv_instance, forward
from .tensor import FlopLedger, Mixer, Side

DEFAULT_N_LIST = [256, 1024, 2304, 4096]
DEFAULT_CHANNELS = 192
PADRE_SCHEMES = ("padre-2", "padre-3", "padre-4")
ALL_SCHEMES = PADRE_SCHEMES + ("softmax-attn", "sima", "castling", "conv2former")

RECORD_COLUMNS = ["scheme", "N", "D", "d", "flops", "median_s", "p10_s", "p90_s",
                  "reps", "seed"]
FIT_COLUMNS = ["scheme", "points", "flop_exponent", "time_exponent",
               "flop_residual", "time_residual"]


class UnknownSchemeError(ValueError):
    pass


@dataclass
class BenchRecord:
    scheme: str
    n_tokens: int
    n_channels: int
    degree: int
    flops: int
    median_s: float
    p10_s: float
    p90_s: float
    reps: int
    seed: int


@dataclass
class ScalingFit:
    scheme: str
    points: int
    flop_exponent: float
    time_exponent: float
    flop_residual: float
    time_residual: float


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1)
    except ImportError:                      # pragma: no cover
        return contextlib.nullcontext()


def _layout_for(n: int):
    r = math.isqrt(n)
    return Grid(r, r) if r * r == n else Seq1d()


def _input_for(n: int, d_ch: int, seed: int, scheme: str) -> np.ndarray:
    rng = np.random.default_rng([seed, n, sum(scheme.encode())])
    return rng.uniform(-1.0, 1.0, size=(n, d_ch))


def _uniform(rng, shape, fan_in):
    half = math.sqrt(3.0 / fan_in)
    return rng.uniform(-half, half, size=shape)


def _setup_padre(degree: int, n: int, d_ch: int, seed: int):
    block = build_conv_instance(n, d_ch, degree, _layout_for(n), seed=seed)
    x = _input_for(n, d_ch, seed, f"padre-{degree}")
    ledger = FlopLedger()
    forward(block, x, ledger)
    return (lambda: forward(block, x)), ledger.flops, degree


def _setup_softmax_attn(n: int, d_ch: int, seed: int):
    rng = np.random.default_rng([seed, n, 1])
    w_out = _uniform(rng, (d_ch, d_ch), d_ch)
    x = _input_for(n, d_ch, seed, "softmax-attn") / math.sqrt(d_ch)
    scale = 1.0 / math.sqrt(d_ch)

    def run():
        logits = (x @ x.T) * scale
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return (e / e.sum(axis=1, keepdims=True) @ x) @ w_out

    macs = 2 * n * n * d_ch + n * d_ch * d_ch
    return run, 2 * macs, 0


def _setup_sima(n: int, d_ch: int, seed: int):
    rng = np.random.default_rng([seed, n, 2])
    p = SimaParams(*(_uniform(rng, (d_ch, d_ch), d_ch) for _ in range(3)))
    x = _input_for(n, d_ch, seed, "sima")
    ledger = FlopLedger()
    sima_forward(p, x, ledger)
    return (lambda: sima_forward(p, x)), ledger.flops, 3


def _setup_castling(n: int, d_ch: int, seed: int):
    rng = np.random.default_rng([seed, n, 3])
    layout = _layout_for(n)
    if isinstance(layout, Grid):
        dw = Mixer.conv2d(Side.TOKEN, _uniform(rng, (3, 3), 9), layout.h, layout.w)
    else:
        dw = Mixer.conv1d(Side.TOKEN, _uniform(rng, (3,), 3), n)
    p = CastlingParams(*(_uniform(rng, (d_ch, d_ch), d_ch) for _ in range(3)), dw=dw)
    x = _input_for(n, d_ch, seed, "castling")
    ledger = FlopLedger()
    castling_forward(p, x, ledger)
    return (lambda: castling_forward(p, x)), ledger.flops, 3


def _setup_conv2former(n: int, d_ch: int, seed: int):
    layout = _layout_for(n)
    if not isinstance(layout, Grid):
        raise UnknownSchemeError("conv2former needs a square token count")
    rng = np.random.default_rng([seed, n, 4])
    kh, kw = min(11, layout.h), min(11, layout.w)
    p = Conv2FormerParams(
        w1=_uniform(rng, (d_ch, d_ch), d_ch), w2=_uniform(rng, (d_ch, d_ch), d_ch),
        kernel=_uniform(rng, (kh, kw), kh * kw), grid_h=layout.h, grid_w=layout.w,
    )
    x = _input_for(n, d_ch, seed, "conv2former")
    ledger = FlopLedger()
    conv2former_forward(p, x, ledger)
    return (lambda: conv2former_forward(p, x)), ledger.flops, 2


def setup_scheme(scheme: str, n: int, d_ch: int, seed: int, degree: int | None = None):
    """Build a runnable closure for one scheme; returns (run, flops, degree)."""
    if scheme.startswith("padre-"):
        return _setup_padre(int(scheme.split("-", 1)[1]), n, d_ch, seed)
    if scheme == "padre":
        return _setup_padre(degree or 2, n, d_ch, seed)
    table = {"softmax-attn": _setup_softmax_attn, "sima": _setup_sima,
             "castling": _setup_castling, "conv2former": _setup_conv2former}
    if scheme not in table:
        raise UnknownSchemeError(f"unknown scheme {scheme!r}; "
                                 f"choose from {', '.join(ALL_SCHEMES)}")
    return table[scheme](n, d_ch, seed)


def run_bench(schemes: list[str], n_list: list[int] | None = None,
              d_ch: int = DEFAULT_CHANNELS, degree: int | None = None,
              reps: int = 20, warmup: int = 3, seed: int = 0) -> list[BenchRecord]:
    """Time every (scheme, N) pair single-threaded; FLOPs come from the ledger."""
    if reps < 5:
        raise ValueError(f"need at least 5 repetitions, got {reps}")
    n_list = list(n_list) if n_list else list(DEFAULT_N_LIST)
    records = []
    with _single_thread():
        for scheme in schemes:
            for n in n_list:
                run, flops, sch_degree = setup_scheme(scheme, n, d_ch, seed, degree)
                for _ in range(warmup):
                    run()
                times = np.empty(reps)
                for r in range(reps):
                    t0 = time.perf_counter()
                    run()
                    times[r] = time.perf_counter() - t0
                p10, med, p90 = np.percentile(times, [10, 50, 90])
                if med < 1e-6:
                    warnings.warn(f"{scheme} at N={n}: median {med:.2e}s is below "
                                  "timer resolution confidence")
                records.append(BenchRecord(
                    scheme=scheme, n_tokens=n, n_channels=d_ch, degree=sch_degree,
                    flops=flops, median_s=float(med), p10_s=float(p10),
                    p90_s=float(p90), reps=reps, seed=seed,
                ))
    records.sort(key=lambda r: (r.scheme, r.n_tokens))
    return records


def _loglog_slope(xs: np.ndarray, ys: np.ndarray) -> tuple[float, float]:
    lx, ly = np.log(xs), np.log(np.maximum(ys, 1e-300))
    a = np.stack([lx, np.ones_like(lx)], axis=1)
    coef, *_ = np.linalg.lstsq(a, ly, rcond=None)
    resid = float(np.sqrt(np.mean((a @ coef - ly) ** 2)))
    return float(coef[0]), resid


def fit_scaling(records: list[BenchRecord]) -> list[ScalingFit]:
    """Least-squares log-log exponents of FLOPs and median time against N."""
    fits = []
    for scheme in sorted({r.scheme for r in records}):
        rs = sorted((r for r in records if r.scheme == scheme), key=lambda r: r.n_tokens)
        ns = np.array([r.n_tokens for r in rs], dtype=float)
        if np.unique(ns).size < 4:
            raise ValueError(f"scheme {scheme!r} needs >= 4 distinct N values, "
                             f"got {np.unique(ns).size}")
        f_exp, f_res = _loglog_slope(ns, np.array([r.flops for r in rs], dtype=float))
        t_exp, t_res = _loglog_slope(ns, np.array([r.median_s for r in rs]))
        fits.append(ScalingFit(scheme=scheme, points=len(rs), flop_exponent=f_exp,
                               time_exponent=t_exp, flop_residual=f_res,
                               time_residual=t_res))
    return fits


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def _record_row(r: BenchRecord) -> list[str]:
    return [r.scheme, str(r.n_tokens), str(r.n_channels), str(r.degree),
            str(r.flops), repr(r.median_s), repr(r.p10_s), repr(r.p90_s),
            str(r.reps), str(r.seed)]


def emit_csv(items: list[BenchRecord] | list[ScalingFit], path: str) -> None:
    """Header plus one line per item, full double precision, stable order."""
    if items and isinstance(items[0], ScalingFit):
        header, rows = FIT_COLUMNS, [
            [f.scheme, str(f.points), repr(f.flop_exponent), repr(f.time_exponent),
             repr(f.flop_residual), repr(f.time_residual)]
            for f in sorted(items, key=lambda f: f.scheme)
        ]
    else:
        header = RECORD_COLUMNS
        rows = [_record_row(r) for r in
                sorted(items, key=lambda r: (r.scheme, r.n_tokens))]
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(row) + "\n")


def read_csv(path: str) -> list[BenchRecord]:
    with open(path, encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0].split(",") != RECORD_COLUMNS:
        raise ValueError(f"{path} does not carry the benchmark record schema")
    out = []
    for ln in lines[1:]:
        c = ln.split(",")
        out.append(BenchRecord(
            scheme=c[0], n_tokens=int(c[1]), n_channels=int(c[2]), degree=int(c[3]),
            flops=int(c[4]), median_s=float(c[5]), p10_s=float(c[6]),
            p90_s=float(c[7]), reps=int(c[8]), seed=int(c[9]),
        ))
    return out

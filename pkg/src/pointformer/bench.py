"""Micro-benchmarks: full vs low-rank attention, and kernel backends.

The attention benchmark times the score/softmax/weighted-sum kernel alone
(no positional bias), reporting the median of the measured runs after one
discarded warm-up, the exact score-matrix footprint from allocation
accounting, and a checksum of the output for run-to-run comparability.
With r=1 the projections are identities, so both modes must agree.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .attention import (
    AttentionParams,
    identity_linformer,
    make_linformer,
    multi_head_attention,
)
from .tensor import ParamStore, Tensor, no_grad


@dataclass
class BenchReport:
    mode: str
    n: int
    r: int
    heads: int
    dim: int
    repeats: int
    median_seconds: float
    times: list
    peak_score_bytes: int
    checksum: str

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n": self.n,
            "r": self.r,
            "heads": self.heads,
            "dim": self.dim,
            "repeats": self.repeats,
            "median_seconds": self.median_seconds,
            "times": list(self.times),
            "peak_score_bytes": self.peak_score_bytes,
            "checksum": self.checksum,
        }


def _bench_params(store: ParamStore, n: int, r: int, heads: int, dim: int, mode: str) -> AttentionParams:
    proj = None
    if mode == "linformer":
        if r == 1:
            proj = identity_linformer(n, dtype=store.dtype)
        else:
            proj = make_linformer(store, "proj", n_max=n, r=r)
    return AttentionParams.create(store, f"{mode}", dim, heads, pe_net=None, linformer=proj)


def _run_once(params, feats, coords, mode, stats):
    out, _ = multi_head_attention(params, feats, feats, coords, coords, mode=mode, alloc_stats=stats)
    return out


def attention_bench(
    n: int,
    r: int = 8,
    heads: int = 8,
    dim: int = 64,
    repeat: int = 5,
    mode: str = "both",
    seed: int = 0,
) -> dict:
    """Time self-attention over n tokens in full and/or low-rank mode.

    Args:
        repeat: measured runs per mode (median reported); one extra
            warm-up run is discarded.
        mode: "full", "linformer", or "both" (which also reports the max
            absolute output difference between modes).

    Returns:
        {"reports": [BenchReport, ...], "max_abs_diff": float | None}

    Raises:
        ValueError: n < 1, repeat < 1, or r > n in linformer mode.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if repeat < 1:
        raise ValueError(f"repeat must be >= 1, got {repeat}")
    if mode not in ("full", "linformer", "both"):
        raise ValueError(f"unknown bench mode: {mode}")
    if mode in ("linformer", "both") and r > n:
        raise ValueError(f"linformer factor r={r} exceeds n={n}")

    rng = np.random.default_rng(seed)
    feats = Tensor(rng.normal(size=(n, dim)).astype(np.float32))
    coords = Tensor(rng.uniform(-1, 1, size=(n, 3)).astype(np.float32))

    modes = ["full", "linformer"] if mode == "both" else [mode]
    reports = []
    outputs = {}
    for m in modes:
        store = ParamStore(seed, dtype=np.float32)
        params = _bench_params(store, n, r, heads, dim, m)
        times = []
        stats: dict = {}
        with no_grad():
            _run_once(params, feats, coords, m, None)  # warm-up, discarded
            for _ in range(repeat):
                stats = {}
                t0 = time.perf_counter()
                out = _run_once(params, feats, coords, m, stats)
                times.append(time.perf_counter() - t0)
        outputs[m] = out.data
        reports.append(
            BenchReport(
                mode=m,
                n=n,
                r=r if m == "linformer" else 0,
                heads=heads,
                dim=dim,
                repeats=repeat,
                median_seconds=float(np.median(times)),
                times=[float(t) for t in times],
                peak_score_bytes=stats.get("peak_score_bytes", 0),
                checksum=hashlib.sha256(out.data.tobytes()).hexdigest(),
            )
        )
    diff = None
    if mode == "both":
        diff = float(np.abs(outputs["full"] - outputs["linformer"]).max())
    return {"reports": reports, "max_abs_diff": diff}


@dataclass
class KernelBenchRow:
    kernel: str
    backend: str
    n: int
    median_seconds: float
    matches_reference: bool


def kernel_backend_bench(n: int = 20000, n_out: int = 2048, k: int = 32,
                         radius: float = 0.2, repeat: int = 3, seed: int = 0) -> list:
    """Compare the compiled geometry kernels against the numpy fallback.

    Every backend must return identical arrays; the numpy backend is the
    reference. Returns one KernelBenchRow per (kernel, backend).
    """
    rng = np.random.default_rng(seed)
    coords = rng.uniform(-1, 1, size=(n, 3))
    start = kernels.lexicographic_start(coords)

    backends = kernels.available_backends()
    reference: dict = {}
    rows = []
    for name in ("numpy", "compiled"):
        if name not in backends:
            continue
        impl = backends[name]

        def timed(fn, *args):
            times = []
            result = None
            for _ in range(repeat):
                t0 = time.perf_counter()
                result = fn(*args)
                times.append(time.perf_counter() - t0)
            return result, float(np.median(times))

        centroid_ids, t_fps = timed(kernels.fps, coords, n_out, start, impl)
        nbr, t_bq = timed(kernels.ball_query, coords, centroid_ids, radius, k, impl)
        nn, t_nn = timed(kernels.three_nn, coords[: n // 4], coords[::7], impl)

        if name == "numpy":
            reference = {"fps": centroid_ids, "bq": nbr, "nn": nn}
        ok_fps = np.array_equal(centroid_ids, reference["fps"])
        ok_bq = all(np.array_equal(a, b) for a, b in zip(nbr, reference["bq"]))
        ok_nn = all(np.array_equal(a, b) for a, b in zip(nn, reference["nn"]))
        rows.append(KernelBenchRow("fps", name, n, t_fps, ok_fps))
        rows.append(KernelBenchRow("ball_query", name, n, t_bq, ok_bq))
        rows.append(KernelBenchRow("three_nn", name, n, t_nn, ok_nn))
    return rows

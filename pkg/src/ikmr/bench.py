"""Retargeting throughput for the compiled and pure-Python convolution backends."""

from __future__ import annotations

import csv
import io
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .nets import RetargetModel, retarget, retarget_batch
from .training import generate_synthetic_pairs

BENCH_COLUMNS = ("backend", "batch_size", "workers", "repeats", "frames", "wall_time_s", "fps", "single_clip_latency_ms")


@dataclass(frozen=True)
class BenchRow:
    backend: str
    batch_size: int
    workers: int
    repeats: int
    frames: int
    wall_time_s: float
    fps: float
    single_clip_latency_ms: float


@contextmanager
def using_backend(name):
    prev = _kernels.set_backend(name)
    try:
        yield
    finally:
        _kernels.set_backend(prev)


def bench_clips(model: RetargetModel, count: int, seed: int = 0):
    ds = generate_synthetic_pairs(model.skeletons["A"], model.skeletons["B"], count, seed,
                                  window=model.window, fps=model.config.fps)
    return ds.clips("A")


def run_bench(model: RetargetModel, batch_sizes=(1, 8, 64), repeats: int = 3, workers: int = 8,
              backends=None, seed: int = 0) -> list[BenchRow]:
    """Time ``retarget_batch`` per backend and batch size.

    A batch of one always runs on one worker; larger batches use up to
    ``workers`` threads. frames per second = batch * T * repeats / wall time.
    """
    backends = list(backends or _kernels.BACKENDS)
    clips = bench_clips(model, max(batch_sizes), seed)
    T = model.window
    rows = []
    for be in backends:
        with using_backend(be):
            retarget(model, clips[0])  # warm-up
            t0 = time.perf_counter()
            retarget(model, clips[0])
            latency = (time.perf_counter() - t0) * 1e3
            for bs in batch_sizes:
                w = 1 if bs == 1 else min(workers, bs)
                batch = clips[:bs]
                t0 = time.perf_counter()
                for _ in range(repeats):
                    retarget_batch(model, batch, w)
                wall = time.perf_counter() - t0
                frames = bs * T * repeats
                rows.append(BenchRow(be, bs, w, repeats, frames, wall, frames / wall, latency))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        w.writerow([getattr(r, k) if isinstance(getattr(r, k), (str, int)) else f"{getattr(r, k):.6g}"
                    for k in BENCH_COLUMNS])
    return buf.getvalue()


def speedup(rows, backend, big=(64, 8), small=(1, 1)) -> float:
    """fps(batch big[0], workers big[1]) / fps(batch small[0], workers small[1])."""
    fps = {(r.batch_size, r.workers): r.fps for r in rows if r.backend == backend}
    return fps[big] / fps[small]


def outputs_identical(a, b) -> bool:
    return len(a) == len(b) and all(
        np.array_equal(x.rotations, y.rotations) and np.array_equal(x.root_translation, y.root_translation)
        for x, y in zip(a, b)
    )

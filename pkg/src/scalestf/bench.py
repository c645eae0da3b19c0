"""Forward+backward scaling benchmark over node counts and attention modes."""

from __future__ import annotations

import gc
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from . import grad as G
from .errors import CapacityError
from .grad import Tape
from .model import ModelConfig, init_params, model_forward, param_count

BENCH_COLUMNS = ["n_nodes", "mode", "status", "median_s", "iqr_s", "peak_mem_mb", "params", "repetitions"]


@dataclass
class BenchRow:
    n_nodes: int
    mode: str
    status: str
    median_s: float
    iqr_s: float
    peak_mem_mb: float
    params: int
    repetitions: int

    def as_list(self) -> list:
        return [self.n_nodes, self.mode, self.status, self.median_s, self.iqr_s, self.peak_mem_mb,
                self.params, self.repetitions]


def _step(params, cfg: ModelConfig, x, y):
    tape = Tape(check_finite=False)
    loss = G.l1_loss(model_forward(tape.register(params), cfg, x), y)
    tape.backward(loss)
    tape.release()


def time_step(cfg: ModelConfig, batch_size: int = 4, repetitions: int = 20, seed: int = 0) -> tuple[np.ndarray, float]:
    """Wall times of ``repetitions`` forward+backward passes after one discarded
    warm-up, plus the traced peak allocation (MB) of a single pass.

    The peak comes from ``tracemalloc`` and covers numpy buffers allocated by
    the pass; it is an allocator-level estimate, not OS resident memory.
    """
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    x = rng.standard_normal((batch_size, cfg.n_nodes, cfg.window, cfg.d_in))
    y = rng.standard_normal((batch_size, cfg.n_nodes, cfg.horizon, cfg.d_out))
    _step(params, cfg, x, y)  # warm-up, also surfaces CapacityError early
    gc.collect()
    tracemalloc.start()
    try:
        _step(params, cfg, x, y)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    times = np.empty(repetitions)
    for i in range(repetitions):
        t0 = time.perf_counter()
        _step(params, cfg, x, y)
        times[i] = time.perf_counter() - t0
    return times, peak / 2**20


def bench_scaling(base: ModelConfig, nodes, modes=("modulated", "full"), repetitions: int = 20,
                  batch_size: int = 4, seed: int = 0, on_row=None) -> list[BenchRow]:
    rows = []
    for n in nodes:
        for mode in modes:
            d = base.to_dict()
            d.update(n_nodes=int(n), attention=mode)
            d["rank"] = min(base.rank, int(n), base.d_node)
            cfg = ModelConfig.from_dict(d)
            count = param_count(cfg)["total"]
            try:
                times, peak = time_step(cfg, batch_size, repetitions, seed)
            except CapacityError:
                row = BenchRow(int(n), mode, "capacity_error", float("nan"), float("nan"), float("nan"),
                               count, 0)
            else:
                q1, med, q3 = np.percentile(times, [25, 50, 75])
                row = BenchRow(int(n), mode, "ok", float(med), float(q3 - q1), float(peak), count, repetitions)
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows

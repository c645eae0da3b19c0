"""Windowed data preparation, Adam, the training loop and horizon metrics."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import grad as G
from .data import (
    DEFAULT_SPLITS,
    SpatiotemporalSeries,
    WindowDataset,
    ZScore,
    add_gaussian_noise,
    apply_mask,
    chronological_split,
    make_windows,
    zscore_fit,
)
from .diffusion import smoothness
from .errors import DataError, DimensionError, NumericalError
from .grad import Tape
from .model import (
    ModelConfig,
    init_params,
    layer_view,
    materialize_modulated_attention,
    model_forward,
    node_embedding_array,
)

log = logging.getLogger(__name__)

REPORT_HORIZONS = (3, 6, 12)
ENERGY_MAX_NODES = 512


# ---------------------------------------------------------------- data


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    patience: int = 10
    seed: int = 0
    train_stride: int = 1
    eval_stride: int = 1
    max_batches_per_epoch: int | None = None
    splits: tuple[float, float, float] = DEFAULT_SPLITS
    missing_ratio: float = 0.0


class ForecastData:
    """Chronological splits of one series with train-only normalization.

    ``inputs`` is the normalized series with missing entries zero-filled;
    targets are read from the raw series so metrics stay in original units.
    """

    def __init__(self, series: SpatiotemporalSeries, window: int, horizon: int, splits=DEFAULT_SPLITS,
                 train_stride: int = 1, eval_stride: int = 1, missing_ratio: float = 0.0, mask_seed: int = 0):
        if missing_ratio > 0:
            series = apply_mask(series, missing_ratio, mask_seed)
        self.series = series
        self.segments = chronological_split(series, splits)
        self.stats: ZScore = zscore_fit(self.segments["train"])
        self.inputs = self.normalize(series)
        self.windows: dict[str, WindowDataset] = {}
        for name, seg in self.segments.items():
            stride = train_stride if name == "train" else eval_stride
            self.windows[name] = make_windows(seg, window, horizon, stride, split=name)

    def normalize(self, series: SpatiotemporalSeries) -> np.ndarray:
        z = self.stats.apply(series.data.astype(np.float64))
        if series.mask is not None:
            z = np.where(series.mask.astype(bool), z, 0.0)
        return z

    def split_inputs(self, split: str, noise_std: float = 0.0, noise_seed: int = 0) -> np.ndarray:
        seg = self.segments[split]
        lo = seg.start_step - self.series.start_step
        if noise_std > 0:
            seg = add_gaussian_noise(seg, noise_std, noise_seed)
            return self.normalize(seg)
        return self.inputs[:, lo:lo + seg.n_steps]

    def batch(self, split: str, idx, inputs: np.ndarray | None = None):
        ds = self.windows[split]
        if inputs is None:
            inputs = self.split_inputs(split)
        x, y, ym, tid, diw = ds.batch(idx, inputs=inputs)
        return x, y, ym, tid, diw


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def optimizer_step(params, grads, state: AdamState, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
    """Bias-corrected Adam update, in place; returns ``(params, state)``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k}; step rejected")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    mae_at: dict[int, float]
    rmse_at: dict[int, float]
    mae_avg: float
    rmse_avg: float
    n_eval: int
    loss: float = float("nan")  # masked L1 on the normalized scale

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mae_at"] = {str(k): v for k, v in self.mae_at.items()}
        d["rmse_at"] = {str(k): v for k, v in self.rmse_at.items()}
        return d

    def rows(self, split: str) -> list[tuple]:
        out = []
        for h, v in self.mae_at.items():
            out.append((split, str(h), "mae", v))
        out.append((split, "avg", "mae", self.mae_avg))
        for h, v in self.rmse_at.items():
            out.append((split, str(h), "rmse", v))
        out.append((split, "avg", "rmse", self.rmse_avg))
        return out

    def table(self, name: str = "ScaleSTF") -> str:
        hs = list(self.mae_at)
        head = "| Method | Metric | " + " | ".join(f"@{h}" for h in hs) + " | Avg. |"
        mae = f"| {name} | MAE | " + " | ".join(f"{self.mae_at[h]:.4f}" for h in hs) + f" | {self.mae_avg:.4f} |"
        rmse = f"| {name} | RMSE | " + " | ".join(f"{self.rmse_at[h]:.4f}" for h in hs) + f" | {self.rmse_avg:.4f} |"
        return "\n".join([head, mae, rmse])


def horizon_metrics(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None,
                    horizons=REPORT_HORIZONS) -> MetricsReport:
    """MAE/RMSE per 1-indexed horizon step and averaged over all steps.

    Arrays are laid out (..., H, d); masked entries are excluded.
    """
    if pred.shape != target.shape:
        raise DimensionError("prediction/target shape mismatch")
    w = np.ones(pred.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    h_axis = pred.ndim - 2
    red = tuple(a for a in range(pred.ndim) if a != h_axis)
    err = pred - target
    cnt = w.sum(axis=red)
    abs_sum = (np.abs(err) * w).sum(axis=red)
    sq_sum = (err * err * w).sum(axis=red)
    return _report(abs_sum, sq_sum, cnt, horizons)


def _report(abs_sum, sq_sum, cnt, horizons) -> MetricsReport:
    if cnt.sum() == 0:
        raise DataError("no observed targets to evaluate")
    safe = np.maximum(cnt, 1)
    mae = abs_sum / safe
    rmse = np.sqrt(sq_sum / safe)
    hs = [h for h in horizons if h <= len(cnt)]
    return MetricsReport(
        mae_at={h: float(mae[h - 1]) for h in hs},
        rmse_at={h: float(rmse[h - 1]) for h in hs},
        mae_avg=float(abs_sum.sum() / cnt.sum()),
        rmse_avg=float(math.sqrt(sq_sum.sum() / cnt.sum())),
        n_eval=int(cnt.sum()),
    )


def evaluate(params: dict[str, np.ndarray], data: ForecastData, split: str, cfg: ModelConfig,
             batch_size: int = 16, noise_std: float = 0.0, noise_seed: int = 0) -> MetricsReport:
    """Metrics in original units; ``noise_std`` corrupts the inputs only."""
    ds = data.windows[split]
    if len(ds) == 0:
        raise DataError(f"split {split!r} has no windows")
    inputs = data.split_inputs(split, noise_std, noise_seed)
    h = cfg.horizon
    abs_sum = np.zeros(h)
    sq_sum = np.zeros(h)
    cnt = np.zeros(h)
    loss_sum = 0.0
    loss_cnt = 0.0
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        x, y, ym, tid, diw = data.batch(split, idx, inputs)
        tape = Tape(grad=False, check_finite=False)
        z = model_forward(tape.register(params), cfg, x, tid, diw).value
        tape.release()
        pred = data.stats.invert_nodes(z)
        w = np.ones(y.shape) if ym is None else ym
        err = pred - y
        abs_sum += (np.abs(err) * w).sum(axis=(0, 1, 3))
        sq_sum += (err * err * w).sum(axis=(0, 1, 3))
        cnt += w.sum(axis=(0, 1, 3))
        zt = (y - data.stats.mean[None]) / data.stats.std[None]
        loss_sum += float((np.abs(z - zt) * w).sum())
        loss_cnt += float(w.sum())
    rep = _report(abs_sum, sq_sum, cnt, REPORT_HORIZONS)
    rep.loss = loss_sum / max(loss_cnt, 1.0)
    return rep


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[dict]
    best_epoch: int
    best_val_mae: float


def batch_loss(params, cfg: ModelConfig, data: ForecastData, idx, tape: Tape):
    x, y, ym, tid, diw = data.batch("train", idx)
    pred = model_forward(tape.register(params), cfg, x, tid, diw)
    target = (y - data.stats.mean[None]) / data.stats.std[None]
    return G.l1_loss(pred, target, ym)


def train(cfg: ModelConfig, data: ForecastData, tc: TrainConfig, params: dict[str, np.ndarray] | None = None,
          on_epoch=None) -> TrainResult:
    """Adam on masked normalized-scale L1, early stopping on validation MAE.

    The training order for epoch ``e`` depends only on ``(seed, e)``.  The
    parameters with the best validation MAE are returned.
    """
    if params is None:
        params = init_params(cfg, tc.seed)
    params = {k: v.copy() for k, v in params.items()}
    state = AdamState.zeros_like(params)
    n_train = len(data.windows["train"])
    if n_train == 0:
        raise DataError("training split has no windows")
    best = (math.inf, -1, {k: v.copy() for k, v in params.items()})
    history = []
    stale = 0
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([tc.seed, epoch]).permutation(n_train)
        batches = [order[i:i + tc.batch_size] for i in range(0, n_train, tc.batch_size)]
        if tc.max_batches_per_epoch is not None:
            batches = batches[:tc.max_batches_per_epoch]
        losses = []
        t_iter = time.perf_counter()
        for idx in batches:
            tape = Tape(check_finite=False)
            loss = batch_loss(params, cfg, data, idx, tape)
            lv = float(loss.value)
            if not math.isfinite(lv):
                raise NumericalError(f"training diverged: loss={lv} at epoch {epoch}")
            grads = tape.backward(loss)
            tape.release()
            optimizer_step(params, grads, state, tc.lr, tc.betas, tc.eps)
            losses.append(lv)
        iter_seconds = (time.perf_counter() - t_iter) / max(len(batches), 1)
        val = evaluate(params, data, "val", cfg, tc.batch_size)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_loss": val.loss,
            "val_mae": val.mae_avg,
            "seconds": time.perf_counter() - t0,
            "iter_seconds": iter_seconds,
        }
        history.append(row)
        log.info("epoch %d train %.4f val %.4f (%.1fs)", epoch, row["train_loss"], val.mae_avg, row["seconds"])
        if on_epoch is not None:
            on_epoch(row)
        if val.mae_avg < best[0]:
            best = (val.mae_avg, epoch, {k: v.copy() for k, v in params.items()})
            stale = 0
        else:
            stale += 1
            if stale >= tc.patience:
                break
    return TrainResult(best[2], history, best[1], best[0])


# ---------------------------------------------------------------- diagnostics


def energy_trace(params: dict[str, np.ndarray], cfg: ModelConfig, x: np.ndarray, tid=0, diw=0) -> np.ndarray:
    """Normalized smoothness Σ A_ij‖h_j − h_i‖² / ‖H‖_F² of the states after
    the input embedding and after each block (L + 1 entries).

    The diffusivity is the per-sample mean of the blocks' materialized
    modulated-attention matrices, held fixed across layers.
    """
    if cfg.attention != "modulated":
        raise ValueError("energy trace needs modulated attention")
    if cfg.n_nodes > ENERGY_MAX_NODES:
        raise DimensionError(
            f"{cfg.n_nodes} nodes exceed the materialization cap of {ENERGY_MAX_NODES}; subsample the graph first"
        )
    tape = Tape(grad=False)
    _, states = model_forward(tape.register(params), cfg, x, tid, diw, return_states=True)
    e_n = node_embedding_array(params, cfg)
    hs = [s.value for s in states]
    n_batch = hs[0].shape[0]
    out = np.zeros(cfg.n_layers + 1)
    for b in range(n_batch):
        a = np.zeros((cfg.n_nodes, cfg.n_nodes))
        for l in range(cfg.n_layers):
            lp = layer_view(params, cfg, l)
            a += materialize_modulated_attention(hs[l][b], lp["W_Q"], lp["M"], e_n)
        a /= cfg.n_layers
        for l, h in enumerate(hs):
            hb = h[b]
            nrm = float(np.sum(hb * hb))
            out[l] += smoothness(hb, a) / nrm if nrm > 0 else 0.0
    return out / n_batch

"""Series container, windowing, chronological splits, normalization and corruption."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, DimensionError

STD_FLOOR = 1e-8
DEFAULT_SPLITS = (0.7, 0.1, 0.2)


@dataclass
class SpatiotemporalSeries:
    data: np.ndarray  # N × T × d_in
    mask: np.ndarray | None = None  # 1 = observed
    steps_per_day: int = 288
    start_weekday: int = 0
    start_step: int = 0  # absolute index of column 0, keeps calendars aligned after slicing

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise DimensionError("series data must be N × T × d_in")
        if self.mask is not None:
            self.mask = np.asarray(self.mask)
            if self.mask.shape != self.data.shape:
                raise DimensionError("mask must match data shape")

    @property
    def n_nodes(self) -> int:
        return self.data.shape[0]

    @property
    def n_steps(self) -> int:
        return self.data.shape[1]

    @property
    def d_in(self) -> int:
        return self.data.shape[2]

    def observed(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.data.shape, dtype=bool)
        return self.mask.astype(bool)

    def slice_steps(self, start: int, stop: int) -> "SpatiotemporalSeries":
        return replace(
            self,
            data=self.data[:, start:stop],
            mask=None if self.mask is None else self.mask[:, start:stop],
            start_step=self.start_step + start,
        )

    def calendar(self, steps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Time-in-day and day-in-week indices for local step positions."""
        absolute = np.asarray(steps) + self.start_step
        tid = absolute % self.steps_per_day
        diw = (absolute // self.steps_per_day + self.start_weekday) % 7
        return tid.astype(np.int64), diw.astype(np.int64)


@dataclass
class WindowDataset:
    """Windows over one contiguous segment.

    ``starts[k]`` is the first input step; inputs cover ``[s, s+W)`` and
    targets ``[s+W, s+W+H)`` in the segment's local step indices.
    """

    series: SpatiotemporalSeries
    starts: np.ndarray
    window: int
    horizon: int
    split: str = "all"

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def first_step(self) -> int:
        return self.series.start_step

    @property
    def last_step(self) -> int:
        return self.series.start_step + self.series.n_steps - 1

    def batch(self, idx, inputs: np.ndarray | None = None, input_mask: np.ndarray | None = None):
        """Assemble (x, y, target_mask, tid, diw) for window positions ``idx``.

        ``inputs`` optionally substitutes the array windows are read from
        (e.g. a normalized or noised copy); targets always come from the
        series itself.
        """
        s = self.starts[np.asarray(idx)]
        src = self.series.data if inputs is None else inputs
        w, h = self.window, self.horizon
        x_steps = s[:, None] + np.arange(w)
        y_steps = s[:, None] + w + np.arange(h)
        x = np.transpose(src[:, x_steps], (1, 0, 2, 3))  # B × N × W × d
        y = np.transpose(self.series.data[:, y_steps], (1, 0, 2, 3))
        if self.series.mask is None:
            ym = None
        else:
            ym = np.transpose(self.series.mask[:, y_steps], (1, 0, 2, 3)).astype(np.float64)
        if input_mask is not None:
            x = x * np.transpose(input_mask[:, x_steps], (1, 0, 2, 3))
        tid, diw = self.series.calendar(s + w - 1)
        return x, y, ym, tid, diw


def make_windows(series: SpatiotemporalSeries, window: int, horizon: int, stride: int = 1, split: str = "all") -> WindowDataset:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    t = series.n_steps
    if t < window + horizon:
        raise DataError(f"series of length {t} is shorter than window + horizon = {window + horizon}")
    count = (t - window - horizon) // stride + 1
    return WindowDataset(series, np.arange(count) * stride, window, horizon, split)


def chronological_split(series: SpatiotemporalSeries, fractions=DEFAULT_SPLITS) -> dict[str, SpatiotemporalSeries]:
    """Disjoint consecutive train/val/test segments."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must be three values summing to 1")
    t = series.n_steps
    a = int(round(fractions[0] * t))
    b = int(round((fractions[0] + fractions[1]) * t))
    return {
        "train": series.slice_steps(0, a),
        "val": series.slice_steps(a, b),
        "test": series.slice_steps(b, t),
    }


@dataclass
class ZScore:
    mean: np.ndarray  # N × 1 × d
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def invert_nodes(self, z: np.ndarray) -> np.ndarray:
        """Inverse for arrays laid out B × N × H × d."""
        return z * self.std[None] + self.mean[None]


def zscore_fit(train: SpatiotemporalSeries) -> ZScore:
    """Per-node, per-channel statistics over the observed training entries."""
    if train.n_steps == 0:
        raise DataError("training split is empty")
    obs = train.observed()
    cnt = obs.sum(axis=1, keepdims=True)
    safe = np.maximum(cnt, 1)
    x = np.where(obs, train.data, 0.0).astype(np.float64)
    mean = x.sum(axis=1, keepdims=True) / safe
    var = (np.where(obs, x - mean, 0.0) ** 2).sum(axis=1, keepdims=True) / safe
    return ZScore(mean, np.maximum(np.sqrt(var), STD_FLOOR))


def zscore_fit_apply(series: SpatiotemporalSeries, train: SpatiotemporalSeries) -> tuple[np.ndarray, ZScore]:
    """Normalize ``series`` with statistics fitted on ``train`` only.

    Missing entries are zero-filled after normalization, i.e. imputed with
    the node mean.
    """
    stats = zscore_fit(train)
    z = stats.apply(series.data.astype(np.float64))
    if series.mask is not None:
        z = np.where(series.mask.astype(bool), z, 0.0)
    return z, stats


def apply_mask(series: SpatiotemporalSeries, missing_ratio: float, seed: int) -> SpatiotemporalSeries:
    """Bernoulli element mask combined with any existing mask."""
    if not 0.0 <= missing_ratio <= 1.0:
        raise ValueError("missing_ratio must lie in [0, 1]")
    rng = np.random.default_rng([seed, 3])
    keep = rng.random(series.data.shape) >= missing_ratio
    if series.mask is not None:
        keep &= series.mask.astype(bool)
    return replace(series, mask=keep.astype(np.uint8))


def add_gaussian_noise(x, sigma: float, seed: int):
    """Return ``x`` plus i.i.d. N(0, sigma²); used on model inputs only.

    Accepts a raw array or a series (the mask is carried over unchanged).
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if isinstance(x, SpatiotemporalSeries):
        return replace(x, data=add_gaussian_noise(x.data, sigma, seed))
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    rng = np.random.default_rng([seed, 4])
    return x + sigma * rng.standard_normal(x.shape)

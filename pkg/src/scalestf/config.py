"""Flat JSON run configuration with strict key checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .graphs import DEFAULT_PSI, GpvarConfig, LARGE_PSI_SCALE
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    dataset: str | None = None
    checkpoint: str | None = None
    # graph + generator
    n_communities: int = 20
    nodes_per_community: int = 30
    p_in: float = 0.3
    p_out: float = 0.01
    graph_seed: int = 7
    gpvar_variant: str = "default"
    gpvar_psi: list | None = None
    gpvar_sigma: float | None = None
    gpvar_nonlinearity: str = "tanh"
    gpvar_steps: int = 30_000
    gpvar_burn_in: int = 100
    gpvar_operator: str = "sym_normalized_shift"
    steps_per_day: int = 288
    start_weekday: int = 0
    export_csv: bool = False
    # model
    window: int = 12
    horizon: int = 12
    d_feature: int = 64
    d_node: int = 32
    d_tid: int = 24
    d_diw: int = 24
    rank: int = 16
    n_layers: int = 3
    calendar_enabled: bool = False
    mode: str = "modulated"
    node_embedding: str = "lrae"
    share_modulator: bool = False
    activation: str = "relu"
    attention_cap: int = 16_000_000
    # training / evaluation
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 10
    train_stride: int = 1
    eval_stride: int = 1
    max_batches_per_epoch: int | None = None
    split_train: float = 0.7
    split_val: float = 0.1
    split_test: float = 0.2
    missing_ratio: float = 0.0
    noise_std: float = 0.0
    # diagnostics and benchmarks
    bench_nodes: list = field(default_factory=lambda: [600, 1200, 2400])
    bench_modes: list = field(default_factory=lambda: ["modulated", "full"])
    bench_repetitions: int = 20
    bench_batch_size: int = 4
    energy_batches: int = 8
    energy_subsample: int | None = None
    denoise_nodes: int = 16
    denoise_betas: list = field(default_factory=lambda: [0.0, 0.0025, 0.005, 0.01, 0.02, 0.04])
    denoise_gd_steps: int = 500
    grad_check_seeds: int = 20

    def __post_init__(self):
        if self.mode not in ("modulated", "full"):
            raise ConfigError(f"mode must be 'modulated' or 'full', got {self.mode!r}")
        if self.gpvar_variant not in ("default", "large"):
            raise ConfigError("gpvar_variant must be 'default' or 'large'")
        if not 0.0 <= self.missing_ratio <= 1.0:
            raise ConfigError("missing_ratio must lie in [0, 1]")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.gpvar_steps < 1:
            raise ConfigError("gpvar_steps must be >= 1")
        for m in self.bench_modes:
            if m not in ("modulated", "full"):
                raise ConfigError(f"unknown bench mode {m!r}")

    # -- derived paths -------------------------------------------------
    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    @property
    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else self.out / "dataset.stfd"

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else self.out / "checkpoint.stfc"

    # -- component configs ---------------------------------------------
    def gpvar(self) -> GpvarConfig:
        large = self.gpvar_variant == "large"
        psi = self.gpvar_psi
        if psi is None:
            psi = [[v * (LARGE_PSI_SCALE if large else 1.0) for v in row] for row in DEFAULT_PSI]
        sigma = self.gpvar_sigma if self.gpvar_sigma is not None else (0.75 if large else 0.4)
        try:
            return GpvarConfig(
                psi=psi, noise_std=sigma, nonlinearity=self.gpvar_nonlinearity, steps=self.gpvar_steps,
                seed=self.seed, burn_in=self.gpvar_burn_in, operator=self.gpvar_operator,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model(self, n_nodes: int, mode: str | None = None) -> ModelConfig:
        return ModelConfig(
            n_nodes=n_nodes, window=self.window, horizon=self.horizon, d_feature=self.d_feature,
            d_node=self.d_node, d_tid=self.d_tid, d_diw=self.d_diw, rank=self.rank, n_layers=self.n_layers,
            calendar_enabled=self.calendar_enabled, steps_per_day=self.steps_per_day,
            attention=mode or self.mode, node_embedding=self.node_embedding,
            share_modulator=self.share_modulator, activation=self.activation, attention_cap=self.attention_cap,
        )

    def train(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, betas=(self.beta1, self.beta2),
            eps=self.adam_eps, patience=self.patience, seed=self.seed, train_stride=self.train_stride,
            eval_stride=self.eval_stride, max_batches_per_epoch=self.max_batches_per_epoch,
            splits=(self.split_train, self.split_val, self.split_test), missing_ratio=self.missing_ratio,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _check_type(name: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {name!r} expects a boolean")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {name!r} expects an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {name!r} expects a number")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {name!r} expects a string")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"config key {name!r} expects a list")
    return value


def run_config_from_dict(doc: dict, overrides: dict | None = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    known = {f.name: f for f in fields(RunConfig)}
    defaults = asdict(RunConfig())
    merged = {}
    for key, value in {**doc, **(overrides or {})}.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = _check_type(key, value, defaults[key])
    return RunConfig(**merged)


def load_run_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {p}: {exc}") from exc
    return run_config_from_dict(doc, overrides)

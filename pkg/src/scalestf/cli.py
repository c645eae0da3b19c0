"""stf command-line entry point.

Every subcommand reads one JSON config (``--config``), applies flag
overrides, writes ``resolved_config.json`` into the output directory and
then its own artifacts.  Exit codes: 0 ok, 2 config, 3 data, 4 numerical.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .bench import BENCH_COLUMNS, bench_scaling
from .checks import kernel_checks, model_grad_check
from .config import RunConfig, load_run_config
from .diffusion import denoise_closed_form, denoise_first_order, denoise_gradient, denoise_gradient_descent
from .errors import ConfigError, DataError, DimensionError, NumericalError
from .graphs import community_graph, gpvar_generate, graph_laplacian
from .model import node_embedding_array, subsample_nodes
from .training import ENERGY_MAX_NODES, ForecastData, energy_trace, evaluate, train

log = logging.getLogger("scalestf")

METRIC_COLUMNS = ["split", "horizon", "metric", "value"]
HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "val_mae", "seconds", "iter_seconds"]


def _prepare(cfg: RunConfig) -> Path:
    out = cfg.out
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    io.write_json(out / "resolved_config.json", cfg.to_dict())
    return out


def _forecast_data(cfg: RunConfig) -> ForecastData:
    series, _ = io.read_dataset(cfg.dataset_path)
    series.steps_per_day = cfg.steps_per_day
    series.start_weekday = cfg.start_weekday
    tc = cfg.train()
    return ForecastData(series, cfg.window, cfg.horizon, tc.splits, tc.train_stride, tc.eval_stride,
                        tc.missing_ratio, mask_seed=cfg.seed)


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig) -> dict:
    out = _prepare(cfg)
    gcfg = cfg.gpvar()
    graph = community_graph(cfg.n_communities, cfg.nodes_per_community, cfg.p_in, cfg.p_out, cfg.graph_seed)
    series = gpvar_generate(graph, gcfg)
    path = cfg.dataset_path
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        digest = io.write_dataset(path, series, graph)
    except OSError as exc:
        raise ConfigError(f"cannot write dataset {path}: {exc}") from exc
    meta = {
        "dataset": str(path),
        "content_hash": digest,
        "seed": cfg.seed,
        "graph": {"n_communities": cfg.n_communities, "nodes_per_community": cfg.nodes_per_community,
                  "p_in": cfg.p_in, "p_out": cfg.p_out, "graph_seed": cfg.graph_seed, "n_edges": graph.n_edges},
        "generator": {"psi": gcfg.psi, "noise_std": gcfg.noise_std, "nonlinearity": gcfg.nonlinearity,
                      "steps": gcfg.steps, "burn_in": gcfg.burn_in, "operator": gcfg.operator,
                      "variant": cfg.gpvar_variant},
        "n_nodes": series.n_nodes,
        "n_steps": series.n_steps,
    }
    io.write_json(out / "dataset_meta.json", meta)
    if cfg.export_csv:
        io.write_dataset_csv(out / "dataset.csv", series)
        io.write_csv(out / "adjacency.csv", ["i", "j", "w"], graph.edges)
    print(f"wrote {path} ({series.n_nodes} nodes, {series.n_steps} steps) sha256={digest}")
    return meta


def _write_metrics(out: Path, stem: str, reports: dict) -> None:
    io.write_json(out / f"{stem}.json", {split: rep.to_dict() for split, rep in reports.items()})
    rows = [r for split, rep in reports.items() for r in rep.rows(split)]
    io.write_csv(out / f"{stem}.csv", METRIC_COLUMNS, rows)


def cmd_train(cfg: RunConfig) -> dict:
    out = _prepare(cfg)
    data = _forecast_data(cfg)
    mcfg = cfg.model(data.series.n_nodes)
    result = train(mcfg, data, cfg.train())
    ckpt = cfg.checkpoint_path
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    io.write_checkpoint(ckpt, mcfg, result.params)
    io.write_csv(out / "history.csv", HISTORY_COLUMNS, [[row[c] for c in HISTORY_COLUMNS] for row in result.history])
    reports = {split: evaluate(result.params, data, split, mcfg, cfg.batch_size) for split in ("val", "test")}
    _write_metrics(out, "metrics", reports)
    print(reports["test"].table())
    return {"best_epoch": result.best_epoch, "best_val_mae": result.best_val_mae,
            "test": reports["test"].to_dict(), "history": result.history}


def cmd_eval(cfg: RunConfig) -> dict:
    out = _prepare(cfg)
    mcfg, params = io.read_checkpoint(cfg.checkpoint_path)
    data = _forecast_data(cfg)
    if data.series.n_nodes != mcfg.n_nodes:
        raise DataError(f"checkpoint expects {mcfg.n_nodes} nodes, dataset has {data.series.n_nodes}")
    rep = evaluate(params, data, "test", mcfg, cfg.batch_size, noise_std=cfg.noise_std, noise_seed=cfg.seed)
    _write_metrics(out, "eval_metrics", {"test": rep})
    print(rep.table())
    return rep.to_dict()


def cmd_bench_scaling(cfg: RunConfig) -> list:
    out = _prepare(cfg)
    base = cfg.model(max(int(n) for n in cfg.bench_nodes))

    def show(row):
        print(f"N={row.n_nodes:>6} {row.mode:<9} {row.status:<14} median={row.median_s:.4f}s "
              f"iqr={row.iqr_s:.4f}s peak={row.peak_mem_mb:.1f}MB params={row.params}")

    rows = bench_scaling(base, cfg.bench_nodes, cfg.bench_modes, cfg.bench_repetitions,
                         cfg.bench_batch_size, cfg.seed, on_row=show)
    io.write_csv(out / "bench_scaling.csv", BENCH_COLUMNS, [r.as_list() for r in rows])
    return rows


def cmd_energy_trace(cfg: RunConfig) -> np.ndarray:
    out = _prepare(cfg)
    mcfg, params = io.read_checkpoint(cfg.checkpoint_path)
    data = _forecast_data(cfg)
    nodes = None
    if cfg.energy_subsample is not None:
        k = min(cfg.energy_subsample, mcfg.n_nodes)
        nodes = np.sort(np.random.default_rng([cfg.seed, 6]).choice(mcfg.n_nodes, k, replace=False))
        mcfg, params = subsample_nodes(params, mcfg, nodes)
    elif mcfg.n_nodes > ENERGY_MAX_NODES:
        raise ConfigError(f"{mcfg.n_nodes} nodes exceed the energy-trace cap of {ENERGY_MAX_NODES}; "
                          f"set energy_subsample to at most {ENERGY_MAX_NODES}")
    ds = data.windows["test"]
    n_batches = min(cfg.energy_batches, -(-len(ds) // cfg.batch_size))
    trace = np.zeros(mcfg.n_layers + 1)
    for b in range(n_batches):
        idx = np.arange(b * cfg.batch_size, min((b + 1) * cfg.batch_size, len(ds)))
        x, _, _, tid, diw = data.batch("test", idx)
        if nodes is not None:
            x = x[:, nodes]
        trace += energy_trace(params, mcfg, x, tid, diw)
    trace /= max(n_batches, 1)
    io.write_csv(out / "energy_trace.csv", ["layer", "energy"], [[l, float(e)] for l, e in enumerate(trace)])
    for l, e in enumerate(trace):
        print(f"layer {l}: {e:.6g}")
    return trace


def denoise_table(lap: np.ndarray, x0: np.ndarray, betas, gd_steps: int = 500) -> list[list[float]]:
    """Rows (β, ‖∇ at closed form‖, ‖first-order − closed‖, ‖descent − closed‖)."""
    rows = []
    for beta in betas:
        exact = denoise_closed_form(x0, lap, beta)
        grad_err = float(np.linalg.norm(denoise_gradient(exact, x0, lap, beta)))
        fo_err = float(np.linalg.norm(denoise_first_order(x0, lap, beta) - exact))
        gd_err = float(np.linalg.norm(denoise_gradient_descent(x0, lap, beta, gd_steps) - exact))
        rows.append([float(beta), grad_err, fo_err, gd_err])
    return rows


def cmd_denoise_demo(cfg: RunConfig) -> list:
    out = _prepare(cfg)
    per = max(1, cfg.denoise_nodes // 4)
    graph = community_graph(max(1, cfg.denoise_nodes // per), per, 0.6, 0.1, cfg.graph_seed)
    lap = graph_laplacian(graph, "unnormalized")
    x0 = np.random.default_rng([cfg.seed, 5]).standard_normal((graph.n, 1))
    rows = denoise_table(lap, x0, cfg.denoise_betas, cfg.denoise_gd_steps)
    io.write_csv(out / "denoise.csv", ["beta", "closed_form_error", "first_order_error", "iterative_error"], rows)
    for r in rows:
        print("beta={:<8g} closed={:.3e} first_order={:.3e} iterative={:.3e}".format(*r))
    return rows


def cmd_export_embeddings(cfg: RunConfig) -> np.ndarray:
    out = _prepare(cfg)
    mcfg, params = io.read_checkpoint(cfg.checkpoint_path)
    emb = node_embedding_array(params, mcfg)
    header = ["node"] + [f"e{k}" for k in range(emb.shape[1])]
    io.write_csv(out / "embeddings.csv", header, [[i, *map(float, row)] for i, row in enumerate(emb)])
    print(f"wrote {emb.shape[0]} x {emb.shape[1]} node embeddings")
    return emb


def cmd_grad_check(cfg: RunConfig) -> list:
    out = _prepare(cfg)
    rows = []
    for seed in range(cfg.seed, cfg.seed + cfg.grad_check_seeds):
        for name, err in kernel_checks(seed).items():
            rows.append([name, seed, err])
        rows.append(["model.modulated", seed, model_grad_check(seed, "modulated")])
        rows.append(["model.full", seed, model_grad_check(seed, "full")])
    io.write_csv(out / "grad_check.csv", ["target", "seed", "max_rel_error"], rows)
    worst = max(r[2] for r in rows)
    print(f"{len(rows)} checks, worst relative error {worst:.3e}")
    if not worst < 1e-4:
        raise NumericalError(f"gradient check failed: worst relative error {worst:.3e}")
    return rows


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench-scaling": cmd_bench_scaling,
    "energy-trace": cmd_energy_trace,
    "denoise-demo": cmd_denoise_demo,
    "export-embeddings": cmd_export_embeddings,
    "grad-check": cmd_grad_check,
}


def _node_list(text: str) -> list[int]:
    try:
        nodes = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not nodes:
        raise argparse.ArgumentTypeError("node list is empty")
    return nodes


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stf", description="ScaleSTF forecasting experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--mode", choices=("modulated", "full"))
        p.add_argument("--nodes", type=_node_list, help="comma-separated node counts (bench-scaling)")
        p.add_argument("--missing-ratio", type=float)
        p.add_argument("--noise-std", type=float)
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict:
    mapping = {"seed": "seed", "out": "out_dir", "mode": "mode", "nodes": "bench_nodes",
               "missing_ratio": "missing_ratio", "noise_std": "noise_std"}
    return {key: getattr(args, attr) for attr, key in mapping.items() if getattr(args, attr) is not None}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_run_config(args.config, overrides_from_args(args))
        COMMANDS[args.command](cfg)
    except (ConfigError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Finite-difference checks of every differentiable kernel and of the full model."""

from __future__ import annotations

import numpy as np

from . import grad as G
from .grad import grad_check
from .model import (
    ModelConfig,
    diffusion_block,
    full_self_attention,
    init_params,
    input_embedding,
    layer_view,
    lrae_compose,
    model_forward,
    modulated_node_attention,
    node_embedding,
)


def _probe(out: G.Var, rng_seed: int) -> G.Var:
    """Scalar ⟨out, R⟩ with a fixed random R so that no kernel output is summed away."""
    r = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return G.total(G.mul(out, out.tape.constant(r)))


def toy_model_config(**kw) -> ModelConfig:
    """Small 2-layer, 6-node model used by grad checks and smoke runs."""
    base = dict(n_nodes=6, window=4, horizon=3, d_feature=5, d_node=4, d_tid=3, d_diw=2, rank=2,
                n_layers=2, steps_per_day=8)
    base.update(kw)
    return ModelConfig(**base)


def kernel_checks(seed: int) -> dict[str, float]:
    """Worst relative error of each kernel at one random point."""
    rng = np.random.default_rng([seed, 8])
    n = rng.standard_normal
    ps = seed + 1000
    checks = {
        "matmul": (lambda p: _probe(G.matmul(p["a"], p["b"]), ps), {"a": n((2, 3, 4)), "b": n((4, 5))}),
        "matmul.batched": (lambda p: _probe(G.matmul(p["a"], p["b"]), ps), {"a": n((2, 3, 4)), "b": n((2, 4, 2))}),
        "add.broadcast": (lambda p: _probe(G.add(p["a"], p["b"]), ps), {"a": n((3, 4)), "b": n((4,))}),
        "sub": (lambda p: _probe(G.sub(p["a"], p["b"]), ps), {"a": n((3, 4)), "b": n((3, 4))}),
        "mul.broadcast": (lambda p: _probe(G.mul(p["a"], p["b"]), ps), {"a": n((2, 3, 4)), "b": n((3, 1))}),
        "scale": (lambda p: _probe(G.scale(p["a"], -1.7), ps), {"a": n((3, 2))}),
        "transpose": (lambda p: _probe(G.transpose(p["a"]), ps), {"a": n((2, 3, 4))}),
        "reshape": (lambda p: _probe(G.reshape(p["a"], (4, 6)), ps), {"a": n((2, 3, 4))}),
        "concat": (lambda p: _probe(G.concat([p["a"], p["b"]]), ps), {"a": n((2, 3, 2)), "b": n((3, 3))}),
        "take_rows": (lambda p: _probe(G.take_rows(p["t"], np.array([0, 2, 2, 4])), ps), {"t": n((5, 3))}),
        "softmax.rows": (lambda p: _probe(G.softmax(p["a"], -1), ps), {"a": n((3, 5))}),
        "softmax.cols": (lambda p: _probe(G.softmax(p["a"], 0), ps), {"a": n((3, 5))}),
        "layer_norm": (lambda p: _probe(G.layer_norm(p["h"], p["g"], p["b"]), ps),
                       {"h": n((2, 3, 6)), "g": n((6,)), "b": n((6,))}),
        "l1_loss": (lambda p: G.l1_loss(p["a"], np.zeros((4, 3)), (np.arange(12).reshape(4, 3) % 3 > 0) * 1.0),
                    {"a": n((4, 3))}),
        "lrae_compose": (lambda p: _probe(lrae_compose(p["e"], p["p"]), ps), {"e": n((6, 2)), "p": n((2, 4))}),
    }
    for kind in G.ACTIVATIONS:
        checks[f"activation.{kind}"] = (lambda p, k=kind: _probe(G.activation(p["a"], k), ps), {"a": n((4, 5))})

    # attention kernels and one block on a toy model
    for mode in ("modulated", "full"):
        cfg = toy_model_config(attention=mode)
        params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in init_params(cfg, seed).items()}
        h0 = n((2, cfg.n_nodes, cfg.d_model))

        def att(p, cfg=cfg, mode=mode):
            h = p["h"]
            lp = layer_view(p, cfg, 0)
            e_n = node_embedding(p, cfg, h.tape)
            out = modulated_node_attention(h, lp, e_n) if mode == "modulated" else full_self_attention(h, lp)
            return _probe(out, ps)

        def block(p, cfg=cfg):
            e_n = node_embedding(p, cfg, p["h"].tape)
            return _probe(diffusion_block(p["h"], layer_view(p, cfg, 0), e_n, cfg), ps)

        store = {k: v for k, v in params.items() if k.startswith(("node.", "layers.0."))}
        store["h"] = h0
        checks[f"attention.{mode}"] = (att, store)
        checks[f"diffusion_block.{mode}"] = (block, store)

    cfg = toy_model_config()
    params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in init_params(cfg, seed).items()}
    x = n((2, cfg.n_nodes, cfg.window, 1))
    tid, diw = np.array([1, 7]), np.array([0, 6])

    def embed(p):
        return _probe(input_embedding(x, tid, diw, p, cfg, node_embedding(p, cfg, p["W0"].tape)), ps)

    checks["input_embedding"] = (embed, {k: v for k, v in params.items() if not k.startswith(("layers.", "readout."))})
    return {name: grad_check(f, p, seed=seed) for name, (f, p) in checks.items()}


def model_grad_check(seed: int, mode: str = "modulated", batch: int = 2) -> float:
    """Finite-difference check of the masked L1 training loss of the 2-layer, 6-node model."""
    cfg = toy_model_config(attention=mode)
    rng = np.random.default_rng([seed, 7])
    params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in init_params(cfg, seed).items()}
    x = rng.standard_normal((batch, cfg.n_nodes, cfg.window, 1))
    y = rng.standard_normal((batch, cfg.n_nodes, cfg.horizon, 1))
    mask = (rng.random(y.shape) > 0.2).astype(float)
    tid = rng.integers(0, cfg.steps_per_day, batch)
    diw = rng.integers(0, 7, batch)

    def loss(p):
        return G.l1_loss(model_forward(p, cfg, x, tid, diw), y, mask)

    return grad_check(loss, params, seed=seed)

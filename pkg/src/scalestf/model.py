"""ScaleSTF: observation encoding, low-rank node embedding, diffusion blocks, readout.

All forward functions take tape-bound parameters (``dict[str, Var]``) and
batched node states laid out B × N × D.  Weight matrices are stored in
``(fan_in, fan_out)`` layout so every dense layer is ``h @ W + b``.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import grad as G
from .errors import CapacityError, ConfigError, DimensionError
from .grad import Tape, Var

ATTENTION_MODES = ("modulated", "full")
NODE_EMBEDDINGS = ("lrae", "dense", "none")


@dataclass
class ModelConfig:
    n_nodes: int
    window: int = 12
    horizon: int = 12
    d_in: int = 1
    d_out: int = 1
    d_feature: int = 64
    d_node: int = 32
    d_tid: int = 24
    d_diw: int = 24
    rank: int = 16
    n_layers: int = 3
    model_dim: int | None = None  # must equal d_model; None means "use d_model"
    calendar_enabled: bool = True
    steps_per_day: int = 288
    attention: str = "modulated"
    node_embedding: str = "lrae"
    share_modulator: bool = False
    activation: str = "relu"
    attention_cap: int = 16_000_000  # max B·N² entries for full attention

    def __post_init__(self):
        for f in ("n_nodes", "window", "horizon", "d_in", "d_out", "d_feature", "d_node", "rank", "n_layers"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be >= 1")
        if self.calendar_enabled and (self.d_tid < 1 or self.d_diw < 1 or self.steps_per_day < 1):
            raise ConfigError("calendar dimensions must be >= 1 when calendar is enabled")
        if self.attention not in ATTENTION_MODES:
            raise ConfigError(f"attention must be one of {ATTENTION_MODES}")
        if self.node_embedding not in NODE_EMBEDDINGS:
            raise ConfigError(f"node_embedding must be one of {NODE_EMBEDDINGS}")
        if self.activation not in G.ACTIVATIONS:
            raise ConfigError(f"activation must be one of {G.ACTIVATIONS}")
        if self.node_embedding == "lrae" and self.rank > min(self.n_nodes, self.d_node):
            raise ConfigError(f"rank {self.rank} exceeds min(n_nodes, d_node) = {min(self.n_nodes, self.d_node)}")
        if self.model_dim is not None and self.model_dim != self.d_model:
            raise ConfigError(f"model_dim {self.model_dim} must equal the embedding width {self.d_model}")

    @property
    def d_model(self) -> int:
        d = self.d_feature + self.d_node
        if self.calendar_enabled:
            d += self.d_tid + self.d_diw
        return d

    @property
    def d_m(self) -> int:
        return self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- parameters


def _modulator_names(cfg: ModelConfig) -> list[str]:
    if cfg.attention != "modulated":
        return []
    if cfg.share_modulator:
        return ["M"]
    return [f"layers.{l}.M" for l in range(cfg.n_layers)]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d_model, cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "W0": (cfg.window * cfg.d_in, cfg.d_feature),
        "b0": (cfg.d_feature,),
        "mlp_in.W1": (d, h), "mlp_in.b1": (h,),
        "mlp_in.W2": (h, d), "mlp_in.b2": (d,),
    }
    if cfg.node_embedding == "lrae":
        shapes["node.E_r"] = (cfg.n_nodes, cfg.rank)
        shapes["node.P"] = (cfg.rank, cfg.d_node)
    elif cfg.node_embedding == "dense":
        shapes["node.E"] = (cfg.n_nodes, cfg.d_node)
    if cfg.calendar_enabled:
        shapes["tid_table"] = (cfg.steps_per_day, cfg.d_tid)
        shapes["diw_table"] = (7, cfg.d_diw)
    if cfg.attention == "modulated" and cfg.share_modulator:
        shapes["M"] = (cfg.d_node, cfg.d_m)
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        shapes[pre + "W_Q"] = (d, cfg.d_m)
        if cfg.attention == "full":
            shapes[pre + "W_K"] = (d, cfg.d_m)
        elif not cfg.share_modulator:
            shapes[pre + "M"] = (cfg.d_node, cfg.d_m)
        shapes[pre + "W_V"] = (d, cfg.d_m)
        shapes[pre + "ln1.gamma"] = (d,)
        shapes[pre + "ln1.beta"] = (d,)
        shapes[pre + "mlp.W1"] = (d, h)
        shapes[pre + "mlp.b1"] = (h,)
        shapes[pre + "mlp.W2"] = (h, d)
        shapes[pre + "mlp.b2"] = (d,)
        shapes[pre + "ln2.gamma"] = (d,)
        shapes[pre + "ln2.beta"] = (d,)
    out = cfg.horizon * cfg.d_out
    shapes["readout.W1"] = (d, d)
    shapes["readout.b1"] = (d,)
    shapes["readout.W2"] = (d, out)
    shapes["readout.b2"] = (out,)
    return shapes


_TABLES = ("node.E_r", "node.P", "node.E", "tid_table", "diw_table")


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, N(0, 0.02²) embedding tables; LN gains one.

    Each array draws from its own stream keyed by ``(seed, name)``, so
    variants that differ in one component share every other initial value.
    """
    params = {}
    for name, shape in param_shapes(cfg).items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        leaf = name.rsplit(".", 1)[-1]
        if name in _TABLES or leaf == "M":
            params[name] = rng.normal(0.0, 0.02, shape)
        elif leaf == "gamma":
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, shape)
    return params


def param_count(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form parameter accounting per group."""
    d, n, dn, r = cfg.d_model, cfg.n_nodes, cfg.d_node, cfg.rank
    out = cfg.horizon * cfg.d_out
    groups = {
        "input": cfg.window * cfg.d_in * cfg.d_feature + cfg.d_feature,
        "mlp_in": 2 * (d * d + d),
        "node_embedding": {"lrae": n * r + r * dn, "dense": n * dn, "none": 0}[cfg.node_embedding],
        "calendar": (cfg.steps_per_day * cfg.d_tid + 7 * cfg.d_diw) if cfg.calendar_enabled else 0,
    }
    per_layer = 2 * d * d + 4 * d + 2 * (d * d + d)  # W_Q, W_V, two layer norms, block MLP
    if cfg.attention == "full":
        per_layer += d * d
        modulators = 0
    else:
        modulators = dn * d * (1 if cfg.share_modulator else cfg.n_layers)
    groups["layers"] = cfg.n_layers * per_layer
    groups["modulator"] = modulators
    groups["readout"] = d * d + d + d * out + out
    groups["total"] = sum(groups.values())
    groups["embedding_lrae"] = n * r + r * dn
    groups["embedding_dense"] = n * dn
    return groups


# ---------------------------------------------------------------- components


def lrae_compose(e_r: Var, p: Var) -> Var:
    """Low-rank adapted node embedding ``E_r · P`` (N × D_N, rank ≤ r)."""
    return G.matmul(e_r, p)


def node_embedding(params: dict[str, Var], cfg: ModelConfig, tape: Tape) -> Var:
    if cfg.node_embedding == "lrae":
        return lrae_compose(params["node.E_r"], params["node.P"])
    if cfg.node_embedding == "dense":
        return params["node.E"]
    return tape.constant(np.zeros((cfg.n_nodes, cfg.d_node)))


def _dense(h: Var, w: Var, b: Var) -> Var:
    return G.add(G.matmul(h, w), b)


def input_embedding(x: np.ndarray, tid, diw, params: dict[str, Var], cfg: ModelConfig, e_n: Var) -> Var:
    """Encode a B × N × W × d_in window batch into B × N × D node states."""
    tape = e_n.tape
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    b, n, w, d_in = x.shape
    if (n, w, d_in) != (cfg.n_nodes, cfg.window, cfg.d_in):
        raise DimensionError(f"window batch {x.shape[1:]} does not match config ({cfg.n_nodes}, {cfg.window}, {cfg.d_in})")
    z = _dense(tape.constant(x.reshape(b, n, w * d_in)), params["W0"], params["b0"])
    parts = [z, e_n]
    if cfg.calendar_enabled:
        tid = np.atleast_1d(np.asarray(tid, dtype=np.int64))
        diw = np.atleast_1d(np.asarray(diw, dtype=np.int64))
        if tid.min() < 0 or tid.max() >= cfg.steps_per_day or diw.min() < 0 or diw.max() >= 7:
            raise IndexError("calendar index out of range")
        parts.append(G.take_rows(params["tid_table"], np.broadcast_to(tid, (b,)).reshape(b, 1)))
        parts.append(G.take_rows(params["diw_table"], np.broadcast_to(diw, (b,)).reshape(b, 1)))
    h = G.concat(parts)
    act = cfg.activation
    inner = G.activation(_dense(h, params["mlp_in.W1"], params["mlp_in.b1"]), act)
    return G.add(G.activation(_dense(inner, params["mlp_in.W2"], params["mlp_in.b2"]), act), h)


def _modulator(params: dict[str, Var], cfg: ModelConfig, layer: int) -> Var:
    return params["M"] if cfg.share_modulator else params[f"layers.{layer}.M"]


def layer_view(params: dict, cfg: ModelConfig, layer: int) -> dict:
    pre = f"layers.{layer}."
    view = {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}
    if cfg.attention == "modulated" and cfg.share_modulator:
        view["M"] = params["M"]
    return view


def modulated_node_attention(h: Var, lp: dict[str, Var], e_n: Var) -> Var:
    """``softmax(H W_Q Mᵀ/√D_m) · (softmax(E_Nᵀ) · H W_V)`` without any N×N product."""
    d_m = lp["W_Q"].shape[1]
    left = G.softmax(G.scale(G.matmul(G.matmul(h, lp["W_Q"]), G.transpose(lp["M"])), 1.0 / math.sqrt(d_m)))
    right = G.matmul(G.softmax(G.transpose(e_n)), G.matmul(h, lp["W_V"]))
    return G.matmul(left, right)


def full_self_attention(h: Var, lp: dict[str, Var], cap: int | None = None) -> Var:
    """``softmax(H W_Q W_Kᵀ Hᵀ/√D_m) · H W_V``; allocates B × N × N."""
    n = h.shape[-2]
    batch = int(np.prod(h.shape[:-2])) if h.value.ndim > 2 else 1
    if cap is not None and batch * n * n > cap:
        raise CapacityError(f"full attention needs {batch * n * n} entries, cap is {cap}")
    d_m = lp["W_Q"].shape[1]
    q = G.matmul(h, lp["W_Q"])
    k = G.matmul(h, lp["W_K"])
    att = G.softmax(G.scale(G.matmul(q, G.transpose(k)), 1.0 / math.sqrt(d_m)))
    return G.matmul(att, G.matmul(h, lp["W_V"]))


def diffusion_block(h: Var, lp: dict[str, Var], e_n: Var, cfg: ModelConfig, mode: str | None = None) -> Var:
    """Post-norm residual block: LN(H + Attn(H)); LN(H + MLP(H))."""
    if cfg.d_m != h.shape[-1]:
        raise ConfigError("model dimension must equal the node-state width")
    mode = mode or cfg.attention
    if mode == "modulated":
        a = modulated_node_attention(h, lp, e_n)
    elif mode == "full":
        a = full_self_attention(h, lp, cfg.attention_cap)
    else:
        raise ConfigError(f"unknown attention mode {mode!r}")
    h = G.layer_norm(G.add(h, a), lp["ln1.gamma"], lp["ln1.beta"])
    m = _dense(G.activation(_dense(h, lp["mlp.W1"], lp["mlp.b1"]), cfg.activation), lp["mlp.W2"], lp["mlp.b2"])
    return G.layer_norm(G.add(h, m), lp["ln2.gamma"], lp["ln2.beta"])


def model_forward(
    params: dict[str, Var], cfg: ModelConfig, x: np.ndarray, tid=0, diw=0, return_states: bool = False
):
    """B × N × W × d_in windows → B × N × H_out × d_out predictions.

    With ``return_states`` also returns the node states after the input
    embedding and after every block (L + 1 entries).
    """
    tape = next(iter(params.values())).tape
    e_n = node_embedding(params, cfg, tape)
    h = input_embedding(x, tid, diw, params, cfg, e_n)
    states = [h]
    for l in range(cfg.n_layers):
        h = diffusion_block(h, layer_view(params, cfg, l), e_n, cfg)
        states.append(h)
    hidden = G.activation(_dense(h, params["readout.W1"], params["readout.b1"]), cfg.activation)
    out = _dense(hidden, params["readout.W2"], params["readout.b2"])
    b, n = out.shape[0], out.shape[1]
    out = G.reshape(out, (b, n, cfg.horizon, cfg.d_out))
    return (out, states) if return_states else out


def predict(params: dict[str, np.ndarray], cfg: ModelConfig, x, tid=0, diw=0) -> np.ndarray:
    tape = Tape(grad=False)
    return model_forward(tape.register(params), cfg, x, tid, diw).value


# ---------------------------------------------------------------- probes


def _np_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def node_embedding_array(params: dict[str, np.ndarray], cfg: ModelConfig) -> np.ndarray:
    if cfg.node_embedding == "lrae":
        return params["node.E_r"] @ params["node.P"]
    if cfg.node_embedding == "dense":
        return params["node.E"]
    return np.zeros((cfg.n_nodes, cfg.d_node))


def materialize_modulated_attention(h: np.ndarray, w_q: np.ndarray, m: np.ndarray, e_n: np.ndarray) -> np.ndarray:
    """Explicit N × N matrix ``softmax(H W_Q Mᵀ/√D_m) · softmax(E_Nᵀ)`` for one sample."""
    left = _np_softmax(h @ w_q @ m.T / math.sqrt(w_q.shape[1]))
    return left @ _np_softmax(e_n.T)


def low_rank_projection_error(q: np.ndarray, k: np.ndarray, v: np.ndarray, e: np.ndarray) -> float:
    """‖σ(QKᵀ)EEᵀV − σ(QKᵀ)V‖ / ‖σ(QKᵀ)V‖, defined as 0 when σ(QKᵀ)V = 0."""
    a = _np_softmax(q @ k.T / math.sqrt(q.shape[1]))
    av = a @ v
    denom = np.linalg.norm(av)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a @ (e @ (e.T @ v)) - av) / denom)


def low_rank_projection_probe(n: int, r: int, trials: int = 50, seed: int = 0, d: int = 16, orthogonalize: bool = False) -> dict:
    """Monte-Carlo relative error of replacing the identity by a random EEᵀ.

    ``E`` is n × r Gaussian with entries N(0, 1/r); with ``orthogonalize``
    its columns are orthonormalized first.
    """
    if not 1 <= r <= n:
        raise ValueError("need 1 <= r <= n")
    rng = np.random.default_rng(seed)
    errs = np.empty(trials)
    for t in range(trials):
        q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
        e = rng.normal(0.0, 1.0 / math.sqrt(r), (n, r))
        if orthogonalize:
            e, _ = np.linalg.qr(e)
        errs[t] = low_rank_projection_error(q, k, v, e)
    return {
        "n": n, "rank": r, "trials": trials,
        "median": float(np.median(errs)),
        "p90": float(np.percentile(errs, 90)),
        "errors": errs,
    }


def subsample_nodes(params: dict[str, np.ndarray], cfg: ModelConfig, nodes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Restrict a trained model to a node subset (rows of the node tables).

    Every other parameter is node-independent, so the result is the same
    model evaluated on the induced subset.
    """
    nodes = np.asarray(nodes, dtype=int)
    if nodes.ndim != 1 or len(nodes) == 0 or nodes.min() < 0 or nodes.max() >= cfg.n_nodes:
        raise DimensionError("node subset must be a nonempty list of valid node indices")
    d = cfg.to_dict()
    d["n_nodes"] = len(nodes)
    if cfg.node_embedding == "lrae":
        d["rank"] = min(cfg.rank, len(nodes))
    sub_cfg = ModelConfig.from_dict(d)
    out = {k: v.copy() for k, v in params.items()}
    if "node.E" in out:
        out["node.E"] = out["node.E"][nodes]
    if "node.E_r" in out:
        e_r = out["node.E_r"][nodes]
        if sub_cfg.rank < cfg.rank:
            # keep E_r·P exact while honouring rank ≤ n
            u, s, vt = np.linalg.svd(e_r @ out["node.P"], full_matrices=False)
            k = sub_cfg.rank
            e_r, out["node.P"] = u[:, :k] * s[:k], vt[:k]
        out["node.E_r"] = e_r
    return sub_cfg, out

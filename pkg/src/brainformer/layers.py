"""Sub-layer primitives: causal attention, dense FFN, sparsely gated MoE.

All forwards map [n, d] -> [n, d] where n is the number of tokens in the
batch (possibly several sequences laid out contiguously). Attention is
applied per sequence segment; routing sees the whole batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

ACT_RELU = "relu"
ACT_GELU = "gelu"
ACT_GATED_RELU = "gated_relu"
ACT_GATED_GELU = "gated_gelu"
ACTIVATIONS = (ACT_GATED_RELU, ACT_GATED_GELU, ACT_RELU, ACT_GELU)
GATED_ACTIVATIONS = (ACT_GATED_RELU, ACT_GATED_GELU)

GATE_TOP2 = "top2"
GATE_EXPERT_CHOICE = "expert_choice"
GATINGS = (GATE_TOP2, GATE_EXPERT_CHOICE)

NEG_MASK = -1e30  # exp(NEG_MASK - finite) underflows to exactly 0.0


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    n_heads: int
    head_dim: int

    def __post_init__(self):
        if min(self.model_dim, self.n_heads, self.head_dim) < 1:
            raise ValueError(f"attention dims must be positive: {self}")


@dataclass(frozen=True)
class FfnConfig:
    model_dim: int
    hidden_dim: int
    activation: str

    def __post_init__(self):
        if min(self.model_dim, self.hidden_dim) < 1:
            raise ValueError(f"ffn dims must be positive: {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class MoeConfig:
    model_dim: int
    expert_hidden_dim: int
    n_experts: int
    gating: str
    capacity_factor: int
    activation: str

    def __post_init__(self):
        if min(self.model_dim, self.expert_hidden_dim, self.n_experts) < 1:
            raise ValueError(f"moe dims must be positive: {self}")
        if self.capacity_factor < 1:
            raise ValueError("capacity_factor must be >= 1")
        if self.gating not in GATINGS:
            raise ValueError(f"unknown gating {self.gating!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def capacity(self, n_tokens):
        k = (self.capacity_factor * n_tokens) // self.n_experts
        if k < 1:
            raise ValueError(
                f"per-expert capacity floor({self.capacity_factor}*{n_tokens}"
                f"/{self.n_experts}) < 1"
            )
        return k


@dataclass
class RoutingDecision:
    """Token/expert assignments plus the tokens that fell through to residual."""

    assignments: list  # (token_index, expert_index, combine_weight)
    dropped_tokens: set = field(default_factory=set)

    def per_expert_tokens(self, n_experts):
        groups = [[] for _ in range(n_experts)]
        for tok, exp, w in self.assignments:
            groups[exp].append((tok, w))
        return groups


def apply_activation(kind, u, v=None):
    """Elementwise activation; gated kinds compute act(u) * v."""
    if kind in GATED_ACTIVATIONS:
        if v is None:
            raise ValueError(f"{kind} needs two pre-activation streams")
        base = T.relu(u) if kind == ACT_GATED_RELU else T.gelu(u)
        return T.mul(base, v)
    if v is not None:
        raise ValueError(f"{kind} takes a single stream")
    return T.relu(u) if kind == ACT_RELU else T.gelu(u)


def init_attention_params(cfg, rng, prefix=""):
    d, hw = cfg.model_dim, cfg.n_heads * cfg.head_dim
    def w(shape):
        return Tensor(rng.normal(0.0, shape[0] ** -0.5, size=shape), requires_grad=True)
    return {
        prefix + "wq": w((d, hw)),
        prefix + "wk": w((d, hw)),
        prefix + "wv": w((d, hw)),
        prefix + "wo": w((hw, d)),
    }


def init_ffn_params(cfg, rng, prefix=""):
    d, dh = cfg.model_dim, cfg.hidden_dim
    def w(shape):
        return Tensor(rng.normal(0.0, shape[0] ** -0.5, size=shape), requires_grad=True)
    params = {prefix + "w_in": w((d, dh)), prefix + "w_out": w((dh, d))}
    if cfg.activation in GATED_ACTIVATIONS:
        params[prefix + "w_gate"] = w((d, dh))
    return params


def init_moe_params(cfg, rng, prefix=""):
    d = cfg.model_dim
    params = {
        prefix + "wg": Tensor(
            rng.normal(0.0, d ** -0.5, size=(d, cfg.n_experts)), requires_grad=True
        )
    }
    expert_cfg = FfnConfig(d, cfg.expert_hidden_dim, cfg.activation)
    for e in range(cfg.n_experts):
        params.update(init_ffn_params(expert_cfg, rng, prefix=f"{prefix}expert{e}."))
    return params


def _causal_mask(length):
    mask = np.zeros((length, length))
    mask[np.triu_indices(length, k=1)] = NEG_MASK
    return mask


def attention_forward(x, cfg, params, seq_len=None, prefix=""):
    """Multi-head causal self-attention over each seq_len segment of x."""
    n = x.shape[0]
    s = n if seq_len is None else seq_len
    if n % s != 0:
        raise ValueError(f"{n} tokens not divisible by seq_len {s}")
    scale = cfg.head_dim ** -0.5
    mask = _causal_mask(s)
    outs = []
    for b in range(n // s):
        xs = T.row_slice(x, b * s, (b + 1) * s) if n != s else x
        q = T.matmul(xs, params[prefix + "wq"])
        k = T.matmul(xs, params[prefix + "wk"])
        v = T.matmul(xs, params[prefix + "wv"])
        heads = []
        for h in range(cfg.n_heads):
            j0, j1 = h * cfg.head_dim, (h + 1) * cfg.head_dim
            qh = T.col_slice(q, j0, j1)
            kh = T.col_slice(k, j0, j1)
            vh = T.col_slice(v, j0, j1)
            scores = T.add(T.mul(T.matmul(qh, T.transpose(kh)), scale), mask)
            attn = T.softmax(scores, axis=-1)
            heads.append(T.matmul(attn, vh))
        merged = heads[0] if len(heads) == 1 else T.concat_cols(heads)
        outs.append(T.matmul(merged, params[prefix + "wo"]))
    return outs[0] if len(outs) == 1 else T.concat_rows(outs)


def ffn_forward(x, cfg, params, prefix=""):
    """Dense FFN: project up, activate (two streams when gated), project down."""
    u = T.matmul(x, params[prefix + "w_in"])
    if cfg.activation in GATED_ACTIVATIONS:
        v = T.matmul(x, params[prefix + "w_gate"])
        h = apply_activation(cfg.activation, u, v)
    else:
        h = apply_activation(cfg.activation, u)
    return T.matmul(h, params[prefix + "w_out"])


def gate_scores(x, wg):
    """Token-to-expert affinities, softmax-normalized over the expert axis.

    Per-token normalization only: no cross-token statistics, so causal
    decoding leaks nothing.
    """
    return T.softmax(T.matmul(x, wg), axis=-1)


def route_top2(scores, capacity):
    """Token-based routing: each token takes its top-2 experts, greedily
    filled in token-index order; assignments to full experts are dropped.
    """
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    n, n_experts = data.shape
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    load = [0] * n_experts
    assignments = []
    dropped = set()
    for tok in range(n):
        picked = 0
        # degenerates to top-1 when only one expert exists
        for exp in T.top_k_indices(data[tok], min(2, n_experts)):
            if load[exp] < capacity:
                load[exp] += 1
                assignments.append((tok, exp, float(data[tok, exp])))
                picked += 1
        if picked == 0:
            dropped.add(tok)
    return RoutingDecision(assignments, dropped)


def route_expert_choice(scores, capacity):
    """Expert-based routing: each expert takes its top-capacity tokens.

    Every expert ends up with exactly ``capacity`` assignments; tokens
    chosen by no expert pass through on the residual path.
    """
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    n, n_experts = data.shape
    if capacity > n:
        raise ValueError(f"capacity {capacity} exceeds {n} tokens")
    assignments = []
    chosen = set()
    for exp in range(n_experts):
        for tok in T.top_k_indices(data[:, exp], capacity):
            assignments.append((tok, exp, float(data[tok, exp])))
            chosen.add(tok)
    dropped = set(range(n)) - chosen
    return RoutingDecision(assignments, dropped)


def load_balance_aux_loss(scores, decision=None):
    """Importance-times-load balance penalty for top-2 gating.

    E * sum_e (fraction of tokens whose top-1 expert is e) * (mean gate
    score of e). Differentiable through the mean-score factor only; equals
    1 for perfectly uniform scores.
    """
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    n, n_experts = data.shape
    top1 = np.array([T.top_k_indices(data[tok], 1)[0] for tok in range(n)])
    frac = np.bincount(top1, minlength=n_experts) / n
    mean_scores = T.tmean(scores, axis=0) if isinstance(scores, Tensor) else Tensor(
        data.mean(axis=0)
    )
    return T.mul(T.tsum(T.mul(mean_scores, frac)), float(n_experts))


def moe_forward(x, cfg, params, prefix=""):
    """Sparsely gated FFN: gate, route, dispatch, weighted combine.

    Returns (output, aux_loss); aux_loss is the load-balance penalty for
    top-2 gating and exactly 0 for expert choice (perfectly balanced by
    construction). Dropped tokens contribute zero rows; the residual
    connection around the layer carries them through.
    """
    n = x.shape[0]
    k = cfg.capacity(n)
    scores = gate_scores(x, params[prefix + "wg"])
    if cfg.gating == GATE_TOP2:
        decision = route_top2(scores, k)
        aux = load_balance_aux_loss(scores, decision)
    else:
        decision = route_expert_choice(scores, k)
        aux = Tensor(0.0)
    out = None
    expert_cfg = FfnConfig(cfg.model_dim, cfg.expert_hidden_dim, cfg.activation)
    for exp, group in enumerate(decision.per_expert_tokens(cfg.n_experts)):
        if not group:
            continue
        toks = np.array([t for t, _ in group], dtype=np.int64)
        xe = T.take_rows(x, toks)
        ye = ffn_forward(xe, expert_cfg, params, prefix=f"{prefix}expert{exp}.")
        w = T.take_entries(scores, toks, np.full_like(toks, exp))
        contrib = T.scatter_rows(T.mul(ye, w), toks, n)
        out = contrib if out is None else T.add(out, contrib)
    if out is None:
        out = Tensor(np.zeros_like(x.data))
    return out, aux, decision

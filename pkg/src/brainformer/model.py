"""Architecture genome, block composition, the decoder-only LM wrapper,
and parameter / FLOP accounting.

A block is an ordered list of sub-layer kinds sharing one set of width /
gating / activation hyperparameters; a model stacks the block N times
(parameters never shared across repetitions) between embeddings and an
untied output projection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace, asdict

import numpy as np

from . import tensor as T
from . import layers as L
from .tensor import Tensor

GENOME_SCHEMA_VERSION = 1

KIND_ATTN = "attn"
KIND_FFN = "ffn"
KIND_MOE = "moe"
LAYER_KINDS = (KIND_ATTN, KIND_MOE, KIND_FFN)


class ConfigError(ValueError):
    """Invalid genome / model configuration."""


@dataclass(frozen=True)
class BlockSpec:
    """The searchable genome: layer ordering plus shared hyperparameters."""

    layers: tuple
    d: int
    d_moe: int
    d_ffn: int
    h: int
    g: str
    c: int
    a: str
    n_experts: int
    d_head: int = 64

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self):
        if len(self.layers) < 1:
            raise ConfigError("block needs at least one layer")
        for kind in self.layers:
            if kind not in LAYER_KINDS:
                raise ConfigError(f"unknown layer kind {kind!r}")
        if KIND_ATTN not in self.layers:
            raise ConfigError("block needs at least one attention layer")
        for name in ("d", "d_moe", "d_ffn", "h", "n_experts", "d_head"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.c < 1:
            raise ConfigError("capacity factor must be >= 1")
        if self.g not in L.GATINGS:
            raise ConfigError(f"unknown gating {self.g!r}")
        if self.a not in L.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.a!r}")

    def layer_config(self, kind):
        if kind == KIND_ATTN:
            return L.AttentionConfig(self.d, self.h, self.d_head)
        if kind == KIND_FFN:
            return L.FfnConfig(self.d, self.d_ffn, self.a)
        if kind == KIND_MOE:
            return L.MoeConfig(self.d, self.d_moe, self.n_experts, self.g, self.c, self.a)
        raise ConfigError(f"unknown layer kind {kind!r}")

    def to_json_dict(self):
        doc = asdict(self)
        doc["layers"] = list(self.layers)
        doc["schema_version"] = GENOME_SCHEMA_VERSION
        return doc

    @classmethod
    def from_json_dict(cls, doc):
        doc = dict(doc)
        version = doc.pop("schema_version", GENOME_SCHEMA_VERSION)
        if version != GENOME_SCHEMA_VERSION:
            raise ConfigError(f"unsupported genome schema version {version}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"malformed genome: {exc}") from None


@dataclass(frozen=True)
class ModelSpec:
    block: BlockSpec
    n_blocks: int
    vocab_size: int
    max_seq_len: int

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be >= 1")

    def body_layers(self):
        return stack_n_times(self.block, self.n_blocks)

    def to_json_dict(self):
        return {
            "schema_version": GENOME_SCHEMA_VERSION,
            "block": self.block.to_json_dict(),
            "n_blocks": self.n_blocks,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_json_dict(cls, doc):
        return cls(
            block=BlockSpec.from_json_dict(doc["block"]),
            n_blocks=doc["n_blocks"],
            vocab_size=doc["vocab_size"],
            max_seq_len=doc["max_seq_len"],
        )


def write_genome(path, spec):
    with open(path, "w") as fh:
        json.dump(spec.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_genome(path):
    with open(path) as fh:
        doc = json.load(fh)
    if "block" in doc:
        return ModelSpec.from_json_dict(doc)
    return BlockSpec.from_json_dict(doc)


def stack_n_times(spec, n):
    """Body layer-kind list for n repetitions of the block (no weight sharing)."""
    if n < 1:
        raise ValueError("stack count must be >= 1")
    return list(spec.layers) * n


def scale_model_dim(spec, factor):
    """Scale model and hidden dims by 2x or 4x; everything else unchanged.

    Scaled genomes intentionally leave the search-space domains; callers
    wanting the original domains should check against the search space.
    """
    if factor not in (2, 4):
        raise ValueError("scale factor must be 2 or 4")
    return replace(spec, d=spec.d * factor, d_moe=spec.d_moe * factor, d_ffn=spec.d_ffn * factor)


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamCount:
    """Total vs. per-token-activated tallies, with and without the
    vocab-sized tensors (input embedding, position table, output
    projection), since the embedding convention dominates small models.
    """

    n_params: int
    n_act_params: int
    n_params_no_embed: int
    n_act_params_no_embed: int


def _ffn_weights(d, hidden, activation):
    gated = 2 if activation in L.GATED_ACTIVATIONS else 1
    return d * hidden * gated + hidden * d


def _activated_experts(kind_cfg):
    if kind_cfg.gating == L.GATE_TOP2:
        return min(2, kind_cfg.n_experts)
    return min(kind_cfg.capacity_factor, kind_cfg.n_experts)


def layer_param_counts(spec, kind):
    """(total, activated) parameter count of one sub-layer incl. its pre-norm."""
    ln = 2 * spec.d
    cfg = spec.layer_config(kind)
    if kind == KIND_ATTN:
        hw = cfg.n_heads * cfg.head_dim
        total = 3 * spec.d * hw + hw * spec.d + ln
        return total, total
    if kind == KIND_FFN:
        total = _ffn_weights(spec.d, spec.d_ffn, spec.a) + ln
        return total, total
    expert = _ffn_weights(spec.d, spec.d_moe, spec.a)
    gate = spec.d * cfg.n_experts
    total = gate + cfg.n_experts * expert + ln
    activated = gate + _activated_experts(cfg) * expert + ln
    return total, activated


def count_params(model_spec):
    """Analytic parameter tally; matches tensor-by-tensor enumeration exactly."""
    spec = model_spec.block
    embed = model_spec.vocab_size * spec.d
    pos = model_spec.max_seq_len * spec.d
    out = spec.d * model_spec.vocab_size
    vocab_group = embed + pos + out
    body_total = body_act = 2 * spec.d  # final layer norm
    for kind in model_spec.body_layers():
        t, a = layer_param_counts(spec, kind)
        body_total += t
        body_act += a
    return ParamCount(
        n_params=vocab_group + body_total,
        n_act_params=vocab_group + body_act,
        n_params_no_embed=body_total,
        n_act_params_no_embed=body_act,
    )


# ---------------------------------------------------------------------------
# Analytic FLOP estimates (forward multiply-adds counted as 2 flops)
# ---------------------------------------------------------------------------

def layer_flops_per_token(spec, kind, seq_len):
    cfg = spec.layer_config(kind)
    if kind == KIND_ATTN:
        hw = cfg.n_heads * cfg.head_dim
        proj = 2 * spec.d * hw * 3 + 2 * hw * spec.d
        # scores and weighted combine over the full window
        mix = 4 * hw * seq_len
        return proj + mix
    if kind == KIND_FFN:
        return 2 * _ffn_weights(spec.d, spec.d_ffn, spec.a)
    gate = 2 * spec.d * cfg.n_experts
    expert = 2 * _ffn_weights(spec.d, spec.d_moe, spec.a)
    return gate + _activated_experts(cfg) * expert


def model_flops_per_token(model_spec, seq_len):
    spec = model_spec.block
    total = 2 * spec.d * model_spec.vocab_size  # output projection
    for kind in model_spec.body_layers():
        total += layer_flops_per_token(spec, kind, seq_len)
    return total


def step_cost_units(model_spec, batch_size, seq_len):
    """Analytic cost of one training step (forward + backward ~ 3x forward)."""
    return 3 * batch_size * seq_len * model_flops_per_token(model_spec, seq_len)


# ---------------------------------------------------------------------------
# The decoder-only language model
# ---------------------------------------------------------------------------

class LanguageModel:
    """Embed (+learned positions) -> N blocks of pre-norm residual
    sub-layers -> final norm -> untied output projection.
    """

    def __init__(self, spec, seed=0):
        self.spec = spec
        self.block = spec.block
        self.body = spec.body_layers()
        rng = np.random.default_rng(seed)
        d = self.block.d
        p = {
            "embed": Tensor(rng.normal(0.0, 1.0, size=(spec.vocab_size, d)), requires_grad=True),
            "pos": Tensor(rng.normal(0.0, 0.01, size=(spec.max_seq_len, d)), requires_grad=True),
            "out": Tensor(np.zeros((d, spec.vocab_size)), requires_grad=True),
            "final_ln.g": Tensor(np.ones(d), requires_grad=True),
            "final_ln.b": Tensor(np.zeros(d), requires_grad=True),
        }
        for i, kind in enumerate(self.body):
            prefix = f"layer{i}."
            p[prefix + "ln.g"] = Tensor(np.ones(d), requires_grad=True)
            p[prefix + "ln.b"] = Tensor(np.zeros(d), requires_grad=True)
            cfg = self.block.layer_config(kind)
            if kind == KIND_ATTN:
                p.update(L.init_attention_params(cfg, rng, prefix=prefix))
            elif kind == KIND_FFN:
                p.update(L.init_ffn_params(cfg, rng, prefix=prefix))
            else:
                p.update(L.init_moe_params(cfg, rng, prefix=prefix))
        self.params = p
        self.step = 0

    def parameters(self):
        return self.params

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def n_params(self):
        return sum(t.size for t in self.params.values())

    def forward(self, tokens, seq_len=None):
        """Logits [n, V] and the summed MoE auxiliary loss for a flat token
        batch; ``seq_len`` marks sequence boundaries for attention and
        positions (defaults to the whole batch being one sequence).
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        n = tokens.shape[0]
        s = n if seq_len is None else seq_len
        if n % s != 0:
            raise ValueError(f"{n} tokens not divisible by seq_len {s}")
        if s > self.spec.max_seq_len:
            raise ValueError(f"seq_len {s} exceeds max_seq_len {self.spec.max_seq_len}")
        if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= self.spec.vocab_size:
            raise ValueError("token id out of range")
        positions = np.tile(np.arange(s), n // s)
        x = T.add(T.take_rows(self.params["embed"], tokens),
                  T.take_rows(self.params["pos"], positions))
        x, aux = self.forward_body(x, seq_len=s)
        x = T.layer_norm(x, self.params["final_ln.g"], self.params["final_ln.b"])
        logits = T.matmul(x, self.params["out"])
        return logits, aux

    def forward_body(self, x, seq_len=None):
        """Apply every sub-layer (pre-norm + residual) to [n, d] activations."""
        aux = Tensor(0.0)
        for i, kind in enumerate(self.body):
            x, aux = self._apply_layer(x, i, kind, aux, seq_len)
        return x, aux

    def _apply_layer(self, x, i, kind, aux, seq_len):
        prefix = f"layer{i}."
        p = self.params
        h = T.layer_norm(x, p[prefix + "ln.g"], p[prefix + "ln.b"])
        cfg = self.block.layer_config(kind)
        if kind == KIND_ATTN:
            y = L.attention_forward(h, cfg, p, seq_len=seq_len, prefix=prefix)
        elif kind == KIND_FFN:
            y = L.ffn_forward(h, cfg, p, prefix=prefix)
        else:
            y, layer_aux, _ = L.moe_forward(h, cfg, p, prefix=prefix)
            aux = T.add(aux, layer_aux)
        return T.add(x, y), aux


def compose_block(spec, params_owner=None, seed=0):
    """One block as a callable (x, seq_len) -> (y, aux_loss).

    Builds a single-repetition model body when no parameter owner is
    given; the callable applies the layers in genome order, each wrapped
    in pre-norm + residual.
    """
    if params_owner is None:
        dummy = ModelSpec(block=spec, n_blocks=1, vocab_size=2, max_seq_len=1)
        params_owner = LanguageModel(dummy, seed=seed)

    def block_fn(x, seq_len=None):
        return params_owner.forward_body(x, seq_len=seq_len)

    return block_fn, params_owner


def lm_loss(model, inputs, targets, aux_coeff=0.01, seq_len=None):
    """Cross entropy plus weighted MoE auxiliary loss."""
    logits, aux = model.forward(inputs, seq_len=seq_len)
    ce = T.cross_entropy(logits, targets)
    return T.add(ce, T.mul(aux, aux_coeff)), ce


# ---------------------------------------------------------------------------
# Checkpoints: flat float64 binary + JSON sidecar with shapes/offsets
# ---------------------------------------------------------------------------

def save_checkpoint(model, path, meta=None):
    names = sorted(model.params)
    index = {}
    offset = 0
    with open(path, "wb") as fh:
        for name in names:
            arr = model.params[name].data
            index[name] = {"shape": list(arr.shape), "offset": offset}
            fh.write(arr.tobytes())
            offset += arr.size
    sidecar = {"dtype": "float64", "tensors": index,
               "meta": dict(meta or {}, step=model.step)}
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(model, path):
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    flat = np.fromfile(path, dtype=np.float64)
    for name, entry in sidecar["tensors"].items():
        if name not in model.params:
            raise ConfigError(f"checkpoint tensor {name!r} unknown to this model")
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        chunk = flat[entry["offset"]: entry["offset"] + size]
        model.params[name].data = chunk.reshape(shape).copy()
    model.step = int(sidecar["meta"].get("step", 0))
    return sidecar["meta"]


# ---------------------------------------------------------------------------
# Reference genomes
# ---------------------------------------------------------------------------

def glam_baseline_block(d=768, d_ffn=3072, d_moe=3072, h=12, d_head=64,
                        n_experts=32, g=L.GATE_TOP2, c=2, a=L.ACT_GELU):
    """GLaM-style interleaving: dense transformer block then sparse block.

    Stacked 3x this gives the 12-sub-layer baseline shape that the search
    compares against.
    """
    return BlockSpec(layers=(KIND_ATTN, KIND_FFN, KIND_ATTN, KIND_MOE),
                     d=d, d_moe=d_moe, d_ffn=d_ffn, h=h, d_head=d_head,
                     g=g, c=c, a=a, n_experts=n_experts)


def brainformer1_like_block(n_experts=32):
    """Best-effort reconstruction of the published 8-sub-layer block.

    The exact layer order is not recoverable from the source material;
    this captures the described traits (d=1024, narrower hidden dims,
    expert-choice gating with capacity factor 1, sparse attention usage)
    and is labeled a reconstruction, not ground truth.
    """
    return BlockSpec(
        layers=(KIND_MOE, KIND_FFN, KIND_ATTN, KIND_MOE, KIND_FFN, KIND_ATTN,
                KIND_MOE, KIND_FFN),
        d=1024, d_moe=2048, d_ffn=2048, h=16, d_head=64,
        g=L.GATE_EXPERT_CHOICE, c=1, a=L.ACT_GATED_GELU, n_experts=n_experts,
    )

"""Desk-scale LM training: Adafactor, constant-then-inverse-sqrt schedule,
byte-level corpus ingestion, budgeted step loops, perplexity evaluation.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import lm_loss, step_cost_units

BYTE_VOCAB = 258  # 256 byte values + 2 reserved specials
TOK_BOS = 256
TOK_EOS = 257


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 0.05
    warmup_constant_steps: int = 100
    max_steps: int = 1000
    batch_size: int = 8
    seq_len: int = 128
    seed: int = 0
    aux_coeff: float = 0.01
    beta2: float = 0.99
    valid_fraction: float = 0.1
    log_every: int = 1
    eval_every: int = 0  # 0 disables periodic validation
    eval_tokens: int = 2048
    # no dropout field on purpose: training never uses dropout

    @classmethod
    def from_dict(cls, doc):
        known = {f for f in cls.__dataclass_fields__}
        bad = set(doc) - known
        if bad:
            raise ValueError(f"unknown train config fields: {sorted(bad)}")
        return cls(**doc)


@dataclass
class Budget:
    """Exactly one of the limits drives the loop; max_steps=0 is a no-op run."""

    max_steps: int = None
    max_seconds: float = None
    max_cost_units: float = None

    def __post_init__(self):
        if all(v is None for v in (self.max_steps, self.max_seconds, self.max_cost_units)):
            raise ValueError("budget needs max_steps, max_seconds, or max_cost_units")


def lr_at(step, cfg):
    """Constant for the warmup window, then inverse-sqrt decay, continuous
    at the boundary."""
    if step < 1:
        raise ValueError("steps are 1-based")
    w = cfg.warmup_constant_steps
    if step <= w:
        return cfg.base_lr
    return cfg.base_lr * math.sqrt(w / step)


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

class ByteCorpus:
    """Raw bytes as token ids with a disjoint train/validation split."""

    def __init__(self, data, valid_fraction=0.1):
        ids = np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)
        if ids.size < 2:
            raise ValueError("corpus too small")
        n_valid = int(round(len(ids) * valid_fraction))
        split = len(ids) - n_valid
        if split < 2:
            raise ValueError("validation fraction leaves no training data")
        self.train_ids = ids[:split]
        self.valid_ids = ids[split:]
        self.vocab_size = BYTE_VOCAB

    @classmethod
    def from_file(cls, path, valid_fraction=0.1):
        with open(path, "rb") as fh:
            return cls(fh.read(), valid_fraction=valid_fraction)

    def _split(self, split):
        ids = self.train_ids if split == "train" else self.valid_ids
        if ids.size == 0:
            raise ValueError(f"{split} slice is empty")
        return ids

    def sample_batch(self, rng, batch_size, seq_len, split="train"):
        """Flat (inputs, targets) of shape [batch_size * seq_len]."""
        ids = self._split(split)
        if ids.size < seq_len + 1:
            # wrap short corpora so any seq_len is usable
            reps = (seq_len + 1) // ids.size + 1
            ids = np.tile(ids, reps)
        starts = rng.integers(0, ids.size - seq_len, size=batch_size)
        inputs = np.stack([ids[s:s + seq_len] for s in starts]).reshape(-1)
        targets = np.stack([ids[s + 1:s + seq_len + 1] for s in starts]).reshape(-1)
        return inputs, targets

    def windows(self, seq_len, split="valid", max_tokens=None):
        """Consecutive non-overlapping (inputs, targets) evaluation windows."""
        ids = self._split(split)
        total = 0
        for s in range(0, ids.size - seq_len, seq_len):
            yield ids[s:s + seq_len], ids[s + 1:s + seq_len + 1]
            total += seq_len
            if max_tokens is not None and total >= max_tokens:
                return
        if total == 0 and ids.size >= 2:
            n = ids.size - 1
            yield ids[:n], ids[1:n + 1]


# ---------------------------------------------------------------------------
# Adafactor (first-moment decay 0, fixed second-moment decay)
# ---------------------------------------------------------------------------

class Adafactor:
    """Factored second-moment optimizer.

    beta1 = 0 so no first-moment state is kept. Matrices factor the
    running second moment into row/column sums; vectors and scalars keep
    the full accumulator. Update clipping threshold 1.0, relative step
    size scaled by the parameter RMS.
    """

    EPS1 = 1e-30
    EPS2 = 1e-3
    CLIP = 1.0

    def __init__(self, params, beta2=0.99):
        self.beta2 = beta2
        self.state = {}
        for name, p in params.items():
            if p.data.ndim == 2 and p.data.shape[0] > 1 and p.data.shape[1] > 1:
                self.state[name] = {
                    "r": np.zeros(p.data.shape[0]),
                    "c": np.zeros(p.data.shape[1]),
                }
            else:
                self.state[name] = {"v": np.zeros_like(p.data)}

    def update(self, params, lr):
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in {name!r}")
            st = self.state[name]
            g2 = g * g + self.EPS1
            if "r" in st:
                st["r"] = self.beta2 * st["r"] + (1 - self.beta2) * g2.sum(axis=1)
                st["c"] = self.beta2 * st["c"] + (1 - self.beta2) * g2.sum(axis=0)
                v = np.outer(st["r"], st["c"]) / st["r"].sum()
            else:
                st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * g2
                v = st["v"]
            u = g / np.sqrt(v)
            rms_u = np.sqrt(np.mean(u * u))
            u /= max(1.0, rms_u / self.CLIP)
            alpha = lr * max(self.EPS2, np.sqrt(np.mean(p.data * p.data)))
            p.data = p.data - alpha * u


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    records: list = field(default_factory=list)
    steps: int = 0
    consumed_cost: float = 0.0
    diverged: bool = False
    final_loss: float = None

    def losses(self):
        return [r["loss"] for r in self.records]


def train_steps(model, corpus, cfg, budget, trajectory_path=None,
                cost_per_step=None, optimizer=None):
    """Run training steps until the budget is exhausted.

    Cost-unit budgets consume a fixed analytic amount per step, so runs
    are deterministic and machine-independent; wall-clock budgets measure
    real time. Divergence (non-finite loss) aborts with the partial
    trajectory retained.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = optimizer or Adafactor(model.params, beta2=cfg.beta2)
    if cost_per_step is None:
        cost_per_step = float(step_cost_units(model.spec, cfg.batch_size, cfg.seq_len))
    result = TrainResult()
    out = open(trajectory_path, "a") if trajectory_path else None
    deadline = None
    if budget.max_seconds is not None:
        deadline = time.monotonic() + budget.max_seconds
    try:
        while True:
            if budget.max_steps is not None and result.steps >= budget.max_steps:
                break
            if budget.max_cost_units is not None and \
                    result.consumed_cost + cost_per_step > budget.max_cost_units:
                break
            if deadline is not None and time.monotonic() >= deadline:
                break
            t0 = time.monotonic()
            inputs, targets = corpus.sample_batch(rng, cfg.batch_size, cfg.seq_len)
            loss, ce = lm_loss(model, inputs, targets,
                               aux_coeff=cfg.aux_coeff, seq_len=cfg.seq_len)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                result.diverged = True
                break
            model.zero_grad()
            loss.backward()
            lr = lr_at(model.step + 1, cfg)
            opt.update(model.params, lr)
            model.step += 1
            result.steps += 1
            result.consumed_cost += cost_per_step
            result.final_loss = ce.item()
            if result.steps % cfg.log_every == 0:
                rec = {"step": model.step, "loss": ce.item(), "lr": lr,
                       "step_time": time.monotonic() - t0}
                if cfg.eval_every and result.steps % cfg.eval_every == 0 \
                        and model_has_valid(corpus):
                    rec["valid_ppl"] = evaluate_perplexity(
                        model, corpus, seq_len=cfg.seq_len,
                        max_tokens=cfg.eval_tokens)
                result.records.append(rec)
                if out:
                    out.write(json.dumps(rec, sort_keys=True) + "\n")
                    out.flush()
    finally:
        if out:
            out.close()
    return result


def model_has_valid(corpus):
    return corpus.valid_ids.size >= 2


def evaluate_perplexity(model, corpus, split="valid", seq_len=128, max_tokens=None):
    """exp(mean token cross entropy), teacher-forced over the slice."""
    total_nll = 0.0
    total_tokens = 0
    for inputs, targets in corpus.windows(seq_len, split=split, max_tokens=max_tokens):
        logits, _ = model.forward(inputs, seq_len=len(inputs))
        ce = T.cross_entropy(logits, targets)
        total_nll += ce.item() * len(targets)
        total_tokens += len(targets)
    if total_tokens == 0:
        raise ValueError(f"no evaluation windows in {split} slice")
    return math.exp(total_nll / total_tokens)


def measure_step_time(model, corpus, cfg, repetitions=5):
    """Median wall time of forward+backward+update after one warm-up step;
    also returns the deterministic analytic cost for reproducible modes.
    """
    if repetitions < 3:
        raise ValueError("need at least 3 repetitions")
    rng = np.random.default_rng(cfg.seed)
    opt = Adafactor(model.params, beta2=cfg.beta2)
    times = []
    for i in range(repetitions + 1):
        inputs, targets = corpus.sample_batch(rng, cfg.batch_size, cfg.seq_len)
        t0 = time.monotonic()
        loss, _ = lm_loss(model, inputs, targets,
                          aux_coeff=cfg.aux_coeff, seq_len=cfg.seq_len)
        model.zero_grad()
        loss.backward()
        opt.update(model.params, lr_at(model.step + 1, cfg))
        elapsed = time.monotonic() - t0
        if i > 0:  # first pass is warm-up
            times.append(elapsed)
    analytic = float(step_cost_units(model.spec, cfg.batch_size, cfg.seq_len))
    return float(np.median(times)), analytic

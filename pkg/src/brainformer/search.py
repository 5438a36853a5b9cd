"""Constrained evolutionary block search.

Regularized (aging) evolution over the block genome space: tournament
selection from the population, single-field mutation, oldest-member
eviction. Each trial stacks the candidate block three times, trains it
under a fixed budget (faster blocks complete more steps), and is pruned
early if it violates the step-time constraint or trails the baseline's
quality at the 25% checkpoint. Pruned trials score -1; completed trials
score the negative final validation loss.

All per-trial randomness derives from (seed, phase, index), so a search
is bitwise reproducible and crash-resumable from its JSONL ledger alone.
"""

from __future__ import annotations

import json
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from .model import (
    BlockSpec, ModelSpec, ConfigError, LanguageModel,
    KIND_ATTN, KIND_FFN, KIND_MOE, LAYER_KINDS,
    count_params, step_cost_units, glam_baseline_block,
    scale_model_dim,
)
from .training import (
    Adafactor, Budget, ByteCorpus, TrainConfig, evaluate_perplexity,
    measure_step_time, train_steps, BYTE_VOCAB,
)

PROXY_STACK = 3  # proxy models stack the candidate block three times

STOP_COMPLETED = "completed"
STOP_STEP_TIME = "step_time_violation"
STOP_PERPLEXITY = "perplexity_violation"
STOP_DIVERGED = "diverged"
STOP_BASELINE = "baseline"  # reference entry, not a search trial


@dataclass(frozen=True)
class SearchSpace:
    """Finite domains for every genome field; defaults are the published
    search table plus a block-length bracket around the known block size."""

    k_choices: tuple = (4, 5, 6, 7, 8, 9, 10)
    layer_kinds: tuple = LAYER_KINDS
    d_choices: tuple = (512, 768, 1024)
    d_moe_choices: tuple = (1536, 2048, 3072, 4096)
    d_ffn_choices: tuple = (1536, 2048, 3072, 4096)
    h_choices: tuple = (12, 16, 20)
    g_choices: tuple = tuple(L.GATINGS)
    c_choices: tuple = (1, 2, 3, 4)
    a_choices: tuple = tuple(L.ACTIVATIONS)
    n_experts: int = 32
    d_head: int = 64

    def __post_init__(self):
        for name in ("k_choices", "layer_kinds", "d_choices", "d_moe_choices",
                     "d_ffn_choices", "h_choices", "g_choices", "c_choices",
                     "a_choices"):
            vals = tuple(getattr(self, name))
            object.__setattr__(self, name, vals)
            if not vals:
                raise ConfigError(f"search space domain {name} is empty")

    @classmethod
    def from_dict(cls, doc):
        known = set(cls.__dataclass_fields__)
        bad = set(doc) - known
        if bad:
            raise ConfigError(f"unknown search space fields: {sorted(bad)}")
        return cls(**doc)

    def contains(self, spec):
        return (len(spec.layers) in self.k_choices
                and all(kind in self.layer_kinds for kind in spec.layers)
                and spec.d in self.d_choices
                and spec.d_moe in self.d_moe_choices
                and spec.d_ffn in self.d_ffn_choices
                and spec.h in self.h_choices
                and spec.g in self.g_choices
                and spec.c in self.c_choices
                and spec.a in self.a_choices
                and spec.n_experts == self.n_experts
                and spec.d_head == self.d_head)

    def enumerate(self, limit=None):
        """Every genome in the space (for exhaustive oracles on toy spaces)."""
        import itertools
        out = []
        for k in self.k_choices:
            for combo in itertools.product(self.layer_kinds, repeat=k):
                if KIND_ATTN not in combo:
                    continue
                for d, dm, df, h, g, c, a in itertools.product(
                        self.d_choices, self.d_moe_choices, self.d_ffn_choices,
                        self.h_choices, self.g_choices, self.c_choices,
                        self.a_choices):
                    out.append(BlockSpec(layers=combo, d=d, d_moe=dm, d_ffn=df,
                                         h=h, g=g, c=c, a=a,
                                         n_experts=self.n_experts,
                                         d_head=self.d_head))
                    if limit is not None and len(out) > limit:
                        raise ConfigError(f"space larger than limit {limit}")
        return out


@dataclass(frozen=True)
class Candidate:
    genome: BlockSpec
    id: int
    parent_id: int = None


def sample_candidate(space, rng, cand_id=0, parent_id=None, max_tries=1000):
    """Uniform independent draw per field, rejecting attention-free blocks."""
    for _ in range(max_tries):
        k = rng.choice(space.k_choices)
        layers = tuple(rng.choice(space.layer_kinds) for _ in range(k))
        if KIND_ATTN not in layers:
            continue
        genome = BlockSpec(
            layers=layers,
            d=rng.choice(space.d_choices),
            d_moe=rng.choice(space.d_moe_choices),
            d_ffn=rng.choice(space.d_ffn_choices),
            h=rng.choice(space.h_choices),
            g=rng.choice(space.g_choices),
            c=rng.choice(space.c_choices),
            a=rng.choice(space.a_choices),
            n_experts=space.n_experts,
            d_head=space.d_head,
        )
        return Candidate(genome=genome, id=cand_id, parent_id=parent_id)
    raise ConfigError("could not sample a valid genome (space unsatisfiable?)")


def _mutable_items(space, genome):
    items = []
    for name, choices in (("d", space.d_choices), ("d_moe", space.d_moe_choices),
                          ("d_ffn", space.d_ffn_choices), ("h", space.h_choices),
                          ("g", space.g_choices), ("c", space.c_choices),
                          ("a", space.a_choices)):
        if len(choices) > 1:
            items.append(("field", name, choices))
    if len(space.layer_kinds) > 1:
        for pos in range(len(genome.layers)):
            items.append(("layer", pos, space.layer_kinds))
    if len(space.k_choices) > 1:
        items.append(("k", None, space.k_choices))
    return items


def mutate(parent, space, rng, max_tries=200):
    """Resample exactly one genome field (or one layer position, or the
    block length) to a different value; the child stays valid."""
    genome = parent.genome if isinstance(parent, Candidate) else parent
    items = _mutable_items(space, genome)
    if not items:
        raise ConfigError("no mutable fields in this search space")
    for _ in range(max_tries):
        kind, key, choices = items[rng.randrange(len(items))]
        if kind == "field":
            current = getattr(genome, key)
            alts = [v for v in choices if v != current]
            child = replace(genome, **{key: rng.choice(alts)})
        elif kind == "layer":
            current = genome.layers[key]
            alts = [v for v in choices if v != current]
            layers = list(genome.layers)
            layers[key] = rng.choice(alts)
            if KIND_ATTN not in layers:
                continue
            child = replace(genome, layers=tuple(layers))
        else:  # block length
            alts = [v for v in choices if v != len(genome.layers)]
            new_k = rng.choice(alts)
            layers = list(genome.layers[:new_k])
            while len(layers) < new_k:
                layers.append(rng.choice(space.layer_kinds))
            if KIND_ATTN not in layers:
                continue
            child = replace(genome, layers=tuple(layers))
        return child
    raise ConfigError("mutation failed to produce a valid child")


# ---------------------------------------------------------------------------
# Trial records and the ledger
# ---------------------------------------------------------------------------

@dataclass
class TrialRecord:
    trial_id: int
    parent_id: int
    genome: dict
    step_time: float
    cost_per_step: float
    steps: int
    final_loss: float
    reward: float
    stop_reason: str
    trajectory: list = field(default_factory=list)
    quality_25: float = None  # validation quality at the 25% checkpoint

    def to_json_dict(self):
        return {
            "trial_id": self.trial_id,
            "parent_id": self.parent_id,
            "genome": self.genome,
            "step_time": self.step_time,
            "cost_per_step": self.cost_per_step,
            "steps": self.steps,
            "final_loss": self.final_loss,
            "reward": self.reward,
            "stop_reason": self.stop_reason,
            "trajectory": self.trajectory,
            "quality_25": self.quality_25,
        }

    @classmethod
    def from_json_dict(cls, doc):
        return cls(**doc)

    def block_spec(self):
        return BlockSpec.from_json_dict(self.genome)


def record_to_line(rec):
    return json.dumps(rec.to_json_dict(), sort_keys=True, separators=(",", ":"))


def read_ledger(path, strict=True):
    records, skipped = [], 0
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(TrialRecord.from_json_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError):
                if strict:
                    raise
                skipped += 1
    return (records, skipped) if not strict else records


def early_stop_check(step_time, baseline_step_time, quality_at_fraction=None,
                     baseline_quality_at_fraction=None):
    """Stop reason, or None to continue.

    The step-time constraint is a hard inequality against the baseline;
    the quality check prunes strictly-worse-than-baseline trials at the
    same trajectory fraction (equality continues).
    """
    if step_time > baseline_step_time:
        return STOP_STEP_TIME
    if quality_at_fraction is not None and baseline_quality_at_fraction is not None \
            and quality_at_fraction > baseline_quality_at_fraction:
        return STOP_PERPLEXITY
    return None


# ---------------------------------------------------------------------------
# Trial runners
# ---------------------------------------------------------------------------

def proxy_model_spec(genome, vocab_size=BYTE_VOCAB, max_seq_len=128):
    return ModelSpec(block=genome, n_blocks=PROXY_STACK,
                     vocab_size=vocab_size, max_seq_len=max_seq_len)


class SurrogateRunner:
    """Deterministic analytic stand-in for proxy training.

    Per-step cost is the analytic FLOP estimate (or an injected cost
    function); the loss trajectory is a closed-form power-law curve whose
    floor and decay depend only on the genome. Exercises the same budget,
    early-stopping, and reward logic as real training, which makes search
    tests fast and machine-independent.
    """

    def __init__(self, budget_cost_units, baseline_genome=None,
                 batch_size=8, seq_len=128, cost_fn=None):
        self.budget = float(budget_cost_units)
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.cost_fn = cost_fn or self._default_cost
        self.baseline_genome = baseline_genome or glam_baseline_block()
        self.baseline = None

    def _default_cost(self, genome):
        return float(step_cost_units(proxy_model_spec(genome, max_seq_len=self.seq_len),
                                     self.batch_size, self.seq_len))

    def loss_curve(self, genome, step):
        """Analytic validation-loss curve; lower floor for bigger models,
        faster decay for models activating a larger share of their weights."""
        spec = proxy_model_spec(genome, max_seq_len=self.seq_len)
        counts = count_params(spec)
        floor = 1.0 + 14.0 / math.log(counts.n_params_no_embed + 3)
        decay = 0.22 + 0.12 * counts.n_act_params_no_embed / counts.n_params_no_embed
        return floor + 4.0 * (step + 1.0) ** -decay

    def baseline_record(self):
        if self.baseline is None:
            self.baseline = self._evaluate(self.baseline_genome, trial_id=-1,
                                           parent_id=None, baseline=None)
            self.baseline.stop_reason = STOP_BASELINE
        return self.baseline

    def evaluate(self, candidate, trial_seed=0):
        return self._evaluate(candidate.genome, candidate.id, candidate.parent_id,
                              baseline=self.baseline_record())

    def _evaluate(self, genome, trial_id, parent_id, baseline):
        cost = self.cost_fn(genome)
        steps = int(math.floor(self.budget / cost))
        rec = TrialRecord(trial_id=trial_id, parent_id=parent_id,
                          genome=genome.to_json_dict(), step_time=cost,
                          cost_per_step=cost, steps=0, final_loss=None,
                          reward=-1.0, stop_reason=STOP_STEP_TIME)
        if baseline is not None and \
                early_stop_check(cost, baseline.step_time) == STOP_STEP_TIME:
            return rec
        if steps < 1:
            # the budget cannot cover even one step
            return rec
        check_at = max(1, steps // 4)
        quality_25 = self.loss_curve(genome, check_at)
        rec.quality_25 = quality_25
        if baseline is not None:
            stop = early_stop_check(cost, baseline.step_time,
                                    quality_25, baseline.quality_25)
            if stop == STOP_PERPLEXITY:
                rec.stop_reason = STOP_PERPLEXITY
                rec.steps = check_at
                return rec
        final = self.loss_curve(genome, steps)
        traj_steps = sorted({max(1, steps * i // 10) for i in range(1, 11)})
        rec.trajectory = [[s, self.loss_curve(genome, s)] for s in traj_steps]
        rec.steps = steps
        rec.final_loss = final
        rec.reward = -final
        rec.stop_reason = STOP_COMPLETED
        return rec


class ProxyTrainingRunner:
    """Real proxy training: stack the block three times, train under the
    fixed budget, prune at the 25% checkpoint, reward the negative final
    validation loss."""

    def __init__(self, corpus, train_cfg, budget_cost_units=None,
                 budget_seconds=None, baseline_genome=None, seed=0):
        if (budget_cost_units is None) == (budget_seconds is None):
            raise ConfigError("set exactly one of budget_cost_units / budget_seconds")
        self.corpus = corpus
        self.cfg = train_cfg
        self.budget_cost = budget_cost_units
        self.budget_seconds = budget_seconds
        self.baseline_genome = baseline_genome or glam_baseline_block()
        self.seed = seed
        self.baseline = None

    def _step_cost(self, genome):
        spec = proxy_model_spec(genome, max_seq_len=self.cfg.seq_len)
        return float(step_cost_units(spec, self.cfg.batch_size, self.cfg.seq_len))

    def _total_steps(self, genome, model):
        if self.budget_cost is not None:
            return int(math.floor(self.budget_cost / self._step_cost(genome)))
        median, _ = measure_step_time(model, self.corpus, self.cfg, repetitions=3)
        return int(math.floor(self.budget_seconds / max(median, 1e-9)))

    def baseline_record(self):
        if self.baseline is None:
            self.baseline = self._evaluate(self.baseline_genome, -1, None, None)
            self.baseline.stop_reason = STOP_BASELINE
        return self.baseline

    def evaluate(self, candidate, trial_seed=0):
        return self._evaluate(candidate.genome, candidate.id, candidate.parent_id,
                              self.baseline_record())

    def _quality(self, model):
        split = "valid" if self.corpus.valid_ids.size >= 2 else "train"
        return evaluate_perplexity(model, self.corpus, split=split,
                                   seq_len=self.cfg.seq_len,
                                   max_tokens=self.cfg.eval_tokens)

    def _evaluate(self, genome, trial_id, parent_id, baseline):
        spec = proxy_model_spec(genome, vocab_size=self.corpus.vocab_size,
                                max_seq_len=self.cfg.seq_len)
        model = LanguageModel(spec, seed=self.seed)
        cost = self._step_cost(genome)
        step_time = cost if self.budget_cost is not None else \
            measure_step_time(model, self.corpus, self.cfg, repetitions=3)[0]
        rec = TrialRecord(trial_id=trial_id, parent_id=parent_id,
                          genome=genome.to_json_dict(), step_time=step_time,
                          cost_per_step=cost, steps=0, final_loss=None,
                          reward=-1.0, stop_reason=STOP_STEP_TIME)
        if baseline is not None and \
                early_stop_check(step_time, baseline.step_time) == STOP_STEP_TIME:
            return rec
        total_steps = self._total_steps(genome, model)
        if total_steps < 1:
            return rec
        check_at = max(1, total_steps // 4)
        cfg = replace_cfg(self.cfg, seed=self.seed + max(trial_id, 0))
        res1 = train_steps(model, self.corpus, cfg, Budget(max_steps=check_at))
        if res1.diverged:
            rec.stop_reason = STOP_DIVERGED
            rec.steps = res1.steps
            return rec
        quality_25 = self._quality(model)
        rec.quality_25 = quality_25
        rec.trajectory = [[r["step"], r["loss"]] for r in _thin(res1.records)]
        if baseline is not None and early_stop_check(
                step_time, baseline.step_time, quality_25,
                baseline.quality_25) == STOP_PERPLEXITY:
            rec.stop_reason = STOP_PERPLEXITY
            rec.steps = res1.steps
            return rec
        res2 = train_steps(model, self.corpus, cfg,
                           Budget(max_steps=total_steps - check_at))
        rec.steps = res1.steps + res2.steps
        if res2.diverged:
            rec.stop_reason = STOP_DIVERGED
            return rec
        rec.trajectory += [[r["step"], r["loss"]] for r in _thin(res2.records)]
        final_ppl = self._quality(model)
        rec.final_loss = math.log(final_ppl)
        rec.reward = -rec.final_loss
        rec.stop_reason = STOP_COMPLETED
        return rec


def _thin(records, keep=10):
    if len(records) <= keep:
        return records
    idx = np.linspace(0, len(records) - 1, keep).astype(int)
    return [records[i] for i in idx]


def replace_cfg(cfg, **kw):
    doc = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
    doc.update(kw)
    return TrainConfig(**doc)


# ---------------------------------------------------------------------------
# The evolution loop
# ---------------------------------------------------------------------------

@dataclass
class EvolutionState:
    history: list = field(default_factory=list)   # TrialRecords, append-only
    baseline: TrialRecord = None
    population_size: int = 0
    seed: int = 0

    def population(self):
        return self.history[-self.population_size:]

    def completed(self):
        return [r for r in self.history if r.stop_reason == STOP_COMPLETED]


def _phase_rng(seed, phase, index):
    return random.Random(f"{seed}|{phase}|{index}")


def evolve(space, p, rounds, runner, seed=0, tournament_size=None,
           ledger_path=None, resume=False, workers=1):
    """Run (or resume) a regularized-evolution search.

    The ledger, when given, receives one JSON line per trial (baseline
    first, trial_id -1). Resuming replays completed trials from the
    ledger and continues; because all randomness is derived from the
    seed and trial indices, the resumed ledger is byte-identical to an
    uninterrupted run.
    """
    if p < 2:
        raise ConfigError("population size must be >= 2")
    ts = tournament_size or max(2, p // 5)
    state = EvolutionState(population_size=p, seed=seed)

    existing = []
    if resume and ledger_path:
        try:
            existing = read_ledger(ledger_path)
        except FileNotFoundError:
            existing = []
    ledger = open(ledger_path, "a") if ledger_path else None

    replayed_ids = set()

    def emit(rec):
        if rec.stop_reason != STOP_BASELINE:
            state.history.append(rec)
        if ledger and rec.trial_id not in replayed_ids:
            ledger.write(record_to_line(rec) + "\n")
            ledger.flush()
    try:
        baseline = None
        replayed = {}
        for rec in existing:
            if rec.stop_reason == STOP_BASELINE:
                baseline = rec
            else:
                replayed[rec.trial_id] = rec
        if baseline is None:
            baseline = runner.baseline_record()
            if ledger:
                ledger.write(record_to_line(baseline) + "\n")
                ledger.flush()
        else:
            runner.baseline = baseline
        state.baseline = baseline
        replayed_ids.update(replayed)

        # initial population
        todo = []
        for i in range(p):
            if i in replayed:
                state.history.append(replayed[i])
                continue
            cand = sample_candidate(space, _phase_rng(seed, "sample", i), cand_id=i)
            todo.append(cand)
        if todo and workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(runner.evaluate, todo))
        else:
            results = [runner.evaluate(c) for c in todo]
        for rec in sorted(results, key=lambda r: r.trial_id):
            emit(rec)
        state.history.sort(key=lambda r: r.trial_id)

        # rounds: one tournament-selected, mutated child per round
        start_round = len(state.history) - p
        for t in range(start_round, rounds):
            trial_id = p + t
            if trial_id in replayed:
                emit(replayed[trial_id])
                continue
            rng = _phase_rng(seed, "round", t)
            pop = state.population()
            contenders = [pop[i] for i in sorted(rng.sample(range(len(pop)),
                                                            min(ts, len(pop))))]
            best = max(contenders, key=lambda r: (r.reward, -r.trial_id))
            child_genome = mutate(best.block_spec(), space, rng)
            cand = Candidate(genome=child_genome, id=trial_id,
                             parent_id=best.trial_id)
            emit(runner.evaluate(cand))
    finally:
        if ledger:
            ledger.close()
    return state


def finalize_topk(state, k, factors=(2, 4), stacks=(6, 8),
                  vocab_size=BYTE_VOCAB, max_seq_len=1024):
    """Scale-and-stack the k best completed trials into full model specs.

    Ties in reward break toward the earlier trial id. If fewer than k
    trials completed, all of them are returned and the result is flagged.
    """
    history = state.history if isinstance(state, EvolutionState) else list(state)
    completed = [r for r in history if r.stop_reason == STOP_COMPLETED]
    ranked = sorted(completed, key=lambda r: (-r.reward, r.trial_id))
    selected = ranked[:k]
    out = {
        "requested": k,
        "n_completed": len(completed),
        "flagged_short": len(selected) < k,
        "selected": [],
    }
    if len(factors) != len(stacks):
        raise ConfigError("factors and stacks must pair up")
    for rec in selected:
        genome = rec.block_spec()
        scaled = []
        for f, n in zip(factors, stacks):
            spec = ModelSpec(block=scale_model_dim(genome, f), n_blocks=n,
                             vocab_size=vocab_size, max_seq_len=max_seq_len)
            scaled.append({"factor": f, "n_blocks": n,
                           "model": spec.to_json_dict()})
        out["selected"].append({
            "trial_id": rec.trial_id,
            "reward": rec.reward,
            "final_loss": rec.final_loss,
            "genome": rec.genome,
            "scaled": scaled,
        })
    return out

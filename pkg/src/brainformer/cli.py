"""Operator entry points: run searches, train/evaluate single genomes,
count parameters, and summarize trial ledgers.

Exit codes: 0 success, 1 runtime failure (e.g. divergence), 2 usage or
config error. Every run writes a manifest.json with artifact checksums.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time

from . import model as M
from . import search as S
from . import training as TR

log = logging.getLogger("brainformer")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("BRAINFORMER_LOG_LEVEL", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"BRAINFORMER_LOG_LEVEL must be one of {sorted(levels)}")
    logging.basicConfig(level=levels[level],
                        format="%(levelname)s %(name)s: %(message)s")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, command, config_path, seed, started, artifacts):
    manifest = {
        "command": command,
        "config": config_path,
        "seed": seed,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "out_dir": os.path.abspath(out_dir),
        "artifacts": {name: _sha256(os.path.join(out_dir, name))
                      for name in artifacts
                      if os.path.exists(os.path.join(out_dir, name))},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"{what} not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} is not valid JSON ({path}): {exc}")


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------

def _build_runner(cfg, budget_mode):
    mode = cfg.get("mode", "surrogate")
    baseline_doc = cfg.get("baseline_genome")
    baseline = M.BlockSpec.from_json_dict(baseline_doc) if baseline_doc else None
    budget = cfg.get("budget", {})
    if mode == "surrogate":
        if budget_mode == "wallclock":
            raise UsageError("surrogate mode only supports cost budgets")
        if "cost_units" not in budget:
            raise UsageError("search config: budget.cost_units required")
        train = cfg.get("train", {})
        return S.SurrogateRunner(
            budget_cost_units=budget["cost_units"],
            baseline_genome=baseline,
            batch_size=train.get("batch_size", 8),
            seq_len=train.get("seq_len", 128),
        )
    if mode == "train":
        if "corpus" not in cfg:
            raise UsageError("search config: corpus path required in train mode")
        corpus = TR.ByteCorpus.from_file(
            cfg["corpus"], valid_fraction=cfg.get("valid_fraction", 0.1))
        try:
            train_cfg = TR.TrainConfig.from_dict(cfg.get("train", {}))
        except ValueError as exc:
            raise UsageError(f"search config: {exc}")
        kw = {}
        if budget_mode == "wallclock":
            if "seconds" not in budget:
                raise UsageError("search config: budget.seconds required for wallclock")
            kw["budget_seconds"] = budget["seconds"]
        else:
            if "cost_units" not in budget:
                raise UsageError("search config: budget.cost_units required")
            kw["budget_cost_units"] = budget["cost_units"]
        return S.ProxyTrainingRunner(corpus, train_cfg, baseline_genome=baseline,
                                     seed=cfg.get("seed", 0), **kw)
    raise UsageError(f"search config: unknown mode {mode!r}")


def cmd_search(args):
    cfg = _load_json(args.config, "search config")
    for name in ("population", "rounds"):
        if name not in cfg:
            raise UsageError(f"search config: missing field {name!r}")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    budget_mode = args.budget_mode or cfg.get("budget_mode", "cost")
    try:
        space = S.SearchSpace.from_dict(cfg.get("space", {}))
    except M.ConfigError as exc:
        raise UsageError(f"search config: {exc}")
    runner = _build_runner(cfg, budget_mode)
    os.makedirs(args.out, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    ledger_path = os.path.join(args.out, "ledger.jsonl")
    if not args.resume and os.path.exists(ledger_path):
        raise UsageError(f"ledger already exists (use --resume): {ledger_path}")
    state = S.evolve(space, cfg["population"], cfg["rounds"], runner,
                     seed=seed, tournament_size=cfg.get("tournament_size"),
                     ledger_path=ledger_path, resume=args.resume,
                     workers=args.workers or cfg.get("workers", 1))
    topk_cfg = cfg.get("topk", {})
    topk = S.finalize_topk(state, topk_cfg.get("k", 2),
                           factors=tuple(topk_cfg.get("factors", (2, 4))),
                           stacks=tuple(topk_cfg.get("stacks", (6, 8))))
    with open(os.path.join(args.out, "topk.json"), "w") as fh:
        json.dump(topk, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial_id", "reward", "step_time", "final_loss", "stop_reason"])
        for rec in state.history:
            w.writerow([rec.trial_id, rec.reward, rec.step_time,
                        rec.final_loss, rec.stop_reason])
    _write_manifest(args.out, "search", args.config, seed, started,
                    ["ledger.jsonl", "topk.json", "summary.csv"])
    log.info("search finished: %d trials, %d completed",
             len(state.history), len(state.completed()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_model_spec(path, default_blocks=1):
    doc = _load_json(path, "genome")
    try:
        if "block" in doc:
            return M.ModelSpec.from_json_dict(doc)
        block = M.BlockSpec.from_json_dict(doc)
        return M.ModelSpec(block=block, n_blocks=default_blocks,
                           vocab_size=TR.BYTE_VOCAB, max_seq_len=1024)
    except (M.ConfigError, KeyError) as exc:
        raise UsageError(f"malformed genome {path}: {exc}")


def cmd_train(args):
    cfg_doc = _load_json(args.config, "train config") if args.config else {}
    budget_doc = cfg_doc.pop("budget", None)
    try:
        cfg = TR.TrainConfig.from_dict(cfg_doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"train config: {exc}")
    if args.seed is not None:
        cfg.seed = args.seed
    spec = _load_model_spec(args.genome, default_blocks=args.stack)
    if spec.block.d_head * spec.block.h > 4096 and cfg.seq_len > 512:
        log.warning("large config; this is a desk-scale trainer")
    if cfg.seq_len > spec.max_seq_len:
        raise UsageError(f"seq_len {cfg.seq_len} exceeds genome max_seq_len "
                         f"{spec.max_seq_len}")
    try:
        corpus = TR.ByteCorpus.from_file(args.corpus,
                                         valid_fraction=cfg.valid_fraction)
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(f"corpus: {exc}")
    if budget_doc:
        budget = TR.Budget(**budget_doc)
    else:
        budget = TR.Budget(max_steps=cfg.max_steps)
    os.makedirs(args.out, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    model = M.LanguageModel(spec, seed=cfg.seed)
    ckpt = os.path.join(args.out, "checkpoint.bin")
    if args.resume and os.path.exists(ckpt):
        M.load_checkpoint(model, ckpt)
        log.info("resumed from step %d", model.step)
    traj = os.path.join(args.out, "trajectory.jsonl")
    result = TR.train_steps(model, corpus, cfg, budget, trajectory_path=traj)
    M.save_checkpoint(model, ckpt)
    report = {
        "steps": result.steps,
        "total_step": model.step,
        "final_loss": result.final_loss,
        "diverged": result.diverged,
    }
    if TR.model_has_valid(corpus) and result.steps > 0 and not result.diverged:
        report["valid_ppl"] = TR.evaluate_perplexity(
            model, corpus, seq_len=cfg.seq_len, max_tokens=cfg.eval_tokens)
    with open(os.path.join(args.out, "train_report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(args.out, "train", args.config, cfg.seed, started,
                    ["checkpoint.bin", "checkpoint.bin.json",
                     "trajectory.jsonl", "train_report.json"])
    if result.diverged:
        log.error("training diverged at step %d", model.step)
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# count-params
# ---------------------------------------------------------------------------

def cmd_count_params(args):
    spec = _load_model_spec(args.genome, default_blocks=args.stack)
    if args.scale:
        spec = M.ModelSpec(block=M.scale_model_dim(spec.block, args.scale),
                           n_blocks=spec.n_blocks, vocab_size=spec.vocab_size,
                           max_seq_len=spec.max_seq_len)
    counts = M.count_params(spec)
    report = {
        "genome": spec.to_json_dict(),
        "n_params": counts.n_params,
        "n_act_params": counts.n_act_params,
        "n_params_no_embed": counts.n_params_no_embed,
        "n_act_params_no_embed": counts.n_act_params_no_embed,
        "flops_per_token": M.model_flops_per_token(spec, spec.max_seq_len),
        "counting_convention": (
            "n_params / n_act_params include the input embedding, position "
            "table, and untied output projection; the *_no_embed variants "
            "exclude all three"),
    }
    if args.reference:
        try:
            ref_total, ref_act = (float(x) for x in args.reference.split(","))
        except ValueError:
            raise UsageError("--reference expects TOTAL,ACTIVATED")
        report["reference_comparison"] = {
            "reference_n_params": ref_total,
            "reference_n_act_params": ref_act,
            "deviation_pct": {
                "n_params": 100.0 * (counts.n_params - ref_total) / ref_total,
                "n_act_params": 100.0 * (counts.n_act_params - ref_act) / ref_act,
                "n_params_no_embed":
                    100.0 * (counts.n_params_no_embed - ref_total) / ref_total,
                "n_act_params_no_embed":
                    100.0 * (counts.n_act_params_no_embed - ref_act) / ref_act,
            },
        }
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "param_report.json"), "w") as fh:
            fh.write(text + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args):
    try:
        records, skipped = S.read_ledger(args.ledger, strict=False)
    except FileNotFoundError:
        raise UsageError(f"ledger not found: {args.ledger}")
    if skipped:
        log.warning("skipped %d corrupt ledger lines", skipped)
    trials = sorted((r for r in records if r.trial_id >= 0),
                    key=lambda r: r.trial_id)
    os.makedirs(args.out, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")

    best = None
    with open(os.path.join(args.out, "reward_over_time.csv"), "w",
              newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial_id", "reward", "best_so_far"])
        best_so_far = None
        for rec in trials:
            if best_so_far is None or rec.reward > best_so_far:
                best_so_far = rec.reward
            if best is None or rec.reward > best.reward:
                best = rec
            w.writerow([rec.trial_id, rec.reward, best_so_far])

    tally = {}
    for rec in trials:
        tally[rec.stop_reason] = tally.get(rec.stop_reason, 0) + 1
    lineage = []
    node = best
    by_id = {r.trial_id: r for r in trials}
    while node is not None:
        lineage.append({"trial_id": node.trial_id, "reward": node.reward,
                        "genome": node.genome})
        node = by_id.get(node.parent_id) if node.parent_id is not None else None
    summary = {
        "n_trials": len(trials),
        "skipped_corrupt_lines": skipped,
        "stop_reason_tally": tally,
        "best_trial": best.trial_id if best else None,
        "best_lineage": lineage,
    }
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(args.out, "report", args.ledger, None, started,
                    ["reward_over_time.csv", "report.json"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="brainformer",
                                 description="block search, training, and reporting")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run the evolutionary block search")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--budget-mode", choices=["wallclock", "cost"], dest="budget_mode")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", help="train one genome on a byte corpus")
    p.add_argument("--genome", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--stack", type=int, default=1,
                   help="block repetitions when the genome file is a bare block")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("count-params", help="parameter and FLOP accounting")
    p.add_argument("--genome", required=True)
    p.add_argument("--scale", type=int, choices=[2, 4])
    p.add_argument("--stack", type=int, default=1)
    p.add_argument("--reference", help="TOTAL,ACTIVATED reference counts to compare")
    p.add_argument("--out")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("report", help="summarize a trial ledger")
    p.add_argument("--ledger", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except M.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TR.TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

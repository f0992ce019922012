"""Command-line entry point: ``markovcot <subcommand> ...``.

Config files are flat ``key = <json value>`` lines; ``#`` starts a comment.
Bare words that are not valid JSON are read as strings. Any config key can be
overridden on the command line as ``--<key> <value>`` (e.g. ``--batch_size 16``
or ``--task.kind arithmetic``). Only two environment variables are read:
MARKOVCOT_OUTPUT_ROOT (default ``.``) and MARKOVCOT_THREADS.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, oracle, perturb, tasks, trainer, xmodel
from .errors import ConfigError, MarkovCotError, NumericError
from .seeding import derive_seed

log = logging.getLogger("markovcot")

REQUIRED_KEYS = ("task.kind",)


# ---------------------------------------------------------------------------
# configuration


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config_file(path: str | Path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip()] = parse_value(value)
    return out


def write_config_file(flat: dict, path: str | Path) -> None:
    Path(path).write_text("".join(f"{k} = {json.dumps(v)}\n" for k, v in flat.items()))


def config_keys() -> list[str]:
    return list(trainer.TrainConfig().to_flat())


def resolve_config(file_values: dict, overrides: dict) -> trainer.TrainConfig:
    flat = {**file_values, **overrides}
    for key in REQUIRED_KEYS:
        if key not in flat:
            raise ConfigError(f"{key}: required key missing")
    return trainer.TrainConfig.from_flat(flat)


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides")
    for key in config_keys():
        g.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE", type=parse_value, default=None)


def collect_overrides(args: argparse.Namespace) -> dict:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}


def output_root() -> Path:
    return Path(os.environ.get("MARKOVCOT_OUTPUT_ROOT", "."))


def float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    values = read_config_file(args.config) if args.config else {}
    config = resolve_config(values, collect_overrides(args))
    run_dir = Path(args.run_dir) if args.run_dir else output_root() / "runs" / f"{config.variant}-seed{config.run_seed}"
    trainer.train(config, run_dir, resume=args.resume)
    rows = trainer.read_metrics(run_dir)
    last = rows[-1] if rows else {}
    print(f"run {run_dir}: {len(rows)} steps logged; last mean_reward {last.get('mean_reward', math.nan):.4f}")
    return 0


def _check_tokenizers(a: trainer.OpenRun, b: trainer.OpenRun) -> None:
    ta, tb = a.manifest.get("tokenizer"), b.manifest.get("tokenizer")
    if ta != tb:
        raise ConfigError(f"tokenizer mismatch between runs: {ta} vs {tb}")
    if a.config.task != b.config.task:
        raise ConfigError("the two runs bind different tasks")


def cmd_eval_fragility(args) -> int:
    m = trainer.open_run(args.markovian, args.markovian_checkpoint)
    nm = trainer.open_run(args.nonmarkovian, args.nonmarkovian_checkpoint)
    _check_tokenizers(m, nm)
    pairs = [m.source.pair(derive_seed(args.seed, "fragility-pair", i)) for i in range(args.n)]
    specs = perturb.spec_grid(args.kinds.split(","), args.severities)
    records = perturb.fragility_eval(m.handle, nm.handle, pairs, specs, seed=args.seed)
    table = perturb.fragility_table(records, args.severities, args.kinds.split(","))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fragility.csv").write_text(table.to_csv())
    (out / "fragility.txt").write_text(table.to_text())
    perturb.write_records(records, out / "records.jsonl")
    tests = {}
    for s in args.severities:
        for k in args.kinds.split(","):
            d = [r.difference for r in records if r.kind == k and r.severity == s]
            if d:
                tests[f"{k}@{s}"] = {"mean_difference": float(np.mean(d)), "n": len(d),
                                     "sign_test_p": perturb.sign_test(d)}
    summary = {"n_examples": args.n, "seed": args.seed, "cells": tests}
    if args.accuracy_n > 0:
        deltas = perturb.accuracy_fragility(m.handle, nm.handle, pairs[: args.accuracy_n], specs, seed=args.seed)
        summary["accuracy"] = [vars(d) for d in deltas]
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(table.to_text(), end="")
    return 0


def _critic_spec(text: str, model, steps: int) -> xmodel.CriticSpec:
    kind, _, seed = text.partition(":")
    if not seed.isdigit():
        raise ConfigError(f"--critic {text!r}: expected same-arch:<seed> or half-size:<seed>")
    makers = {"same-arch": xmodel.same_arch_critic, "half-size": xmodel.half_size_critic}
    if kind not in makers:
        raise ConfigError(f"--critic {text!r}: unknown critic kind {kind!r}")
    return makers[kind](model, int(seed), pretrain_steps=steps)


def cmd_eval_crossmodel(args) -> int:
    run = trainer.open_run(args.run)
    checkpoints = [(s, p) for s, p in trainer.list_checkpoints(args.run)
                   if args.max_step is None or s <= args.max_step]
    critics = {}
    for text in args.critic:
        spec = _critic_spec(text, run.config.model, args.critic_steps)
        critics[spec.critic_id] = xmodel.build_critic(spec, run.source)
    pairs = [run.source.pair(derive_seed(args.seed, "xmodel-pair", i)) for i in range(args.n)]
    loaded = [(s, trainer.load_state(p).actor) for s, p in checkpoints]
    report = xmodel.transfer_report(run.handle, loaded, critics, pairs, seed=args.seed, window=args.window)
    report.write(args.out)
    for cid, rho in report.correlations.items():
        print(f"{cid}: spearman {'undefined' if rho is None else f'{rho:.4f}'} over {len(loaded)} checkpoints")
    return 0


def cmd_oracle_check(args) -> int:
    handle, task = oracle.micro_instance(seed=args.seed)
    report = oracle.oracle_report(handle, task, n_samples=args.samples, seed=args.seed)
    if args.out:
        oracle.write_report(report, args.out)
    for name, ok in report.checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return 0 if report.passed else 1


def cmd_gen_data(args) -> int:
    values = read_config_file(args.config) if args.config else {}
    spec = resolve_config(values, collect_overrides(args)).task
    source = tasks.TaskSource(spec)
    pairs = [source.pair(derive_seed(args.seed, "gen-data", i)) for i in range(args.n)]
    tasks.export_jsonl(pairs, args.out)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def summarize_run(rows: list[dict], every: int) -> list[dict]:
    out = []
    for lo in range(0, len(rows), every):
        chunk = rows[lo : lo + every]
        out.append({
            "first_step": chunk[0]["step"],
            "last_step": chunk[-1]["step"],
            **{k: float(np.mean([r[k] for r in chunk])) for k in ("mean_reward", "l_pg", "l_ar", "l_kl", "total")},
        })
    return out


def cmd_show_run(args) -> int:
    rows = trainer.read_metrics(args.run)
    if not rows:
        raise ConfigError(f"{args.run}: metrics log is empty")
    summary = summarize_run(rows, args.every)
    cols = ["first_step", "last_step", "mean_reward", "l_pg", "l_ar", "l_kl", "total"]
    if args.csv:
        print(",".join(cols))
        for s in summary:
            print(",".join(repr(s[c]) for c in cols))
        return 0
    cells = [cols] + [[str(s[c]) if isinstance(s[c], int) else f"{s[c]:.4f}" for c in cols] for s in summary]
    widths = [max(len(r[i]) for r in cells) for i in range(len(cols))]
    for r in cells:
        print("  ".join(v.rjust(w) for v, w in zip(r, widths)))
    acc = [r for r in rows if "accuracy" in r]
    if acc:
        print(f"last accuracy probe: step {acc[-1]['step']} accuracy {acc[-1]['accuracy']:.4f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="markovcot", description="Markovian chain-of-thought training at desk scale.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train (or resume) one run")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--run-dir", help="run directory (default: $MARKOVCOT_OUTPUT_ROOT/runs/<variant>-seed<seed>)")
    t.add_argument("--resume", action="store_true")
    add_config_flags(t)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("eval-fragility", help="Markovian vs Non-Markovian perturbation fragility")
    f.add_argument("--markovian", required=True, help="Markovian run directory")
    f.add_argument("--nonmarkovian", required=True, help="Non-Markovian run directory")
    f.add_argument("--markovian-checkpoint")
    f.add_argument("--nonmarkovian-checkpoint")
    f.add_argument("--n", type=int, default=512)
    f.add_argument("--accuracy-n", type=int, default=128)
    f.add_argument("--kinds", default=",".join(perturb.KINDS))
    f.add_argument("--severities", type=float_list, default=list(perturb.SEVERITIES))
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_eval_fragility)

    x = sub.add_parser("eval-crossmodel", help="score a run's CoTs with frozen critics across checkpoints")
    x.add_argument("--run", required=True)
    x.add_argument("--critic", action="append", default=None, help="same-arch:<seed> or half-size:<seed>")
    x.add_argument("--critic-steps", type=int, default=1000, help="critic pre-training steps")
    x.add_argument("--n", type=int, default=128)
    x.add_argument("--window", type=int, default=40)
    x.add_argument("--max-step", type=int, default=None)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_eval_crossmodel)

    o = sub.add_parser("oracle-check", help="exact enumeration checks on the micro-instance")
    o.add_argument("--samples", type=int, default=100_000)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle_check)

    g = sub.add_parser("gen-data", help="write (question, answer) pairs as JSON Lines")
    g.add_argument("--config")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    add_config_flags(g)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("show-run", help="summarize a run's metrics log")
    s.add_argument("run")
    s.add_argument("--every", type=int, default=100)
    s.add_argument("--csv", action="store_true")
    s.set_defaults(func=cmd_show_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("MARKOVCOT_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    if getattr(args, "command", None) == "eval-crossmodel" and not args.critic:
        args.critic = ["same-arch:1", "half-size:2"]
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (MarkovCotError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

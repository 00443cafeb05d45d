"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric failure.
Configuration precedence: command-line flag > ``--config`` file > built-in default.
The config file holds flat ``section.key=value`` lines for the sections
``world``, ``model``, ``train`` and ``budget``.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import checkpoint
from .errors import AvReasonError, DataError
from .gradcheck import SUITES, run_suite
from .interleave import decode
from .sequence import LatentBudget, dump
from .synthworld import (EncoderBank, WorldConfig, audio_only_oracle, audio_token, generate_episodes, read_dataset,
                         write_dataset)
from .trainer import METRICS_HEADER, OptimState, TrainConfig, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PAPER_KEYS = ("base_lr", "warmup_fraction", "lambda1", "lambda2", "grad_accumulation", "batch_size")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage().strip()}\n{self.prog}: error: {message}")


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {value}")
    if like is None:
        return None if value.lower() in ("", "none") else value
    return type(like)(value)


def read_config_file(path) -> dict[str, dict[str, str]]:
    """Parse ``section.key=value`` lines; ``#`` starts a comment."""
    out: dict[str, dict[str, str]] = {"world": {}, "model": {}, "train": {}, "budget": {}}
    p = Path(path)
    if not p.exists():
        raise DataError(f"{path}: no such config file")
    for lineno, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or section not in out:
            raise DataError(f"{path}:{lineno}: expected section.key=value with section in {sorted(out)}")
        out[section][name] = value.strip()
    return out


def _build(cls, overrides: dict[str, str], flags: dict):
    """Instantiate a config dataclass: defaults, then file values, then flags."""
    defaults = cls()
    values = asdict(defaults)
    names = {f.name for f in fields(cls)}
    for k, v in overrides.items():
        if k not in names:
            raise DataError(f"unknown {cls.__name__} key {k!r}")
        try:
            values[k] = _coerce(v, getattr(defaults, k))
        except ValueError as exc:
            raise DataError(f"bad value for {k}: {exc}") from None
    values.update({k: v for k, v in flags.items() if v is not None})
    return cls(**values)


def _budget(section: dict[str, str]) -> LatentBudget:
    vals = {k: int(v) for k, v in section.items()}
    if set(vals) - {"total", "visual", "audio"}:
        raise DataError(f"unknown budget keys {sorted(set(vals) - {'total', 'visual', 'audio'})}")
    if vals.keys() == {"total"}:
        return LatentBudget.split(vals["total"])
    return LatentBudget(**{**asdict(LatentBudget()), **vals})


def _echo(out, title: str, **sections) -> None:
    print(f"# {title}", file=out)
    for name, obj in sections.items():
        d = obj if isinstance(obj, dict) else asdict(obj)
        for k, v in d.items():
            print(f"{name}.{k}={v}", file=out)
    out.flush()


def _sections(args) -> dict[str, dict[str, str]]:
    if getattr(args, "config", None):
        return read_config_file(args.config)
    return {"world": {}, "model": {}, "train": {}, "budget": {}}


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, out) -> int:
    sec = _sections(args)
    world = _build(WorldConfig, sec["world"], {"seed": args.seed})
    budget = _budget(sec["budget"])
    threads = int(os.environ.get("LOMNI_THREADS", os.cpu_count() or 1))
    _echo(out, "gen-data", world=world, budget=budget,
          run={"episodes": args.episodes, "start": args.start, "out": args.out, "threads": threads})
    episodes = generate_episodes(world, args.start, args.episodes, budget, threads=threads)
    write_dataset(episodes, args.out)
    print(f"wrote {len(episodes)} episodes to {args.out}", file=out)
    print(f"audio_only_oracle={audio_only_oracle(episodes)!r}", file=out)
    return EXIT_OK


def cmd_train(args, out) -> int:
    sec = _sections(args)
    flags = {"total_steps": args.steps, "lambda1": args.lambda1, "seed": args.seed,
             "use_ospe": False if args.no_ospe else None, "base_lr": args.lr}
    if args.paper_hparams:
        # the switch outranks the config file; explicit flags still outrank the switch
        paper_cfg = TrainConfig.paper_hparams()
        paper = {k: getattr(paper_cfg, k) for k in PAPER_KEYS}
        flags = {**paper, **{k: v for k, v in flags.items() if v is not None}}
    config = _build(TrainConfig, sec["train"], flags)
    episodes = read_dataset(args.data)
    world = episodes[0].config
    if args.resume:
        state, optim, extra = checkpoint.load(args.resume)
        if optim is None:
            raise DataError(f"{args.resume}: checkpoint holds no optimizer state")
        budget = LatentBudget(**extra["budget"]) if "budget" in extra else _budget(sec["budget"])
    else:
        mflags = {"vocab_size": max(bb.ModelConfig().vocab_size, world.vocab_needed),
                  "feature_dim_visual": world.feature_dim, "feature_dim_audio": world.feature_dim}
        model_cfg = _build(bb.ModelConfig, sec["model"], {k: v for k, v in mflags.items()
                                                           if k not in sec["model"]})
        state = bb.init_state(model_cfg, config.seed)
        optim = OptimState.for_model(state)
        budget = _budget(sec["budget"])
    if state.config.vocab_size < world.vocab_needed:
        raise DataError(f"model vocabulary {state.config.vocab_size} is smaller than the world needs")
    metrics = Path(args.metrics or f"{args.out}.metrics.csv")
    _echo(out, "train", train=config, model=state.config, budget=budget, world=world,
          run={"data": args.data, "out": args.out, "metrics": str(metrics), "resume": args.resume,
               "stop_after": args.stop_after, "episodes": len(episodes)})
    bank = EncoderBank(world)
    append = bool(args.resume) and metrics.exists()
    with open(metrics, "a" if append else "w") as fh:
        if not append:
            fh.write(METRICS_HEADER + "\n")
        t0 = time.time()

        def log(line: str) -> None:
            fh.write(line + "\n")
            step = int(line.split(",", 1)[0])
            if step % 50 == 49 or step == config.total_steps - 1:
                print(line, file=out)
                out.flush()

        end = config.total_steps if args.stop_after is None else min(config.total_steps, args.stop_after)
        train(state, optim, episodes, config, bank, budget, steps=end, log=log)
    extra = {"train": asdict(config), "budget": asdict(budget), "world": world.as_dict()}
    checkpoint.save(args.out, state, optim, extra)
    print(f"saved {args.out} at step {optim.step} ({time.time() - t0:.1f}s)", file=out)
    return EXIT_OK


def _load_for_eval(args):
    state, _, extra = checkpoint.load(args.ckpt)
    budget = LatentBudget(**extra.get("budget", asdict(LatentBudget())))
    use_ospe = extra.get("train", {}).get("use_ospe", True)
    return state, budget, use_ospe, extra


def cmd_eval(args, out) -> int:
    state, budget, use_ospe, extra = _load_for_eval(args)
    episodes = read_dataset(args.data)
    if args.limit:
        episodes = episodes[:args.limit]
    _echo(out, "eval", model=state.config, budget=budget,
          run={"ckpt": args.ckpt, "data": args.data, "episodes": len(episodes), "use_ospe": use_ospe,
               "max_text": args.max_text})
    report = evaluate(state, episodes, EncoderBank(episodes[0].config), budget, use_ospe, args.max_text)
    print(report.format(), file=out)
    return EXIT_OK


def cmd_decode(args, out) -> int:
    state, budget, use_ospe, extra = _load_for_eval(args)
    episodes = read_dataset(args.data)
    if not 0 <= args.index < len(episodes):
        raise DataError(f"index {args.index} outside dataset of {len(episodes)} episodes")
    ep = episodes[args.index]
    _echo(out, "decode", budget=budget,
          run={"ckpt": args.ckpt, "data": args.data, "index": args.index, "mode": args.mode,
               "seed": args.seed, "max_text": args.max_text, "use_ospe": use_ospe,
               "dump_attention": args.dump_attention})
    bank = EncoderBank(ep.config)
    fv, fa = bank.encode(ep)
    alphabet = [audio_token(ep.config, s) for s in range(ep.config.audio_alphabet)]
    seq, trace = decode(state, ep.prompt(fv, fa), budget, args.max_text, args.mode, args.seed,
                        frame_rate=bank.frame_rate, use_ospe=use_ospe, trace=True, answer_tokens=alphabet)
    out.write(dump(seq))
    answer = seq.answer()
    print(f"# answer={answer[0] if answer else None} expected={ep.answer_token}", file=out)
    if args.dump_attention:
        with open(args.dump_attention, "w") as fh:
            fh.write("position,tag,av_ratio\n")
            base = seq.prompt_length
            for i, (tag, mass) in enumerate(zip(trace.tags, trace.av_mass)):
                fh.write(f"{base + i},{tag},{float(np.mean(mass))!r}\n")
    return EXIT_OK


def cmd_gradcheck(args, out) -> int:
    _echo(out, "gradcheck", run={"suite": args.suite, "max_coords": args.max_coords, "dtype": "float64",
                                 "step": 1e-5})
    t0 = time.time()
    results = run_suite(args.suite, args.max_coords)
    for r in results:
        print(r.line(), file=out)
    ok = all(r.passed for r in results)
    print(f"{'PASS' if ok else 'FAIL'} {sum(r.passed for r in results)}/{len(results)} "
          f"checks in {time.time() - t0:.1f}s", file=out)
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="avreason", description="Interleaved latent reasoning over synthetic audio-visual episodes.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic episode file")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--start", type=int, default=0, help="index of the first episode")
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on an episode file")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, help="total optimizer steps (sets the warmup length too)")
    t.add_argument("--stop-after", type=int, help="stop once the optimizer has taken this many steps")
    t.add_argument("--paper-hparams", action="store_true")
    t.add_argument("--lambda1", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--no-ospe", action="store_true", help="use integer positions instead of timestamps")
    t.add_argument("--seed", type=int)
    t.add_argument("--metrics", help="CSV metrics path (default: OUT.metrics.csv)")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="decode every episode and report accuracy and attention ratios")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--limit", type=int)
    e.add_argument("--max-text", type=int, default=8)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("decode", help="decode one episode")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--index", type=int, required=True)
    d.add_argument("--mode", choices=("greedy", "sampled"), default="greedy")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--max-text", type=int, default=8)
    d.add_argument("--dump-attention")
    d.set_defaults(func=cmd_decode)

    c = sub.add_parser("gradcheck", help="finite-difference and invariant checks")
    c.add_argument("--suite", choices=SUITES, default="all")
    c.add_argument("--max-coords", type=int, default=24, help="coordinates probed per parameter tensor")
    c.set_defaults(func=cmd_gradcheck)
    return p


def run(argv=None, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip() + "\navreason: error: a command is required")
        return args.func(args, out)
    except UsageError as exc:
        print(exc, file=err)
        return EXIT_USAGE
    except AvReasonError as exc:
        print(f"error: {exc}", file=err)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

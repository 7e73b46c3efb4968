"""Command-line entry point: ``synth``, ``train``, ``eval`` and ``profile``.

Every field of the model, loss and train configs is also a ``--flag``
(underscores become dashes) that overrides the ``--config`` file.
Exit codes: 0 success, 1 validation/usage error, 2 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from .checkpoint import load_checkpoint, save_checkpoint
from .config import STRATEGIES, LossConfig, ModelConfig, RunConfig, TrainConfig, load_config
from .data import Vocab, generate_synthetic, load_dataset, make_batches, synthetic_dataset
from .errors import FocusRetError, NumericError
from .retrieval import evaluate_model
from .trainer import check_memory_ordering, new_state, profile_strategies, state_from_checkpoint, train

log = logging.getLogger("focusret")

_TYPES = {"int": int, "float": float, "str": str, "Optional[int]": int}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file")
    group = p.add_argument_group("config overrides")
    for kind in (ModelConfig, LossConfig, TrainConfig):
        for f in dataclasses.fields(kind):
            flag = "--" + f.name.replace("_", "-")
            if f.type == "bool":
                group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
            elif f.name == "strategy":
                group.add_argument(flag, dest=f.name, choices=STRATEGIES, default=None)
            else:
                group.add_argument(flag, dest=f.name, type=_TYPES[str(f.type)], default=None)


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    names = {f.name for kind in (ModelConfig, LossConfig, TrainConfig) for f in dataclasses.fields(kind)}
    return {k: v for k, v in vars(args).items() if k in names and v is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="focusret", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic manifest + images")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--per-scene", type=int, default=16)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("train", help="train and write checkpoints + metrics log")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="CMCK checkpoint to continue from")
    p.add_argument("--seeds", type=int, nargs="+", help="one run per seed, in seed<N>/ subdirectories")
    p.add_argument("--init-only", action="store_true", help="write the untrained checkpoint and stop")
    p.add_argument("--no-validate", dest="validate", action="store_false")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--out", help="RetrievalResult JSON path (default stdout)")
    p.add_argument("--csv", help="per-query rank CSV path")

    p = sub.add_parser("profile", help="efficiency reports for all strategies")
    p.add_argument("--manifest", help="dataset for the sample batch (default: synthetic)")
    p.add_argument("--out", help="JSON array path (default stdout)")
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--timed", type=int, default=10)
    _add_config_flags(p)
    return parser


def _emit(payload: Any, path: Optional[str]) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _cmd_synth(args) -> int:
    generate_synthetic(args.scenes, args.per_scene, args.image_size, args.seed, out_dir=args.out)
    print(f"wrote {args.scenes * args.per_scene} images to {args.out}")
    return 0


def _train_one(run: RunConfig, args, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    resume = load_checkpoint(args.resume) if args.resume else None
    vocab = None
    if resume is not None:
        vocab = Vocab({k: int(v) for k, v in resume.meta["vocab"].items()})
        # a resumed run keeps its own stopping point unless a flag moves it
        stored = resume.meta["config"]
        given = _overrides(args)
        stop = {k: given.get(k, stored[k]) for k in ("epochs", "max_steps")}
        run = RunConfig.from_flat({**run.to_flat(), **stop})
    dataset = load_dataset(args.manifest, vocab)
    if args.init_only:
        save_checkpoint(new_state(run, dataset.vocab).to_checkpoint(), out / "last.cmck")
        print(f"wrote untrained checkpoint {out / 'last.cmck'}")
        return 0
    try:
        result = train(run, dataset, resume=resume, metrics_path=out / "metrics.jsonl", validate=args.validate)
    except NumericError as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, out / "abort.cmck")
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 2
    save_checkpoint(result.last, out / "last.cmck")
    if result.best is not None:
        save_checkpoint(result.best, out / "best.cmck")
    losses = result.losses
    print(f"{len(losses)} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}; best val mR {result.state.best_mr:.2f}")
    return 0


def _cmd_train(args) -> int:
    run = load_config(args.config, **_overrides(args))
    if not args.seeds:
        return _train_one(run, args, Path(args.out))
    code = 0
    for seed in args.seeds:
        code = max(code, _train_one(run.replace(seed=seed), args, Path(args.out) / f"seed{seed}"))
    return code


def _cmd_eval(args) -> int:
    state = state_from_checkpoint(load_checkpoint(args.checkpoint))
    dataset = load_dataset(args.manifest, state.vocab)
    records = dataset.records
    if args.split != "all":
        records = dict(zip(("train", "val", "test"), dataset.split()))[args.split]
    result = evaluate_model(
        state.model, records, state.vocab, state.run.train.scene_prompt,
        config={**state.run.to_flat(), "split": args.split, "checkpoint_step": state.step},
    )
    _emit(result.to_dict(), args.out)
    log.info(result.summary())
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["query_id", "rank_of_first_hit"])
            for rec, rank in zip(records, result.iqt_ranks):
                w.writerow([f"iqt/{rec.sample_id}", int(rank)])
            caps = [(rec.sample_id, c) for rec in records for c in range(len(rec.captions))]
            for (sid, c), rank in zip(caps, result.tqi_ranks):
                w.writerow([f"tqi/{sid}/{c}", int(rank)])
    return 0


def _cmd_profile(args) -> int:
    # the profiled batch defaults to 8 unless the file or a flag says otherwise
    in_file = bool(args.config) and "batch_size" in json.loads(Path(args.config).read_text())
    run = load_config(args.config, **{**({} if in_file else {"batch_size": 8}), **_overrides(args)})
    tc = run.train
    if args.manifest:
        dataset = load_dataset(args.manifest)
    else:
        dataset = synthetic_dataset(image_size=run.model.image_size, channels=run.model.channels)
    batch = make_batches(dataset.records, tc.batch_size, tc.seed, 0, dataset.vocab, run.model.max_len, tc.scene_prompt)[0]
    reports = profile_strategies(run, batch, dataset.vocab, warmup=args.warmup, timed=args.timed)
    payload = [{**r.to_dict(), "config": run.to_flat()} for r in reports]
    _emit(payload, args.out)
    try:
        check_memory_ordering(reports)
    except AssertionError as exc:
        print(str(exc).splitlines()[0], file=sys.stderr)
        return 1
    return 0


_COMMANDS = {"synth": _cmd_synth, "train": _cmd_train, "eval": _cmd_eval, "profile": _cmd_profile}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 2
    except (FocusRetError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

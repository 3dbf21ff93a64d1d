"""Command-line entry point: ``gmcloss <subcommand> ...``.

Exit codes: 0 success, 1 validation failure, 2 gradient check above threshold.
Every run writes a manifest (next to ``--out`` or to ``--manifest``; stderr
when neither is given).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .bias import bucket_histogram, score_corpus
from .corpus import Corpus, CorpusError, build_corpus, read_jsonl, tokenize
from .diagnostics import LOSSES, THRESHOLD, gradcheck
from .encoders import ImportedFeatures
from .metrics import evaluate_caption
from .synthetic import shipped_path
from .trainer import Checkpoint, TrainConfig, ablate, run

log = logging.getLogger("gmcloss")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _manifest(args, inputs: dict, config: dict | None = None, seed: int | None = None) -> None:
    resolved = {k: v for k, v in vars(args).items() if k not in ("func", "manifest")}
    manifest = {
        "subcommand": args.command,
        "args": resolved,
        "config": config,
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)} for name, p in inputs.items() if p},
        "version": __version__,
        "seed": seed,
    }
    target = args.manifest
    if target is None and getattr(args, "out", None):
        out = Path(args.out)
        target = out / "manifest.json" if out.is_dir() else Path(f"{out}.manifest.json")
    if target is None:
        sys.stderr.write(_dump(manifest) + "\n")
    else:
        Path(target).write_text(_dump(manifest) + "\n", encoding="utf-8")


def _dataset(args) -> Corpus:
    return build_corpus(args.dataset)


def _load_config(args) -> TrainConfig:
    obj = json.loads(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    env_seed = os.environ.get("GMC_SEED")
    if env_seed is not None:
        obj["seed"] = int(env_seed)
    for flag, key in (("no_gen", "use_gen"), ("no_bfcl", "use_bfcl"), ("no_b", "use_b"),
                      ("no_mcl", "use_mcl")):
        if getattr(args, flag, False):
            obj[key] = False
    if getattr(args, "margin_orientation", None):
        obj["margin_orientation"] = args.margin_orientation
    if getattr(args, "freeze_bias_after_warmup", False):
        obj["freeze_bias_after_warmup"] = True
    if getattr(args, "steps", None) is not None:
        obj["total_steps"] = args.steps
        obj["warmup_steps"] = min(obj.get("warmup_steps", TrainConfig.warmup_steps), args.steps)
    return TrainConfig.from_json(obj)


# -- subcommands ----------------------------------------------------------------

def cmd_ingest(args) -> int:
    corpus = _dataset(args)
    out = {"num_videos": len(corpus), "num_captions": corpus.num_captions, **corpus.df.to_json()}
    _emit(_dump(out) + "\n", args.out)
    _manifest(args, {"dataset": args.dataset})
    return 0


def cmd_score_bias(args) -> int:
    corpus = _dataset(args)
    lines = [_dump(s.to_json()) + "\n" for s in score_corpus(corpus)]
    _emit("".join(lines), args.out)
    _manifest(args, {"dataset": args.dataset})
    return 0


def cmd_hist(args) -> int:
    corpus = _dataset(args)
    rows = bucket_histogram(score_corpus(corpus), args.level, args.rank_order)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["rank", "frequency"])
    writer.writerows((r, f) for r, f, _ in rows)
    _emit(buf.getvalue(), args.out)
    _manifest(args, {"dataset": args.dataset})
    return 0


def cmd_eval_metrics(args) -> int:
    corpus = _dataset(args)
    per_video = {}
    for lineno, row in enumerate(read_jsonl(args.candidates), start=1):
        vid, text = row.get("video_id"), row.get("caption")
        if not isinstance(vid, str) or not isinstance(text, str):
            raise CorpusError(f"{args.candidates}:{lineno}: need string 'video_id' and 'caption'")
        refs = [c.tokens for c in corpus.video(vid).captions]
        per_video[vid] = evaluate_caption(tokenize(text), refs, corpus.df).to_json()
    if not per_video:
        raise CorpusError(f"{args.candidates}: no candidates")
    keys = next(iter(per_video.values())).keys()
    mean = {k: sum(r[k] for r in per_video.values()) / len(per_video) for k in keys}
    _emit(_dump({"per_video": per_video, "mean": mean}) + "\n", args.out)
    _manifest(args, {"dataset": args.dataset, "candidates": args.candidates})
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    corpus = _dataset(args)
    features = ImportedFeatures.load(args.features) if args.features else None
    resume = Checkpoint.load(args.resume) if args.resume else None
    if resume is not None:
        config = resume.config
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run(config, corpus, features, resume=resume,
                 steps=args.steps if resume is not None else None)
    result.checkpoint.save(out / "checkpoint.json")
    with open(out / "log.jsonl", "w", encoding="utf-8") as fh:
        for row in result.log:
            fh.write(_dump(row) + "\n")
    _manifest(args, {"dataset": args.dataset, "config": args.config, "features": args.features,
                     "resume": args.resume},
              config=config.to_json(), seed=config.seed)
    return 0


def cmd_gradcheck(args) -> int:
    seed = int(os.environ.get("GMC_SEED", args.seed))
    names = LOSSES if args.loss is None else (args.loss,)
    seeds = range(seed, seed + args.points)
    errors = gradcheck(names, seeds, args.margin_orientation or "literal")
    status = 0
    for name, err in errors.items():
        ok = err < THRESHOLD
        print(f"{name}\t{err:.3e}\t{'ok' if ok else 'FAIL'}")
        status = status if ok else 2
    _manifest(args, {}, seed=seed)
    return status


def cmd_ablate(args) -> int:
    config = _load_config(args)
    corpus = _dataset(args)
    features = ImportedFeatures.load(args.features) if args.features else None
    lines = [_dump(row) + "\n" for row in ablate(config, corpus, features)]
    _emit("".join(lines), args.out)
    _manifest(args, {"dataset": args.dataset, "config": args.config, "features": args.features},
              config=config.to_json(), seed=config.seed)
    return 0


def build_parser() -> argparse.ArgumentParser:
    toy = str(shipped_path("toy.jsonl"))
    parser = _Parser(prog="gmcloss", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--manifest", default=None, help="where to write the run manifest")
        return p

    def loss_flags(p):
        p.add_argument("--config", help="TrainConfig JSON")
        p.add_argument("--features", help="imported feature vectors (JSONL)")
        p.add_argument("--steps", type=int, help="override total_steps")
        p.add_argument("--margin-orientation", choices=("literal", "complement"))
        p.add_argument("--freeze-bias-after-warmup", action="store_true")
        for term in ("bfcl", "mcl", "b", "gen"):
            p.add_argument(f"--no-{term}", action="store_true", help=f"drop l_{term}")

    p = add("ingest", cmd_ingest, "build the document-frequency table")
    p.add_argument("--dataset", default=toy)
    p.add_argument("--out")

    p = add("score-bias", cmd_score_bias, "per-caption information scores and buckets")
    p.add_argument("--dataset", default=toy)
    p.add_argument("--out")

    p = add("hist", cmd_hist, "rank/frequency histogram of score buckets (CSV)")
    p.add_argument("--dataset", default=toy)
    p.add_argument("--level", choices=("sentence", "video"), default="sentence")
    p.add_argument("--rank-order", choices=("asc", "desc"), default="desc")
    p.add_argument("--out")

    p = add("eval-metrics", cmd_eval_metrics, "BLEU/ROUGE-L/CIDEr of candidate captions")
    p.add_argument("--dataset", required=True)
    p.add_argument("--candidates", required=True, help='JSONL of {"video_id", "caption"}')
    p.add_argument("--out")

    p = add("train", cmd_train, "two-phase training run")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint.json to continue from")
    loss_flags(p)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the loss gradients")
    p.add_argument("--loss", choices=LOSSES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=1, help="random points per loss")
    p.add_argument("--margin-orientation", choices=("literal", "complement"))

    p = add("ablate", cmd_ablate, "train the four loss configurations of the ablation table")
    p.add_argument("--dataset", default=toy)
    p.add_argument("--out")
    loss_flags(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CorpusError, ValueError, KeyError, OSError) as exc:
        print(f"gmcloss {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

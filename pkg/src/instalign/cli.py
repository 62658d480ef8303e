"""Command-line entry point: ``instalign <subcommand> [options]``.

Reports go to stdout as JSON; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import evalsuite, mmis_index, pseudolabel, trainer
from .config import ConfigError, RunConfig, load_config
from .synthworld import SchemaError, UnknownTokenError, default_corpus, read_corpus, write_corpus

log = logging.getLogger("instalign")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _corpus(args, cfg, split):
    if getattr(args, "corpus", None):
        return read_corpus(args.corpus)
    log.info("no --corpus given; generating the default %s split", split)
    return default_corpus(cfg.seed, cfg.world, split)


def _model(args, cfg):
    state = trainer.load_checkpoint(args.checkpoint)
    return trainer.inference_model(state, cfg, use_ema=not args.raw_params)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# --------------------------------------------------------------------------- subcommands


def cmd_gen(args, cfg):
    scenes = default_corpus(cfg.seed, cfg.world, args.split, args.n)
    digest = write_corpus(args.out, scenes)
    _emit({"out": str(args.out), "split": args.split, "scenes": len(scenes), "sha256": digest})


def cmd_train(args, cfg):
    scenes = list(_corpus(args, cfg, "train"))
    for extra in args.extra_corpus or []:
        scenes += read_corpus(extra)
    prepared = trainer.prepare_corpus(scenes, cfg)
    state = trainer.TrainState.initial(cfg)
    if args.resume:
        state = trainer.load_checkpoint(args.resume)
    last = {}

    def on_step(step, value):
        last["loss"] = value

    state = trainer.train(state, prepared, cfg, n_steps=args.steps, on_step=on_step)
    trainer.save_checkpoint(state, args.out)
    _emit({"checkpoint": str(args.out), "steps": state.step, "scenes": len(scenes),
           "final_loss": last.get("loss"), "sha256": _sha256(args.out)})


def cmd_eval_ovod(args, cfg):
    model = _model(args, cfg)
    metrics = evalsuite.ovod_eval(model, _corpus(args, cfg, "eval"))
    _report(args, metrics)


def cmd_eval_ground(args, cfg):
    model = _model(args, cfg)
    metrics = evalsuite.grounding_protocol(model, _corpus(args, cfg, "eval"), cfg.eval.grounding_ks,
                                           cfg.eval.iou_threshold)
    _report(args, metrics)


def cmd_eval_mmis(args, cfg):
    model = _model(args, cfg)
    scenes = _corpus(args, cfg, "eval")
    index = mmis_index.load_index(args.index) if args.index else None
    metrics = evalsuite.mmis_protocol(model, scenes, cfg.eval.mmis_ks, cfg.eval.iou_threshold, index=index,
                                      with_objectness=cfg.index.score_with_objectness)
    _report(args, metrics)


def _report(args, metrics):
    if args.table:
        print(evalsuite.to_table(metrics), file=sys.stderr)
    _emit(metrics)


def cmd_index(args, cfg):
    model = _model(args, cfg)
    index = mmis_index.build_index(_corpus(args, cfg, "eval"), model, cfg.index.objectness_floor)
    mmis_index.save_index(index, args.out)
    _emit({"out": str(args.out), "n": len(index), "d": index.d, "sha256": _sha256(args.out)})


def cmd_query(args, cfg):
    model = _model(args, cfg)
    index = mmis_index.load_index(args.index)
    text = model.embed_text(args.text)
    res = mmis_index.query(index, text, args.k, block_rows=cfg.index.block_rows, shards=args.threads,
                           threads=args.threads, with_objectness=cfg.index.score_with_objectness)
    for rec in res.records():
        _emit({"rank": rec["rank"], "score": rec["score"], "scene_id": rec["scene_id"], "box": rec["box"]})


def cmd_bench(args, cfg):
    report = mmis_index.bench(args.sizes, args.k, args.repetitions, args.tokens, args.dim, cfg.seed,
                              cross_attention=not args.no_cross_attention)
    _emit(report)


def cmd_pseudolabel(args, cfg):
    model = _model(args, cfg)
    threshold = cfg.pseudo.threshold if args.threshold is None else args.threshold
    _, stats = pseudolabel.emit_pseudo_corpus(model, _corpus(args, cfg, "caption"), threshold, args.out)
    stats["out"] = str(args.out)
    stats["threshold"] = threshold
    _emit(stats)


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int, default=1, help="cap on worker and BLAS threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    model_opts = argparse.ArgumentParser(add_help=False)
    model_opts.add_argument("--checkpoint", type=Path, required=True, help="trained checkpoint file")
    model_opts.add_argument("--raw-params", action="store_true", help="use raw parameters instead of the EMA copy")

    corpus_opt = argparse.ArgumentParser(add_help=False)
    corpus_opt.add_argument("--corpus", type=Path, help="JSONL corpus (default: generate from config)")

    report_opt = argparse.ArgumentParser(add_help=False)
    report_opt.add_argument("--table", action="store_true", help="also print a text table to stderr")

    p = argparse.ArgumentParser(prog="instalign", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--split", choices=("train", "eval", "caption"), default="train", help="corpus split")
    s.add_argument("--n", type=int, help="number of scenes (default: configured size of the split)")
    s.add_argument("--out", type=Path, required=True, help="output JSONL path")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("train", parents=[common, corpus_opt], help="train and write a checkpoint")
    s.add_argument("--extra-corpus", type=Path, action="append", help="additional corpus, e.g. pseudo-labels")
    s.add_argument("--steps", type=int, help="stop after this many total steps")
    s.add_argument("--resume", type=Path, help="checkpoint to continue from")
    s.add_argument("--out", type=Path, required=True, help="output checkpoint path")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval-ovod", cmd_eval_ovod, "open-vocabulary detection AP"),
        ("eval-ground", cmd_eval_ground, "per-scene grounding Recall@k"),
        ("eval-mmis", cmd_eval_mmis, "whole-database instance search Recall@k"),
    ):
        s = sub.add_parser(name, parents=[common, model_opts, corpus_opt, report_opt], help=helptext)
        if name == "eval-mmis":
            s.add_argument("--index", type=Path, help="prebuilt index (default: build from the corpus)")
        s.set_defaults(func=func)

    s = sub.add_parser("index", parents=[common, model_opts, corpus_opt], help="build an instance index")
    s.add_argument("--out", type=Path, required=True, help="output index path")
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("query", parents=[common, model_opts], help="top-k instances for a text query")
    s.add_argument("--index", type=Path, required=True, help="index file")
    s.add_argument("--text", required=True, help="query text, e.g. 'red circle'")
    s.add_argument("-k", type=int, default=5, help="number of results (default 5)")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("bench", parents=[common], help="dot-product scan vs joint-attention scaling")
    s.add_argument("--sizes", type=int, nargs="+", default=[1000, 10000, 100000], help="index sizes")
    s.add_argument("-k", type=int, default=10, help="top-k (default 10)")
    s.add_argument("--repetitions", type=int, default=5, help="timed repetitions per size")
    s.add_argument("--tokens", type=int, default=8, help="query length T for the attention baseline")
    s.add_argument("--dim", type=int, default=64, help="embedding dimension")
    s.add_argument("--no-cross-attention", action="store_true", help="time the scan only")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("pseudolabel", parents=[common, model_opts, corpus_opt], help="pseudo-label captions")
    s.add_argument("--threshold", type=float, help="acceptance cosine (default from config)")
    s.add_argument("--out", type=Path, required=True, help="output JSONL path")
    s.set_defaults(func=cmd_pseudolabel)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = _config(args)
        with threadpool_limits(limits=args.threads):
            args.func(args, cfg)
    except (ConfigError, SchemaError, trainer.CheckpointError, mmis_index.IndexFormatError,
            pseudolabel.CaptionParseError, UnknownTokenError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

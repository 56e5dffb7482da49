"""Command line entry point: ``storyseq <subcommand> ...``.

Exit codes: 0 success, 1 data or runtime error, 2 usage error.
Log verbosity comes from ``STORYSEQ_LOG`` (default INFO).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import data, inference, metrics, model, training
from .errors import ConfigError, StorySeqError

log = logging.getLogger("storyseq")

GRADCHECK_TOLERANCE = 1e-4


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--toy", action="store_true",
                   help="small dims for fast runs: features 16, hidden 8/4/12, embed 8")
    g.add_argument("--feature-dim", type=int)
    g.add_argument("--embed-dim", type=int)
    g.add_argument("--img-hidden", type=int)
    g.add_argument("--sent-hidden", type=int)
    g.add_argument("--dec-hidden", type=int)
    g.add_argument("--max-len", type=int, default=20)
    g.add_argument("--window", type=int, default=3)
    g.add_argument("--dropout-in", type=float, default=0.3)
    g.add_argument("--dropout-pre-softmax", type=float, default=0.5)
    g.add_argument("--freeze-embeddings", action="store_true")


def _model_config(args, vocab_size: int, parser: argparse.ArgumentParser) -> model.ModelConfig:
    base = model.ModelConfig.toy(vocab_size) if args.toy else model.ModelConfig(vocab_size=vocab_size)
    dims = {k: getattr(args, k) for k in ("feature_dim", "embed_dim", "img_hidden", "sent_hidden", "dec_hidden")}
    overrides = {k: v for k, v in dims.items() if v is not None}
    if ("img_hidden" in overrides or "sent_hidden" in overrides) and "dec_hidden" not in overrides:
        overrides["dec_hidden"] = (overrides.get("img_hidden", base.img_hidden)
                                   + overrides.get("sent_hidden", base.sent_hidden))
    try:
        return model.ModelConfig.from_dict({
            **base.to_dict(), **overrides,
            "max_sentence_len": args.max_len, "window": args.window,
            "dropout_in": args.dropout_in, "dropout_pre_softmax": args.dropout_pre_softmax,
            "train_embeddings": not args.freeze_embeddings,
        })
    except ConfigError as e:
        parser.error(str(e))


def _print_config(command: str, resolved: dict) -> None:
    resolved = {k: v for k, v in resolved.items() if not callable(v)}
    print(f"config {json.dumps({'command': command, **resolved}, sort_keys=True, default=str)}",
          file=sys.stderr)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_build_vocab(args, parser):
    _print_config("build-vocab", vars(args))
    samples = data.read_stories(args.stories)
    vocab = data.build_vocab((s for sample in samples for s in sample.sentences), args.min_freq)
    vocab.save(args.out)
    log.info("vocabulary of %d tokens written to %s", len(vocab), args.out)


def cmd_synth_data(args, parser):
    feature_dim = args.feature_dim or (16 if args.toy else 4096)
    _print_config("synth-data", {**vars(args), "feature_dim": feature_dim})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = data.synth_stories(args.seed, args.stories_count)
    data.write_stories(out / "stories.jsonl", samples)
    ids = [i for s in samples for i in s.image_ids]
    data.write_features(out / "features.vsf", data.synth_features(args.seed, ids, feature_dim))
    log.info("%d stories and %d feature vectors written to %s", len(samples), len(ids), out)


def cmd_train(args, parser):
    vocab = data.Vocabulary.load(args.vocab)
    cfg = _model_config(args, len(vocab), parser)
    try:
        tcfg = training.TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                                    seed=args.seed, checkpoint_every=args.checkpoint_every)
    except ConfigError as e:
        parser.error(str(e))
    _print_config("train", {**vars(args), "model": cfg.to_dict(), "train": tcfg.to_dict()})

    samples = data.read_stories(args.stories)
    features = data.read_features(args.features, expected_dim=cfg.feature_dim)
    instances = [inst for s in samples
                 for inst in data.build_instances(s, vocab, features, cfg.window, cfg.max_sentence_len)]
    emb = None
    if args.embeddings:
        emb = data.load_embeddings(args.embeddings, vocab, cfg.embed_dim, seed=args.seed,
                                   trainable=cfg.train_embeddings)
    params = model.init_params(cfg, args.seed, emb)
    trainer = training.Trainer(params, tcfg)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    loss_log = open(out / "loss.jsonl", "w", encoding="utf-8")

    def on_epoch(epoch, loss):
        loss_log.write(json.dumps({"epoch": epoch, "loss": loss}) + "\n")
        loss_log.flush()
        if tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0:
            training.save_checkpoint(out / f"epoch-{epoch:04d}.vsck", trainer.params, trainer.state,
                                     vocab, tcfg, {"epoch": epoch, "loss": loss})

    start = time.perf_counter()
    with loss_log:
        trace = trainer.fit(instances, on_epoch=on_epoch, stop_below=args.stop_below)
    final_loss = trace[-1] if trace else None
    training.save_checkpoint(out / "final.vsck", trainer.params, trainer.state, vocab, tcfg,
                             {"epoch": trainer.epoch, "loss": final_loss})
    print(json.dumps({"epochs": trainer.epoch, "final_loss": final_loss,
                      "seconds": round(time.perf_counter() - start, 3),
                      "checkpoint": str(out / "final.vsck")}))


def cmd_generate(args, parser):
    _print_config("generate", vars(args))
    vocab = data.Vocabulary.load(args.vocab)
    ckpt = training.load_checkpoint(args.checkpoint, vocab)
    samples = data.read_stories(args.stories)
    features = data.read_features(args.features, expected_dim=ckpt.config.feature_dim)
    records = inference.generate_records(ckpt.params, vocab, samples, features,
                                         allow_unk=not args.no_unk, jobs=args.jobs)
    inference.write_records(args.out, records)
    log.info("%d stories written to %s", len(records), args.out)


def cmd_evaluate(args, parser):
    _print_config("evaluate", vars(args))
    report = metrics.score_corpus(args.generated, args.references)
    text = json.dumps(report.to_json())
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    log.info(report.summary())


def cmd_gradcheck(args, parser):
    _print_config("gradcheck", vars(args))
    start = time.perf_counter()
    rep = model.gradcheck_model(dims=args.dims, seed=args.seed, eps=args.eps, samples=args.samples,
                                max_len=args.max_len)
    ok = rep.max_relative_error < args.tolerance
    print(json.dumps({"max_relative_error": rep.max_relative_error, "tolerance": args.tolerance, "pass": ok,
                      "max_absolute_error": rep.max_absolute_error,
                      "worst": {"param": rep.worst[0], "index": rep.worst[1],
                                "analytic": rep.analytic, "numeric": rep.numeric},
                      "seconds": round(time.perf_counter() - start, 3)}))
    return 0 if ok else 1


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="storyseq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build a vocabulary from a stories file")
    p.add_argument("--stories", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-freq", type=int, default=4)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("synth-data", help="write a deterministic synthetic stories + features set")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--stories-count", type=int, default=4)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--toy", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model with teacher forcing")
    p.add_argument("--stories", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--stop-below", type=float, help="stop once an epoch's mean loss falls below this")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate stories from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--stories", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--no-unk", action="store_true", help="never emit <UNK>; take the next best token")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="BLEU-1..4 and METEOR of generated vs reference stories")
    p.add_argument("generated")
    p.add_argument("references")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--dims", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--samples", type=int, help="coordinates per tensor (default: all)")
    p.add_argument("--max-len", type=int, default=4)
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("STORYSEQ_LOG", "INFO").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        rc = args.func(args, parser)
    except (StorySeqError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""
Command-line entry point.

    lego corpus render --wordlist F --count N --seed S --out DIR
    lego tvqvae train --corpus DIR --out FILE [--seed S]
    lego tvqvae reconstruct --model FILE --image PATH --out PNG
    lego tvqvae inspect --model FILE --corpus DIR --index K --out PNG
    lego codebook tokenize --model FILE --corpus DIR --out tokens.jsonl
    lego pretrain --config FILE --corpus DIR --codebook FILE --out DIR
    lego probe --ckpt C --corpus DIR
    lego finetune-recognizer --ckpt C --corpus DIR
    lego finetune-sr --ckpt C --corpus DIR
    lego eval --model FILE --corpus DIR --report out.json

Omitted corpus paths default to LEGO_DATA_DIR/words. Omitted codebook,
pretraining and checkpoint paths default to codebook.tkcb, pretrain/ and
pretrain/last.ckpt under LEGO_RUNS_DIR.

Progress and results are reported through lego.log; exit status is 0 on
success and 1 on a handled failure.
"""

import argparse
from pathlib import Path
from typing import List, Optional

import torch

from . import log
from .codebook import TextKnowledgeCodebook, tokenize_corpus
from .config import config_hash, get_config, load_dataclass
from .corpus import (
    DEFAULT_WORDS,
    SR_PRESETS,
    TextSample,
    build_corpus,
    derive_seed,
    load_corpus,
    make_sr_pair,
    read_png,
    to_image,
    to_tensor,
    write_png,
)
from .downstream import (
    DownstreamConfig,
    RecognizerModel,
    evaluate_recognizer,
    evaluate_sr,
    finetune,
    load_downstream,
    probe_train,
    save_downstream,
    sr_finetune,
    write_reports,
)
from .errors import LegoError
from .trainer import PretrainConfig, load_encoder, run_pretraining
from .tvqvae import (
    TvqvaeConfig,
    build_perceptual,
    index_dump,
    load_tvqvae,
    reconstruct,
    train_tvqvae,
)

DEFAULT_CORPUS = "words"
DEFAULT_CODEBOOK = "codebook.tkcb"
DEFAULT_PRETRAIN = "pretrain"
DEFAULT_CKPT = "pretrain/last.ckpt"


def _words(path: Optional[str]) -> List[str]:
    if path is None:
        return list(DEFAULT_WORDS)
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [w.strip() for w in lines if w.strip()]


def _corpus_dir(value: Optional[str]) -> Path:
    if value:
        return Path(value)
    return get_config().data_dir / DEFAULT_CORPUS


def _run_path(value: Optional[str], default: str) -> Path:
    if value:
        return Path(value)
    return get_config().runs_dir / default


def _split(corpus: Path, split: str) -> List[TextSample]:
    samples = load_corpus(corpus, split)
    if not samples:
        raise LegoError(f"Corpus {corpus} has no {split!r} samples")
    return samples


def cmd_corpus_render(args) -> int:
    out = _corpus_dir(args.out)
    records = build_corpus(
        _words(args.wordlist),
        args.count,
        args.seed,
        out,
        test_fraction=args.test_fraction,
        workers=args.workers or get_config().prefetch_workers,
    )
    log.info("Rendered %d images into %s", len(records), out)
    return 0


def cmd_tvqvae_train(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else None
    cfg = load_dataclass(TvqvaeConfig, args.config, overrides)
    settings = get_config()
    samples = load_corpus(_corpus_dir(args.corpus))
    out = _run_path(args.out, DEFAULT_CODEBOOK)
    model = train_tvqvae(
        samples,
        cfg,
        out_path=out,
        log_path=out.with_name("tvqvae_log.jsonl"),
        extractor=build_perceptual(
            settings.perceptual_backend, settings.perceptual_seed
        ),
    )
    final = model.training_log[-1]
    log.info(
        "T-VQVAE done: recon=%.5f utilization=%.3f",
        final["reconstruction"],
        final["utilization"],
    )
    return 0


def cmd_tvqvae_reconstruct(args) -> int:
    model, _ = load_tvqvae(_run_path(args.model, DEFAULT_CODEBOOK))
    image = to_tensor([read_png(args.image)])
    stacked = reconstruct(model, image)[0]
    write_png(args.out, to_image(stacked))
    log.info("Wrote input/reconstruction pair to %s", args.out)
    return 0


def cmd_tvqvae_inspect(args) -> int:
    model, _ = load_tvqvae(_run_path(args.model, DEFAULT_CODEBOOK))
    corpus = _corpus_dir(args.corpus)
    images = to_tensor([s.image for s in load_corpus(corpus)])
    strip = index_dump(model, images, args.index, args.limit)
    if strip is None:
        log.warning("No patch in %s quantizes to index %d", corpus, args.index)
        return 1
    write_png(args.out, to_image(strip))
    log.info("Wrote patches of index %d to %s", args.index, args.out)
    return 0


def cmd_codebook_tokenize(args) -> int:
    codebook = TextKnowledgeCodebook.load(
        _run_path(args.model, DEFAULT_CODEBOOK)
    )
    tokenize_corpus(codebook, load_corpus(_corpus_dir(args.corpus)), args.out)
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_dataclass(PretrainConfig, args.config)
    codebook = TextKnowledgeCodebook.load(
        _run_path(args.codebook, DEFAULT_CODEBOOK)
    )
    state = run_pretraining(
        cfg,
        _split(_corpus_dir(args.corpus), "train"),
        codebook,
        out_dir=_run_path(args.out, DEFAULT_PRETRAIN),
        resume=args.resume,
        workers=get_config().prefetch_workers,
    )
    log.info("Pretraining finished at step %d", state.step)
    return 0


def _recognition(args, frozen: bool) -> int:
    cfg = load_dataclass(DownstreamConfig, args.config)
    encoder = load_encoder(_run_path(args.ckpt, DEFAULT_CKPT))
    corpus = _corpus_dir(args.corpus)
    held_out = {"test": _split(corpus, "test")}
    train = _split(corpus, "train")
    if frozen:
        model = probe_train(encoder, train, cfg, held_out)
    else:
        model = finetune(encoder, train, cfg, held_out)
    if args.save:
        save_downstream(model, args.save)
    if args.report:
        write_reports(model.reports, args.report)
    return 0


def cmd_probe(args) -> int:
    return _recognition(args, frozen=True)


def cmd_finetune_recognizer(args) -> int:
    return _recognition(args, frozen=False)


def cmd_finetune_sr(args) -> int:
    cfg = load_dataclass(DownstreamConfig, args.config)
    encoder = load_encoder(_run_path(args.ckpt, DEFAULT_CKPT))
    corpus = _corpus_dir(args.corpus)
    degradation = SR_PRESETS[args.preset]
    pairs = [
        make_sr_pair(s, derive_seed(cfg.seed, i), degradation)
        for i, s in enumerate(_split(corpus, "train"))
    ]
    model = sr_finetune(encoder, pairs, cfg)
    if args.save:
        save_downstream(model, args.save)
    reports = evaluate_sr(
        model,
        _split(corpus, "test"),
        seed=cfg.seed + 1,
        cfg_hash=config_hash(cfg),
    )
    if args.report:
        write_reports(reports, args.report)
    return 0


def cmd_eval(args) -> int:
    model = load_downstream(args.model)
    samples = _split(_corpus_dir(args.corpus), args.split)
    if isinstance(model, RecognizerModel):
        reports = [evaluate_recognizer(model, samples, args.split)]
    else:
        reports = evaluate_sr(model, samples, seed=args.seed)
    write_reports(reports, args.report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lego",
        description="Codebook-guided self-supervised pretraining for "
        "scene-text images",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="Synthetic corpus tools")
    corpus_sub = corpus.add_subparsers(dest="action", required=True)
    render = corpus_sub.add_parser("render", help="Render a word corpus")
    render.add_argument(
        "--wordlist", help="One word per line (default: built-in list)"
    )
    render.add_argument("--count", type=int, required=True)
    render.add_argument("--seed", type=int, default=0)
    render.add_argument("--test-fraction", type=float, default=0.2)
    render.add_argument("--workers", type=int, default=0)
    render.add_argument("--out", help="Corpus directory")
    render.set_defaults(func=cmd_corpus_render)

    tvqvae = sub.add_parser("tvqvae", help="Train and inspect the T-VQVAE")
    tvqvae_sub = tvqvae.add_subparsers(dest="action", required=True)
    train = tvqvae_sub.add_parser("train", help="Train a codebook")
    train.add_argument("--corpus")
    train.add_argument("--out", help="Codebook file")
    train.add_argument("--seed", type=int)
    train.add_argument("--config", help="key=value TvqvaeConfig file")
    train.set_defaults(func=cmd_tvqvae_train)

    recon = tvqvae_sub.add_parser("reconstruct", help="Reconstruct an image")
    recon.add_argument("--model")
    recon.add_argument("--image", required=True)
    recon.add_argument("--out", required=True)
    recon.set_defaults(func=cmd_tvqvae_reconstruct)

    inspect = tvqvae_sub.add_parser("inspect", help="Dump patches of an index")
    inspect.add_argument("--model")
    inspect.add_argument("--corpus")
    inspect.add_argument("--index", type=int, required=True)
    inspect.add_argument("--limit", type=int, default=32)
    inspect.add_argument("--out", required=True)
    inspect.set_defaults(func=cmd_tvqvae_inspect)

    codebook = sub.add_parser("codebook", help="Codebook queries")
    codebook_sub = codebook.add_subparsers(dest="action", required=True)
    tokenize = codebook_sub.add_parser("tokenize", help="Export tokens")
    tokenize.add_argument("--model")
    tokenize.add_argument("--corpus")
    tokenize.add_argument("--out", required=True)
    tokenize.set_defaults(func=cmd_codebook_tokenize)

    pretrain = sub.add_parser("pretrain", help="Joint SID/MIM/RTR pretraining")
    pretrain.add_argument("--config", help="key=value PretrainConfig file")
    pretrain.add_argument("--corpus")
    pretrain.add_argument("--codebook")
    pretrain.add_argument("--out", help="Run directory")
    pretrain.add_argument("--resume", help="Checkpoint to resume from")
    pretrain.set_defaults(func=cmd_pretrain)

    for name, func, text in (
        ("probe", cmd_probe, "CTC probe on a frozen encoder"),
        ("finetune-recognizer", cmd_finetune_recognizer, "CTC fine-tune"),
        ("finetune-sr", cmd_finetune_sr, "Super-resolution fine-tune"),
    ):
        command = sub.add_parser(name, help=text)
        command.add_argument("--ckpt", help="Pretraining checkpoint")
        command.add_argument("--corpus")
        command.add_argument("--config", help="key=value DownstreamConfig")
        command.add_argument("--save", help="Write the trained model here")
        command.add_argument("--report", help="EvalReport JSON output")
        if name == "finetune-sr":
            command.add_argument(
                "--preset", choices=sorted(SR_PRESETS), default="medium"
            )
        command.set_defaults(func=func)

    evaluate = sub.add_parser("eval", help="Evaluate a saved model")
    evaluate.add_argument("--model", required=True)
    evaluate.add_argument("--corpus")
    evaluate.add_argument("--split", default="test")
    evaluate.add_argument("--seed", type=int, default=1)
    evaluate.add_argument("--report", required=True)
    evaluate.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_config()
    settings.apply_runtime()
    torch.set_default_device(settings.device)
    try:
        return args.func(args)
    except (LegoError, OSError) as e:
        log.error("%s failed: %s", args.command, e)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

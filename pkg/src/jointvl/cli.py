"""Batch command-line front end.

Subcommands: gen-data, pretrain, finetune, eval, generate, export-attn.
Exit codes: 0 success, 1 usage, 2 config, 3 data, 4 numeric failure.
Every command is reproducible from (config, seed, inputs) and never
mutates its inputs.
"""

import argparse
import sys

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, load_model, save_checkpoint
from .config import default_config, load_config
from .corpus import gen_dataset, load_dataset
from .errors import ConfigError, DataError, NumericError
from .evaluate import evaluate_task
from .masks import MaskScheme
from .model import JointModel
from .pgm import read_pgm, write_pgm
from .pretrain import pretrain
from .rng import derive_rng
from .tasks import TASKS, finetune, generate_batch
from .vocab import Vocabulary, detokenize, tokenize


def _cmd_gen_data(args) -> int:
    counts = {"train": args.n_train, "valid": args.n_valid, "test": args.n_test}
    gen_dataset(args.out, counts, args.seed, image_size=args.image_size)
    print(f"wrote corpus to {args.out} "
          f"({args.n_train}/{args.n_valid}/{args.n_test})")
    return 0


def _load_run_config(path):
    return load_config(path) if path else default_config()


def _cmd_pretrain(args) -> int:
    config = _load_run_config(args.config)
    corpus = load_dataset(args.data)

    def save_epoch(epoch, model):
        save_checkpoint(f"{args.out}.epoch{epoch}", model.params, config)

    model, log = pretrain(corpus.split("train"), corpus.vocab, config,
                          epoch_callback=save_epoch)
    save_checkpoint(args.out, model.params, config)
    loss_csv = args.loss_csv or f"{args.out}.loss.csv"
    log.save_csv(loss_csv)
    print(f"pretrained {config.scheme} model -> {args.out} (losses: {loss_csv})")
    return 0


def _cmd_finetune(args) -> int:
    config = _load_run_config(args.config)
    corpus = load_dataset(args.data)
    params, _ = load_checkpoint(args.ckpt)
    # the CLI config governs training; the checkpoint must fit it shape-wise
    from .checkpoint import _validate_against_config
    _validate_against_config(params, config, args.ckpt)
    model = JointModel(config, params, corpus.vocab)
    if args.task == "gen":
        print("finetune task=gen mask=s2s (fixed for generation)")
    finetune(args.task, corpus, model, config, head_only=args.head_only)
    save_checkpoint(args.out, model.params, config)
    print(f"fine-tuned {args.task} -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    corpus = load_dataset(args.data)
    model = load_model(args.ckpt, corpus.vocab)
    compare_model = load_model(args.compare, corpus.vocab) if args.compare else None
    report = evaluate_task(args.task, model, corpus, split=args.split,
                           n_boot=args.n_boot, seed=model.config.seed,
                           compare_model=compare_model, n_trials=args.n_trials,
                           max_len=args.max_len)
    text_path, csv_path = report.save(args.out)
    for name, e in report.entries.items():
        p = "" if e.p_value is None else f"  p={e.p_value:.3g}"
        print(f"{name}: {e.value:.4f}  (boot mean {e.mean:.4f} std {e.std:.4f}){p}")
    print(f"report: {text_path}, resamples: {csv_path}")
    return 0


def _cmd_generate(args) -> int:
    corpus = load_dataset(args.data)
    model = load_model(args.ckpt, corpus.vocab)
    studies = corpus.split(args.split)
    if not studies:
        raise DataError(f"no studies in split {args.split!r}")
    with open(args.out, "w") as fh:
        for start in range(0, len(studies), 64):
            batch = studies[start : start + 64]
            states = generate_batch(model, np.stack([s.image for s in batch]),
                                    max_len=args.max_len)
            for study, state in zip(batch, states):
                text = detokenize(state.ids, model.vocab)
                fh.write(f"{study.study_id}\t{state.stop_reason}\t{text}\n")
    print(f"wrote {len(studies)} generated reports to {args.out}")
    return 0


def _cmd_export_attn(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    model = load_model(args.ckpt, vocab)
    image = read_pgm(args.image)
    scheme = (MaskScheme.from_name(args.scheme) if args.scheme
              else model.understanding_scheme())
    ids = tokenize(args.report, vocab, model.config.max_len).ids[None, :]
    with ad.no_grad():
        ctx, layout = model.forward_batch(image[None], ids, scheme,
                                          collect_attention=True)
    if not 0 <= args.layer < len(ctx.attentions):
        raise ConfigError(f"layer must be in 0..{len(ctx.attentions) - 1}")
    heads = ctx.attentions[args.layer].shape[1]
    if not 0 <= args.head < heads:
        raise ConfigError(f"head must be in 0..{heads - 1}")
    weights = ctx.attentions[args.layer][0, args.head]  # [S, S]
    np.savetxt(f"{args.out}.csv", weights, delimiter=",", fmt="%.10g")

    # aggregate language-query attention over the visual grid as a heatmap
    lang = list(layout.language_positions)
    vis = list(layout.visual_positions)
    heat = weights[np.ix_(lang, vis)].mean(axis=0)
    side = model.config.vision.grid_side
    heat = heat.reshape(side, side)
    peak = heat.max()
    write_pgm(f"{args.out}.pgm", heat / peak if peak > 0 else heat)
    print(f"wrote {args.out}.csv and {args.out}.pgm "
          f"(layer {args.layer}, head {args.head}, scheme {scheme.value})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jointvl",
        description="joint vision-language model: data, training, evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, required=True)
    p.add_argument("--n-valid", type=int, required=True)
    p.add_argument("--n-test", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="run MLM+IRM pre-training")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint for a task")
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--head-only", action="store_true")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("eval", help="evaluate with bootstrap statistics")
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--compare", help="second checkpoint for pairwise p-values")
    p.add_argument("--split", default="test")
    p.add_argument("--n-boot", type=int, default=30)
    p.add_argument("--n-trials", type=int, default=100)
    p.add_argument("--max-len", type=int)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("generate", help="greedy-decode reports for a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("export-attn", help="export attention weights")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True, help="vocab.tsv of the corpus")
    p.add_argument("--image", required=True, help="input PGM image")
    p.add_argument("--report", required=True, help="report text")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--head", type=int, required=True)
    p.add_argument("--scheme", choices=[s.value for s in MaskScheme])
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=_cmd_export_attn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface for the pipeline.

Subcommands: gen-data, build-vocab, prepare, train, predict, evaluate,
stats, export-attention. Option precedence is flags > --config JSON file
> built-in defaults. Ablations are selected with --hint-mode
{none,classifier,generative,both} and --visual {on,off}; they only change
how the encoder input is assembled, never the model code path.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from .data import (FormatError, SyntheticConfig, atomic_write_bytes,
                   atomic_write_text, generate_synthetic, load_dataset,
                   load_hints, load_predictions, prepare_samples,
                   train_dev_split)
from .evaluation import evaluate, quantitative_stats, score_histogram
from .fusion import GENERATIVE_REPEAT
from .model import CheckpointError, ConvS2S, ModelConfig, load_checkpoint
from .training import DivergenceError, TrainConfig, predict, train
from .vocab import Vocabulary, build_vocab, normalize, tokenize

TRAIN_DEFAULTS = {
    "epochs": 30,
    "lr": 2.5e-4,
    "batch_size": 128,
    "embed": 768,
    "hidden": 512,
    "kernel_width": 3,
    "enc_layers": 4,
    "dec_layers": 4,
    "dropout_keep": 0.5,
    "hint_mode": "both",
    "visual": "off",
    "max_len": 256,
    "max_decode_len": 32,
    "dev_fraction": 0.1,
    "checkpoint_every": 0,
}


def _build_parser():
    parser = argparse.ArgumentParser(prog="convqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset with oracle hints")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--languages", default="en,vi,ja")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--corruption", type=float, default=0.1)
    p.add_argument("--patches", type=int, default=8)
    p.add_argument("--dim", type=int, default=32)

    p = sub.add_parser("build-vocab", help="build the shared vocabulary file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--hints")
    p.add_argument("--out", required=True)
    p.add_argument("--min-freq", type=int, default=1)

    p = sub.add_parser("prepare", help="emit combined sequences as JSON lines")
    p.add_argument("--dataset", required=True)
    p.add_argument("--hints")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hint-mode", choices=("none", "classifier", "generative", "both"),
                   default="both")
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--generative-repeat", type=int, default=GENERATIVE_REPEAT)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--hints")
    p.add_argument("--features")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", help="JSON file with defaults for the options below")
    for key in TRAIN_DEFAULTS:
        flag = "--" + key.replace("_", "-")
        if key in ("hint_mode",):
            p.add_argument(flag, choices=("none", "classifier", "generative", "both"))
        elif key in ("visual",):
            p.add_argument(flag, choices=("on", "off"))
        elif key in ("lr", "dropout_keep", "dev_fraction"):
            p.add_argument(flag, type=float)
        else:
            p.add_argument(flag, type=int)

    p = sub.add_parser("predict", help="greedy-decode a dataset with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--hints")
    p.add_argument("--features")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hint-mode", choices=("none", "classifier", "generative", "both"),
                   default="both")
    p.add_argument("--visual", choices=("on", "off"), default="off")
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--batch-size", type=int, default=64)

    p = sub.add_parser("evaluate", help="score predictions against gold answers")
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.add_argument("--histogram", help="also write per-language F1 histogram bins")

    p = sub.add_parser("stats", help="quantitative statistics of gold vs predicted answers")
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")

    p = sub.add_parser("export-attention", help="dump attention maps as CSV and PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--hints")
    p.add_argument("--features")
    p.add_argument("--vocab", required=True)
    p.add_argument("--sample-id", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--hint-mode", choices=("none", "classifier", "generative", "both"),
                   default="both")
    p.add_argument("--visual", choices=("on", "off"), default="off")
    p.add_argument("--max-len", type=int, default=256)
    return parser


def _merged_train_options(args):
    merged = dict(TRAIN_DEFAULTS)
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            overrides = json.load(fh)
        unknown = [k for k in overrides if k not in TRAIN_DEFAULTS]
        if unknown:
            raise ValueError(f"unknown config keys {unknown}; valid: {sorted(TRAIN_DEFAULTS)}")
        merged.update(overrides)
    for key in TRAIN_DEFAULTS:
        value = getattr(args, key)
        if value is not None:
            merged[key] = value
    return merged


def _require(path, what):
    if path is None:
        raise ValueError(f"missing required option for {what}")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _load_corpus(args, vocab, hint_mode, visual, max_len):
    samples = load_dataset(_require(args.dataset, "--dataset"))
    hints = {}
    if hint_mode != "none":
        hints = load_hints(_require(args.hints, "--hints"))
    feature_dir = None
    if visual == "on":
        feature_dir = _require(args.features, "--features")
    return samples, prepare_samples(samples, hints, vocab, feature_dir=feature_dir,
                                    hint_mode=hint_mode, max_len=max_len)


def _cmd_gen_data(args):
    config = SyntheticConfig(
        n_samples=args.n,
        languages=tuple(args.languages.split(",")),
        seed=args.seed,
        noise=args.noise,
        corruption=args.corruption,
        patches=args.patches,
        dim=args.dim,
    )
    os.makedirs(args.out, exist_ok=True)
    samples, _ = generate_synthetic(config, args.out)
    print(f"wrote {len(samples)} samples under {args.out}")
    return 0


def _cmd_build_vocab(args):
    samples = load_dataset(_require(args.dataset, "--dataset"))
    corpus = []
    for s in samples:
        corpus.append(tokenize(normalize(s.question), s.language))
        corpus.append(tokenize(normalize(s.answer), s.language))
    if args.hints:
        for h in load_hints(_require(args.hints, "--hints")).values():
            for text, _ in h.classifier_hints:
                corpus.append(tokenize(normalize(text)))
            if h.generative_hint:
                corpus.append(tokenize(normalize(h.generative_hint)))
    vocab = build_vocab(corpus, min_freq=args.min_freq)
    vocab.save(args.out)
    print(f"vocabulary of {len(vocab)} tokens written to {args.out}")
    return 0


def _cmd_prepare(args):
    vocab = Vocabulary.load(_require(args.vocab, "--vocab"))
    samples = load_dataset(_require(args.dataset, "--dataset"))
    hints = {}
    if args.hint_mode != "none" and args.hints:
        hints = load_hints(_require(args.hints, "--hints"))
    lines = []
    for s in samples:
        from .fusion import build_combined_sequence
        from .data import restrict_hints

        question = tokenize(normalize(s.question), s.language)
        combined = build_combined_sequence(
            question, restrict_hints(hints.get(s.sample_id), args.hint_mode), vocab,
            generative_repeat=args.generative_repeat, max_len=args.max_len,
        )
        lines.append(json.dumps({
            "sample_id": s.sample_id,
            "ids": combined.ids,
            "labels": combined.labels,
            "text": combined.text(),
        }, sort_keys=True, ensure_ascii=False))
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {len(lines)} combined sequences to {args.out}")
    return 0


def _cmd_train(args):
    options = _merged_train_options(args)
    vocab = Vocabulary.load(_require(args.vocab, "--vocab"))
    samples, encoded = _load_corpus(args, vocab, options["hint_mode"],
                                    options["visual"], options["max_len"])
    train_set, dev_set = train_dev_split(encoded, options["dev_fraction"], seed=args.seed)
    patches = 0 if encoded[0].visual is None else encoded[0].visual.shape[0]
    embed = options["embed"]
    if patches and encoded[0].visual.shape[1] != embed:
        raise ValueError(
            f"visual feature dim {encoded[0].visual.shape[1]} != embed dim {embed}"
        )
    model_config = ModelConfig(
        src_vocab=len(vocab),
        tgt_vocab=len(vocab),
        embed_dim=embed,
        hidden_units=options["hidden"],
        kernel_width=options["kernel_width"],
        encoder_layers=options["enc_layers"],
        decoder_layers=options["dec_layers"],
        dropout_keep=options["dropout_keep"],
        max_positions=options["max_len"] + patches,
        max_decode_len=options["max_decode_len"],
    )
    model = ConvS2S(model_config, seed=args.seed)
    train_config = TrainConfig(
        seed=args.seed,
        epochs=options["epochs"],
        learning_rate=options["lr"],
        batch_size=options["batch_size"],
        dropout_keep=options["dropout_keep"],
        checkpoint_every=options["checkpoint_every"],
    )
    log = train(model, train_set, dev_set, train_config, out_dir=args.out_dir)
    log_text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in log)
    atomic_write_text(os.path.join(args.out_dir, "train_log.jsonl"), log_text)
    with open(os.path.join(args.out_dir, "run_config.json.tmp"), "w", encoding="utf-8") as fh:
        json.dump({"model": asdict(model_config), "train": asdict(train_config),
                   "options": options}, fh, indent=2, sort_keys=True)
    os.replace(os.path.join(args.out_dir, "run_config.json.tmp"),
               os.path.join(args.out_dir, "run_config.json"))
    final = [r for r in log if r["split"] == "dev"][-1]
    print(f"trained {train_config.epochs} epochs; final dev loss {final['loss']:.6f}; "
          f"artifacts in {args.out_dir}")
    return 0


def _cmd_predict(args):
    vocab = Vocabulary.load(_require(args.vocab, "--vocab"))
    model = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    _, encoded = _load_corpus(args, vocab, args.hint_mode, args.visual, args.max_len)
    predictions = predict(model, encoded, vocab, batch_size=args.batch_size)
    from .data import save_predictions

    save_predictions(args.out, predictions)
    print(f"wrote {len(predictions)} predictions to {args.out}")
    return 0


def _aligned_eval_inputs(args):
    samples = load_dataset(_require(args.dataset, "--dataset"))
    predicted = load_predictions(_require(args.predictions, "--predictions"))
    missing = [s.sample_id for s in samples if s.sample_id not in predicted]
    if missing:
        raise ValueError(f"predictions missing for sample ids {missing[:5]}"
                         + ("..." if len(missing) > 5 else ""))
    ids = [s.sample_id for s in samples]
    langs = [s.language for s in samples]
    gold = [tokenize(normalize(s.answer), s.language).tokens for s in samples]
    pred = [tokenize(normalize(predicted[s.sample_id]), s.language).tokens for s in samples]
    return ids, langs, gold, pred


def _cmd_evaluate(args):
    ids, langs, gold, pred = _aligned_eval_inputs(args)
    report = evaluate(ids, pred, gold, langs)
    print(f"F1 {report.f1:.4f}  BLEU avg {report.bleu['average']:.4f}  "
          + "  ".join(f"BLEU-{n} {report.bleu[f'bleu_{n}']:.4f}" for n in range(1, 5)))
    if args.out:
        atomic_write_text(args.out, report.to_json() + "\n")
    if args.histogram:
        bins = score_histogram([row["f1"] for row in report.per_sample], langs)
        atomic_write_text(args.histogram,
                          json.dumps(bins, indent=2, sort_keys=True) + "\n")
    return 0


def _cmd_stats(args):
    _, langs, gold, pred = _aligned_eval_inputs(args)
    stats = quantitative_stats(gold, pred, langs)
    text = json.dumps(stats, indent=2, sort_keys=True)
    print(text)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    return 0


def write_pgm(path, weights):
    """Binary P5 grayscale image, intensity = round(255 * weight)."""
    height, width = weights.shape
    pixels = np.rint(np.clip(weights, 0.0, 1.0) * 255).astype(np.uint8)
    atomic_write_bytes(path, f"P5\n{width} {height}\n255\n".encode("ascii")
                       + pixels.tobytes())


def _cmd_export_attention(args):
    vocab = Vocabulary.load(_require(args.vocab, "--vocab"))
    model = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    samples, encoded = _load_corpus(args, vocab, args.hint_mode, args.visual, args.max_len)
    chosen = [e for e in encoded if e.sample_id == args.sample_id]
    if not chosen:
        raise ValueError(f"sample id {args.sample_id!r} not in {args.dataset}")
    sample = chosen[0]
    visual = None if sample.visual is None else sample.visual[None]
    enc = model.encode(np.asarray([sample.src_ids]), visual)
    decoded = model.greedy_decode(enc)[0]
    src_tokens = [vocab.token(i) for i in sample.src_ids]
    tgt_tokens = vocab.decode(decoded.token_ids)
    os.makedirs(args.out_dir, exist_ok=True)
    for layer in range(len(decoded.attention)):
        att = model.export_attention(decoded, src_tokens, tgt_tokens, layer)
        base = os.path.join(args.out_dir, f"{args.sample_id}_layer{layer}")
        csv = "\n".join(",".join(repr(float(v)) for v in row) for row in att.weights)
        atomic_write_text(f"{base}.csv", csv + "\n")
        write_pgm(f"{base}.pgm", att.weights)
        atomic_write_text(f"{base}.labels.json", json.dumps(
            {"source": att.src_labels, "target": att.tgt_labels},
            sort_keys=True, ensure_ascii=False) + "\n")
    print(f"wrote {len(decoded.attention)} attention layers for {args.sample_id} "
          f"to {args.out_dir}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "build-vocab": _cmd_build_vocab,
    "prepare": _cmd_prepare,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "evaluate": _cmd_evaluate,
    "stats": _cmd_stats,
    "export-attention": _cmd_export_attention,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return _COMMANDS[args.command](args)
    except (FormatError, CheckpointError, DivergenceError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points for every experiment stage.

Each subcommand reads an optional JSON config (see config.py), applies its
flags as overrides, runs one stage, and writes machine-readable delimited
text plus checkpoints.  Given the same inputs and --seed, every run is
bit-reproducible.
"""
from __future__ import annotations

import argparse
import shutil
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .analysis import layer_attention_profile, write_profile_csv
from .config import apply_overrides, load_config
from .decode import (DecodeHead, FinetuneConfig, ProbeConfig, Vocabulary,
                     build_word_sequences, eval_sequences, finetune_run,
                     linear_probe_run, prepare_sequence)
from .model import (Backbone, attention_cost_estimate, time_dense_attention,
                    time_criss_cross_attention)
from .pretrain import PretrainConfig, pretrain_run, zero_shot_masked_accuracy
from .rvq import RvqTrainConfig, rvq_train
from .signal import prepare_recording, preprocess
from .synth import SynthConfig, generate_dataset


def _load_run_config(args, overrides: dict):
    cfg = load_config(getattr(args, "config", None))
    staged = {k: v for k, v in overrides.items() if v is not None}
    return apply_overrides(cfg, staged) if staged else cfg


def _print(line: str) -> None:
    sys.stdout.write(line + "\n")


# ---------------------------------------------------------------- synth

def _cmd_synth(args) -> int:
    cfg = SynthConfig(n_subjects=args.subjects, channels=args.channels,
                      duration_s=args.duration_s,
                      sample_rate_hz=args.sample_rate_hz,
                      vocab_size=args.vocab_size,
                      words_per_minute=args.words_per_minute,
                      snr=args.snr, seed=args.seed)
    generate_dataset(cfg, args.out, d_emb=args.d_emb)
    n = len(list(dataio.recording_dirs(args.out)))
    _print(f"wrote {n} recordings to {args.out}")
    return 0


# ---------------------------------------------------------------- train-codec

def _cmd_train_codec(args) -> int:
    run = _load_run_config(args, {
        "codec.levels": args.levels, "codec.vocab": args.vocab,
        "codec.downsample": args.downsample, "codec.seed": args.seed,
    })
    corpus = []
    for rec, _subject in dataio.read_dataset(args.data):
        corpus.append(preprocess(rec, run.signal).data)
    codec = rvq_train(corpus, run.codec)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    dataio.save_codec(args.out, codec)
    _print(f"codec levels={codec.levels} vocab={codec.vocab} "
           f"downsample={codec.downsample} "
           f"final_mse={codec.training_mse[-1]:.6f} -> {args.out}")
    return 0


# ---------------------------------------------------------------- pretrain

def _out_run_dir(out: str) -> Path:
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    return out_path.parent


def _cmd_pretrain(args) -> int:
    run = _load_run_config(args, {
        "pretrain.sample_len_s": args.context_s,
        "pretrain.steps": args.steps, "pretrain.seed": args.seed,
        "pretrain.lr": args.lr,
        "pretrain.warmup_steps": args.warmup_steps,
    })
    codec = dataio.load_codec(args.codec)
    recs = list(dataio.read_dataset(args.data))
    run_dir = _out_run_dir(args.out)
    result = pretrain_run(recs, codec, run.model, run.pretrain, run_dir,
                          sig_cfg=run.signal,
                          data_fraction=args.data_fraction,
                          log_every=args.log_every)
    if Path(args.out).resolve() != Path(result.last_path).resolve():
        shutil.copyfile(result.last_path, args.out)
    _print(f"pretrained {run.pretrain.steps} steps, "
           f"final_loss={result.history[-1]['loss']:.4f} -> {args.out}")
    return 0


# ---------------------------------------------------------------- decoding

def _build_splits(recs, codec, c_max: int, sig_cfg, n_words: int):
    """Word sequences per recording, split by stimulus id."""
    splits = {"train": [], "val": [], "test": []}
    for rec, _subject in recs:
        prepared = prepare_recording(rec, sig_cfg)
        for seq in build_word_sequences(prepared, n_words=n_words,
                                        downsample=codec.downsample,
                                        sig_cfg=sig_cfg):
            ps = prepare_sequence(seq, rec.sensors, codec, c_max)
            splits[dataio.split_for_stimulus(seq.stimulus_id)].append(ps)
    return splits


def _dataset_vocab(data_dir, vocab_k: int) -> Vocabulary:
    words, emb = dataio.read_vocab(Path(data_dir) / "vocab.json")
    if vocab_k and vocab_k != len(words):
        raise ValueError(f"dataset vocabulary has {len(words)} words, "
                         f"--vocab-k asked for {vocab_k}")
    return Vocabulary(words=words, embeddings=emb)


def _restrict_train(splits: dict, fraction: float) -> dict:
    if fraction >= 1.0:
        return splits
    keep = max(1, int(np.floor(len(splits["train"]) * fraction)))
    return {**splits, "train": splits["train"][:keep]}


def _cmd_finetune(args) -> int:
    run = _load_run_config(args, {
        "finetune.seed": args.seed, "finetune.max_epochs": args.max_epochs,
        "finetune.patience": args.patience, "finetune.k": args.k,
    })
    if args.init == "random":
        if not args.codec:
            raise SystemExit("--init random requires --codec CKPT")
        codec = dataio.load_codec(args.codec)
        bb = Backbone(run.model, seed=run.finetune.seed)
    else:
        bb, codec, _extra, _state = dataio.load_model(args.init)
    vocab = _dataset_vocab(args.data, args.vocab_k)
    recs = list(dataio.read_dataset(args.data))
    splits = _build_splits(recs, codec, bb.cfg.c_max, run.signal,
                           run.finetune.n_words)
    splits = _restrict_train(splits, args.data_fraction)
    run_dir = _out_run_dir(args.out)
    result = finetune_run(bb, codec, splits, vocab, run.finetune, run_dir)
    if Path(args.out).resolve() != Path(result.best_path).resolve():
        shutil.copyfile(result.best_path, args.out)
    _print(f"finetune best_epoch={result.best_epoch} "
           f"val_acc={result.best_val_acc:.4f} test_acc={result.test_acc:.4f} "
           f"-> {args.out}")
    return 0


def _cmd_probe(args) -> int:
    run = _load_run_config(args, {})
    bb, codec, _extra, _state = dataio.load_model(args.init)
    vocab = _dataset_vocab(args.data, args.vocab_k)
    recs = list(dataio.read_dataset(args.data))
    splits = _build_splits(recs, codec, bb.cfg.c_max, run.signal, args.n_words)
    pcfg = ProbeConfig(epochs=args.epochs, k=args.k, seed=args.seed)
    result = linear_probe_run(bb, codec, splits, vocab, pcfg, mode=args.mode,
                              context_s=args.context_s)
    _print(f"probe mode={args.mode} best_epoch={result.best_epoch} "
           f"val_acc={result.best_val_acc:.4f} test_acc={result.test_acc:.4f}")
    return 0


def _load_finetuned(path):
    bb, codec, leftovers, _state = dataio.load_model(
        path, extra_prefixes=("decode/",))
    if not leftovers:
        raise SystemExit(f"{path}: checkpoint holds no decode head")
    return bb, codec, DecodeHead.from_tensors(leftovers)


def _cmd_eval(args) -> int:
    if args.metric != "topk-balanced":
        raise SystemExit(f"unknown metric {args.metric!r}")
    run = _load_run_config(args, {})
    bb, codec, head = _load_finetuned(args.ckpt)
    vocab = _dataset_vocab(args.data, args.vocab_k)
    recs = list(dataio.read_dataset(args.data))
    splits = _build_splits(recs, codec, bb.cfg.c_max, run.signal, args.n_words)
    part = splits[args.split]
    if not part:
        raise SystemExit(f"no sequences in split {args.split!r}")
    loss, acc = eval_sequences(bb, codec, head, part, vocab, k=args.k)
    _print(f"split={args.split} n={len(part)} loss={loss:.6f} "
           f"topk_balanced_acc k={args.k}: {acc:.4f}")
    return 0


def _cmd_zeroshot(args) -> int:
    run = _load_run_config(args, {"pretrain.sample_len_s": args.context_s})
    bb, codec, _extra, _state = dataio.load_model(args.ckpt)
    recs = list(dataio.read_dataset(args.data))
    pcfg = run.pretrain
    acc, over, n = zero_shot_masked_accuracy(bb, codec, recs, pcfg,
                                             sig_cfg=run.signal,
                                             max_windows=args.max_windows)
    _print(f"context_s={pcfg.sample_len_s} n_predictions={n} "
           f"accuracy={acc:.6f} over_chance={over:.4f}")
    return 0


# ---------------------------------------------------------------- analysis

def _cmd_analyze(args) -> int:
    run = _load_run_config(args, {
        "analysis.segments": args.segments, "analysis.seeds": args.seeds,
        "pretrain.sample_len_s": args.context_s,
    })
    bb, codec, _extra, _state = dataio.load_model(args.ckpt)
    recs = list(dataio.read_dataset(args.data))
    profiles = layer_attention_profile(
        bb, codec, recs, run.pretrain.sample_len_s,
        n_segments=run.analysis.segments, seed=args.seed,
        sig_cfg=run.signal, n_seeds=run.analysis.seeds)
    out = args.out or "attention_profile.csv"
    write_profile_csv(out, profiles)
    for p in profiles:
        _print(f"layer={p.layer} mad_seconds={p.mad_seconds:.4f} "
               f"entropy_nats={p.entropy_nats:.4f} stderr={p.stderr:.4f}")
    _print(f"table -> {out}")
    return 0


def _cmd_bench_attention(args) -> int:
    flops = attention_cost_estimate(args.channels, args.tokens, args.mode,
                                    args.d_model)
    timer = (time_dense_attention if args.mode == "dense"
             else time_criss_cross_attention)
    seconds = timer(args.channels, args.tokens, d_model=args.d_model,
                    reps=args.reps, seed=args.seed)
    _print(f"mode={args.mode} channels={args.channels} tokens={args.tokens} "
           f"d_model={args.d_model} seconds={seconds:.6f} flops={flops:.6g}")
    return 0


# ---------------------------------------------------------------- plotting

def _read_csv_rows(path):
    import csv
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise SystemExit(f"{path}: empty metrics file")
    return rows[0], rows[1:]


def _emit_table(header, rows, out) -> None:
    import csv
    if out:
        with open(out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(rows)
        _print(f"table -> {out}")
    else:
        _print(",".join(header))
        for r in rows:
            _print(",".join(str(x) for x in r))


def _figure_generalisation(header, rows):
    """Finetune metrics -> one row per epoch with train/val columns."""
    idx = {name: i for i, name in enumerate(header)}
    for need in ("epoch", "split", "loss"):
        if need not in idx:
            raise SystemExit(f"metrics file lacks column {need!r}")
    acc_col = "topk_balanced_acc" if "topk_balanced_acc" in idx else None
    epochs = {}
    for r in rows:
        epoch, split = r[idx["epoch"]], r[idx["split"]]
        slot = epochs.setdefault(epoch, {"train_loss": "", "val_loss": "",
                                         "val_acc": ""})
        if split == "train":
            slot["train_loss"] = r[idx["loss"]]
        elif split == "val":
            slot["val_loss"] = r[idx["loss"]]
            if acc_col:
                slot["val_acc"] = r[idx[acc_col]]
    out_rows = [[e, s["train_loss"], s["val_loss"], s["val_acc"]]
                for e, s in sorted(epochs.items(), key=lambda kv: int(kv[0]))]
    return ["epoch", "train_loss", "val_loss", "val_acc"], out_rows


def _figure_context(header, rows):
    """Any table with a context_s column -> same table sorted by context."""
    if "context_s" not in header:
        raise SystemExit("metrics file lacks column 'context_s'")
    col = header.index("context_s")
    return header, sorted(rows, key=lambda r: float(r[col]))


def _figure_attention(header, rows):
    """Attention profile -> per-layer rows ordered by layer."""
    for need in ("layer", "mad_seconds", "entropy_nats", "stderr"):
        if need not in header:
            raise SystemExit(f"metrics file lacks column {need!r}")
    col = header.index("layer")
    return header, sorted(rows, key=lambda r: int(r[col]))


def _cmd_plot_data(args) -> int:
    header, rows = _read_csv_rows(args.metrics)
    fig = {"generalisation": _figure_generalisation,
           "context": _figure_context,
           "attention": _figure_attention}[args.figure]
    out_header, out_rows = fig(header, rows)
    _emit_table(out_header, out_rows, args.out)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="megctx",
                                description="long-context neural pre-training "
                                            "pipeline, desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", default=None, help="JSON config file")
        return sp

    sp = add("synth", _cmd_synth, help="generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--subjects", type=int, default=2)
    sp.add_argument("--channels", type=int, default=16)
    sp.add_argument("--duration-s", type=float, default=480.0)
    sp.add_argument("--sample-rate-hz", type=float, default=250.0)
    sp.add_argument("--vocab-size", type=int, default=50)
    sp.add_argument("--words-per-minute", type=float, default=20.0)
    sp.add_argument("--snr", type=float, default=1.0)
    sp.add_argument("--d-emb", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("train-codec", _cmd_train_codec, help="fit the tokenizer")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--levels", type=int, default=None)
    sp.add_argument("--vocab", type=int, default=None)
    sp.add_argument("--downsample", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)

    sp = add("pretrain", _cmd_pretrain, help="masked-token pre-training")
    sp.add_argument("--data", required=True)
    sp.add_argument("--codec", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--context-s", type=float, default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--warmup-steps", type=int, default=None)
    sp.add_argument("--data-fraction", type=float, default=1.0)
    sp.add_argument("--log-every", type=int, default=1)

    sp = add("finetune", _cmd_finetune, help="contextual word decoding")
    sp.add_argument("--data", required=True)
    sp.add_argument("--init", required=True,
                    help="checkpoint path, or 'random'")
    sp.add_argument("--codec", default=None,
                    help="codec checkpoint (required with --init random)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--vocab-k", type=int, default=0)
    sp.add_argument("--data-fraction", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--max-epochs", type=int, default=None)
    sp.add_argument("--patience", type=int, default=None)
    sp.add_argument("--k", type=int, default=None)

    sp = add("probe", _cmd_probe, help="linear probe on frozen features")
    sp.add_argument("--data", required=True)
    sp.add_argument("--init", required=True)
    sp.add_argument("--mode", choices=["full", "matched"], default="full")
    sp.add_argument("--context-s", type=float, default=None)
    sp.add_argument("--vocab-k", type=int, default=0)
    sp.add_argument("--n-words", type=int, default=50)
    sp.add_argument("--epochs", type=int, default=60)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("eval", _cmd_eval, help="retrieval metrics for a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--metric", default="topk-balanced")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--split", choices=["train", "val", "test"],
                    default="test")
    sp.add_argument("--vocab-k", type=int, default=0)
    sp.add_argument("--n-words", type=int, default=50)

    sp = add("zeroshot", _cmd_zeroshot, help="central-block masked accuracy")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--context-s", type=float, default=None)
    sp.add_argument("--max-windows", type=int, default=64)

    sp = add("analyze", _cmd_analyze, help="attention distance/entropy table")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--segments", type=int, default=None)
    sp.add_argument("--seeds", type=int, default=None)
    sp.add_argument("--context-s", type=float, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)

    sp = add("bench-attention", _cmd_bench_attention,
             help="attention sub-layer wall time and analytic flops")
    sp.add_argument("--channels", type=int, required=True)
    sp.add_argument("--tokens", type=int, required=True)
    sp.add_argument("--mode", choices=["dense", "factorized"], required=True)
    sp.add_argument("--d-model", type=int, default=32)
    sp.add_argument("--reps", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("plot-data", _cmd_plot_data,
             help="reshape metrics files into plot-ready tables")
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--figure",
                    choices=["generalisation", "context", "attention"],
                    required=True)
    sp.add_argument("--out", default=None)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())

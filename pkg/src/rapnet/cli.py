"""Command-line entry point: data generation, training, evaluation,
ablation, attention export and gradient self-verification.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from . import traineval as TE
from .data import CorpusError, GenConfig, build_vocab, gen_synthetic, load_corpus, save_corpus
from .mcan import AblationFlags
from .model import Model
from .tensor import grad_check
from .traineval import TrainConfig


class CliError(ValueError):
    pass


def _flags_from_args(args) -> AblationFlags:
    return AblationFlags(
        inter_attention=not args.no_inter_attention,
        intra_attention=not args.no_intra_attention,
        highway_encoder=not args.no_highway,
        dynamic_pooling=not args.no_dynamic_pooling,
        use_mcan=not args.no_mcan,
        use_knowledge=not args.no_knowledge,
    )


def _add_model_flags(p):
    p.add_argument("--model", default="rapnet",
                   choices=["rapnet", "dual_encoder", "hred"])
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subtask", type=int, default=1, choices=[1, 3, 4])
    p.add_argument("--candidate-pool", default="cells", choices=["cells", "hiddens"])
    p.add_argument("--no-inter-attention", action="store_true")
    p.add_argument("--no-intra-attention", action="store_true")
    p.add_argument("--no-highway", action="store_true")
    p.add_argument("--no-dynamic-pooling", action="store_true")
    p.add_argument("--no-mcan", action="store_true")
    p.add_argument("--no-knowledge", action="store_true")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel evaluation workers")


def _run_dir(out: str, seed: int) -> Path:
    path = Path(out) / f"run-{time.strftime('%Y%m%d-%H%M%S')}-{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(model_kind=args.model, flags=_flags_from_args(args),
                       lr=args.lr, epochs=args.epochs, seed=args.seed,
                       e=args.embed_dim, h=args.hidden, subtask=args.subtask,
                       candidate_pool=args.candidate_pool, jobs=args.jobs)


def _config_snapshot(args, extra=None) -> dict:
    snap = {k: v for k, v in vars(args).items() if k not in ("func", "out")}
    if extra:
        snap.update(extra)
    return snap


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = (("train", args.n_train, args.seed),
              ("dev", args.n_dev, args.seed + 1),
              ("test", args.n_test, args.seed + 2))
    for name, count, seed in splits:
        cfg = GenConfig(n_dialogues=count, vocab_size=args.vocab_size,
                        k_candidates=args.candidates, subtask=args.subtask,
                        with_knowledge=args.with_knowledge, seed=seed)
        corpus = gen_synthetic(cfg)
        save_corpus(corpus, out / f"{name}.jsonl")
        # reload to exercise the validator on everything we emit
        load_corpus(out / f"{name}.jsonl", args.subtask)
    manifest = _config_snapshot(args)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"wrote {', '.join(s[0] + '.jsonl' for s in splits)} and manifest.json to {out}")
    return 0


def cmd_train(args) -> int:
    train_corpus = load_corpus(args.train, args.subtask)
    dev_corpus = load_corpus(args.dev, args.subtask)
    vocab = build_vocab(train_corpus, min_count=args.min_count)
    cfg = _train_cfg(args)
    run_dir = _run_dir(args.out, args.seed)
    with open(run_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(_config_snapshot(args), fh, indent=2, sort_keys=True)
    result = TE.train(cfg, train_corpus, dev_corpus, vocab)
    result.model.vocab = vocab
    result.model.save(run_dir / "checkpoint.bin")
    TE.write_history(result.history, run_dir / "history.jsonl")
    if result.history:
        from .viz import render_history
        render_history(result.history, run_dir / "training_curves.png")
        last = result.history[result.best_epoch - 1]
        print(f"best epoch {result.best_epoch}: dev_avg={last['dev_avg']:.4f} "
              f"dev_mrr={last['dev_mrr']:.4f} dev_r@10={last['dev_r_at_10']:.4f}")
    print(f"artifacts in {run_dir}")
    return 0


def cmd_eval(args) -> int:
    model = Model.load(args.checkpoint)
    if model.vocab is None:
        raise CliError("checkpoint carries no vocabulary")
    corpus = load_corpus(args.corpus, args.subtask)
    tau = "auto" if args.tau == "auto" else float(args.tau)
    report = TE.evaluate(model, corpus, model.vocab, args.subtask,
                         tau=tau, jobs=args.jobs)
    run_dir = _run_dir(args.out, 0)
    with open(run_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=True)
    for key, value in sorted(report.summary().items()):
        print(f"{key}: {value:.4f}" if isinstance(value, float) else f"{key}: {value}")
    print(f"artifacts in {run_dir}")
    return 0


def cmd_ablate(args) -> int:
    train_corpus = load_corpus(args.train, args.subtask)
    dev_corpus = load_corpus(args.dev, args.subtask)
    vocab = build_vocab(train_corpus, min_count=args.min_count)
    cfg = replace(_train_cfg(args), model_kind="rapnet")
    run_dir = _run_dir(args.out, args.seed)
    with open(run_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(_config_snapshot(args), fh, indent=2, sort_keys=True)
    rows = TE.run_ablation(cfg, train_corpus, dev_corpus, vocab)
    table = TE.ablation_table(rows)
    with open(run_dir / "ablation.md", "w", encoding="utf-8") as fh:
        fh.write(table)
    with open(run_dir / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump({name: report.summary() for name, report, _ in rows},
                  fh, indent=2, sort_keys=True)
    from .viz import render_ablation
    render_ablation(rows, run_dir / "ablation.png")
    print(table, end="")
    print(f"artifacts in {run_dir}")
    return 0


def cmd_dump_attention(args) -> int:
    model = Model.load(args.checkpoint)
    if model.vocab is None:
        raise CliError("checkpoint carries no vocabulary")
    corpus = load_corpus(args.corpus, args.subtask)
    if not 0 <= args.index < len(corpus):
        raise CliError(f"--index {args.index} out of range (corpus has {len(corpus)})")
    dialogue = corpus[args.index]
    if not 0 <= args.candidate < len(dialogue.candidates):
        raise CliError(f"--candidate {args.candidate} out of range")
    run_dir = _run_dir(args.out, 0)
    outputs = TE.dump_attention(model, dialogue, args.candidate, model.vocab,
                                str(run_dir / "attention"))
    for path in outputs:
        print(path)
    return 0


def build_gradcheck_fixture(e: int = 4, h: int = 3):
    """Toy RAP-Net instance: 2 utterances x 3 tokens, 2 candidates x 3 tokens."""
    corpus = [D.Dialogue(
        "toy",
        [(1, ["<speaker1>", "alpha", "beta"]), (2, ["<speaker2>", "gamma", "alpha"])],
        [["beta", "alpha", "delta"], ["gamma", "delta", "delta"]],
        [1, 0])]
    vocab = build_vocab(corpus)
    model = Model.create("rapnet", seed=7, vocab_size=len(vocab), e=e, h=h)
    # redraw at a larger scale: the training-time init (+-0.1) leaves many
    # gradients below the finite-difference noise floor
    rng = np.random.default_rng(11)
    for p in model.named().values():
        p.data = rng.uniform(-0.8, 0.8, size=p.data.shape)
    inst = D.encode_dialogue(corpus[0], vocab, use_knowledge=False)
    return model, inst


def cmd_grad_check(args) -> int:
    from .model import bce_loss
    model, inst = build_gradcheck_fixture()

    def loss_fn(_params):
        return bce_loss(model.forward_probs(inst), inst.labels)

    start = time.time()
    err = grad_check(loss_fn, model.named(), eps=args.eps)
    elapsed = time.time() - start
    print(f"max relative error: {err:.3e} over "
          f"{sum(p.data.size for p in model.named().values())} parameter elements "
          f"({elapsed:.1f}s)")
    if not np.isfinite(err) or err >= args.tolerance:
        print(f"FAIL: exceeds tolerance {args.tolerance:g}", file=sys.stderr)
        return 2
    print(f"PASS: below tolerance {args.tolerance:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rapnet")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic train/dev/test splits")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-dev", type=int, default=200)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--vocab-size", type=int, default=200)
    p.add_argument("--candidates", type=int, default=10)
    p.add_argument("--subtask", type=int, default=1, choices=[1, 3, 4])
    p.add_argument("--with-knowledge", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=1)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--subtask", type=int, default=1, choices=[1, 3, 4])
    p.add_argument("--tau", default="auto")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the five ablation variants")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=1)
    _add_model_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-attention", help="export attention feature matrices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--subtask", type=int, default=1, choices=[1, 3, 4])
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--candidate", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("grad-check", help="verify gradients on a toy instance")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CorpusError, CliError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TE.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

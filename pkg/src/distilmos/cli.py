"""Command-line entry point: ``distilmos <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import cca as cca_mod
from .config import load_run_config, write_run_config
from .data import Utterance, generate_synthetic_corpus, file_sha256, load_manifest, save_manifest
from .errors import ConfigError, DataError, DistilMOSError, MissingCodebooks
from .evaluation import evaluate, format_reports, write_predictions
from .model import load_checkpoint, predict
from .ssl_backend import build_backend
from .tokenizer import SWEEP_KS, fit_codebooks, iter_layer_stacks, load_codebooks, quantization_error, save_codebooks
from .trainer import Trainer

logger = logging.getLogger("distilmos")


def _overrides(args, mapping):
    out = {}
    for attr, (section, key) in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out.setdefault(section, {})[key] = value
    return out


def _load(args):
    cfg = load_run_config(
        args.config,
        _overrides(
            args,
            {
                "k": ("tokenizer", "k"),
                "head_mode": ("training", "head_mode"),
                "steps": ("training", "steps"),
                "seed": ("training", "seed"),
                "run_dir": ("paths", "run_dir"),
                "manifest": ("paths", "manifest"),
                "codebooks": ("paths", "codebooks"),
            },
        ),
    )
    return cfg


def _manifest(path, cfg):
    return load_manifest(path, sample_rate=cfg.backend.sample_rate).load_audio()


def _fit_tokens(cfg, out_path):
    manifest = _manifest(cfg.paths.manifest, cfg)
    backend = build_backend(cfg.backend, cfg.backend_seed)
    train = manifest.split("train")
    books = fit_codebooks(
        iter_layer_stacks(train, backend), cfg.tokenizer.k, cfg.tokenizer.batch_size, cfg.tokenizer.seed
    )
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    save_codebooks(books, out_path)
    errors = []
    stacks = list(iter_layer_stacks(train, backend))
    for cb in books:
        frames = np.concatenate([s.features[cb.layer_index - 1].numpy() for s in stacks])
        errors.append(quantization_error(cb.centroids, frames))
    return books, errors


def cmd_make_synthetic(args):
    manifest = generate_synthetic_corpus(args.n_utts, args.seed)
    out = save_manifest(manifest, args.out)
    print(f"wrote {len(manifest.entries)} utterances to {out}")


def cmd_fit_tokens(args):
    cfg = _load(args)
    books, errors = _fit_tokens(cfg, cfg.paths.codebooks)
    print(f"wrote {len(books)} codebooks (k={cfg.tokenizer.k}) to {cfg.paths.codebooks}")
    print("layer|k|frames|quantization_error")
    for cb, err in zip(books, errors):
        print(f"{cb.layer_index}|{cb.k}|{cb.n_frames_seen}|{err:.6f}")


def _train(cfg):
    manifest = _manifest(cfg.paths.manifest, cfg)
    backend = build_backend(cfg.backend, cfg.backend_seed)
    books, digest = None, ""
    if cfg.training.head_mode == "token_prediction":
        if not Path(cfg.paths.codebooks).is_file():
            raise MissingCodebooks(
                f"head_mode=token_prediction needs codebooks; none at {cfg.paths.codebooks} (run fit-tokens first)"
            )
        books = load_codebooks(cfg.paths.codebooks)
        digest = file_sha256(cfg.paths.codebooks)
    return manifest, backend, books, digest


def cmd_train(args):
    cfg = _load(args)
    manifest, backend, books, digest = _train(cfg)
    run_dir = Path(cfg.paths.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_run_config(cfg, run_dir / "config.ini")
    trainer = Trainer(cfg.training, cfg.model, manifest, backend, run_dir, books, digest, resume=args.resume)
    if args.resume:
        print(f"resuming at step {trainer.step}")
    result = trainer.run(max_steps=args.max_steps)
    print(f"finished at step {trainer.step}; best checkpoint {result.best_checkpoint} "
          f"(step {result.best_step}, valid SRCC {result.best_valid_srcc:.4f})")


def cmd_evaluate(args):
    manifest = load_manifest(args.manifest, sample_rate=args.sample_rate)
    digest = file_sha256(args.codebooks) if args.codebooks else None
    split = None if args.split == "all" else args.split
    if args.zero_shot and args.split == "test" and not manifest.split("test"):
        split = None
    reports, preds = evaluate(
        args.checkpoint, manifest, split=split, system=args.system_level and not args.zero_shot, codebook_sha256=digest
    )
    title = f"{'zero-shot' if args.zero_shot else 'in-domain'} {manifest.name} ({split or 'all'})"
    text = format_reports(reports, title)
    print(text)
    report = args.report
    ckpt = Path(args.checkpoint)
    if report is None and ckpt.parent.name == "checkpoints":
        # keep reports next to the run that produced the checkpoint
        reports_dir = ckpt.parent.parent / "reports"
        reports_dir.mkdir(exist_ok=True)
        report = reports_dir / f"{ckpt.stem}_{manifest.name}_{split or 'all'}.txt"
    if report:
        Path(report).write_text(text + "\n", encoding="utf-8")
    if args.predictions:
        write_predictions(preds, args.predictions)
    if args.plot:
        plot_scatter(preds, args.plot, title)


def cmd_sweep_k(args):
    cfg = _load(args)
    ks = [int(k) for k in args.ks.split(",")] if args.ks else list(SWEEP_KS)
    base = Path(cfg.paths.run_dir)
    rows = []
    for k in ks:
        sub = load_run_config(
            args.config,
            {
                "tokenizer": {"k": k},
                "training": {"head_mode": "token_prediction", "steps": args.steps},
                "paths": {"run_dir": str(base / f"k{k}"), "codebooks": str(base / f"k{k}" / "codebooks.dmkm")},
            },
        )
        _fit_tokens(sub, sub.paths.codebooks)
        manifest, backend, books, digest = _train(sub)
        result = Trainer(sub.training, sub.model, manifest, backend, sub.paths.run_dir, books, digest).run()
        reports, _ = evaluate(str(result.best_checkpoint), manifest, split="test", system=True)
        rows.append((k, reports[0].srcc, reports[1].srcc))
    lines = ["k|utterance_srcc|system_srcc"]
    for k, u, s in rows:
        lines.append(f"{k}|{_num(u)}|{_num(s)}")
    table = "\n".join(lines) + "\n"
    print(table, end="")
    (base / "sweep_k.txt").write_text(table, encoding="utf-8")
    if args.plot:
        plot_sweep(rows, args.plot)


def _num(v):
    return "undefined" if v is None else f"{v:.4f}"


def cmd_analyze_cca(args):
    cfg = _load(args)
    manifest = _manifest(cfg.paths.manifest, cfg)
    backend = build_backend(cfg.backend, cfg.backend_seed)
    checkpoints = {}
    for item in args.checkpoint:
        tag, _, path = item.partition("=")
        if not path:
            raise ConfigError(f"--checkpoint expects tag=path, got {item!r}")
        checkpoints[tag] = path
    split = None if args.split == "all" else args.split
    curves = cca_mod.analyze(
        checkpoints, backend, manifest, split=split, ssl_mos_checkpoint=args.ssl_mos_checkpoint, summary=args.summary
    )
    table = cca_mod.format_curves(curves)
    print(table, end="")
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    if args.plot:
        plot_curves(curves, args.plot)


def cmd_predict(args):
    model, backend, _ = load_checkpoint(args.checkpoint, inference_only=True)
    if args.manifest:
        manifest = load_manifest(args.manifest, sample_rate=backend.spec.sample_rate).load_audio()
        utts = [manifest.by_id()[args.audio]] if args.audio in manifest.by_id() else None
        if utts is None:
            raise DataError(f"{args.audio!r} not in {args.manifest}")
    else:
        from .data import _read_audio

        wav = _read_audio(Path(args.audio).name, Path(args.audio).parent, backend.spec.sample_rate, {})
        utts = [Utterance("input", args.audio, "-", 1.0, "test", wav)]
    print(f"{float(predict(model, backend, utts)[0]):.4f}")


def cmd_plot(args):
    lines = Path(args.table).read_text(encoding="utf-8").strip().splitlines()
    header = lines[0].split("|")
    data = np.array([[float(x) if x != "undefined" else np.nan for x in row.split("|")] for row in lines[1:]])
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for j, name in enumerate(header[1:], start=1):
        ax.plot(data[:, 0], data[:, j], marker="o", label=name)
    ax.set_xlabel(header[0])
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out)
    print(f"wrote {args.out}")


def plot_sweep(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ks = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ks, [np.nan if r[1] is None else r[1] for r in rows], marker="o", label="utterance SRCC")
    ax.plot(ks, [np.nan if r[2] is None else r[2] for r in rows], marker="s", label="system SRCC")
    ax.set_xlabel("k")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)


def plot_scatter(preds, path, title=""):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(preds.target, preds.predicted, s=12)
    ax.set_xlabel("target MOS")
    ax.set_ylabel("predicted MOS")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)


def plot_curves(curves, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for c in curves:
        ax.plot(np.arange(1, len(c.values) + 1), c.values, marker="o", label=c.model_tag)
    ax.set_xlabel("pretrained layer")
    ax.set_ylabel("mean CCA")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)


def build_parser():
    parser = argparse.ArgumentParser(prog="distilmos", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True)
        p.add_argument("--manifest")
        p.add_argument("--codebooks")
        p.add_argument("--run-dir", dest="run_dir")
        return p

    p = sub.add_parser("make-synthetic", help="write a synthetic corpus + manifest")
    p.add_argument("--n-utts", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_synthetic)

    p = with_config(sub.add_parser("fit-tokens", help="fit per-layer k-means codebooks"))
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_fit_tokens)

    p = with_config(sub.add_parser("train", help="train one model"))
    p.add_argument("--head-mode", dest="head_mode", choices=("token_prediction", "none", "mse_distillation"))
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--max-steps", type=int, help="stop after this many steps (the run stays resumable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics for a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test", "all"))
    p.add_argument("--system-level", action="store_true")
    p.add_argument("--zero-shot", action="store_true", help="cross-corpus: utterance level only")
    p.add_argument("--codebooks", help="verify the checkpoint was trained against this codebook file")
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--predictions", help="write the full prediction set here")
    p.add_argument("--report", help="write the report here (default: <run>/reports/ next to the checkpoint)")
    p.add_argument("--plot", help="scatter plot of predicted vs target MOS")
    p.set_defaults(func=cmd_evaluate)

    p = with_config(sub.add_parser("sweep-k", help="train/evaluate over several cluster counts"))
    p.add_argument("--ks", help="comma-separated k values (default 50,...,300)")
    p.add_argument("--steps", type=int)
    p.add_argument("--plot")
    p.set_defaults(func=cmd_sweep_k)

    p = with_config(sub.add_parser("analyze-cca", help="layer-wise CCA curves"))
    p.add_argument("--checkpoint", action="append", required=True, help="tag=path, repeatable")
    p.add_argument("--ssl-mos-checkpoint")
    p.add_argument("--split", default="test", choices=("train", "valid", "test", "all"))
    p.add_argument("--summary", default="mean", choices=("mean", "top1"))
    p.add_argument("--out")
    p.add_argument("--plot")
    p.set_defaults(func=cmd_analyze_cca)

    p = sub.add_parser("predict", help="MOS for one audio file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("audio", help="wav path, or an utterance id with --manifest")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("plot", help="line plot of a delimited table (first column is x)")
    p.add_argument("table")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except DistilMOSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

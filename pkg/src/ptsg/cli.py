"""Command-line entry point.

Exit codes: 0 success, 1 data or validation failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evalkit, model
from .dataio import (
    DISTRIBUTIONS, CorpusError, GenConfig, generate_synthetic, load_corpus,
    load_pseudo_labels, save_corpus, save_pseudo_labels, simulate_partial_labels, split_corpus,
)
from .losses import ABLATIONS, LOSS_NAMES
from .trainer import (
    STAGE2_MODELS, LabelConfig, TrainConfig, TrainingDiverged, export_pseudo_labels, infer_explicit,
    pseudo_label_stats, run_two_stage, train_explicit, train_implicit,
)

log = logging.getLogger("ptsg")

# robustness rows: (tag, distribution, clip seconds, label seed)
ROBUSTNESS_ROWS = [
    ("uniform-1", "uniform", 0.0, 0),
    ("uniform-2", "uniform", 0.0, 1),
    ("uniform-3", "uniform", 0.0, 2),
    ("gaussian", "gaussian", 0.0, 0),
    ("2s", "uniform", 2.0, 0),
    ("3s", "uniform", 3.0, 0),
    ("4s", "uniform", 4.0, 0),
]


# ---------------------------------------------------------------------------
# argument helpers


def _flags(text: str) -> tuple[str, ...]:
    names = tuple(x.strip() for x in text.split(",") if x.strip())
    bad = [n for n in names if n not in LOSS_NAMES]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"invalid loss flags {text!r}; choose from {','.join(LOSS_NAMES)}")
    return names


def _thresholds(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid thresholds {text!r}") from None
    if not vals or any(not 0 < v < 1 for v in vals):
        raise argparse.ArgumentTypeError("thresholds must lie in (0, 1)")
    return vals


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if getattr(args, "config", None) else TrainConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        over["epochs"] = args.epochs
    if getattr(args, "explicit_epochs", None) is not None:
        over["explicit_epochs"] = args.explicit_epochs
    if getattr(args, "flags", None) is not None:
        over["losses"] = args.flags
    cfg = replace(cfg, **over)
    cfg.validate()
    return cfg


def _add_config(p, flags=True, explicit=False):
    p.add_argument("--config", type=Path, help="JSON config file; keys are TrainConfig field names")
    p.add_argument("--seed", type=int, help="training seed (overrides the config)")
    p.add_argument("--epochs", type=int, help="implicit-stage epochs (overrides the config)")
    if explicit:
        p.add_argument("--explicit-epochs", type=int, help="explicit-stage epochs (overrides the config)")
    if flags:
        p.add_argument("--flags", type=_flags,
                       help="comma-separated losses to enable from raml,raun,erml,erun (default: all)")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    cfg = GenConfig(num_samples=args.samples, T=args.frames, dim_video=args.dim_video,
                    dim_query=args.dim_query, dim_sentence=args.dim_sentence, n_clusters=args.clusters,
                    event_len=(args.event_min, args.event_max), noise=args.noise, num_tokens=args.tokens,
                    fps=args.fps, seed=args.seed, world_seed=args.world_seed)
    corpus = generate_synthetic(cfg)
    if args.holdout:
        train, test = split_corpus(corpus, args.holdout)
        save_corpus(train, args.out / "train")
        save_corpus(test, args.out / "test")
        print(f"wrote {len(train)} train / {len(test)} test samples under {args.out}")
    else:
        save_corpus(corpus, args.out)
        print(f"wrote {len(corpus)} samples to {args.out}")


def cmd_label(args):
    corpus = simulate_partial_labels(load_corpus(args.corpus), args.dist, args.dur, args.seed)
    save_corpus(corpus, args.out)
    print(f"labelled {len(corpus)} samples ({args.dist}, {args.dur:g}s) -> {args.out}")


def _dims_meta(corpus, cfg):
    dv, dq, _ = corpus.dims()
    return model.dims_to_meta(model.ModelDims(dv, dq, cfg.dim, cfg.hidden, cfg.bins))


def cmd_train_implicit(args):
    cfg = _train_config(args)
    corpus = load_corpus(args.corpus)
    params, tlog = train_implicit(corpus, cfg, track=not args.no_track)
    model.save_checkpoint(args.out, params, {"kind": "implicit", "dims": _dims_meta(corpus, cfg),
                                             "config": cfg.to_dict()})
    if args.log:
        tlog.dump(args.log)
    last = tlog.epochs[-1]
    print(f"implicit stage done: total {last['total']:.4f}, grnd {last['grnd']:.4f} -> {args.out}")


def _load_ckpt(path, kind):
    params, meta = model.load_checkpoint(path)
    if meta.get("kind") != kind:
        raise CorpusError(f"{path} is a {meta.get('kind')!r} checkpoint, expected {kind!r}")
    return params, meta


def cmd_export_pseudo(args):
    params, _ = _load_ckpt(args.ckpt, "implicit")
    corpus = load_corpus(args.corpus)
    out = export_pseudo_labels(params, corpus, args.out)
    print(f"exported {len(out)} pseudo-labels -> {args.out}")


def cmd_train_explicit(args):
    cfg = _train_config(args)
    corpus = load_corpus(args.corpus)
    pseudo = load_pseudo_labels(args.pseudo)
    params, tlog = train_explicit(corpus, pseudo, cfg)
    model.save_checkpoint(args.out, params, {"kind": "explicit", "model": cfg.explicit_model,
                                             "dims": _dims_meta(corpus, cfg), "config": cfg.to_dict()})
    if args.log:
        tlog.dump(args.log)
    print(f"explicit stage done: loss {tlog.epochs[-1]['loss']:.4f} -> {args.out}")


def cmd_infer(args):
    params, meta = _load_ckpt(args.ckpt, "explicit")
    corpus = load_corpus(args.corpus)
    grounder = STAGE2_MODELS[meta.get("model", "soft-extent")]
    preds = infer_explicit(params, list(corpus), grounder)
    save_pseudo_labels([(s.sample_id, p) for s, p in zip(corpus, preds)], args.out)
    print(f"wrote {len(preds)} predictions -> {args.out}")


def cmd_run_two_stage(args):
    cfg = _train_config(args)
    train, test = load_corpus(args.train), load_corpus(args.test)
    label_cfg = LabelConfig(args.dist, args.dur, args.label_seed)
    report, pseudo_report, _ = run_two_stage(train, test, label_cfg, cfg, args.out, tag=args.tag)
    reports = [report] + ([pseudo_report] if pseudo_report else [])
    sys.stdout.write(evalkit.emit_report(reports, args.format))


def cmd_eval(args):
    preds = dict(load_pseudo_labels(args.pred))
    gts = {s.sample_id: s.gt for s in load_corpus(args.gt)}
    missing = [sid for sid in preds if gts.get(sid) is None]
    if missing:
        raise CorpusError(f"no ground truth for {missing[0]}")
    report = evalkit.evaluate(preds, gts, args.thresholds, tag=args.tag)
    sys.stdout.write(evalkit.emit_report([report], args.format, args.out))


# ---------------------------------------------------------------------------
# experiment grids


def corpus_digest(corpus_dir: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(Path(corpus_dir).iterdir()):
        if f.is_file():
            h.update(f.name.encode() + b"\0" + f.read_bytes())
    return h.hexdigest()


def cell_key(cell: dict) -> str:
    """Content address of a cell: hash of its canonical JSON description."""
    return hashlib.sha256(json.dumps(cell, sort_keys=True).encode()).hexdigest()[:16]


def run_cell(cell: dict, corpus_dir: str, out_dir: str) -> str:
    """Train one implicit-stage cell and score its pseudo-labels; skips finished cells."""
    final = Path(out_dir) / "cells" / cell_key(cell)
    if (final / "eval.txt").exists():
        return str(final)
    cfg = TrainConfig.from_dict(cell["config"])
    corpus = simulate_partial_labels(load_corpus(corpus_dir), cell["dist"], cell["dur"], cell["label_seed"])
    params, tlog = train_implicit(corpus, cfg, track=False)
    pseudo = export_pseudo_labels(params, corpus)
    report = evalkit.evaluate(dict(pseudo), {s.sample_id: s.gt for s in corpus}, tag=cell["tag"])
    stats = pseudo_label_stats(params, corpus)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=final.parent, prefix=".tmp-"))
    (tmp / "cell.json").write_text(json.dumps({**cell, "containment": stats["containment"]},
                                              indent=2, sort_keys=True) + "\n")
    save_pseudo_labels(pseudo, tmp / "pseudo.txt")
    tlog.dump(tmp / "implicit_log.jsonl")
    evalkit.emit_report([report], "records", tmp / "eval.txt")
    try:
        os.replace(tmp, final)
    except OSError:  # a concurrent worker finished the same cell first
        shutil.rmtree(tmp, ignore_errors=True)
    return str(final)


def _threads() -> int:
    raw = os.environ.get("CU_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CorpusError(f"CU_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def run_grid(cells: list[dict], corpus_dir, out_dir) -> list[evalkit.EvalReport]:
    """Run (or resume) every cell, at most CU_THREADS at a time; one report per cell."""
    corpus_dir, out_dir = str(corpus_dir), str(out_dir)
    workers = min(_threads(), len(cells))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            dirs = list(pool.map(run_cell, cells, [corpus_dir] * len(cells), [out_dir] * len(cells)))
    else:
        dirs = [run_cell(c, corpus_dir, out_dir) for c in cells]
    return [evalkit.load_records(Path(d) / "eval.txt")[0] for d in dirs]


def median_reports(rows: list[str], reports: list[evalkit.EvalReport]) -> list[evalkit.EvalReport]:
    """Per row, the per-column median over that row's cells (tagged ``<row>-s<seed>``)."""
    out = []
    for row in rows:
        group = [r for r in reports if r.tag.rsplit("-s", 1)[0] == row]
        rec = np.median([r.recall for r in group], axis=0)
        out.append(evalkit.EvalReport(group[0].thresholds, rec.tolist(),
                                      float(np.median([r.miou for r in group])), group[0].n, row))
    return out


def _grid_cells(rows, seeds, cfg: TrainConfig, corpus_dir: Path) -> list[dict]:
    digest = corpus_digest(corpus_dir)
    cells = []
    for tag, losses, dist, dur, label_seed in rows:
        for seed in range(seeds):
            conf = replace(cfg, losses=tuple(losses), seed=seed).to_dict()
            cells.append({"tag": f"{tag}-s{seed}", "row": tag, "config": conf, "dist": dist, "dur": dur,
                          "label_seed": label_seed, "corpus": digest})
    return cells


def _finish_grid(args, rows, cells):
    reports = run_grid(cells, args.corpus, args.out)
    summary = median_reports(rows, reports)
    evalkit.emit_report(reports, "records", args.out / "cells.txt")
    evalkit.emit_report(summary, "records", args.out / "summary.txt")
    evalkit.emit_report(summary, "table", args.out / "summary_table.txt")
    sys.stdout.write(evalkit.emit_report(summary, args.format))


def _corpus_dir(path: Path) -> Path:
    return path.parent if path.name == "manifest.txt" else path


def cmd_ablate(args):
    cfg = _train_config(args)
    args.corpus = _corpus_dir(args.corpus)
    rows = args.rows or sorted(ABLATIONS)
    spec = [(r, ABLATIONS[r], args.dist, args.dur, args.label_seed) for r in rows]
    _finish_grid(args, rows, _grid_cells(spec, args.seeds, cfg, args.corpus))


def cmd_robustness(args):
    cfg = _train_config(args)
    args.corpus = _corpus_dir(args.corpus)
    spec = [(tag, cfg.losses, dist, dur, ls) for tag, dist, dur, ls in ROBUSTNESS_ROWS]
    _finish_grid(args, [r[0] for r in ROBUSTNESS_ROWS], _grid_cells(spec, args.seeds, cfg, args.corpus))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ptsg", description="Partially-supervised temporal grounding toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--out", type=Path, required=True, help="output corpus directory")
    p.add_argument("--samples", type=int, default=200, help="number of samples (default 200)")
    p.add_argument("--frames", type=int, default=64, help="frames per video T (default 64)")
    p.add_argument("--dim-video", type=int, default=32, help="video feature dim (default 32)")
    p.add_argument("--dim-query", type=int, default=24, help="query token dim (default 24)")
    p.add_argument("--dim-sentence", type=int, default=16, help="sentence embedding dim; 0 omits it (default 16)")
    p.add_argument("--clusters", type=int, default=5, help="planted semantic clusters (default 5)")
    p.add_argument("--event-min", type=int, default=10, help="shortest event in frames (default 10)")
    p.add_argument("--event-max", type=int, default=32, help="longest event in frames (default 32)")
    p.add_argument("--noise", type=float, default=0.5, help="feature noise std (default 0.5)")
    p.add_argument("--tokens", type=int, default=6, help="query tokens per sample M (default 6)")
    p.add_argument("--fps", type=float, default=2.0, help="frames per second (default 2)")
    p.add_argument("--seed", type=int, default=0, help="generation seed (default 0)")
    p.add_argument("--world-seed", type=int, help="seed of the shared prototypes (default: --seed)")
    p.add_argument("--holdout", type=int, default=0,
                   help="if > 0, write OUT/train and OUT/test with this many test samples")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("label", help="simulate partial labels on a corpus")
    p.add_argument("--corpus", type=Path, required=True, help="input corpus directory or manifest")
    p.add_argument("--out", type=Path, required=True, help="output corpus directory")
    p.add_argument("--dist", choices=DISTRIBUTIONS, default="uniform", help="clip center distribution")
    p.add_argument("--dur", type=float, default=0.0, help="clip duration in seconds; 0 = single frame")
    p.add_argument("--seed", type=int, default=0, help="label sampling seed (default 0)")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train-implicit", help="train the implicit stage on a labelled corpus")
    p.add_argument("--corpus", type=Path, required=True, help="labelled corpus directory or manifest")
    p.add_argument("--out", type=Path, required=True, help="output checkpoint path")
    p.add_argument("--log", type=Path, help="write the per-epoch log here as JSONL")
    p.add_argument("--no-track", action="store_true", help="skip per-epoch pseudo-label scoring")
    _add_config(p)
    p.set_defaults(func=cmd_train_implicit)

    p = sub.add_parser("export-pseudo", help="export pseudo-labels from an implicit checkpoint")
    p.add_argument("--corpus", type=Path, required=True, help="labelled corpus directory or manifest")
    p.add_argument("--ckpt", type=Path, required=True, help="implicit-stage checkpoint")
    p.add_argument("--out", type=Path, required=True, help="output pseudo-label file")
    p.set_defaults(func=cmd_export_pseudo)

    p = sub.add_parser("train-explicit", help="train the explicit stage on pseudo-labels")
    p.add_argument("--corpus", type=Path, required=True, help="training corpus directory or manifest")
    p.add_argument("--pseudo", type=Path, required=True, help="pseudo-label file")
    p.add_argument("--out", type=Path, required=True, help="output checkpoint path")
    p.add_argument("--log", type=Path, help="write the per-epoch log here as JSONL")
    p.add_argument("--config", type=Path, help="JSON config file; keys are TrainConfig field names")
    p.add_argument("--seed", type=int, help="training seed (overrides the config)")
    p.add_argument("--explicit-epochs", type=int, help="explicit-stage epochs (overrides the config)")
    p.set_defaults(func=cmd_train_explicit)

    p = sub.add_parser("infer", help="predict intervals with an explicit checkpoint (no labels used)")
    p.add_argument("--corpus", type=Path, required=True, help="corpus directory or manifest")
    p.add_argument("--ckpt", type=Path, required=True, help="explicit-stage checkpoint")
    p.add_argument("--out", type=Path, required=True, help="output prediction file (cu-pseudo/1 layout)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("run-two-stage", help="labels, implicit stage, pseudo-labels, explicit stage, test eval")
    p.add_argument("--train", type=Path, required=True, help="training corpus (ground truth used only for scoring)")
    p.add_argument("--test", type=Path, required=True, help="held-out corpus with ground truth")
    p.add_argument("--out", type=Path, required=True, help="output directory for all artifacts")
    p.add_argument("--dist", choices=DISTRIBUTIONS, default="uniform", help="clip center distribution")
    p.add_argument("--dur", type=float, default=0.0, help="clip duration in seconds; 0 = single frame")
    p.add_argument("--label-seed", type=int, default=0, help="label sampling seed (default 0)")
    p.add_argument("--tag", default="two-stage", help="report tag")
    p.add_argument("--format", choices=("table", "records"), default="table", help="stdout report format")
    _add_config(p, explicit=True)
    p.set_defaults(func=cmd_run_two_stage)

    p = sub.add_parser("eval", help="score predictions or pseudo-labels against ground truth")
    p.add_argument("--pred", type=Path, required=True, help="prediction / pseudo-label file")
    p.add_argument("--gt", type=Path, required=True, help="corpus holding the ground truth")
    p.add_argument("--thresholds", type=_thresholds, default=evalkit.DEFAULT_THRESHOLDS,
                   help="comma-separated IoU thresholds (default 0.3,0.5,0.7)")
    p.add_argument("--format", choices=("table", "records"), default="table", help="report format")
    p.add_argument("--tag", default="eval", help="report tag")
    p.add_argument("--out", type=Path, help="also write the report to this file")
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (("ablate", cmd_ablate, "run the A1-A6 loss ablation grid"),
                                 ("robustness", cmd_robustness, "run the label-type robustness grid")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--corpus", type=Path, required=True, help="corpus with ground truth (unlabelled)")
        p.add_argument("--out", type=Path, required=True, help="experiment directory (cells resume here)")
        p.add_argument("--seeds", type=int, default=3, help="training seeds per row (default 3)")
        p.add_argument("--format", choices=("table", "records"), default="table", help="stdout report format")
        if name == "ablate":
            p.add_argument("--rows", nargs="+", choices=sorted(ABLATIONS), help="subset of rows (default all)")
            p.add_argument("--dist", choices=DISTRIBUTIONS, default="uniform", help="clip center distribution")
            p.add_argument("--dur", type=float, default=0.0, help="clip duration in seconds (default 0)")
            p.add_argument("--label-seed", type=int, default=0, help="label sampling seed (default 0)")
            _add_config(p, flags=False)
        else:
            _add_config(p)
        p.set_defaults(func=func)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse: 0 for --help, 2 for usage errors
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        args.func(args)
    except (CorpusError, ValueError, KeyError, FileNotFoundError, TrainingDiverged) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: gen-data, train, eval, ablate, viz-graph."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image, ImageDraw

from . import __version__
from .errors import (ConfigError, DegenerateBatchError, GraphSkipError,
                     NumericError, ValidationError)
from .graph import build_dilated_knn, graph_to_json
from .metrics import score_prediction
from .model import ModelConfig, SkipNet
from .serialization import load_checkpoint, read_manifest, write_manifest
from .synthdata import AugmentPolicy, SynthSpec, load_corpus, save_corpus
from .tensor import Tensor, no_grad
from .training import TrainConfig, train

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2

MODE_SWEEP = ("s0", "s1", "s2", "s3", "s4")
M_SWEEP = (8, 16, 32, 64, 128, 256)
SCALE_SWEEP = (2, 3, 4, 5)
G_SWEEP = (1, 3, 5)


class _Parser(argparse.ArgumentParser):
    """Argument errors map onto the validation exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _limit_threads():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(limits=1)


def _model_config_from_args(args) -> ModelConfig:
    channels = tuple(int(c) for c in args.encoder_channels.split(","))
    return ModelConfig(input_size=(args.size, args.size),
                       encoder_channels=channels,
                       reduced_channels=args.reduced_channels,
                       scale=args.scale, k_neighbors=args.k,
                       conv1d_width=args.conv1d_width, m_channels=args.m,
                       repetitions=args.repetitions, dilation=args.dilation,
                       gnn_mode=args.gnn_mode, dtype=args.dtype,
                       seed=args.seed)


def _add_model_flags(parser, size=64):
    parser.add_argument("--size", type=int, default=size)
    parser.add_argument("--encoder-channels", default="16,32,64,128")
    parser.add_argument("--reduced-channels", type=int, default=16)
    parser.add_argument("--scale", type=int, default=3)
    parser.add_argument("--k", type=int, default=11)
    parser.add_argument("--conv1d-width", type=int, default=3)
    parser.add_argument("--m", type=int, default=16)
    parser.add_argument("--repetitions", type=int, default=1)
    parser.add_argument("--dilation", type=int, default=1)
    parser.add_argument("--gnn-mode", default="s4", choices=MODE_SWEEP)
    parser.add_argument("--dtype", default="float32",
                        choices=("float32", "float64"))
    parser.add_argument("--seed", type=int, default=1,
                        help="model init and data-order seed")


def _run_manifest(out_dir: Path, command: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir / "run_manifest.json",
                   {"command": command, "version": __version__, **payload})


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graphskip",
                     description="Graph-gated skip-connection segmentation "
                                 "toolkit on synthetic corpora.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic corpus")
    gen.add_argument("--out", required=True)
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--family", default="blob-union")
    gen.add_argument("--noise", type=float, default=0.04)
    gen.add_argument("--contrast", type=float, default=0.8)
    gen.add_argument("--shift", type=float, default=0.0)
    gen.add_argument("--min-area", type=float, default=0.05)
    gen.add_argument("--max-area", type=float, default=0.45)
    gen.add_argument("--seed", type=int, default=0)

    tr = sub.add_parser("train", help="train on a saved corpus")
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--val-corpus", required=True)
    tr.add_argument("--out", required=True)
    _add_model_flags(tr)
    tr.add_argument("--epochs", type=int, default=60)
    tr.add_argument("--batch-size", type=int, default=8)
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--lr-floor", type=float, default=1e-6)
    tr.add_argument("--rotate", type=float, default=5.0)
    tr.add_argument("--resume", action="store_true")
    tr.add_argument("--stop-after", type=int, default=None)
    tr.add_argument("--single-thread", action="store_true")
    tr.add_argument("--multi-organ-recipe", action="store_true",
                    help="lr 1e-3, rotations to 20 degrees, 224x224 input")

    ev = sub.add_parser("eval", help="score checkpoints on a corpus")
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--checkpoint", action="append", default=[],
                    help="repeatable; each adds one run to the aggregate")
    ev.add_argument("--oracle", action="store_true",
                    help="score the ground truth against itself")

    ab = sub.add_parser("ablate", help="run configuration sweeps")
    ab.add_argument("--corpus", required=True)
    ab.add_argument("--val-corpus", required=True)
    ab.add_argument("--unseen-corpus", required=True)
    ab.add_argument("--out", required=True)
    _add_model_flags(ab)
    ab.add_argument("--epochs", type=int, default=10)
    ab.add_argument("--batch-size", type=int, default=8)
    ab.add_argument("--lr", type=float, default=1e-4)
    ab.add_argument("--lr-floor", type=float, default=1e-6)
    ab.add_argument("--sweep", action="append", default=[],
                    choices=("modes", "m", "scale", "g"),
                    help="repeatable; default runs every sweep")

    viz = sub.add_parser("viz-graph", help="render patch neighborhoods")
    viz.add_argument("--checkpoint", required=True)
    viz.add_argument("--corpus", required=True)
    viz.add_argument("--index", type=int, default=0)
    viz.add_argument("--seeds", required=True,
                     help="semicolon-separated row,col patch coordinates")
    viz.add_argument("--top", type=int, default=5)
    viz.add_argument("--out", required=True)
    return parser


# -- command bodies ---------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SynthSpec(count=args.count, size=args.size, family=args.family,
                     noise=args.noise, contrast=args.contrast,
                     shift=args.shift, min_area=args.min_area,
                     max_area=args.max_area, seed=args.seed)
    out = Path(args.out)
    save_corpus(out, spec)
    _run_manifest(out, "gen-data", {"spec": spec.to_dict()})
    print(f"wrote {spec.count} samples to {out}")
    return EXIT_OK


def _load_model_for_training(args) -> tuple:
    if args.multi_organ_recipe:
        args.lr = 1e-3
        args.rotate = 20.0
        args.size = 224
    model_config = _model_config_from_args(args)
    train_config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                               lr=args.lr, lr_floor=args.lr_floor,
                               seed=args.seed,
                               augment=AugmentPolicy(rotate=args.rotate))
    return model_config, train_config


def cmd_train(args) -> int:
    model_config, train_config = _load_model_for_training(args)
    _, train_pairs = load_corpus(args.corpus)
    _, val_pairs = load_corpus(args.val_corpus)
    model = SkipNet(model_config)
    out = Path(args.out)
    _run_manifest(out, "train", {
        "model": model_config.to_dict(), "train": train_config.to_dict(),
        "corpus": str(args.corpus), "val_corpus": str(args.val_corpus),
        "single_thread": bool(args.single_thread)})
    limiter = _limit_threads() if args.single_thread else None
    try:
        result = train(model, train_pairs, val_pairs, train_config, out,
                       resume=args.resume, stop_after=args.stop_after)
    finally:
        if limiter is not None:
            limiter.__exit__(None, None, None)
    print(f"best val dsc {result['best_dsc']:.4f} "
          f"at epoch {result['best_epoch']}")
    return EXIT_OK


def _predict_regions(model: SkipNet, pairs, batch_size: int = 8) -> np.ndarray:
    outputs = []
    with no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            x = np.stack([p[0] for p in chunk]).astype(model.dtype, copy=False)
            outs = model.forward(Tensor(x), "eval")
            outputs.append(outs[3][0].data[:, 0])
    return np.concatenate(outputs, axis=0)


def _model_from_checkpoint(run_dir: Path) -> SkipNet:
    run_manifest = read_manifest(run_dir / "run_manifest.json")
    model = SkipNet(ModelConfig.from_dict(run_manifest["model"]))
    load_checkpoint(run_dir / "best", model)
    return model


def _format_metric(value: float) -> str:
    return "" if np.isnan(value) else f"{value:.6f}"


def cmd_eval(args) -> int:
    if not args.checkpoint and not args.oracle:
        raise ValidationError("need --checkpoint (repeatable) or --oracle")
    _, pairs = load_corpus(args.corpus)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    runs = []
    if args.oracle:
        runs.append(("oracle", np.stack([mask[0] for _, mask in pairs])))
    for ckpt in args.checkpoint:
        model = _model_from_checkpoint(Path(ckpt))
        runs.append((str(ckpt), _predict_regions(model, pairs)))

    keys = ("dsc", "miou", "mae", "hd95")
    per_run_means = {key: [] for key in keys}
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "image", *keys])
        for name, regions in runs:
            scores = [score_prediction(regions[i], mask[0])
                      for i, (_, mask) in enumerate(pairs)]
            for i, score in enumerate(scores):
                writer.writerow([name, i] +
                                [_format_metric(score[k]) for k in keys])
            for key in keys:
                values = [s[key] for s in scores if not np.isnan(s[key])]
                per_run_means[key].append(float(np.mean(values))
                                          if values else float("nan"))
        means = {k: float(np.mean(v)) for k, v in per_run_means.items()}
        stds = {k: (float(np.std(v, ddof=1)) if len(v) > 1 else 0.0)
                for k, v in per_run_means.items()}
        writer.writerow(["mean", ""] + [_format_metric(means[k]) for k in keys])
        writer.writerow(["std", ""] + [_format_metric(stds[k]) for k in keys])
    _run_manifest(out.parent, "eval", {
        "corpus": str(args.corpus), "runs": [name for name, _ in runs],
        "mean": means, "std": stds})
    print(f"mean dsc {means['dsc']:.4f} over {len(runs)} run(s)")
    return EXIT_OK


def _effective_k(config: ModelConfig) -> int:
    n = config.target_size[0] * config.target_size[1]
    ceiling = (n - 1) // config.dilation
    return min(config.k_neighbors, ceiling)


def _ablate_setting(base: ModelConfig, **overrides) -> ModelConfig:
    d = base.to_dict()
    d.update(overrides)
    # keep the graph buildable when the grid shrinks below the requested K
    probe = ModelConfig.from_dict({**d, "gnn_mode": "s0"})
    d["k_neighbors"] = min(d["k_neighbors"],
                           (probe.target_size[0] * probe.target_size[1] - 1)
                           // d.get("dilation", 1))
    return ModelConfig.from_dict(d)


def _train_and_score(config: ModelConfig, corpora, train_config,
                     out_dir: Path) -> dict:
    train_pairs, val_pairs, unseen_pairs = corpora
    model = SkipNet(config)
    params = model.param_count()
    train(model, train_pairs, val_pairs, train_config, out_dir)
    best = SkipNet(config)
    load_checkpoint(out_dir / "best", best)
    row = {"params": params}
    for tag, pairs in (("seen", val_pairs), ("unseen", unseen_pairs)):
        regions = _predict_regions(best, pairs, train_config.batch_size)
        scores = [score_prediction(regions[i], mask[0])
                  for i, (_, mask) in enumerate(pairs)]
        row[f"{tag}_dsc"] = float(np.mean([s["dsc"] for s in scores]))
        row[f"{tag}_miou"] = float(np.mean([s["miou"] for s in scores]))
    return row


def _write_table(path: Path, header: List[str], rows: List[List]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_ablate(args) -> int:
    base = _model_config_from_args(args)
    train_config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                               lr=args.lr, lr_floor=args.lr_floor,
                               seed=args.seed)
    _, train_pairs = load_corpus(args.corpus)
    _, val_pairs = load_corpus(args.val_corpus)
    _, unseen_pairs = load_corpus(args.unseen_corpus)
    corpora = (train_pairs, val_pairs, unseen_pairs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sweeps = tuple(args.sweep) or ("modes", "m", "scale", "g")
    metric_cols = ["params", "seen_dsc", "seen_miou", "unseen_dsc",
                   "unseen_miou"]

    def run(config, tag):
        row = _train_and_score(config, corpora, train_config, out / tag)
        return [row[c] for c in metric_cols]

    if "modes" in sweeps:
        rows = [[mode] + run(_ablate_setting(base, gnn_mode=mode),
                             f"mode_{mode}") for mode in MODE_SWEEP]
        _write_table(out / "modes.csv", ["mode", *metric_cols], rows)
    if "m" in sweeps:
        rows = []
        for m in M_SWEEP:
            if m > 4 * base.reduced_channels:
                continue
            config = _ablate_setting(base, m_channels=m)
            label = "non-selective" if m == 4 * base.reduced_channels else ""
            rows.append([m, label] + run(config, f"m_{m}"))
        _write_table(out / "m_sweep.csv", ["m", "note", *metric_cols], rows)
    if "scale" in sweeps:
        rows = []
        for s in SCALE_SWEEP:
            config = _ablate_setting(base, scale=s)
            rows.append([s, _effective_k(config)] + run(config, f"scale_{s}"))
        _write_table(out / "scale_sweep.csv",
                     ["scale", "k_effective", *metric_cols], rows)
    if "g" in sweeps:
        rows = [[g] + run(_ablate_setting(base, repetitions=g), f"g_{g}")
                for g in G_SWEEP]
        _write_table(out / "g_sweep.csv", ["g", *metric_cols], rows)

    _run_manifest(out, "ablate", {
        "base_model": base.to_dict(), "train": train_config.to_dict(),
        "sweeps": list(sweeps), "corpus": str(args.corpus),
        "val_corpus": str(args.val_corpus),
        "unseen_corpus": str(args.unseen_corpus)})
    print(f"ablation sweeps {', '.join(sweeps)} written to {out}")
    return EXIT_OK


def _parse_seeds(text: str, grid) -> List[int]:
    ht, wt = grid
    seeds = []
    for token in text.split(";"):
        token = token.strip()
        if not token:
            continue
        try:
            row, col = (int(v) for v in token.split(","))
        except ValueError as err:
            raise ValidationError(f"bad seed patch {token!r}; "
                                  f"expected row,col") from err
        if not (0 <= row < ht and 0 <= col < wt):
            raise ValidationError(f"seed patch ({row},{col}) outside "
                                  f"{ht}x{wt} grid")
        seeds.append(row * wt + col)
    if not seeds:
        raise ValidationError("no seed patches given")
    return seeds


def _render_graph_png(image: np.ndarray, grid, payload: dict, path: Path,
                      upscale: int = 8) -> None:
    ht, wt = grid
    h, w = image.shape[1:]
    canvas = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    pil = Image.fromarray(np.transpose(canvas, (1, 2, 0)), mode="RGB")
    pil = pil.resize((w * upscale, h * upscale), Image.NEAREST)
    draw = ImageDraw.Draw(pil)
    cell_h, cell_w = h * upscale / ht, w * upscale / wt

    def center(index):
        return ((index % wt + 0.5) * cell_w, (index // wt + 0.5) * cell_h)

    for edge in payload["edges"]:
        draw.line([center(edge["src"]), center(edge["dst"])],
                  fill=(255, 220, 0), width=2)
    for node in payload["nodes"]:
        x, y = center(node["index"])
        r = max(2.0, cell_w / 6.0)
        draw.ellipse([x - r, y - r, x + r, y + r], outline=(255, 0, 0),
                     width=2)
    pil.save(path)


def cmd_viz_graph(args) -> int:
    model = _model_from_checkpoint(Path(args.checkpoint))
    _, pairs = load_corpus(args.corpus)
    if not 0 <= args.index < len(pairs):
        raise ValidationError(f"--index {args.index} outside corpus of "
                              f"{len(pairs)}")
    config = model.config
    if config.gnn_mode == "s0":
        raise ConfigError("the bypass configuration builds no graph to draw")
    grid = config.target_size
    seeds = _parse_seeds(args.seeds, grid)

    image, _ = pairs[args.index]
    x = image[None].astype(model.dtype, copy=False)
    capture = {}
    with no_grad():
        model.forward(Tensor(x), "eval", capture=capture)
    graph = capture["graphs"][-1][0]
    payload = graph_to_json(graph, grid, seeds=seeds, top=args.top)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    json_path = out.with_suffix(".json")
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _render_graph_png(image, grid, payload, out.with_suffix(".png"))
    _run_manifest(out.parent, "viz-graph", {
        "checkpoint": str(args.checkpoint), "corpus": str(args.corpus),
        "index": args.index, "seeds": seeds, "top": args.top})
    print(f"wrote {json_path} and {out.with_suffix('.png')} "
          f"({len(payload['edges'])} edges)")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "viz-graph": cmd_viz_graph}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except (NumericError, DegenerateBatchError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except GraphSkipError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Subcommands: skeletonize, synth-data, pretrain-sg, train, generate, eval,
grid. Every run prints its resolved configuration; errors go to stderr
with an ``error_code:`` prefix. Exit codes: 0 success, 1 validation
error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import evaluation, raster, skeleton, training
from .errors import (
    ConfigError,
    ConfigNotFound,
    MissingFile,
    NonFiniteLoss,
    IoError,
    SkelfontError,
)

_RUNTIME_ERRORS = (NonFiniteLoss, IoError)


class _Parser(argparse.ArgumentParser):
    """Argparse that reports usage problems as validation errors (exit 1)."""

    def error(self, message):
        print(f"error_code: BAD_ARGS {message}", file=sys.stderr)
        raise SystemExit(1)


def _print_config(name: str, args: argparse.Namespace, extra: dict | None = None) -> None:
    resolved = {"command": name}
    resolved.update({k: v for k, v in sorted(vars(args).items()) if k != "func"})
    if extra:
        resolved.update(extra)
    print("resolved config: " + json.dumps(resolved, sort_keys=True, default=str))


def _thinning_config(args) -> skeleton.ThinningConfig:
    return skeleton.ThinningConfig(
        max_iterations=args.max_iters,
        pre_close=not args.no_close,
        dilate_radius=args.dilate,
    )


def _load_train_config(args, profile_kwargs=None) -> training.TrainConfig:
    overrides = dict(profile_kwargs or {})
    if args.config is not None:
        cpath = Path(args.config)
        if not cpath.is_file():
            raise ConfigNotFound(f"config file not found: {cpath}")
        with open(cpath) as f:
            overrides.update(json.load(f))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if args.profile == "desk":
        base = training.desk_profile()
    else:
        base = training.paper_profile()
    merged = {f: getattr(base, f) for f in training.TrainConfig.__dataclass_fields__}
    merged["weights"] = {
        "lambda1": base.weights.lambda1,
        "lambda2": base.weights.lambda2,
        "lambda3": base.weights.lambda3,
        "lambda4": base.weights.lambda4,
    }
    merged.update(overrides)
    return training.TrainConfig.from_dict(merged)


def _config_json(cfg: training.TrainConfig) -> dict:
    d = {f: getattr(cfg, f) for f in training.TrainConfig.__dataclass_fields__}
    d["weights"] = cfg.weights.__dict__.copy()
    d["betas"] = list(cfg.betas)
    return d


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_skeletonize(args) -> int:
    _print_config("skeletonize", args)
    src = Path(args.input)
    if not src.is_dir():
        raise MissingFile(f"input directory not found: {src}")
    report = skeleton.batch_skeletonize(
        src, args.output, _thinning_config(args), threshold=args.threshold, ink=args.ink
    )
    print(json.dumps(report))
    return 0


def cmd_synth_data(args) -> int:
    _print_config("synth-data", args)
    spec = data_mod.SynthSpec(
        glyph_count=args.glyphs,
        canvas=args.canvas,
        source_style=data_mod.StrokeStyle(args.source_width, args.source_slant, 0.0),
        target_style=data_mod.StrokeStyle(args.target_width, args.target_slant, args.target_jitter),
        seed=args.seed if args.seed is not None else 0,
    )
    manifest = data_mod.synth_corpus(spec, args.out)
    entries = data_mod.load_manifest(manifest)
    counts = {}
    for e in entries:
        counts[e.split] = counts.get(e.split, 0) + 1
    print(json.dumps({"manifest": str(manifest), "images": len(entries), "splits": counts}))
    return 0


def cmd_pretrain_sg(args) -> int:
    cfg = _load_train_config(args)
    _print_config("pretrain-sg", args, {"train_config": _config_json(cfg)})
    root = Path(args.data).parent if str(args.data).endswith(".json") else Path(args.data)
    manifest = root / "manifest.json"
    if not manifest.is_file():
        raise ConfigError(f"manifest not found: {manifest}")
    entries = data_mod.load_manifest(manifest)
    out = Path(args.out)
    history_rows = []

    def log_cb(epoch, step, stats):
        if step == 0:
            print(f"epoch {epoch}: d={stats['d']:.4f} adv={stats['adv']:.4f} cycle={stats['cycle']:.4f}")

    sg, history = training.pretrain_sg(cfg, root, entries, out_dir=out, log_cb=log_cb)
    for epoch, value in enumerate(history):
        history_rows.append({"epoch": epoch, "dev_l1": value})
    (out / "pretrain_history.ndjson").write_text(
        "".join(json.dumps(r) + "\n" for r in history_rows)
    )
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot([r["epoch"] for r in history_rows], [r["dev_l1"] for r in history_rows], marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("dev L1 to thinned skeleton")
    fig.tight_layout()
    fig.savefig(out / "pretrain_dev_l1.png", dpi=110, metadata={"Software": "skelfont"})
    plt.close(fig)
    print(json.dumps({"dev_l1_init": history[0], "dev_l1_final": history[-1],
                      "checkpoint": str(out)}))
    return 0


def cmd_train(args) -> int:
    cfg = _load_train_config(args)
    _print_config("train", args, {"train_config": _config_json(cfg)})
    root = Path(args.data)
    manifest = root / "manifest.json"
    if not manifest.is_file():
        raise ConfigError(f"manifest not found: {manifest}")
    entries = data_mod.load_manifest(manifest)
    if args.sg is not None:
        sg = training.load_sg(args.sg, cfg)
    else:
        print("note: no --sg checkpoint given; using a freshly initialized frozen translator")
        torch.manual_seed(cfg.seed + 9001)
        from .networks import SkeletonTranslator

        sg = SkeletonTranslator(cfg.sg_channels)
        sg.requires_grad_(False)
        sg.eval()
    out = Path(args.out)
    trainer = training.train(cfg, root, entries, sg, out, max_steps=args.max_steps)
    evaluation.plot_training_log(out / "train_log.ndjson", out / "loss_curves.png")
    print(json.dumps({"steps": trainer.step_count, "log": str(out / "train_log.ndjson"),
                      "figure": str(out / "loss_curves.png")}))
    return 0


def _generate_one(bundle, img: raster.RasterImage, skel_img: raster.RasterImage) -> np.ndarray:
    size = bundle["config"]["image_size"]
    img = raster.resize(raster.to_grayscale(img), size, size)
    skel_img = raster.resize(raster.to_grayscale(skel_img), size, size)
    x = torch.from_numpy(img.pixels).float()[None, None]
    s = torch.from_numpy(skel_img.pixels).float()[None, None]
    with torch.no_grad():
        out = bundle["gen_f"](x, s)
    return out[0, 0].numpy().clip(0.0, 1.0)


def cmd_generate(args) -> int:
    _print_config("generate", args)
    bundle = training.load_for_inference(args.ckpt)
    img = raster.load_image(args.input)
    if args.skeleton == "auto":
        skel_img = skeleton.extract_skeleton(raster.to_grayscale(img))
    else:
        skel_img = raster.load_image(args.skeleton)
    out_arr = _generate_one(bundle, img, skel_img)
    out_path = Path(args.output) if args.output else Path(args.input).with_suffix(".gen.png")
    raster.save_image(raster.RasterImage(out_arr.astype(np.float64)), out_path)
    print(json.dumps({"output": str(out_path)}))
    return 0


def _split_pairs(root: Path, entries, split: str):
    pairs = data_mod.paired_entries(entries, split)
    if not pairs:
        raise ConfigError(f"split {split!r} has no pair-eligible characters")
    return pairs


def _generated_for_split(bundle, root: Path, entries, split: str, limit=None):
    pairs = _split_pairs(root, entries, split)
    if limit:
        pairs = pairs[:limit]
    rows = []
    size = bundle["config"]["image_size"]
    for src_e, tgt_e in pairs:
        x = data_mod._load_gray(root / src_e.path)
        xs = data_mod._load_gray(root / data_mod.SKELETON_DIR / src_e.path)
        y = data_mod._load_gray(root / tgt_e.path)
        if x.shape != (size, size):
            x = raster.resize(raster.RasterImage(x), size, size).pixels
            xs = raster.resize(raster.RasterImage(xs), size, size).pixels
            y = raster.resize(raster.RasterImage(y), size, size).pixels
        xt = torch.from_numpy(x).float()[None, None]
        st = torch.from_numpy(xs).float()[None, None]
        with torch.no_grad():
            fake = bundle["gen_f"](xt, st)[0, 0].numpy()
        rows.append({"char_id": src_e.char_id, "source": x, "skeleton": xs,
                     "generated": fake, "target": y})
    return rows


def cmd_eval(args) -> int:
    _print_config("eval", args)
    root = Path(args.data)
    entries = data_mod.load_manifest(root / "manifest.json")
    bundle = training.load_for_inference(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.classifier:
        clf = evaluation.load_classifier(args.classifier)
        clf_path = str(args.classifier)
    else:
        print("note: training a fresh glyph classifier on the manifest")
        clf = evaluation.train_classifier(root, entries,
                                          evaluation.ClassifierConfig(seed=args.seed or 0))
        clf_path = str(evaluation.save_classifier(clf, out / "classifier"))
    rows = _generated_for_split(bundle, root, entries, args.split)
    generated = [r["generated"] for r in rows]
    labels = [r["char_id"] for r in rows]
    acc = evaluation.content_accuracy(clf, generated, labels)
    with torch.no_grad():
        gen_feats = clf.features(evaluation._image_batch(generated)).numpy()
        real_feats = clf.features(evaluation._image_batch([r["target"] for r in rows])).numpy()
    ffd = evaluation.frechet_distance(
        evaluation.feature_stats(real_feats), evaluation.feature_stats(gen_feats)
    )
    report = {"acc_top1": acc, "ffd": ffd, "n_images": len(rows),
              "classifier_checkpoint": clf_path}
    (out / "report.json").write_text(json.dumps(report, indent=1) + "\n")

    with torch.no_grad():
        preds = clf(evaluation._image_batch(generated)).argmax(1).numpy()
    with open(out / "predictions.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["char_id", "predicted", "correct"])
        for r, p in zip(rows, preds):
            writer.writerow([r["char_id"], clf.classes[p], int(clf.classes[p] == r["char_id"])])

    show = rows[: min(8, len(rows))]
    evaluation.render_grid(
        [
            ("source", [r["source"] for r in show]),
            ("skeleton", [r["skeleton"] for r in show]),
            ("generated", [r["generated"] for r in show]),
            ("target", [r["target"] for r in show]),
        ],
        out / "samples_grid.png",
    )
    print(json.dumps(report))
    return 0


def cmd_grid(args) -> int:
    _print_config("grid", args)
    root = Path(args.data)
    entries = data_mod.load_manifest(root / "manifest.json")
    bundle = training.load_for_inference(args.ckpt)
    rows = _generated_for_split(bundle, root, entries, args.split, limit=args.count)
    out = Path(args.out)
    evaluation.render_grid(
        [
            ("source", [r["source"] for r in rows]),
            ("skeleton", [r["skeleton"] for r in rows]),
            ("generated", [r["generated"] for r in rows]),
            ("target", [r["target"] for r in rows]),
        ],
        out,
    )
    outputs = {"grid": str(out)}
    if args.attention:
        r = rows[0]
        x = torch.from_numpy(r["source"]).float()[None, None]
        s = torch.from_numpy(r["skeleton"]).float()[None, None]
        with torch.no_grad():
            _, aux = bundle["gen_f"].forward_with_aux(x, s)
        heats = {"cam": aux["cam_heat"][0].numpy(),
                 "self-refined": aux["self_heat"][0].numpy()}
        if "cross_heat" in aux:
            heats["cross-refined"] = aux["cross_heat"][0].numpy()
        att_path = out.with_name(out.stem + "_attention.png")
        evaluation.attention_overlay(r["source"], heats, att_path)
        outputs["attention"] = str(att_path)
    print(json.dumps(outputs))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="skelfont", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("skeletonize", help="thin every PNG in a directory tree")
    p.add_argument("--input", required=True, help="source directory of PNGs")
    p.add_argument("--output", required=True, help="destination directory")
    p.add_argument("--max-iters", type=int, default=100, help="thinning iteration cap (default 100)")
    p.add_argument("--no-close", action="store_true", help="skip morphological closing")
    p.add_argument("--dilate", type=int, default=1, help="output dilation radius (default 1)")
    p.add_argument("--threshold", default=0.5, type=lambda v: v if v == "otsu" else float(v),
                   help="binarization threshold in (0,1) or 'otsu' (default 0.5)")
    p.add_argument("--ink", choices=("dark", "light"), default="dark", help="ink polarity (default dark)")
    p.set_defaults(func=cmd_skeletonize)

    p = sub.add_parser("synth-data", help="generate the synthetic glyph corpus")
    p.add_argument("--out", required=True, help="corpus root directory")
    p.add_argument("--glyphs", type=int, default=200, help="number of glyph classes (default 200)")
    p.add_argument("--canvas", type=int, default=64, help="canvas size in pixels (default 64)")
    p.add_argument("--seed", type=int, default=0, help="corpus seed (default 0)")
    p.add_argument("--source-width", type=float, default=6.5, help="source stroke width (default 6.5)")
    p.add_argument("--source-slant", type=float, default=0.0, help="source slant (default 0.0)")
    p.add_argument("--target-width", type=float, default=5.0, help="target stroke width (default 5.0)")
    p.add_argument("--target-slant", type=float, default=0.25, help="target slant (default 0.25)")
    p.add_argument("--target-jitter", type=float, default=1.2, help="target wobble in px (default 1.2)")
    p.set_defaults(func=cmd_synth_data)

    for name, fn in (("pretrain-sg", cmd_pretrain_sg), ("train", cmd_train)):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} phase")
        p.add_argument("--data", required=True, help="corpus root (contains manifest.json)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", default=None, help="JSON config overriding the profile")
        p.add_argument("--profile", choices=("desk", "paper"), default="desk",
                       help="settings profile (default desk)")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        if name == "train":
            p.add_argument("--sg", default=None, help="pretrained skeleton-translator checkpoint")
            p.add_argument("--max-steps", type=int, default=None, help="stop after N steps")
        p.set_defaults(func=fn)

    p = sub.add_parser("generate", help="translate one glyph image")
    p.add_argument("--ckpt", required=True, help="joint-phase checkpoint directory")
    p.add_argument("--input", required=True, help="input PNG")
    p.add_argument("--skeleton", default="auto",
                   help="'auto' to thin the input, or a path to a skeleton PNG (default auto)")
    p.add_argument("--output", default=None, help="output path (default <input>.gen.png)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="content accuracy and feature distance on a split")
    p.add_argument("--ckpt", required=True, help="joint-phase checkpoint directory")
    p.add_argument("--data", required=True, help="corpus root")
    p.add_argument("--split", choices=("train", "dev", "test"), default="test",
                   help="manifest split (default test)")
    p.add_argument("--classifier", default=None, help="classifier checkpoint (default: train one)")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--seed", type=int, default=None, help="seed for classifier training")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="render a source/skeleton/generated/target sheet")
    p.add_argument("--ckpt", required=True, help="joint-phase checkpoint directory")
    p.add_argument("--data", required=True, help="corpus root")
    p.add_argument("--split", choices=("train", "dev", "test"), default="test",
                   help="manifest split (default test)")
    p.add_argument("--count", type=int, default=8, help="glyphs per row (default 8)")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--attention", action="store_true", help="also write per-pixel heatmap overlays")
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _RUNTIME_ERRORS as e:
        print(f"error_code: {e.code} {e}", file=sys.stderr)
        return 2
    except SkelfontError as e:
        print(f"error_code: {e.code} {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

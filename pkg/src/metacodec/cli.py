"""Command-line interface.

Subcommands: train, meta-finetune, build-bias-clusters, compress, decompress,
eval, sweep.  Errors exit nonzero with a one-line machine-readable message on
stderr (error: <kind>: <detail>).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import corpus
from .checkpoint import load_checkpoint, new_codec, save_checkpoint
from .codec import CodecConfig
from .pipeline import (
    DEFAULT_TARGETS,
    CodecBank,
    MetricsRecord,
    RateTarget,
    atomic_write,
    compress,
    decompress,
    evaluate,
    load_codebooks,
    save_codebooks,
)
from .probmodel import ProbModelConfig
from .training import (
    LossWeights,
    MetaConfig,
    build_bias_clusters,
    meta_finetune,
    overfit_biases,
    train_stage1,
)

# (channels, bits, stride, zeta, nominal bpp, default rate weight)
VARIANT_PRESETS = (
    {"id": 0, "channels_c": 8, "bits_b": 8, "downsample_s": 4, "zeta": 0.90, "trained_bpp": 2.0, "lambda_r": 0.05},
    {"id": 1, "channels_c": 6, "bits_b": 8, "downsample_s": 4, "zeta": 0.60, "trained_bpp": 0.75, "lambda_r": 0.20},
    {"id": 2, "channels_c": 3, "bits_b": 4, "downsample_s": 8, "zeta": 0.85, "trained_bpp": 0.12, "lambda_r": 0.30},
    {"id": 3, "channels_c": 1, "bits_b": 4, "downsample_s": 8, "zeta": 0.90, "trained_bpp": 0.06, "lambda_r": 0.10},
)


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_image(path, img: np.ndarray) -> None:
    import io

    from PIL import Image

    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def _load_config(path):
    if not path:
        return {}
    import yaml

    with open(path) as f:
        return yaml.safe_load(f) or {}


def _loss_weights(cfg: dict, lambda_r=None) -> LossWeights:
    kwargs = {k: v for k, v in cfg.get("loss", {}).items()}
    w = LossWeights(**kwargs)
    if lambda_r is not None and "lambda_r" not in kwargs:
        w = replace(w, lambda_r=lambda_r)
    return w


def _meta_config(cfg: dict) -> MetaConfig:
    return MetaConfig(**cfg.get("meta", {}))


def _train_patches(args, cfg):
    size = cfg.get("train", {}).get("patch_size", 64)
    seed = args.seed
    if args.data:
        imgs = [load_image(os.path.join(args.data, f)) for f in sorted(os.listdir(args.data))
                if f.lower().endswith(".png")]
        if not imgs:
            raise SystemExit("error: train: no .png files in --data directory")
        rng = np.random.default_rng(seed)
        patches = []
        for img in imgs:
            patches.extend(corpus._patches_from(img, size, cfg.get("train", {}).get("per_image", 24), rng))
        return np.stack(patches)
    return corpus.training_patches(size=size, seed=seed)


def cmd_train(args):
    cfg = _load_config(args.config)
    preset = VARIANT_PRESETS[args.variant]
    ccfg = CodecConfig(
        channels_c=preset["channels_c"],
        bits_b=preset["bits_b"],
        downsample_s=preset["downsample_s"],
        hidden_channels=cfg.get("train", {}).get("hidden_channels", 32),
        zeta=preset["zeta"],
    )
    pcfg = ProbModelConfig(**cfg.get("probmodel", {}))
    w = _loss_weights(cfg, lambda_r=args.lambda_r if args.lambda_r is not None else preset["lambda_r"])
    codec = new_codec(ccfg, pcfg, seed=args.seed)
    patches = _train_patches(args, cfg)
    tr = cfg.get("train", {})
    history = train_stage1(
        codec,
        patches,
        w,
        epochs=args.epochs or tr.get("epochs", 40),
        batch_size=tr.get("batch_size", 12),
        lr=tr.get("lr", 1e-4),
        seed=args.seed,
        log_path=args.log,
        progress=(lambda row: print(json.dumps(row))) if args.verbose else None,
    )
    meta = {
        "stage": "stage1",
        "variant": preset["id"],
        "trained_bpp": preset["trained_bpp"],
        "lambda_r": w.lambda_r,
        "seed": args.seed,
        "epochs": len(history),
        "patches": int(len(patches)),
        "source": "skimage bundled samples" if not args.data else args.data,
    }
    save_checkpoint(args.out, codec, meta)
    print(f"saved {args.out} (final loss {history[-1]['loss']:.4f})")


def cmd_meta_finetune(args):
    cfg = _load_config(args.config)
    codec, meta = load_checkpoint(args.checkpoint)
    mcfg = _meta_config(cfg)
    w = _loss_weights(cfg, lambda_r=meta.get("lambda_r"))
    patches = _train_patches(args, cfg)
    history = meta_finetune(
        codec,
        patches,
        mcfg,
        w,
        epochs=args.epochs or cfg.get("train", {}).get("meta_epochs", 5),
        seed=args.seed,
        log_path=args.log,
        progress=(lambda row: print(json.dumps(row))) if args.verbose else None,
    )
    meta = dict(meta)
    meta.update({"stage": "meta", "meta_epochs": len(history), "second_order": mcfg.second_order})
    save_checkpoint(args.out, codec, meta)
    print(f"saved {args.out} (outer loss {history[-1]['outer_loss']:.4f})")


def cmd_build_bias_clusters(args):
    cfg = _load_config(args.config)
    bank = CodecBank.load(args.models)
    size = bank.tile_size
    rng = np.random.default_rng(args.seed)
    patches = corpus.training_patches(size=size, per_image=args.patches_per_image, seed=args.seed)
    sel = rng.permutation(len(patches))[: args.patches]
    books = {}
    for entry in bank.entries:
        codec = entry["codec"]
        w = _loss_weights(cfg, lambda_r=entry["metadata"].get("lambda_r"))
        vectors = []
        for i in sel:
            x = np.ascontiguousarray(patches[i])
            from .metrics import to_tensor

            vectors.append(overfit_biases(codec, to_tensor(x), iters=args.iters, lr=args.lr, w=w))
        books[entry["id"]] = build_bias_clusters(np.stack(vectors), k=args.k, seed=args.seed)
        print(f"codec {entry['id']}: {len(books[entry['id']])} centroids from {len(sel)} patches")
    save_codebooks(args.out, books)
    print(f"saved {args.out}")


def cmd_compress(args):
    bank = CodecBank.load(args.models)
    books = load_codebooks(args.codebook) if args.codebook else None
    img = load_image(args.input)
    res = compress(
        img,
        RateTarget(args.target_bpp, margin=args.margin),
        bank,
        codebook=books,
        overfit_budget=args.overfit_budget,
        overfit_lr=args.overfit_lr,
    )
    atomic_write(args.output, res.data)
    print(
        json.dumps(
            {
                "bpp": round(res.bpp, 6),
                "codec_id": res.codec_id,
                "bits_b": res.bits_b,
                "best_effort": res.best_effort,
                "trials": res.trials,
                "bytes": len(res.data),
            }
        )
    )


def cmd_decompress(args):
    bank = CodecBank.load(args.models)
    books = load_codebooks(args.codebook) if args.codebook else None
    with open(args.input, "rb") as f:
        data = f.read()
    img = decompress(data, bank, codebook=books)
    save_image(args.output, img)
    print(f"wrote {args.output} ({img.shape[1]}x{img.shape[0]})")


def _write_csv(path, rows, fieldnames):
    import io

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    atomic_write(path, buf.getvalue().encode())


def cmd_eval(args):
    orig = load_image(args.original)
    recon = load_image(args.reconstruction)
    bits_total = args.bits_total
    bits_payload = 0
    if args.bitstream:
        size = os.path.getsize(args.bitstream)
        bits_total = 8 * size
        from .entropy import parse_container

        with open(args.bitstream, "rb") as f:
            bs = parse_container(f.read())
        bits_payload = 8 * len(bs.payload)
    rec = evaluate(orig, recon, bits_total, bits_payload, image_id=os.path.basename(args.original))
    row = {k: getattr(rec, k) for k in MetricsRecord.FIELDS}
    if args.out:
        _write_csv(args.out, [row], MetricsRecord.FIELDS)
    print(",".join(str(row[k]) for k in MetricsRecord.FIELDS))


def cmd_sweep(args):
    bank = CodecBank.load(args.models)
    books = load_codebooks(args.codebook) if args.codebook else None
    targets = args.targets or list(DEFAULT_TARGETS)
    names = sorted(f for f in os.listdir(args.indir) if f.lower().endswith(".png"))
    if not names:
        raise SystemExit("error: sweep: no .png files in input directory")
    rows = []
    fieldnames = ("image_id", "target_bpp", "codec_id", "bits_b", "best_effort") + MetricsRecord.FIELDS[1:]
    for name in names:
        img = load_image(os.path.join(args.indir, name))
        for t in targets:
            res = compress(
                img, RateTarget(t, margin=args.margin), bank, codebook=books,
                overfit_budget=args.overfit_budget, overfit_lr=args.overfit_lr,
            )
            recon = decompress(res.data, bank, codebook=books)
            rec = evaluate(
                img, recon, 8 * len(res.data), res.info["payload_bits"], image_id=name
            )
            row = {
                "image_id": name,
                "target_bpp": t,
                "codec_id": res.codec_id,
                "bits_b": res.bits_b,
                "best_effort": int(res.best_effort),
            }
            row.update({k: getattr(rec, k) for k in MetricsRecord.FIELDS[1:]})
            rows.append(row)
            if args.verbose:
                print(json.dumps(row))
    _write_csv(args.out, rows, fieldnames)
    print(f"wrote {args.out} ({len(rows)} rows)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metacodec", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="stage-1 generalization training")
    t.add_argument("--variant", type=int, default=0, choices=range(len(VARIANT_PRESETS)))
    t.add_argument("--data", help="directory of training PNGs (default: built-in corpus)")
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lambda-r", type=float, dest="lambda_r")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--log")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("meta-finetune", help="MAML-style latent-overfitting fine-tune")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data")
    m.add_argument("--out", required=True)
    m.add_argument("--config")
    m.add_argument("--epochs", type=int)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--log")
    m.add_argument("--verbose", action="store_true")
    m.set_defaults(func=cmd_meta_finetune)

    b = sub.add_parser("build-bias-clusters", help="overfit + k-means decoder bias codebook")
    b.add_argument("--models", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--config")
    b.add_argument("--patches", type=int, default=48)
    b.add_argument("--patches-per-image", type=int, default=8)
    b.add_argument("--iters", type=int, default=50)
    b.add_argument("--lr", type=float, default=1e-3)
    b.add_argument("--k", type=int, default=255)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_build_bias_clusters)

    c = sub.add_parser("compress", help="rate-controlled compression")
    c.add_argument("--target-bpp", type=float, required=True, dest="target_bpp")
    c.add_argument("--models", required=True)
    c.add_argument("--codebook")
    c.add_argument("--margin", type=float, default=0.15)
    c.add_argument("--overfit-budget", type=int, default=10, dest="overfit_budget")
    c.add_argument("--overfit-lr", type=float, default=0.1, dest="overfit_lr")
    c.add_argument("input")
    c.add_argument("output")
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="decode a bitstream")
    d.add_argument("--models", required=True)
    d.add_argument("--codebook")
    d.add_argument("input")
    d.add_argument("output")
    d.set_defaults(func=cmd_decompress)

    e = sub.add_parser("eval", help="metrics between original and reconstruction")
    e.add_argument("original")
    e.add_argument("reconstruction")
    e.add_argument("--bits-total", type=int, default=0, dest="bits_total")
    e.add_argument("--bitstream")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="all rate targets over a directory")
    s.add_argument("--models", required=True)
    s.add_argument("--codebook")
    s.add_argument("--targets", type=float, nargs="*")
    s.add_argument("--margin", type=float, default=0.15)
    s.add_argument("--overfit-budget", type=int, default=10, dest="overfit_budget")
    s.add_argument("--overfit-lr", type=float, default=0.1, dest="overfit_lr")
    s.add_argument("--out", required=True)
    s.add_argument("indir")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except SystemExit:
        raise
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

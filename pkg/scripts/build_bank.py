#!/usr/bin/env python3
"""Build the desk-scale codec bank: stage-1 training with rate-weight
calibration, meta fine-tuning, bias codebooks, and a readiness report on the
held-out set.  Writes models/codec{i}_stage1.npz, models/codec{i}.npz,
models/codebook.npz, models/bank.json, and per-stage CSV logs under
models/logs/.

    python3 scripts/build_bank.py [--out models] [--quick]
"""

import argparse
import json
import os
import sys
import time

import numpy as np
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from metacodec import corpus
from metacodec.checkpoint import load_checkpoint, new_codec, save_checkpoint
from metacodec.cli import VARIANT_PRESETS
from metacodec.codec import CodecConfig, pad_image, quantize_pair
from metacodec.metrics import to_tensor
from metacodec.pipeline import save_codebooks
from metacodec.probmodel import ProbModelConfig, rate_bits
from metacodec.training import (
    LossWeights,
    MetaConfig,
    build_bias_clusters,
    meta_finetune,
    overfit_biases,
    overfit_latent,
    train_stage1,
)


def measure_bpp(codec, images):
    """Mean payload-rate estimate (bits/pixel, no container overhead)."""
    vals = []
    with torch.no_grad():
        for img in images:
            x, _ = pad_image(to_tensor(img), codec.cfg.downsample_s)
            y_tilde, *_ = codec.masked_latent(x)
            u, z = quantize_pair(y_tilde, codec.cfg.bits_b)
            bits = float(rate_bits(codec.probmodel, u, z, codec.cfg.bits_b, codec.pcfg.num_scales_M).sum())
            vals.append(bits / (img.shape[0] * img.shape[1]))
    return float(np.mean(vals))


def build_variant(preset, patches, val_images, args, log_dir):
    vid = preset["id"]
    cfg = CodecConfig(
        channels_c=preset["channels_c"],
        bits_b=preset["bits_b"],
        downsample_s=preset["downsample_s"],
        hidden_channels=32,
        zeta=preset["zeta"],
    )
    codec = new_codec(cfg, ProbModelConfig(), seed=vid)
    lam = preset["lambda_r"]
    target = preset["trained_bpp"]
    epochs = args.epochs
    history = []
    t0 = time.time()
    # train, then nudge the rate weight toward the nominal bitrate and continue
    for round_idx in range(3):
        w = LossWeights(lambda_r=lam)
        history += train_stage1(
            codec, patches, w, epochs=epochs, batch_size=12, lr=1e-4,
            seed=vid * 100 + round_idx,
            progress=lambda row: print(f"  v{vid} stg1 {row['epoch']}: loss {row['loss']:.4f} bpp {row['bpp_est']:.3f}", flush=True) if args.verbose else None,
        )
        achieved = measure_bpp(codec, val_images)
        print(f"  v{vid} round {round_idx}: val bpp {achieved:.4f} (target {target}), lambda_r {lam:.3f}", flush=True)
        if 0.6 * target <= achieved <= 1.6 * target or round_idx == 2:
            break
        lam = lam * (achieved / target) ** 0.7
        epochs = max(10, args.epochs // 3)
    print(f"  v{vid} stage1 done in {time.time() - t0:.0f}s", flush=True)
    from metacodec.training import write_metrics_log

    write_metrics_log(os.path.join(log_dir, f"codec{vid}_stage1.csv"), history)
    meta_info = {
        "stage": "stage1", "variant": vid, "trained_bpp": target, "lambda_r": lam,
        "val_bpp": achieved, "hidden_channels": 32, "patch_size": args.patch_size,
        "epochs": len(history), "patches": len(patches),
        "source": "skimage bundled public-domain samples",
    }
    save_checkpoint(os.path.join(args.out, f"codec{vid}_stage1.npz"), codec, meta_info)

    t0 = time.time()
    mcfg = MetaConfig(inner_iters_n=4, inner_lr_alpha=0.1, outer_lr_beta=1e-4,
                      second_order=True, batch_size=12)
    mhist = meta_finetune(
        codec, patches[: args.meta_patches], mcfg, LossWeights(lambda_r=lam),
        epochs=args.meta_epochs, seed=vid,
        progress=lambda row: print(f"  v{vid} meta {row['epoch']}: outer {row['outer_loss']:.4f}", flush=True),
    )
    print(f"  v{vid} meta done in {time.time() - t0:.0f}s", flush=True)
    write_metrics_log(os.path.join(log_dir, f"codec{vid}_meta.csv"), mhist)
    meta_info = dict(meta_info)
    meta_info.update({"stage": "meta", "meta_epochs": len(mhist), "second_order": True,
                      "inner_iters": 4, "inner_lr": 0.1, "outer_lr": 1e-4})
    save_checkpoint(os.path.join(args.out, f"codec{vid}.npz"), codec, meta_info)
    return codec, lam


def readiness_report(out_dir, heldout, w_by_id):
    """Direction checks that the acceptance suite will re-run."""
    report = {}
    for vid, w in w_by_id.items():
        meta_c, _ = load_checkpoint(os.path.join(out_dir, f"codec{vid}.npz"))
        base_c, _ = load_checkpoint(os.path.join(out_dir, f"codec{vid}_stage1.npz"))
        drops = {"meta": [], "base": []}
        for img in heldout[:8]:
            x, _ = pad_image(to_tensor(img), meta_c.cfg.downsample_s)
            for name, codec in (("meta", meta_c), ("base", base_c)):
                _, trace = overfit_latent(codec, x, n=4, alpha=0.1, w=w)
                drops[name].append(trace[0] - trace[-1])
        report[vid] = {
            "mean_drop_meta": float(np.mean(drops["meta"])),
            "mean_drop_base": float(np.mean(drops["base"])),
        }
        print(f"  v{vid}: mean loss drop meta {report[vid]['mean_drop_meta']:.5f} "
              f"vs stage1 {report[vid]['mean_drop_base']:.5f}", flush=True)
    return report


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="models")
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--meta-epochs", type=int, default=3)
    ap.add_argument("--meta-patches", type=int, default=96)
    ap.add_argument("--patch-size", type=int, default=64)
    ap.add_argument("--per-image", type=int, default=12)
    ap.add_argument("--codebook-patches", type=int, default=48)
    ap.add_argument("--bias-iters", type=int, default=50)
    ap.add_argument("--quick", action="store_true", help="tiny budgets for a dry run")
    ap.add_argument("--verbose", action="store_true")
    args = ap.parse_args()
    if args.quick:
        args.epochs, args.meta_epochs, args.meta_patches = 2, 1, 12
        args.codebook_patches, args.bias_iters = 6, 5

    torch.set_num_threads(max(2, os.cpu_count() or 2))
    os.makedirs(args.out, exist_ok=True)
    log_dir = os.path.join(args.out, "logs")
    os.makedirs(log_dir, exist_ok=True)

    patches = corpus.training_patches(size=args.patch_size, per_image=args.per_image, seed=0)
    val_images = corpus.heldout_images(size=128, count=6, seed=7)
    heldout = corpus.heldout_images(size=128, count=8, seed=11)
    print(f"training patches: {patches.shape}", flush=True)

    manifest = {"version": 1, "tile_size": args.patch_size, "codecs": []}
    books = {}
    w_by_id = {}
    rng = np.random.default_rng(0)
    for preset in VARIANT_PRESETS:
        print(f"variant {preset['id']} (c={preset['channels_c']} b={preset['bits_b']} "
              f"s={preset['downsample_s']})", flush=True)
        codec, lam = build_variant(preset, patches, val_images, args, log_dir)
        w_by_id[preset["id"]] = LossWeights(lambda_r=lam)
        manifest["codecs"].append(
            {"id": preset["id"], "file": f"codec{preset['id']}.npz", "trained_bpp": preset["trained_bpp"]}
        )
        sel = rng.permutation(len(patches))[: args.codebook_patches]
        t0 = time.time()
        vecs = np.stack([
            overfit_biases(codec, to_tensor(np.ascontiguousarray(patches[i])),
                           iters=args.bias_iters, lr=1e-3, w=w_by_id[preset["id"]])
            for i in sel
        ])
        books[preset["id"]] = build_bias_clusters(vecs, k=255, seed=0)
        print(f"  v{preset['id']} codebook: {len(books[preset['id']])} centroids "
              f"({time.time() - t0:.0f}s)", flush=True)

    save_codebooks(os.path.join(args.out, "codebook.npz"), books)
    with open(os.path.join(args.out, "bank.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    print("held-out readiness:", flush=True)
    report = readiness_report(args.out, heldout, w_by_id)
    with open(os.path.join(args.out, "readiness.json"), "w") as f:
        json.dump(report, f, indent=2)
    print("bank written to", args.out, flush=True)


if __name__ == "__main__":
    main()

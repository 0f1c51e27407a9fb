"""Acceptance suite: one test per criterion, one printed PASS/FAIL line each.

The training-dependent checks load the committed desk-scale bank from
models/ (rebuild with scripts/build_bank.py).  Run with

    pytest tests/test_acceptance.py -s
"""

import os
import time

import numpy as np
import pytest
import torch

from metacodec import corpus
from metacodec import pipeline as pl
from metacodec import probmodel as pm
from metacodec.codec import expand_mask, pad_image, quantize_pair, quantize_ste
from metacodec.entropy import coder, decode_tensor, encode_tensor
from metacodec.metrics import ms_ssim_luma, to_tensor
from metacodec.training import LossWeights, inner_adapt, overfit_latent

from test_probmodel import small_model

MODELS_DIR = os.path.join(os.path.dirname(__file__), "..", "models")
_HAS_BANK = os.path.exists(os.path.join(MODELS_DIR, "bank.json"))

needs_bank = pytest.mark.skipif(not _HAS_BANK, reason="models/ bank not built")


def report(name: str, ok: bool, detail: str = ""):
    print(f"{'PASS' if ok else 'FAIL'}: {name}" + (f" ({detail})" if detail else ""), flush=True)
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def bank():
    return pl.CodecBank.load(MODELS_DIR)


@pytest.fixture(scope="module")
def books():
    return pl.load_codebooks(os.path.join(MODELS_DIR, "codebook.npz"))


@pytest.fixture(scope="module")
def heldout():
    return corpus.heldout_images(size=256, count=20, seed=21)


def test_entropy_round_trip_10k():
    rng = np.random.default_rng(0)
    t0 = time.time()
    models = [
        small_model(C=c, K=2, ctx=8, layers=2, M=2, seed=s, scale=0.4)
        for c in (1, 2)
        for s in range(30)
    ]
    fails = 0
    n_trials = 10_000
    with torch.no_grad():
        for t in range(n_trials):
            model = models[t % len(models)]
            bits = int(rng.choice([1, 2, 4, 8]))
            M = int(rng.integers(1, 3))
            h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            C = model.latent_channels
            z = rng.integers(0, 1 << bits, size=(h, w, C))
            payload = encode_tensor(model, z, bits, M)
            out = decode_tensor(model, payload, (h, w, C), bits, M)
            if not np.array_equal(out, z):
                fails += 1
    elapsed = time.time() - t0
    report(
        "entropy round-trip 1e4 instances, zero failures, <10 min",
        fails == 0 and elapsed < 600,
        f"{n_trials} trials, {fails} fails, {elapsed:.0f}s",
    )


def test_rate_agreement_200():
    rng = np.random.default_rng(1)
    worst = 0.0
    bad = 0
    for t in range(200):
        model = small_model(C=int(rng.integers(1, 3)), K=3, ctx=8, layers=2,
                            M=int(rng.integers(1, 3)), seed=1000 + t, scale=0.4)
        bits = int(rng.choice([1, 2, 4, 8]))
        h, w = int(rng.integers(2, 15)), int(rng.integers(2, 15))
        z = rng.integers(0, 1 << bits, size=(h, w, model.latent_channels))
        payload = encode_tensor(model, z, bits, model.cfg.num_scales_M)
        est = float(pm.rate_loss(z, model, bits, model.cfg.num_scales_M).detach())
        gap = 8 * len(payload) - est
        worst = max(worst, gap - 0.01 * est)
        if 8 * len(payload) > est * 1.01 + 64:
            bad += 1
    report("rate agreement: payload within 1% + 64 bits of rate loss (200 instances)",
           bad == 0, f"worst slack beyond 1%: {worst:.1f} bits")


def test_coder_near_optimality():
    n = 5000
    rng = np.random.default_rng(2)
    # H(0.9) = 0.469 bits/symbol at exact frequencies
    symbols = np.concatenate([np.zeros(int(n * 0.9), int), np.ones(n - int(n * 0.9), int)])
    rng.shuffle(symbols)
    cdfs = coder.pmf_to_cdf(np.tile([0.9, 0.1], (n, 1)))
    payload = coder.ac_encode(symbols, cdfs)
    h_bits = n * (-(0.9 * np.log2(0.9) + 0.1 * np.log2(0.1)))
    ok1 = h_bits <= 8 * len(payload) <= h_bits * 1.01 + 32
    # uniform 8-bit case: N * 8 bits
    cdfs = coder.uniform_cdf(8, n)
    symbols = rng.integers(0, 256, n)
    payload_u = coder.ac_encode(symbols, cdfs)
    ok2 = 8 * n <= 8 * len(payload_u) <= 8 * n * 1.01 + 32
    report("coder near-optimality: within 1% + 32 bits of N*H(p)", ok1 and ok2,
           f"bernoulli {8 * len(payload)}/{h_bits:.0f} bits, uniform {8 * len(payload_u)}/{8 * n}")


def test_mask_semantics_exhaustive():
    violations = 0
    for c in (1, 3, 6, 8):
        for k in range(c + 1):
            tau_q = torch.full((1, 1, 1, 1), k / c, dtype=torch.float64)
            m = expand_mask(tau_q, c).view(c)
            count = int(m.sum())
            if count != round(c * (k / c)):
                violations += 1
            if not (torch.all(m[:count] == 1) and torch.all(m[count:] == 0)):
                violations += 1
    report("mask semantics exhaustive over (tau_q, c), prefix + count", violations == 0,
           f"{violations} violations")


def test_straight_through_and_rate_gradients_fd():
    # straight-through: at on-grid latents the surrogate (quantization ->
    # identity) has the same derivative; compare autograd vs central FD
    torch.manual_seed(0)
    bits = 4
    grid = torch.randint(0, 16, (40,), dtype=torch.float64) / 15
    y = grid.clone().requires_grad_(True)
    w = torch.randn(40, dtype=torch.float64)
    loss = (w * quantize_ste(y, bits) ** 2).sum()
    (g,) = torch.autograd.grad(loss, y)
    eps = 1e-6
    ok_ste = True
    for i in range(0, 40, 5):
        yp = grid.clone(); yp[i] += eps
        ym = grid.clone(); ym[i] -= eps
        fd = (float((w * yp ** 2).sum()) - float((w * ym ** 2).sum())) / (2 * eps)
        if abs(float(g[i]) - fd) > 1e-3 * max(abs(fd), 1e-8):
            ok_ste = False

    # rate loss wrt model parameters (true smooth function, <=100 params)
    model = pm.ProbModel(
        1, pm.ProbModelConfig(num_scales_M=1, mixtures_K=1, context_channels=2, hidden_layers=1)
    ).double()
    torch.manual_seed(1)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 0.3)
    n_params = sum(p.numel() for p in model.parameters())
    z = torch.from_numpy(np.random.default_rng(3).integers(0, 4, (1, 1, 4, 4))).long()
    u0 = z.double() / 3

    def rate_of(u):
        return pm.rate_bits(model, u, z, 2, 1).sum()

    grads = torch.autograd.grad(rate_of(u0), list(model.parameters()))
    bad = 0
    checked = 0
    for p, g in zip(model.parameters(), grads):
        flat, gf = p.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            old = float(flat[i])
            flat[i] = old + 1e-5
            hi = float(rate_of(u0).detach())
            flat[i] = old - 1e-5
            lo = float(rate_of(u0).detach())
            flat[i] = old
            fd = (hi - lo) / 2e-5
            if abs(fd) > 1e-7:
                checked += 1
                if abs(float(gf[i]) - fd) > 1e-3 * max(abs(fd), 1e-6):
                    bad += 1
    # rate loss wrt the latent through the straight-through surrogate
    uv = u0.clone().requires_grad_(True)
    (gl,) = torch.autograd.grad(rate_of(uv), uv)
    bad_lat = 0
    for idx in [(0, 0, 0, 0), (0, 0, 1, 2), (0, 0, 3, 3)]:
        up = u0.clone(); up[idx] += 1e-6
        um = u0.clone(); um[idx] -= 1e-6
        fd = (float(rate_of(up).detach()) - float(rate_of(um).detach())) / 2e-6
        if abs(float(gl[idx]) - fd) > 1e-3 * max(abs(fd), 1e-6):
            bad_lat += 1
    report("straight-through + rate-loss gradients vs finite differences (1e-3 rel)",
           ok_ste and bad == 0 and bad_lat == 0,
           f"{n_params} params, {checked} param grads checked, {bad} bad, {bad_lat} latent bad")


def test_meta_gradient_oracle():
    # tiny model: latent = w * x0, quadratic loss; n in {1, 2}
    x0, tgt, alpha = 1.2, 0.7, 0.1
    ok = True
    detail = []
    for n in (1, 2):
        def objective(wv, second_order=True):
            w = torch.tensor(wv, dtype=torch.float64, requires_grad=True)
            y0 = w * x0
            y_n, _ = inner_adapt(y0, lambda y: (w * y - tgt) ** 2, n, alpha,
                                 second_order=second_order)
            return (w * y_n - tgt) ** 2, w

        outer, w = objective(0.9)
        (g,) = torch.autograd.grad(outer, w)
        eps = 1e-6
        fd = (float(objective(0.9 + eps)[0]) - float(objective(0.9 - eps)[0])) / (2 * eps)
        rel = abs(float(g) - fd) / max(abs(fd), 1e-12)
        ok &= rel < 1e-3
        detail.append(f"n={n} rel {rel:.2e}")
    # first-order mode equals the hand-derived identity-Jacobian gradient
    wv = 0.9
    w = torch.tensor(wv, dtype=torch.float64, requires_grad=True)
    y0 = w * x0
    y1, _ = inner_adapt(y0, lambda y: (w * y - tgt) ** 2, 1, alpha, second_order=False)
    (g_fo,) = torch.autograd.grad((w * y1 - tgt) ** 2, w)
    y0v = wv * x0
    y1v = y0v - alpha * 2 * wv * (wv * y0v - tgt)
    hand = 2 * (wv * y1v - tgt) * y1v + 2 * wv * (wv * y1v - tgt) * x0
    fo_ok = abs(float(g_fo) - hand) <= 1e-10 * max(abs(hand), 1.0)
    ok &= fo_ok
    report("meta-gradient vs finite differences (n in {1,2}) + first-order identity form",
           ok, "; ".join(detail) + f"; fo exact {fo_ok}")


@needs_bank
def test_table2_analogue_meta_beats_baseline(heldout):
    from metacodec.checkpoint import load_checkpoint

    drops_meta, drops_base = [], []
    for entry in pl.CodecBank.load(MODELS_DIR).entries:
        vid = entry["id"]
        meta_codec = entry["codec"]
        base_codec, _ = load_checkpoint(os.path.join(MODELS_DIR, f"codec{vid}_stage1.npz"))
        lam = entry["metadata"].get("lambda_r", 0.1)
        w = LossWeights(lambda_r=lam)
        for img in heldout[:10]:
            x, _ = pad_image(to_tensor(
                np.ascontiguousarray(img[:128, :128])), meta_codec.cfg.downsample_s)
            _, tr_m = overfit_latent(meta_codec, x, n=4, alpha=0.1, w=w)
            _, tr_b = overfit_latent(base_codec, x, n=4, alpha=0.1, w=w)
            drops_meta.append(tr_m[0] - tr_m[-1])
            drops_base.append(tr_b[0] - tr_b[-1])
    mean_meta, mean_base = float(np.mean(drops_meta)), float(np.mean(drops_base))
    report("Table-2 analogue: meta mean loss drop >= stage-1 baseline (4-iter overfitting)",
           mean_meta >= mean_base, f"meta {mean_meta:.5f} vs baseline {mean_base:.5f}")


@needs_bank
def test_table3_analogue_rate_and_quality_overfitting(bank, heldout):
    entry = bank.by_id(1)
    codec = entry["codec"]
    lam = entry["metadata"].get("lambda_r", 0.2)
    base_w = LossWeights(lambda_r=lam)
    bits = codec.cfg.bits_b
    n_down = n_up = 0
    total = 0
    for img in heldout[:10]:
        x, _ = pad_image(to_tensor(img), codec.cfg.downsample_s)
        with torch.no_grad():
            y0, tau, tau_q, m = codec.masked_latent(x)
            u0, z0 = quantize_pair(y0, bits)
            bpp1 = 8 * len(encode_tensor(
                codec.probmodel, z0.squeeze(0).permute(1, 2, 0).numpy(), bits,
                codec.pcfg.num_scales_M)) / (img.shape[0] * img.shape[1])
            ms1 = ms_ssim_luma(codec.decode_image(u0), x)

        def adapted(w):
            lat = y0.detach().clone().requires_grad_(True)
            from metacodec.training import _loss_from_latent

            fn = lambda l: _loss_from_latent(codec, x, l, tau.detach(), w, bits)[0]
            y_n, _ = inner_adapt(lat, fn, 10, 0.1, second_order=False, mask=m.detach())
            return y_n.detach()

        y_rate = adapted(LossWeights(lambda_r=4 * lam))
        with torch.no_grad():
            _, z2 = quantize_pair(y_rate, bits)
            bpp2 = 8 * len(encode_tensor(
                codec.probmodel, z2.squeeze(0).permute(1, 2, 0).numpy(), bits,
                codec.pcfg.num_scales_M)) / (img.shape[0] * img.shape[1])
        y_dist = adapted(LossWeights(lambda_d1=4.0, lambda_d2=40.0, lambda_r=lam))
        with torch.no_grad():
            u2, _ = quantize_pair(y_dist, bits)
            ms2 = ms_ssim_luma(codec.decode_image(u2), x)
        n_down += bpp2 < bpp1
        n_up += ms2 > ms1
        total += 1
    report("Table-3 analogue: rate-weighted overfitting lowers BPP on >=80% of images",
           n_down >= 0.8 * total, f"{n_down}/{total}")
    report("Table-3 analogue: distortion-weighted overfitting raises MS-SSIM on >=80%",
           n_up >= 0.8 * total, f"{n_up}/{total}")


@needs_bank
def test_bias_adaptation_selection(bank, books, heldout):
    w = LossWeights()
    dominated = 0
    tiles_total = 0
    deltas = []
    for vid in (0, 1):
        entry = bank.by_id(vid)
        codec = entry["codec"]
        book = books.get(vid)
        for img in heldout[:6]:
            x, _ = pad_image(to_tensor(img), codec.cfg.downsample_s)
            with torch.no_grad():
                y0, *_ = codec.masked_latent(x)
                u, _ = quantize_pair(y0, codec.cfg.bits_b)
            rects = pl.tile_grid(x.shape[-2], x.shape[-1], bank.tile_size)
            idx = pl.select_tile_indices(codec, x, u, rects, book, w)
            with torch.no_grad():
                default = pl._tile_losses(codec, x, u, rects, None, w)
                chosen = np.array([
                    default[t] if idx[t] == 255 else
                    pl._tile_losses(codec, x, u, [rects[t]], book.centroids[idx[t]], w)[0]
                    for t in range(len(rects))
                ])
                dominated += int(np.sum(chosen <= default + 1e-9))
                tiles_total += len(rects)
                recon_sel = pl.tiled_decode(codec, u, rects, idx, book)
                recon_def = pl.tiled_decode(
                    codec, u, rects, np.full(len(rects), 255, dtype=np.uint8), None)
                deltas.append(ms_ssim_luma(recon_sel, x) - ms_ssim_luma(recon_def, x))
    report("bias adaptation: selected cluster never worse than default (all tiles)",
           dominated == tiles_total, f"{dominated}/{tiles_total} tiles")
    report("bias adaptation: mean MS-SSIM delta >= 0 on held-out set",
           float(np.mean(deltas)) >= 0.0, f"mean delta {np.mean(deltas):+.5f}")


@needs_bank
def test_rate_control_all_targets(bank, books, heldout):
    n_codecs = len(bank.entries)
    max_b = max(e["codec"].cfg.bits_b for e in bank.entries)
    budget = 10
    trial_bound = n_codecs * max_b + budget + 1
    ok_margin = 0
    ok_term = True
    runs = 0
    decode_fail = 0
    for img in heldout:
        for target in pl.DEFAULT_TARGETS:
            res = pl.compress(img, pl.RateTarget(target), bank, codebook=books,
                              overfit_budget=budget)
            runs += 1
            t = pl.RateTarget(target)
            in_margin = t.lower <= res.bpp <= t.upper
            if in_margin or res.best_effort:
                ok_margin += 1
            ok_term &= res.trials <= trial_bound
            out = pl.decompress(res.data, bank, codebook=books)
            if out.shape != img.shape:
                decode_fail += 1
    report("rate control: every (image, target) within margin or flagged best-effort; "
           "search terminates within bound",
           ok_margin == runs and ok_term and decode_fail == 0,
           f"{ok_margin}/{runs} margin-or-flag, bound {trial_bound}, {decode_fail} decode fails")


@needs_bank
def test_overfit_improves_on_most_heldout_images(bank, heldout):
    # 4-iteration latent overfitting at lr 0.1 should not hurt on >=90% of a
    # held-out set for the trained desk models (high- and mid-rate variants)
    for vid in (0, 1):
        entry = bank.by_id(vid)
        codec = entry["codec"]
        w = LossWeights(lambda_r=entry["metadata"].get("lambda_r", 0.1))
        wins = 0
        for img in heldout[:10]:
            x, _ = pad_image(to_tensor(
                np.ascontiguousarray(img[:128, :128])), codec.cfg.downsample_s)
            _, tr = overfit_latent(codec, x, n=4, alpha=0.1, w=w)
            wins += tr[-1] <= tr[0] + 1e-9
        report(f"latent overfitting non-harmful on >=90% of held-out (variant {vid})",
               wins >= 9, f"{wins}/10")

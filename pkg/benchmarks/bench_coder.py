#!/usr/bin/env python3
"""Throughput benchmark for the range-coder backends.

Runs the same workload through each backend in a subprocess (backend choice
is import-time) and prints symbols/second for encode and decode plus the
speedup over the pure-python fallback.

    python3 benchmarks/bench_coder.py [--symbols N] [--alphabet-bits B] [--backends ...]
"""

import argparse
import json
import os
import subprocess
import sys

_WORKER = r"""
import json, sys, time
import numpy as np
from metacodec.entropy import coder

n, bits, seed = int(sys.argv[1]), int(sys.argv[2]), int(sys.argv[3])
alphabet = 1 << bits
rng = np.random.default_rng(seed)
pmf = rng.dirichlet(np.full(alphabet, 0.5), size=n)
cdfs = coder.pmf_to_cdf(pmf)
# draw each symbol from its own row so payloads are realistic
u = rng.random(n)
cum = np.concatenate([cdfs.astype(np.int64), np.full((n, 1), 65536)], axis=1)
symbols = np.array([np.searchsorted(cum[i], u[i] * 65536, side="right") - 1 for i in range(n)])

# warm up (numba JIT) on a small slice
coder.RangeDecoder(coder.ac_encode(symbols[:64], cdfs[:64])).decode(cdfs[:64])

t0 = time.perf_counter()
payload = coder.ac_encode(symbols, cdfs)
t1 = time.perf_counter()
out = coder.RangeDecoder(payload).decode(cdfs)
t2 = time.perf_counter()
assert np.array_equal(out, symbols)
print(json.dumps({
    "backend": coder.active_backend(),
    "n": n,
    "payload_bytes": len(payload),
    "encode_s": t1 - t0,
    "decode_s": t2 - t1,
}))
"""


def run_backend(backend: str, n: int, bits: int, seed: int) -> dict:
    env = dict(os.environ, METACODEC_BACKEND=backend)
    proc = subprocess.run(
        [sys.executable, "-c", _WORKER, str(n), str(bits), str(seed)],
        env=env, capture_output=True, text=True,
    )
    if proc.returncode != 0:
        raise RuntimeError(f"{backend} worker failed:\n{proc.stderr}")
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--symbols", type=int, default=200_000)
    ap.add_argument("--alphabet-bits", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--backends", nargs="*", default=["pure", "numba"])
    args = ap.parse_args()

    results = {}
    for backend in args.backends:
        try:
            results[backend] = run_backend(backend, args.symbols, args.alphabet_bits, args.seed)
        except RuntimeError as exc:
            print(f"{backend}: SKIPPED ({exc})", file=sys.stderr)

    payloads = {r["payload_bytes"] for r in results.values()}
    if len(payloads) > 1:
        print("WARNING: payload sizes differ across backends!", file=sys.stderr)

    base = results.get("pure")
    print(f"{'backend':>8} {'enc Msym/s':>12} {'dec Msym/s':>12} {'enc speedup':>12} {'dec speedup':>12}")
    for name, r in results.items():
        enc = r["n"] / r["encode_s"] / 1e6
        dec = r["n"] / r["decode_s"] / 1e6
        se = base["encode_s"] / r["encode_s"] if base else float("nan")
        sd = base["decode_s"] / r["decode_s"] if base else float("nan")
        print(f"{name:>8} {enc:>12.3f} {dec:>12.3f} {se:>11.1f}x {sd:>11.1f}x")


if __name__ == "__main__":
    main()

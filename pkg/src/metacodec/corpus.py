"""Desk-scale image corpus built from scikit-image's bundled public-domain
samples: deterministic patch extraction with disjoint train / held-out splits.
"""

from __future__ import annotations

import numpy as np

_COLOR = ("astronaut", "chelsea", "coffee", "cat", "rocket", "colorwheel")
_GRAY = ("camera", "coins", "moon", "brick", "grass", "gravel", "clock", "horse", "page", "text")

# held out entirely from training patches
_EVAL_ONLY = ("coffee", "moon", "gravel", "horse")


def _load_sources():
    from skimage import data as skdata

    sources = {}
    for name in _COLOR + _GRAY:
        img = getattr(skdata, name)()
        arr = np.asarray(img, dtype=np.float32) / 255.0
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        sources[name] = arr[..., :3]
    return sources


def _patches_from(img: np.ndarray, size: int, count: int, rng) -> list[np.ndarray]:
    h, w = img.shape[:2]
    if h < size or w < size:
        return []
    out = []
    for _ in range(count):
        r = int(rng.integers(0, h - size + 1))
        c = int(rng.integers(0, w - size + 1))
        out.append(np.ascontiguousarray(img[r : r + size, c : c + size]))
    return out


def training_patches(size: int = 64, per_image: int = 24, seed: int = 0) -> np.ndarray:
    """(N, size, size, 3) float32 patch stack from the non-held-out sources."""
    rng = np.random.default_rng(seed)
    sources = _load_sources()
    patches = []
    for name in sorted(sources):
        if name in _EVAL_ONLY:
            continue
        patches.extend(_patches_from(sources[name], size, per_image, rng))
    return np.stack(patches)


def heldout_images(size: int = 256, count: int = 20, seed: int = 1) -> list[np.ndarray]:
    """Evaluation images: fixed-size crops drawn round-robin from the held-out
    sources (falling back to unseen crops of the rest when they run short)."""
    rng = np.random.default_rng(seed)
    sources = _load_sources()
    names = [n for n in sorted(sources) if n in _EVAL_ONLY]
    names += [n for n in sorted(sources) if n not in _EVAL_ONLY]
    out = []
    i = 0
    while len(out) < count and i < 10 * count:
        name = names[i % len(names)]
        got = _patches_from(sources[name], size, 1, rng)
        out.extend(got)
        i += 1
    return out[:count]

"""Image quality metrics: multi-scale SSIM, PSNR, BT.601 luma."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WIN_SIZE = 11
_WIN_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def _gaussian_window(channels: int, size: int, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2 * _WIN_SIGMA ** 2))
    g = g / g.sum()
    win2d = torch.outer(g, g)
    return win2d.expand(channels, 1, size, size).contiguous()


def _ssim_components(x: torch.Tensor, y: torch.Tensor):
    c = x.shape[1]
    # shrink the window (odd size) for inputs below 11 px so edge tiles still score
    size = min(_WIN_SIZE, x.shape[-2], x.shape[-1])
    size -= (size + 1) % 2
    win = _gaussian_window(c, size, x.dtype, x.device)
    mu_x = F.conv2d(x, win, groups=c)
    mu_y = F.conv2d(y, win, groups=c)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    sigma_x = F.conv2d(x * x, win, groups=c) - mu_xx
    sigma_y = F.conv2d(y * y, win, groups=c) - mu_yy
    sigma_xy = F.conv2d(x * y, win, groups=c) - mu_xy
    cs = (2 * sigma_xy + _C2) / (sigma_x + sigma_y + _C2)
    lum = (2 * mu_xy + _C1) / (mu_xx + mu_yy + _C1)
    return lum, cs


def usable_scales(h: int, w: int, max_scales: int = len(MSSSIM_WEIGHTS)) -> int:
    """Largest level count whose coarsest scale still fits the 11x11 window."""
    n = 1
    while n < max_scales and min(h, w) // (2 ** n) >= _WIN_SIZE:
        n += 1
    return n


def ms_ssim(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """MS-SSIM in [0, 1], averaged over the batch; channels averaged jointly.

    Scale count shrinks (weights renormalized) when inputs are too small for
    the standard 5 levels.  cs/luminance terms are clamped at 0 so the score
    stays in [0, 1] for non-negative inputs.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    levels = usable_scales(x.shape[-2], x.shape[-1])
    weights = torch.tensor(MSSSIM_WEIGHTS[:levels], dtype=x.dtype, device=x.device)
    weights = weights / weights.sum()
    vals = []
    for lv in range(levels):
        lum, cs = _ssim_components(x, y)
        if lv == levels - 1:
            vals.append((lum * cs).clamp(min=0.0).mean(dim=(1, 2, 3)))
        else:
            vals.append(cs.clamp(min=0.0).mean(dim=(1, 2, 3)))
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
    stack = torch.stack(vals, dim=0)
    return torch.prod(stack ** weights.view(-1, 1), dim=0).mean()


def rgb_to_luma(x: torch.Tensor) -> torch.Tensor:
    """ITU-R BT.601 luma from (B, 3, H, W) RGB in [0, 1]."""
    r, g, b = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    return 0.299 * r + 0.587 * g + 0.114 * b


def ms_ssim_luma(x: torch.Tensor, y: torch.Tensor) -> float:
    return float(ms_ssim(rgb_to_luma(x), rgb_to_luma(y)))


def psnr(x: torch.Tensor, y: torch.Tensor, cap_db: float = 100.0) -> float:
    mse = float(F.mse_loss(x, y))
    if mse <= 0.0:
        return cap_db
    return min(cap_db, 10.0 * math.log10(1.0 / mse))


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float array in [0, 1] -> (1, 3, H, W) tensor."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected (H, W, 3) image array")
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(
        torch.get_default_dtype()
    ).unsqueeze(0)


def to_image(x: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) tensor -> (H, W, 3) float32 array clipped to [0, 1]."""
    return x.detach().squeeze(0).clamp(0, 1).cpu().numpy().transpose(1, 2, 0).astype(np.float32)

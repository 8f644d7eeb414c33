"""Structural-similarity machinery shared by the training losses and the evaluation metrics."""
import logging
import math
from typing import Sequence, Tuple

import torch
import torch.nn.functional as F

from dualsearch.errors import ImageTooSmall, ShapeMismatch

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MEF_C = (0.03 * 255.0) ** 2 / 2
MEF_ED_OFFSET = 1e-3
MEF_MAX_EXPONENT = 10.0
_BAND_ELEMENTS = 1 << 21


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64,
                    device=None) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype=dtype, device=device)


def _filter(x: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    return F.conv2d(x, window[None, None].to(x.dtype))


def _per_channel(x: torch.Tensor) -> torch.Tensor:
    b, c, h, w = x.shape
    return x.reshape(b * c, 1, h, w)


def check_window(x: torch.Tensor, size: int = SSIM_WINDOW):
    if x.dim() != 4:
        raise ShapeMismatch(f"Expected a B×C×H×W tensor, got shape {tuple(x.shape)}")
    if min(x.shape[-2:]) < size:
        raise ImageTooSmall(f"Image of size {tuple(x.shape[-2:])} is smaller than the {size}x{size} window")


def ssim_components(x: torch.Tensor, y: torch.Tensor, data_range: float = 1.0,
                    window: torch.Tensor = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    SSIM and contrast-structure maps of two N×1×H×W tensors ('valid' Gaussian filtering).

    Returns:
        (ssim_map, cs_map), each N×1×(H-10)×(W-10) for the default window.
    """
    if window is None:
        window = gaussian_window(dtype=x.dtype, device=x.device)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = _filter(x, window)
    mu_y = _filter(y, window)
    sigma_xx = _filter(x * x, window) - mu_x * mu_x
    sigma_yy = _filter(y * y, window) - mu_y * mu_y
    sigma_xy = _filter(x * y, window) - mu_x * mu_y
    cs_map = (2 * sigma_xy + c2) / (sigma_xx + sigma_yy + c2)
    luminance_map = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    return luminance_map * cs_map, cs_map


def ssim_index(f: torch.Tensor, r: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Mean SSIM per sample of two B×C×H×W tensors, averaged over channels."""
    if f.shape != r.shape:
        raise ShapeMismatch(f"Shapes differ: {tuple(f.shape)} vs {tuple(r.shape)}")
    check_window(f)
    ssim_map, _ = ssim_components(_per_channel(f), _per_channel(r), data_range)
    return ssim_map.flatten(1).mean(dim=1).reshape(f.shape[0], f.shape[1]).mean(dim=1)


@torch.no_grad()
def _desired_signal_stats(sources: torch.Tensor, window: torch.Tensor):
    """
    Per-patch statistics of the desired signal built from the sources.

    sources is N×K×H×W (float64, [0,255] scale). For every 11×11 patch the centered source
    patches are blended with weights driven by signal strength and structural consistency,
    then rescaled to the strongest source contrast. Only the coefficients of that blend are
    kept, so the fused image can later enter through filtered moments alone.

    Returns:
        b (N×K×H'×W') blend coefficients, mu_box (N×K×H'×W') box means,
        mu_r and var_r (N×H'×W') Gaussian mean and variance of the desired patch.
    """
    n, k, height, width = sources.shape
    size = window.shape[-1]
    out_h, out_w = height - size + 1, width - size + 1
    eps = torch.finfo(torch.float64).eps
    g = window.reshape(1, size * size, 1)
    per_row = n * k * size * size * out_w
    band = max(1, _BAND_ELEMENTS // max(per_row, 1))

    b_rows, mu_rows, mu_r_rows, var_r_rows = [], [], [], []
    for top in range(0, out_h, band):
        rows = min(band, out_h - top)
        chunk = sources[:, :, top:top + rows + size - 1, :]
        patches = F.unfold(chunk.reshape(n * k, 1, rows + size - 1, width), size)
        patches = patches.reshape(n, k, size * size, -1)
        mu = patches.mean(dim=2)
        centered = patches - mu.unsqueeze(2)
        strength = centered.norm(dim=2)
        ed = strength + MEF_ED_OFFSET

        total = patches.sum(dim=1)
        numerator = (total - total.mean(dim=1, keepdim=True)).norm(dim=1)
        consistency = (numerator + eps) / (strength.sum(dim=1) + eps)
        consistency = consistency.clamp(eps, 1 - eps)
        exponent = torch.tan(math.pi / 2 * consistency).clamp(0, MEF_MAX_EXPONENT)

        weights = (ed / size) ** exponent.unsqueeze(1) + eps
        weights = weights / weights.sum(dim=1, keepdim=True)
        a = weights / ed
        blend = (a.unsqueeze(2) * centered).sum(dim=1)
        blend_norm = blend.norm(dim=1)
        max_ed = ed.max(dim=1).values
        scale = torch.where(blend_norm > 0, max_ed / torch.where(blend_norm > 0, blend_norm, 1.0),
                            torch.zeros_like(blend_norm))
        desired = blend * scale.unsqueeze(1)
        mu_r = (g * desired).sum(dim=1)
        var_r = (g * (desired - mu_r.unsqueeze(1)) ** 2).sum(dim=1)

        b_rows.append((a * scale.unsqueeze(1)).reshape(n, k, rows, out_w))
        mu_rows.append(mu.reshape(n, k, rows, out_w))
        mu_r_rows.append(mu_r.reshape(n, rows, out_w))
        var_r_rows.append(var_r.reshape(n, rows, out_w))
    return (torch.cat(b_rows, dim=2), torch.cat(mu_rows, dim=2),
            torch.cat(mu_r_rows, dim=1), torch.cat(var_r_rows, dim=1))


def mef_ssim_index(f: torch.Tensor, sources: Sequence[torch.Tensor]) -> torch.Tensor:
    """
    MEF-SSIM of a fused B×C×H×W tensor against a stack of exposures, per sample.

    Inputs are in [0, 1] and are evaluated on the [0, 255] scale, channel by channel; the
    per-sample score is the channel mean.
    """
    if len(sources) < 2:
        raise ValueError("MEF-SSIM needs at least two source exposures")
    for source in sources:
        if source.shape != f.shape:
            raise ShapeMismatch(f"Source shape {tuple(source.shape)} differs from fused {tuple(f.shape)}")
    check_window(f)
    batch, channels = f.shape[:2]
    window64 = gaussian_window(dtype=torch.float64, device=f.device)
    stack = torch.stack([_per_channel(s.detach().to(torch.float64))[:, 0] for s in sources], dim=1) * 255.0
    b, mu_box, mu_r, var_r = _desired_signal_stats(stack, window64)

    window = window64.to(f.dtype)
    x = _per_channel(f) * 255.0
    ys = stack.to(f.dtype)
    mu_f = _filter(x, window)[:, 0]
    var_f = _filter(x * x, window)[:, 0] - mu_f * mu_f
    cross = torch.zeros_like(mu_f)
    for index in range(ys.shape[1]):
        y = ys[:, index:index + 1]
        cross = cross + b[:, index].to(f.dtype) * (_filter(y * x, window)[:, 0] - mu_box[:, index].to(f.dtype) * mu_f)
    mu_r = mu_r.to(f.dtype)
    cov = cross - mu_r * mu_f
    q = (2 * cov + MEF_C) / (var_r.to(f.dtype) + var_f + MEF_C)
    return q.flatten(1).mean(dim=1).reshape(batch, channels).mean(dim=1)

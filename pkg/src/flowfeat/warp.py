"""Differentiable backward warping and the robust consistency penalty.

All dense maps are channels-last torch tensors: feature maps ``(H, W, d)``,
flow fields ``(H, W, 2)`` with flow channel 0 horizontal (columns) and
channel 1 vertical (rows), displacements in pixels expressed in the
coordinate frame of the earlier frame.
"""

from __future__ import annotations

import torch

CHARBONNIER_EPS = 1e-3
CHARBONNIER_ZETA = 0.5


def _check_spatial(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape[0] != b.shape[0] or a.shape[1] != b.shape[1]:
        raise ValueError(f"spatial shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def bilinear_sample(field: torch.Tensor, cols: torch.Tensor, rows: torch.Tensor) -> torch.Tensor:
    """Sample ``field`` (H, W, d) at fractional positions, clamped to the border.

    ``cols``/``rows`` may have any common shape; the result has that shape
    plus the channel axis. Differentiable in the field values and in the
    sampling positions.
    """
    h, w = field.shape[0], field.shape[1]
    cols = cols.clamp(0, w - 1)
    rows = rows.clamp(0, h - 1)

    c0 = cols.floor().clamp(0, w - 1)
    r0 = rows.floor().clamp(0, h - 1)
    c1 = (c0 + 1).clamp(0, w - 1)
    r1 = (r0 + 1).clamp(0, h - 1)
    wc = cols - c0
    wr = rows - r0

    c0i, c1i = c0.long(), c1.long()
    r0i, r1i = r0.long(), r1.long()
    tl = field[r0i, c0i]
    tr = field[r0i, c1i]
    bl = field[r1i, c0i]
    br = field[r1i, c1i]

    wc = wc.unsqueeze(-1)
    wr = wr.unsqueeze(-1)
    top = tl * (1 - wc) + tr * wc
    bot = bl * (1 - wc) + br * wc
    return top * (1 - wr) + bot * wr


def warp(field: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp ``field`` by ``flow``: out(x) = field(x + flow(x)).

    Bilinear interpolation at fractional targets, coordinates clamped to the
    image rectangle. Differentiable with respect to both arguments.
    """
    _check_spatial(field, flow)
    if flow.shape[-1] != 2:
        raise ValueError(f"flow must have 2 channels, got {flow.shape[-1]}")
    h, w = field.shape[0], field.shape[1]
    rows = torch.arange(h, dtype=field.dtype, device=field.device).view(h, 1).expand(h, w)
    cols = torch.arange(w, dtype=field.dtype, device=field.device).view(1, w).expand(h, w)
    return bilinear_sample(field, cols + flow[..., 0], rows + flow[..., 1])


def charbonnier(residual: torch.Tensor,
                eps: float = CHARBONNIER_EPS,
                zeta: float = CHARBONNIER_ZETA) -> torch.Tensor:
    """Generalized Charbonnier penalty (||a||^2 + eps)^zeta, per pixel.

    The channel axis (last) is reduced; the result has the residual's leading
    shape. Strictly positive and smooth everywhere, ~||a|| for large residuals.
    """
    return (residual.pow(2).sum(dim=-1) + eps).pow(zeta)


def consistency_loss(flow: torch.Tensor,
                     f_prev: torch.Tensor,
                     f_cur: torch.Tensor,
                     eps: float = CHARBONNIER_EPS,
                     zeta: float = CHARBONNIER_ZETA) -> torch.Tensor:
    """Mean Charbonnier distance between f_prev and f_cur warped by flow.

    Lower-bounded by eps**zeta, attained exactly when the warped residual is
    zero at every pixel.
    """
    _check_spatial(f_prev, f_cur)
    if f_prev.shape[-1] != f_cur.shape[-1]:
        raise ValueError("feature maps must share channel count")
    return charbonnier(f_prev - warp(f_cur, flow), eps=eps, zeta=zeta).mean()

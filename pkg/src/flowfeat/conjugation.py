"""Per-level conjugation loss: three warped-consistency terms plus a flow
regularizer, with the stop-gradient rule that shields the level-1 flow from
the feature-side terms."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .warp import consistency_loss


@dataclass
class ConjugationCoefficients:
    """Weights of the conjugation terms.

    ``lam_cur[l-1]``, ``lam_skip[l-1]`` and ``lam_low[l-1]`` weigh, for level
    ``l``, the same-level consistency, the consistency against the level-1
    flow, and the consistency of the level flow against the features one
    level below. ``lam_s``/``lam_r`` weigh flow smoothness and magnitude;
    ``lam_m`` is a global multiplier on the third term (kept at 1).
    """

    lam_cur: list[float] = field(default_factory=lambda: [1e-4, 1e-4])
    lam_skip: list[float] = field(default_factory=lambda: [0.0, 0.0])
    lam_low: list[float] = field(default_factory=lambda: [1.0, 1.0])
    lam_s: float = 1e-4
    lam_r: float = 1e-3
    lam_m: float = 1.0

    def __post_init__(self):
        for name in ("lam_cur", "lam_skip", "lam_low"):
            if any(v < 0 for v in getattr(self, name)):
                raise ValueError(f"{name} must be non-negative")
        if self.lam_s < 0 or self.lam_r < 0 or self.lam_m < 0:
            raise ValueError("regularizer weights must be non-negative")
        if self.lam_low[0] <= 0:
            raise ValueError("lam_low for level 1 must be positive")

    def for_level(self, level: int) -> tuple[float, float, float]:
        return self.lam_cur[level - 1], self.lam_skip[level - 1], self.lam_low[level - 1]


def spatial_gradients(flow: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward differences along columns and rows with replicated edges
    (gradient zero on the last column/row)."""
    dcol = torch.zeros_like(flow)
    drow = torch.zeros_like(flow)
    dcol[:, :-1] = flow[:, 1:] - flow[:, :-1]
    drow[:-1, :] = flow[1:, :] - flow[:-1, :]
    return dcol, drow


def flow_regularizer(flow: torch.Tensor, lam_s: float, lam_r: float) -> torch.Tensor:
    """lam_s * mean squared spatial gradient + lam_r * mean squared magnitude."""
    dcol, drow = spatial_gradients(flow)
    smooth = (dcol.pow(2) + drow.pow(2)).sum(dim=-1).mean()
    magnitude = flow.pow(2).sum(dim=-1).mean()
    return lam_s * smooth + lam_r * magnitude


def conjugation_loss(level: int,
                     flow_l: torch.Tensor,
                     flow_1: torch.Tensor,
                     f_prev_l: torch.Tensor,
                     f_cur_l: torch.Tensor,
                     f_prev_low: torch.Tensor,
                     f_cur_low: torch.Tensor,
                     coeffs: ConjugationCoefficients,
                     term_mask: tuple[bool, bool, bool] = (True, True, True)) -> torch.Tensor:
    """Conjugation loss for one level.

    Terms: (i) features and flow of the level, (ii) level features against the
    level-1 flow, (iii) level flow against the features one level below
    (raw pixels when level == 1), plus the flow regularizer.

    Gradient contract: terms (i) and (ii) never backpropagate into the level-1
    flow; at level 1 term (i) coincides with (ii) and is detached the same
    way, so only term (iii) and the regularizer train the level-1 flow.
    ``term_mask`` lets the warm-up schedule drop (i)/(ii)/(iii + regularizer).
    """
    if level < 1:
        raise ValueError(f"level must be >= 1, got {level}")
    lam_cur, lam_skip, lam_low = coeffs.for_level(level)
    zero = flow_l.new_zeros(())

    flow_for_i = flow_l.detach() if level == 1 else flow_l
    term_i = consistency_loss(flow_for_i, f_prev_l, f_cur_l) if term_mask[0] else zero
    term_ii = consistency_loss(flow_1.detach(), f_prev_l, f_cur_l) if term_mask[1] else zero
    if term_mask[2]:
        term_iii = consistency_loss(flow_l, f_prev_low, f_cur_low)
        reg = flow_regularizer(flow_l, coeffs.lam_s, coeffs.lam_r)
    else:
        term_iii, reg = zero, zero

    return lam_cur * term_i + lam_skip * term_ii + coeffs.lam_m * lam_low * term_iii + reg


def total_conjugation(levels: list[dict], coeffs: ConjugationCoefficients) -> torch.Tensor:
    """Sum of conjugation losses over all levels.

    Each entry holds the per-level tensors under the keys used by
    :func:`conjugation_loss` (``flow``, ``f_prev``, ``f_cur``, ``f_prev_low``,
    ``f_cur_low``); entry order is level order starting at 1.
    """
    if not levels:
        raise ValueError("at least one level is required")
    flow_1 = levels[0]["flow"]
    total = levels[0]["flow"].new_zeros(())
    for i, lv in enumerate(levels):
        total = total + conjugation_loss(
            i + 1, lv["flow"], flow_1, lv["f_prev"], lv["f_cur"],
            lv["f_prev_low"], lv["f_cur_low"], coeffs,
            term_mask=lv.get("term_mask", (True, True, True)),
        )
    return total

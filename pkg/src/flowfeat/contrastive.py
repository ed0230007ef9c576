"""Motion-driven contrastive learning on sampled pixel coordinates.

Pairs of sampled pixels are soft-scored as positive (nearby, coherently
moving) or negative (distant, differently moving) from the estimated flow,
with special handling of static points; the loss contrasts feature
similarities in the usual log-exponential form, both within the earlier
frame and across the frame pair through flow-warped lookups.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .warp import bilinear_sample

COSINE_EPS = 1e-8


@dataclass
class ContrastiveParams:
    tau: float = 0.5          # similarity temperature
    tau_p: float = 0.7        # flow-similarity threshold for positives
    tau_n: float = 0.0        # flow-similarity threshold for negatives
    tau_m: float = 1.0        # static-point magnitude threshold (pixels)
    adaptive_tau_m: bool = False  # use the frame-mean flow magnitude instead
    eta: int = 100            # number of sampled coordinates
    aleph: float = 1.0        # fraction of pairs kept by the filter

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not (-1.0 <= self.tau_n <= self.tau_p <= 1.0):
            raise ValueError("need -1 <= tau_n <= tau_p <= 1")
        if self.tau_m < 0:
            raise ValueError("tau_m must be non-negative")
        if not (0.0 < self.aleph <= 1.0):
            raise ValueError("aleph must lie in (0, 1]")
        if self.eta < 1:
            raise ValueError("eta must be >= 1")


@dataclass
class SampleSet:
    """Sampled pixel coordinates, rows in column 0 and columns in column 1."""

    coords: np.ndarray
    t: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError("coords must have shape (eta, 2)")


@dataclass
class PairScores:
    p: torch.Tensor
    n: torch.Tensor


@dataclass
class SamplingDistribution:
    prob: np.ndarray        # (H, W), sums to 1
    set_id: np.ndarray      # (H, W), index of the A-set each pixel fell into
    set_sizes: np.ndarray   # cardinality per set id (0 for empty sets)
    n_nonempty: int


def effective_tau_m(flow: torch.Tensor, params: ContrastiveParams) -> float:
    """Static-point threshold, optionally the frame-mean flow magnitude."""
    if params.adaptive_tau_m:
        return float(flow.detach().pow(2).sum(dim=-1).sqrt().mean())
    return params.tau_m


def similarity(a: torch.Tensor, b: torch.Tensor, tau: float) -> torch.Tensor:
    """Temperature-scaled cosine similarity; zero vectors are floored."""
    num = (a * b).sum(dim=-1)
    den = a.norm(dim=-1).clamp_min(COSINE_EPS) * b.norm(dim=-1).clamp_min(COSINE_EPS)
    return num / den / tau


def pair_scores(coords: SampleSet, flow: torch.Tensor, params: ContrastiveParams) -> PairScores:
    """Soft positive/negative confidences for every ordered coordinate pair.

    Moving-moving pairs are scored by flow-direction similarity gated at
    tau_p/tau_n and modulated by normalized distance; a moving-static pair is
    a certain negative regardless of distance; a static-static pair is
    neither. Distances are normalized by the maximum distance among the
    sampled coordinates.
    """
    pts = coords.coords
    h, w = flow.shape[0], flow.shape[1]
    if (pts < 0).any() or (pts[:, 0] >= h).any() or (pts[:, 1] >= w).any():
        raise ValueError("sampled coordinates out of bounds")

    with torch.no_grad():
        fvec = flow[pts[:, 0], pts[:, 1]]                      # (eta, 2)
        mag = fvec.norm(dim=-1)
        static = mag < effective_tau_m(flow, params)

        sim = similarity(fvec.unsqueeze(1), fvec.unsqueeze(0), 1.0)

        diff = torch.as_tensor(pts, dtype=flow.dtype, device=flow.device)
        dist = (diff.unsqueeze(1) - diff.unsqueeze(0)).norm(dim=-1)
        max_dist = dist.max()
        dist_norm = dist / max_dist if max_dist > 0 else torch.zeros_like(dist)

        n = (sim <= params.tau_n).to(flow.dtype) * dist_norm
        p = (sim > params.tau_p).to(flow.dtype) * (1.0 - dist_norm)

        one_static = static.unsqueeze(1) ^ static.unsqueeze(0)
        both_static = static.unsqueeze(1) & static.unsqueeze(0)
        n = torch.where(one_static, torch.ones_like(n), n)
        p = torch.where(one_static, torch.zeros_like(p), p)
        n = torch.where(both_static, torch.zeros_like(n), n)
        p = torch.where(both_static, torch.zeros_like(p), p)

    return PairScores(p=p, n=n)


def build_sampling_distribution(flow: torch.Tensor,
                                f_prev: torch.Tensor,
                                tau_m: float) -> SamplingDistribution:
    """Balanced sampling distribution over pixels.

    Pixels are partitioned by (winning feature component, moving/static);
    every nonempty cell of the partition receives equal probability mass,
    uniformly spread over its pixels.
    """
    if flow.shape[:2] != f_prev.shape[:2]:
        raise ValueError("flow and features must share spatial shape")
    flow_np = flow.detach().cpu().numpy()
    feat_np = f_prev.detach().cpu().numpy()
    d = feat_np.shape[-1]

    moving = np.linalg.norm(flow_np, axis=-1) >= tau_m
    winner = np.abs(feat_np).argmax(axis=-1)
    set_id = winner * 2 + np.where(moving, 0, 1)

    sizes = np.bincount(set_id.ravel(), minlength=2 * d)
    nonempty = int((sizes > 0).sum())
    mass = np.zeros(2 * d)
    mass[sizes > 0] = 1.0 / (nonempty * sizes[sizes > 0])
    prob = mass[set_id]
    return SamplingDistribution(prob=prob, set_id=set_id, set_sizes=sizes, n_nonempty=nonempty)


def sample_coords(dist: SamplingDistribution,
                  eta: int,
                  rng: np.random.Generator,
                  t: int = 0) -> SampleSet:
    """Draw ``eta`` distinct pixel coordinates from the balanced distribution."""
    prob = dist.prob.ravel()
    support = int((prob > 0).sum())
    if eta > support:
        raise ValueError(f"eta={eta} exceeds the {support} pixels with positive probability")
    w = dist.prob.shape[1]
    idx = rng.choice(prob.size, size=eta, replace=False, p=prob)
    return SampleSet(coords=np.stack([idx // w, idx % w], axis=1), t=t)


def filter_pairs(scores: PairScores, sims: torch.Tensor, aleph: float) -> PairScores:
    """Keep a fraction ``aleph`` of pairs, balanced between positives and
    negatives: the positives whose representations are currently least
    similar and the negatives whose representations are most similar."""
    if not (0.0 < aleph <= 1.0):
        raise ValueError("aleph must lie in (0, 1]")
    if aleph == 1.0:
        return scores

    sims_np = sims.detach().cpu().numpy().ravel()

    def _select(score: torch.Tensor, keep_largest_sim: bool) -> torch.Tensor:
        flat = score.reshape(-1)
        nz = (flat > 0).nonzero(as_tuple=True)[0].cpu().numpy()
        if nz.size == 0:
            return score
        keep = int(np.ceil(aleph * nz.size))
        key = -sims_np[nz] if keep_largest_sim else sims_np[nz]
        kept = nz[np.argsort(key, kind="stable")[:keep]]
        out = torch.zeros_like(flat)
        out[kept] = flat[kept]
        return out.reshape(score.shape)

    return PairScores(p=_select(scores.p, keep_largest_sim=False),
                      n=_select(scores.n, keep_largest_sim=True))


def _gather_features(fmap: torch.Tensor, pts: np.ndarray) -> torch.Tensor:
    return fmap[torch.as_tensor(pts[:, 0]), torch.as_tensor(pts[:, 1])]


def contrastive_core(g: torch.Tensor,
                     h: torch.Tensor,
                     flow: torch.Tensor | None,
                     scores: PairScores,
                     coords: SampleSet,
                     params: ContrastiveParams) -> torch.Tensor:
    """Log-exponential contrastive loss over the sampled coordinates.

    The anchor features come from ``g`` at the coordinates; the second side
    comes from ``h`` looked up at the flow-displaced coordinates (bilinear,
    clamped), or in place when ``flow`` is None. Flow values act as constants.
    Returns exactly 0 when there is no positive mass.
    """
    pts = coords.coords
    z = scores.p.sum()
    if float(z) == 0.0:
        return g.new_zeros(())

    g_feat = _gather_features(g, pts)
    if flow is None:
        h_feat = _gather_features(h, pts)
    else:
        with torch.no_grad():
            disp = flow[pts[:, 0], pts[:, 1]]
        rows = torch.as_tensor(pts[:, 0], dtype=h.dtype, device=h.device) + disp[:, 1]
        cols = torch.as_tensor(pts[:, 1], dtype=h.dtype, device=h.device) + disp[:, 0]
        h_feat = bilinear_sample(h, cols, rows)

    g_n = g_feat / g_feat.norm(dim=-1, keepdim=True).clamp_min(COSINE_EPS)
    h_n = h_feat / h_feat.norm(dim=-1, keepdim=True).clamp_min(COSINE_EPS)
    s = g_n @ h_n.T / params.tau                              # (eta, eta)

    # -log(e^s_ij / (e^s_ij + sum_z n_iz e^s_iz)) == softplus(B_i - s_ij).
    # Zero-weight negatives get a finite log sentinel: a true -inf row would
    # leak NaNs through the logsumexp backward pass.
    log_n = torch.where(scores.n > 0,
                        scores.n.clamp_min(torch.finfo(s.dtype).tiny).log(),
                        torch.full_like(scores.n, -1e9))
    b = torch.logsumexp(log_n + s, dim=1, keepdim=True)
    loss = torch.nn.functional.softplus(b - s)
    return (scores.p * loss).sum() / z


def self_supervised_loss(f_prev: torch.Tensor,
                         f_cur: torch.Tensor,
                         flow: torch.Tensor,
                         coords: SampleSet,
                         params: ContrastiveParams) -> torch.Tensor:
    """In-frame plus cross-temporal contrastive objective for one level.

    Pair scores are computed once from the level flow and reused by both
    instances; the in-frame term compares the earlier frame with itself
    (no warping), the cross-temporal term warps the second side by the flow.
    """
    scores = pair_scores(coords, flow, params)
    if params.aleph < 1.0:
        with torch.no_grad():
            pts = coords.coords
            feats = _gather_features(f_prev, pts)
            sims = similarity(feats.unsqueeze(1), feats.unsqueeze(0), 1.0)
        scores = filter_pairs(scores, sims, params.aleph)
    in_frame = contrastive_core(f_prev, f_prev, None, scores, coords, params)
    cross = contrastive_core(f_prev, f_cur, flow, scores, coords, params)
    return in_frame + cross

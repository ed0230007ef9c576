"""Online training loop: one gradient update per streamed frame pair.

Per step: flows and features are extracted at every level, the total loss
(conjugation plus motion-driven contrastive terms, summed over levels) is
assembled under the gradient-routing rules, the flow branch and the fast
feature learner each take one optimizer step, and the slow learner follows by
exponential moving average of the new fast weights. There are no replay
buffers: every pair is consumed exactly once.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .conjugation import ConjugationCoefficients, conjugation_loss
from .contrastive import (ContrastiveParams, build_sampling_distribution,
                          effective_tau_m, sample_coords, self_supervised_loss)
from .hierarchy import (ModelState, ema_update, forward_features, forward_flow,
                        load_checkpoint, save_checkpoint)
from .stream import Frame, FramePair, StreamHandle, open_stream


@dataclass
class TrainerConfig:
    alpha_f: float = 1e-3          # feature (fast learner) learning rate
    alpha_m: float = 1e-4          # flow learning rate
    xi: float = 0.99               # EMA coefficient of the slow learner
    t_sched_laps: int = 0          # warm-up unit, converted to frames via the stream
    optimizer_f: str = "sgd"
    optimizer_m: str = "adam"
    augment_types: str = ""        # subset of "ABC"; empty disables augmentation
    seed: int = 1234
    checkpoint_every: int = 0      # steps between checkpoints; 0 = final only
    checkpoint_dir: str | None = None
    log_path: str | None = None
    log_every: int = 1
    threads: int = 1               # 0 leaves the torch default

    def __post_init__(self):
        if self.alpha_f < 0 or self.alpha_m < 0:
            raise ValueError("learning rates must be non-negative")
        if not (0.0 <= self.xi < 1.0):
            raise ValueError("xi must lie in [0, 1)")
        if self.optimizer_f not in ("sgd", "adam") or self.optimizer_m not in ("sgd", "adam"):
            raise ValueError("optimizers must be 'sgd' or 'adam'")
        if any(c not in "ABC" for c in self.augment_types):
            raise ValueError("augment_types may only contain A, B, C")


@dataclass
class ActivationMask:
    flow: list[bool]
    feat: list[bool]

    def all_active(self) -> bool:
        return all(self.flow) and all(self.feat)


def schedule_active_components(t: int, t_sched_frames: int, n_levels: int) -> ActivationMask:
    """Warm-up schedule: the level-1 flow learns first, its features follow
    after t_sched frames, then the next level repeats the pattern.

    Activation is monotone in t; t_sched_frames == 0 activates everything at
    t == 0. Order: flow 1, features 1, flow 2, features 2, ...
    """
    if t_sched_frames == 0:
        return ActivationMask(flow=[True] * n_levels, feat=[True] * n_levels)
    flow = [t >= 2 * (l - 1) * t_sched_frames for l in range(1, n_levels + 1)]
    feat = [t >= (2 * l - 1) * t_sched_frames for l in range(1, n_levels + 1)]
    return ActivationMask(flow=flow, feat=feat)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def _resize_bilinear(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    x = torch.from_numpy(pixels).permute(2, 0, 1).unsqueeze(0)
    y = torch.nn.functional.interpolate(x, size=(height, width), mode="bilinear",
                                        align_corners=False)
    return y.squeeze(0).permute(1, 2, 0).numpy()


def augment_pair(pair: FramePair, rng: np.random.Generator, types: str) -> list[FramePair]:
    """Original pair plus one augmented pair per enabled type.

    Type A crops one randomly chosen frame of the pair (ratio > 0.9) and
    rescales it back; type B flips both frames identically; type C applies
    color distortion and Gaussian blur to one randomly chosen frame.
    """
    out = [pair]
    h, w, _ = pair.prev.pixels.shape
    for kind in types:
        prev = pair.prev.pixels.copy()
        cur = pair.cur.pixels.copy()
        if kind == "A":
            ratio = rng.uniform(0.9, 1.0)
            ch, cw = max(int(round(h * ratio)), 1), max(int(round(w * ratio)), 1)
            r0 = int(rng.integers(0, h - ch + 1))
            c0 = int(rng.integers(0, w - cw + 1))
            target = int(rng.integers(0, 2))
            src = prev if target == 0 else cur
            crop = _resize_bilinear(src[r0:r0 + ch, c0:c0 + cw], h, w)
            if target == 0:
                prev = crop
            else:
                cur = crop
        elif kind == "B":
            axes = []
            if rng.integers(0, 2):
                axes.append(1)  # horizontal
            if rng.integers(0, 2):
                axes.append(0)  # vertical
            for ax in axes:
                prev = np.flip(prev, axis=ax).copy()
                cur = np.flip(cur, axis=ax).copy()
        elif kind == "C":
            target = int(rng.integers(0, 2))
            src = prev if target == 0 else cur
            brightness = rng.uniform(0.7, 1.3)
            contrast = rng.uniform(0.7, 1.3)
            mean = src.mean()
            img = np.clip((src - mean) * contrast + mean * brightness, 0.0, 1.0)
            sigma = rng.uniform(0.3, 1.2)
            img = gaussian_filter(img, sigma=(sigma, sigma, 0)).astype(np.float32)
            img = np.clip(img, 0.0, 1.0)
            if target == 0:
                prev = img
            else:
                cur = img
        out.append(FramePair(prev=Frame(pixels=prev.astype(np.float32), t=pair.prev.t),
                             cur=Frame(pixels=cur.astype(np.float32), t=pair.cur.t)))
    return out


# ---------------------------------------------------------------------------
# Forward passes and loss assembly
# ---------------------------------------------------------------------------

@dataclass
class LevelForward:
    flow: torch.Tensor        # (H, W, 2); gradients reach only this level's flow net
    f_prev: torch.Tensor      # fast-learner features of the earlier frame (grad)
    f_cur: torch.Tensor       # slow-learner features of the later frame (constant)
    f_prev_low: torch.Tensor  # inputs one level below (raw pixels at level 1)
    f_cur_low: torch.Tensor


def forward_all(state: ModelState, pair: FramePair) -> list[LevelForward]:
    """Run every level on a frame pair with the training-time gradient routing.

    The earlier frame goes through the fast (gradient) feature weights, the
    later frame through the slow (EMA) weights as a constant. Flow estimators
    above level 1 consume the level below's representations with gradients
    blocked, so the flow branch trains only through the conjugation terms.
    """
    dtype = state.dtype
    prev_in = torch.from_numpy(pair.prev.pixels).to(dtype)
    cur_in = torch.from_numpy(pair.cur.pixels).to(dtype)
    levels = []
    for lv in state.levels:
        if not levels:
            flow_prev_in, flow_cur_in = prev_in, cur_in
        else:
            flow_prev_in, flow_cur_in = prev_in.detach(), cur_in.detach()
        flow = forward_flow(flow_prev_in, flow_cur_in, lv.flow)
        f_prev = forward_features(prev_in, lv.feat_gra)
        with torch.no_grad():
            f_cur = forward_features(cur_in, lv.feat_ema)
        levels.append(LevelForward(flow=flow, f_prev=f_prev, f_cur=f_cur,
                                   f_prev_low=prev_in, f_cur_low=cur_in))
        prev_in, cur_in = f_prev, f_cur
    return levels


def total_loss(levels: list[LevelForward],
               conj: ConjugationCoefficients,
               contr: ContrastiveParams,
               mask: ActivationMask,
               rng: np.random.Generator) -> tuple[torch.Tensor, dict]:
    """Total per-step objective: conjugation plus self-supervised terms over
    all levels, gated by the warm-up activation mask."""
    flow_1 = levels[0].flow
    total = levels[0].flow.new_zeros(())
    parts: dict[str, float] = {}
    for i, lv in enumerate(levels):
        level = i + 1
        term_mask = (mask.feat[i], mask.feat[i], mask.flow[i])
        l_conj = conjugation_loss(level, lv.flow, flow_1, lv.f_prev, lv.f_cur,
                                  lv.f_prev_low, lv.f_cur_low, conj, term_mask=term_mask)
        total = total + l_conj
        parts[f"conj_l{level}"] = float(l_conj.detach())
        if mask.feat[i]:
            flow_const = lv.flow.detach()
            dist = build_sampling_distribution(flow_const, lv.f_prev.detach(),
                                               effective_tau_m(flow_const, contr))
            coords = sample_coords(dist, contr.eta, rng)
            l_self = self_supervised_loss(lv.f_prev, lv.f_cur, flow_const, coords, contr)
            total = total + l_self
            parts[f"self_l{level}"] = float(l_self.detach())
    return total, parts


# ---------------------------------------------------------------------------
# The trainer
# ---------------------------------------------------------------------------

class Trainer:
    def __init__(self, state: ModelState, trainer_cfg: TrainerConfig,
                 conj: ConjugationCoefficients, contr: ContrastiveParams,
                 t_sched_frames: int = 0):
        self.state = state
        self.cfg = trainer_cfg
        self.conj = conj
        self.contr = contr
        self.t_sched_frames = t_sched_frames

        flow_params = [p for lv in state.levels for p in lv.flow.parameters()]
        feat_params = [p for lv in state.levels for p in lv.feat_gra.parameters()]
        self.opt_flow = self._make_optimizer(self.cfg.optimizer_m, flow_params, self.cfg.alpha_m)
        self.opt_feat = self._make_optimizer(self.cfg.optimizer_f, feat_params, self.cfg.alpha_f)

        seeds = np.random.SeedSequence(self.cfg.seed).spawn(2)
        self.sample_rng = np.random.default_rng(seeds[0])
        self.augment_rng = np.random.default_rng(seeds[1])

    @staticmethod
    def _make_optimizer(kind: str, params, lr: float):
        if kind == "adam":
            return torch.optim.Adam(params, lr=lr)
        return torch.optim.SGD(params, lr=lr)

    def activation(self) -> ActivationMask:
        return schedule_active_components(self.state.step, self.t_sched_frames,
                                          self.state.n_levels)

    def train_step(self, pair: FramePair) -> dict:
        """One online update from one frame pair (plus augmented views)."""
        mask = self.activation()
        pairs = augment_pair(pair, self.augment_rng, self.cfg.augment_types) \
            if self.cfg.augment_types else [pair]

        loss = None
        parts_acc: dict[str, float] = {}
        self.last_flows = None
        try:
            for p in pairs:
                levels = forward_all(self.state, p)
                if p is pair:
                    self.last_flows = [lv.flow.detach() for lv in levels]
                l, parts = total_loss(levels, self.conj, self.contr, mask, self.sample_rng)
                loss = l if loss is None else loss + l
                for k, v in parts.items():
                    parts_acc[k] = parts_acc.get(k, 0.0) + v / len(pairs)
            loss = loss / len(pairs)
            diverged = not bool(torch.isfinite(loss))
        except FloatingPointError:
            diverged = True

        record = {"step": self.state.step + 1, "aborted": diverged}
        if diverged:
            self.opt_flow.zero_grad(set_to_none=True)
            self.opt_feat.zero_grad(set_to_none=True)
            self.state.step += 1
            return record

        self.opt_flow.zero_grad(set_to_none=True)
        self.opt_feat.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_flow.step()
        self.opt_feat.step()
        ema_update(self.state, self.cfg.xi)
        self.state.step += 1
        record["loss"] = float(loss.detach())
        record.update(parts_acc)
        return record

    # -- checkpoint plumbing ------------------------------------------------

    def extra_state(self) -> dict:
        return {
            "opt_flow": self.opt_flow.state_dict(),
            "opt_feat": self.opt_feat.state_dict(),
            "sample_rng": self.sample_rng.bit_generator.state,
            "augment_rng": self.augment_rng.bit_generator.state,
        }

    def load_extra_state(self, extra: dict) -> None:
        self.opt_flow.load_state_dict(extra["opt_flow"])
        self.opt_feat.load_state_dict(extra["opt_feat"])
        self.sample_rng.bit_generator.state = extra["sample_rng"]
        self.augment_rng.bit_generator.state = extra["augment_rng"]


def flow_epe(flow: torch.Tensor, gt_flow: np.ndarray, moving_only: bool = True) -> float | None:
    """Mean endpoint error against ground truth, on moving pixels by default."""
    est = flow.detach().cpu().numpy()
    err = np.linalg.norm(est - gt_flow, axis=-1)
    if moving_only:
        sel = np.linalg.norm(gt_flow, axis=-1) > 0
        if not sel.any():
            return None
        return float(err[sel].mean())
    return float(err.mean())


def run(full_cfg, resume_from: str | None = None):
    """Consume the configured stream once, training online; returns the final
    model state and the metric records.

    A stream of T frames yields T steps: the first is the bootstrap pair
    (first frame against itself), the remaining T-1 are consecutive pairs.
    Deterministic under a fixed seed in single-threaded mode; resuming from a
    checkpoint reproduces the uninterrupted run exactly.
    """
    from .config import config_hash, build_level_specs  # local import, config depends on us

    tcfg: TrainerConfig = full_cfg.trainer
    if tcfg.threads:
        torch.set_num_threads(tcfg.threads)

    stream = open_stream(full_cfg.stream)
    cfg_hash = config_hash(full_cfg)
    t_sched_frames = tcfg.t_sched_laps * full_cfg.stream.frames_per_lap

    from .hierarchy import build_model
    state = build_model(build_level_specs(full_cfg), seed=tcfg.seed,
                        dtype=getattr(torch, full_cfg.model.dtype))
    trainer = Trainer(state, tcfg, full_cfg.conjugation, full_cfg.contrastive,
                      t_sched_frames=t_sched_frames)
    if resume_from is not None:
        state, extra = load_checkpoint(resume_from, cfg_hash)
        trainer = Trainer(state, tcfg, full_cfg.conjugation, full_cfg.contrastive,
                          t_sched_frames=t_sched_frames)
        trainer.load_extra_state(extra)

    total_steps = len(stream)
    log_fh = None
    if tcfg.log_path:
        Path(tcfg.log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(tcfg.log_path, "a")
    ckpt_dir = Path(tcfg.checkpoint_dir) if tcfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    metrics = []
    prev = stream.frame(state.step - 1) if state.step >= 1 else None
    stream.seek(state.step)
    t0 = time.monotonic()
    try:
        while state.step < total_steps:
            step = state.step + 1
            cur = stream.next_frame()
            pair = FramePair(prev=prev if prev is not None else cur, cur=cur)
            record = trainer.train_step(pair)
            prev = cur
            if step > 1 and trainer.last_flows is not None:
                gt = stream.ground_truth(step - 1)
                if gt is not None and gt.flow is not None:
                    epe = flow_epe(trainer.last_flows[0], gt.flow)
                    if epe is not None:
                        record["epe_l1"] = epe
            record["wall_clock"] = time.monotonic() - t0
            if step % tcfg.log_every == 0 or step == total_steps:
                metrics.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
            if ckpt_dir and tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
                save_checkpoint(state, ckpt_dir / f"step_{step:08d}.pt", cfg_hash,
                                extra=trainer.extra_state())
        if ckpt_dir:
            save_checkpoint(state, ckpt_dir / "final.pt", cfg_hash, extra=trainer.extra_state())
    finally:
        if log_fh:
            log_fh.close()
    return state, metrics

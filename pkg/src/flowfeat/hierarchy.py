"""The N-level stack of per-pixel feature extractors and flow estimators.

Each level holds three encoder-decoder networks: a flow estimator and two
copies of the feature extractor, a fast learner updated by gradient steps and
a slow learner updated by exponential moving average. Feature extractors keep
the long skip connections of the U-shape; flow estimators have them cut.
All convolutions use same padding and the decoder mirrors the encoder, so
spatial dimensions are preserved end to end. Normalization is instance-style:
the online loop sees a single pair at a time, so nothing may depend on batch
statistics.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


@dataclass
class LevelSpec:
    level: int
    in_channels: int
    feature_channels: int = 32
    base_width: int = 8
    depth: int = 2

    def __post_init__(self):
        if self.level < 1:
            raise ValueError("level index starts at 1")
        if self.in_channels <= 0 or self.feature_channels <= 0:
            raise ValueError("channel counts must be positive")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")


def _norm(ch: int) -> nn.Module:
    return nn.InstanceNorm2d(ch, affine=True, track_running_stats=False)


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm1 = _norm(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = _norm(ch)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(x + y)


class EncoderDecoder(nn.Module):
    """U-shaped dense predictor; ``skips`` toggles the encoder-to-decoder
    shortcuts (enabled for features, cut for flows)."""

    def __init__(self, in_channels: int, out_channels: int, base_width: int,
                 depth: int, skips: bool):
        super().__init__()
        self.skips = skips
        self.depth = depth
        w = base_width
        self.stem = nn.Sequential(nn.Conv2d(in_channels, w, 3, padding=1), _norm(w), nn.ReLU())
        downs, encs = [], []
        widths = [w * (2 ** i) for i in range(depth + 1)]
        for i in range(depth):
            downs.append(nn.Sequential(
                nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1),
                _norm(widths[i + 1]), nn.ReLU()))
            encs.append(ResBlock(widths[i + 1]))
        self.downs = nn.ModuleList(downs)
        self.encs = nn.ModuleList(encs)
        ups, decs = [], []
        for i in reversed(range(depth)):
            ups.append(nn.Sequential(
                nn.Conv2d(widths[i + 1], widths[i], 3, padding=1),
                _norm(widths[i]), nn.ReLU()))
            decs.append(ResBlock(widths[i]))
        self.ups = nn.ModuleList(ups)
        self.decs = nn.ModuleList(decs)
        self.head = nn.Conv2d(w, out_channels, 3, padding=1)

    def forward(self, x):
        x = self.stem(x)
        stages = [x]
        for down, enc in zip(self.downs, self.encs):
            x = enc(down(x))
            stages.append(x)
        for i, (up, dec) in enumerate(zip(self.ups, self.decs)):
            skip = stages[self.depth - 1 - i]
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = up(x)
            if self.skips:
                x = x + skip
            x = dec(x)
        return self.head(x)


def feature_net(spec: LevelSpec) -> EncoderDecoder:
    return EncoderDecoder(spec.in_channels, spec.feature_channels,
                          spec.base_width, spec.depth, skips=True)


def flow_net(spec: LevelSpec) -> EncoderDecoder:
    return EncoderDecoder(2 * spec.in_channels, 2, spec.base_width, spec.depth, skips=False)


def _init_weights(module: nn.Module, rng: np.random.Generator, head_scale: float = 1.0) -> None:
    """He-normal init drawn from an explicit generator so model construction
    never touches torch's global RNG."""
    for name, m in module.named_modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            std = math.sqrt(2.0 / fan_in)
            if name == "head":
                std *= head_scale
            w = rng.normal(0.0, std, size=tuple(m.weight.shape))
            with torch.no_grad():
                m.weight.copy_(torch.from_numpy(w))
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


@dataclass
class LevelNets:
    flow: EncoderDecoder
    feat_gra: EncoderDecoder
    feat_ema: EncoderDecoder


@dataclass
class ModelState:
    levels: list[LevelNets]
    specs: list[LevelSpec]
    step: int = 0
    dtype: torch.dtype = torch.float32
    meta: dict = field(default_factory=dict)

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def build_model(specs: list[LevelSpec], seed: int, dtype: torch.dtype = torch.float32) -> ModelState:
    """Build all levels with deterministic seed-derived weights; the slow
    learner starts as an exact copy of the fast learner."""
    if not specs:
        raise ValueError("at least one level spec is required")
    for i, spec in enumerate(specs):
        if spec.level != i + 1:
            raise ValueError(f"specs must be ordered by level, got level {spec.level} at position {i}")
        if i > 0 and spec.in_channels != specs[i - 1].feature_channels:
            raise ValueError(
                f"level {spec.level} expects {spec.in_channels} input channels but level "
                f"{spec.level - 1} outputs {specs[i - 1].feature_channels}")

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    levels = []
    for spec in specs:
        fnet = flow_net(spec)
        _init_weights(fnet, rng, head_scale=0.1)  # start near zero motion
        gra = feature_net(spec)
        _init_weights(gra, rng)
        ema = copy.deepcopy(gra)
        for net in (fnet, gra, ema):
            net.to(dtype)
        for p in ema.parameters():
            p.requires_grad_(False)
        levels.append(LevelNets(flow=fnet, feat_gra=gra, feat_ema=ema))
    return ModelState(levels=levels, specs=list(specs), step=0, dtype=dtype)


def _to_net_layout(x: torch.Tensor) -> torch.Tensor:
    return x.permute(2, 0, 1).unsqueeze(0)


def _from_net_layout(x: torch.Tensor) -> torch.Tensor:
    return x.squeeze(0).permute(1, 2, 0)


def forward_features(x: torch.Tensor, net: EncoderDecoder) -> torch.Tensor:
    """Run a feature extractor on a channels-last map, preserving H and W."""
    out = _from_net_layout(net(_to_net_layout(x)))
    if not torch.isfinite(out).all():
        raise FloatingPointError("feature extractor produced non-finite values")
    return out


def forward_flow(f_prev: torch.Tensor, f_cur: torch.Tensor, net: EncoderDecoder) -> torch.Tensor:
    """Estimate the flow of a pair from channel-concatenated representations."""
    if f_prev.shape != f_cur.shape:
        raise ValueError("flow inputs must share shape")
    x = torch.cat([f_prev, f_cur], dim=-1)
    out = _from_net_layout(net(_to_net_layout(x)))
    if not torch.isfinite(out).all():
        raise FloatingPointError("flow estimator produced non-finite values")
    return out


def ema_update(state: ModelState, xi: float) -> None:
    """theta_ema <- xi * theta_ema + (1 - xi) * theta_gra, per level."""
    with torch.no_grad():
        for lv in state.levels:
            for p_ema, p_gra in zip(lv.feat_ema.parameters(), lv.feat_gra.parameters()):
                p_ema.mul_(xi).add_((1.0 - xi) * p_gra)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(state: ModelState, path, config_hash: str, extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "step": state.step,
        "dtype": str(state.dtype).replace("torch.", ""),
        "specs": [vars(s) for s in state.specs],
        "levels": [
            {
                "flow": lv.flow.state_dict(),
                "feat_gra": lv.feat_gra.state_dict(),
                "feat_ema": lv.feat_ema.state_dict(),
            }
            for lv in state.levels
        ],
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, config_hash: str) -> tuple[ModelState, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    if payload["config_hash"] != config_hash:
        raise ValueError("checkpoint config hash does not match the supplied config")
    specs = [LevelSpec(**s) for s in payload["specs"]]
    dtype = getattr(torch, payload["dtype"])
    state = build_model(specs, seed=0, dtype=dtype)
    for lv, saved in zip(state.levels, payload["levels"]):
        lv.flow.load_state_dict(saved["flow"])
        lv.feat_gra.load_state_dict(saved["feat_gra"])
        lv.feat_ema.load_state_dict(saved["feat_ema"])
    state.step = payload["step"]
    return state, payload["extra"]

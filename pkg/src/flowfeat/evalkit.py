"""Evaluation: supervised pixel templates, open-set nearest-template
classification with abstention, macro-F1 scoring over object classes plus
background, and image renderers for flows, features and predictions.

Template collection and classification read the slow-learner (EMA) feature
weights and never touch training state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .hierarchy import ModelState, forward_features, forward_flow
from .stream import LABEL_PALETTE, Frame, StreamHandle

ABSTAIN_ID = 0  # abstention predicts the background class


@dataclass
class TemplateEntry:
    vectors: list[np.ndarray]  # one feature vector per level
    class_id: int
    frame_index: int
    coord: tuple[int, int]


@dataclass
class TemplateMemory:
    entries: list[TemplateEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def classes(self) -> list[int]:
        return sorted({e.class_id for e in self.entries})

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-level-normalized, concatenated template matrix and class ids."""
        if not self.entries:
            raise ValueError("template memory is empty")
        rows = []
        for e in self.entries:
            parts = []
            for v in e.vectors:
                norm = np.linalg.norm(v)
                parts.append(v / norm if norm > 0 else v)
            rows.append(np.concatenate(parts))
        return np.stack(rows), np.array([e.class_id for e in self.entries])


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    per_class: dict[int, ClassMetrics]
    macro_f1: float
    mean_epe: float | None
    n_frames: int
    n_pixels: int
    per_frame: list[dict] = field(default_factory=list)


def extract_features(state: ModelState, frame: Frame) -> list[torch.Tensor]:
    """Slow-learner feature maps of a frame at every level."""
    x = torch.from_numpy(frame.pixels).to(state.dtype)
    maps = []
    with torch.no_grad():
        for lv in state.levels:
            x = forward_features(x, lv.feat_ema)
            maps.append(x)
    return maps


def default_supervision_points(stream: StreamHandle,
                               start: int,
                               end: int,
                               per_object: int,
                               spacing: int) -> list[tuple[int, tuple[int, int], int]]:
    """Supervision points at the mandated cadence, read off ground truth.

    For each object class, ``per_object`` frames spaced ``spacing`` apart
    starting at ``start``; the coordinate is the median in-mask pixel, a
    deterministic stand-in for a supervisor's click.
    """
    points = []
    for class_id in stream.spec.class_ids():
        for k in range(per_object):
            t = start + k * spacing
            if t >= end:
                raise ValueError(
                    f"template segment [{start}, {end}) too short for spacing {spacing}")
            gt = stream.ground_truth(t)
            if gt is None:
                raise ValueError("supervision points require ground-truth labels")
            rows, cols = np.nonzero(gt.labels == class_id)
            if rows.size == 0:
                raise ValueError(f"class {class_id} absent from frame {t}")
            mid = rows.size // 2
            points.append((t, (int(rows[mid]), int(cols[mid])), class_id))
    return points


def collect_templates(state: ModelState,
                      stream: StreamHandle,
                      points: list[tuple[int, tuple[int, int], int]]) -> TemplateMemory:
    """Extract per-level feature vectors at the supervision points.

    Read-only with respect to the model; an out-of-bounds coordinate or one
    that lands on an unlabeled (background) pixel is an error.
    """
    memory = TemplateMemory()
    h, w = stream.spec.height, stream.spec.width
    for t, (row, col), class_id in points:
        if not (0 <= row < h and 0 <= col < w):
            raise ValueError(f"supervision point {(row, col)} out of bounds")
        gt = stream.ground_truth(t)
        if gt is not None and gt.labels[row, col] != class_id:
            raise ValueError(
                f"supervision point {(row, col)} at frame {t} is not on class {class_id}")
        maps = extract_features(state, stream.frame(t))
        vectors = [m[row, col].cpu().numpy().astype(np.float64) for m in maps]
        memory.entries.append(TemplateEntry(vectors=vectors, class_id=class_id,
                                            frame_index=t, coord=(row, col)))
    return memory


def _normalize_concat(maps: list[np.ndarray]) -> np.ndarray:
    parts = []
    for m in maps:
        norm = np.linalg.norm(m, axis=-1, keepdims=True)
        parts.append(m / np.maximum(norm, 1e-12))
    return np.concatenate(parts, axis=-1)


def classify_map(maps: list[np.ndarray],
                 memory: TemplateMemory,
                 tau_abstain: float) -> np.ndarray:
    """Predict a class id per pixel by nearest template under cosine
    similarity of per-level-normalized, concatenated features; abstain to
    background when the best similarity falls below 1 - tau_abstain."""
    templates, classes = memory.stacked()
    tnorm = np.linalg.norm(templates, axis=1, keepdims=True)
    templates = templates / np.maximum(tnorm, 1e-12)
    feats = _normalize_concat(maps)
    fnorm = np.linalg.norm(feats, axis=-1, keepdims=True)
    feats = feats / np.maximum(fnorm, 1e-12)
    scores = feats @ templates.T
    best = scores.argmax(axis=-1)
    best_sim = np.take_along_axis(scores, best[..., None], axis=-1)[..., 0]
    pred = classes[best]
    pred[best_sim < 1.0 - tau_abstain] = ABSTAIN_ID
    return pred.astype(np.int32)


def classify(vectors: list[np.ndarray], memory: TemplateMemory, tau_abstain: float) -> int:
    """Single-pixel variant of :func:`classify_map`."""
    maps = [v[None, None, :] for v in vectors]
    return int(classify_map(maps, memory, tau_abstain)[0, 0])


def f1_scores(pred: np.ndarray, labels: np.ndarray, class_ids: list[int]) -> dict[int, ClassMetrics]:
    out = {}
    for c in class_ids:
        tp = int(((pred == c) & (labels == c)).sum())
        fp = int(((pred == c) & (labels != c)).sum())
        fn = int(((pred != c) & (labels == c)).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out[c] = ClassMetrics(precision=precision, recall=recall, f1=f1,
                              support=int((labels == c).sum()))
    return out


def evaluate_lap(state: ModelState,
                 stream: StreamHandle,
                 frame_range: range,
                 memory: TemplateMemory,
                 tau_abstain: float) -> MetricsReport:
    """Classify every pixel of every frame in the range and score macro F1
    over the object classes and background; abstention counts as a background
    prediction. Includes mean flow endpoint error when ground truth flow is
    available."""
    if len(frame_range) == 0:
        raise ValueError("empty evaluation segment")
    class_ids = [0] + stream.spec.class_ids()
    all_pred, all_gt = [], []
    per_frame, epes = [], []
    prev_frame = None
    for t in frame_range:
        frame = stream.frame(t)
        gt = stream.ground_truth(t)
        if gt is None:
            raise ValueError(f"frame {t} has no ground-truth labels")
        maps = [m.cpu().numpy() for m in extract_features(state, frame)]
        pred_t = classify_map(maps, memory, tau_abstain)
        all_pred.append(pred_t)
        all_gt.append(gt.labels)
        frame_rec = {"t": t, "macro_f1": float(np.mean(
            [m.f1 for m in f1_scores(pred_t, gt.labels, class_ids).values()]))}
        if gt.flow is not None and prev_frame is not None:
            with torch.no_grad():
                flow = forward_flow(torch.from_numpy(prev_frame.pixels).to(state.dtype),
                                    torch.from_numpy(frame.pixels).to(state.dtype),
                                    state.levels[0].flow)
            moving = np.linalg.norm(gt.flow, axis=-1) > 0
            err = np.linalg.norm(flow.numpy() - gt.flow, axis=-1)
            if moving.any():
                epes.append(float(err[moving].mean()))
                frame_rec["epe"] = epes[-1]
        per_frame.append(frame_rec)
        prev_frame = frame
    pred = np.stack(all_pred)
    labels = np.stack(all_gt)
    per_class = f1_scores(pred, labels, class_ids)
    macro = float(np.mean([m.f1 for m in per_class.values()]))
    return MetricsReport(per_class=per_class, macro_f1=macro,
                         mean_epe=float(np.mean(epes)) if epes else None,
                         n_frames=len(frame_range), n_pixels=int(pred.size),
                         per_frame=per_frame)


# ---------------------------------------------------------------------------
# Renders
# ---------------------------------------------------------------------------

def make_colorwheel() -> np.ndarray:
    """55-color wheel of the conventional optical-flow mapping."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    ncols = ry + yg + gc + cb + bm + mr
    wheel = np.zeros((ncols, 3))
    col = 0
    wheel[0:ry, 0] = 255
    wheel[0:ry, 1] = np.floor(255 * np.arange(0, ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(0, yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(0, gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(0, bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    return wheel


def render_flow(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """Flow field to RGB uint8: hue encodes direction via the color wheel,
    saturation encodes magnitude, zero flow renders white."""
    u = np.asarray(flow[..., 0], dtype=np.float64)
    v = np.asarray(flow[..., 1], dtype=np.float64)
    rad = np.sqrt(u * u + v * v)
    scale = max_magnitude if max_magnitude is not None else max(rad.max(), 1e-9)
    u, v, rad = u / scale, v / scale, np.minimum(rad / scale, 1.0)

    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = fk - k0

    img = np.zeros(u.shape + (3,), dtype=np.uint8)
    for c in range(3):
        col0 = wheel[k0, c] / 255.0
        col1 = wheel[k1, c] / 255.0
        col = (1 - f) * col0 + f * col1
        col = 1 - rad * (1 - col)  # saturate toward white at zero magnitude
        img[..., c] = np.floor(255 * col).astype(np.uint8)
    return img


def class_color(class_id: int) -> tuple[int, int, int]:
    return LABEL_PALETTE[class_id % len(LABEL_PALETTE)]


def render_prediction(pred: np.ndarray, frame: Frame,
                      object_alpha: float = 0.55,
                      background_alpha: float = 0.35) -> np.ndarray:
    """Overlay class colors on a frame; background (including abstentions)
    gets a light gray overlay. The class-to-color palette is fixed."""
    if pred.shape != frame.pixels.shape[:2]:
        raise ValueError("prediction and frame shapes differ")
    base = frame.pixels
    if base.shape[-1] == 1:
        base = np.repeat(base, 3, axis=-1)
    img = base.astype(np.float64).copy()
    gray = np.array([0.82, 0.82, 0.82])
    bg = pred == ABSTAIN_ID
    img[bg] = (1 - background_alpha) * img[bg] + background_alpha * gray
    for c in np.unique(pred):
        if c == ABSTAIN_ID:
            continue
        color = np.array(class_color(int(c))) / 255.0
        sel = pred == c
        img[sel] = (1 - object_alpha) * img[sel] + object_alpha * color
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def render_features(fmap: np.ndarray) -> np.ndarray:
    """Project a feature map to 3 channels (principal components, signs fixed
    deterministically) for qualitative inspection."""
    h, w, d = fmap.shape
    flat = fmap.reshape(-1, d).astype(np.float64)
    flat = flat - flat.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(flat, full_matrices=False)
    comps = vt[:3]
    signs = np.sign(comps[np.arange(comps.shape[0]), np.abs(comps).argmax(axis=1)])
    comps = comps * signs[:, None]
    proj = flat @ comps.T
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    proj = (proj - lo) / np.maximum(hi - lo, 1e-12)
    if comps.shape[0] < 3:
        proj = np.pad(proj, ((0, 0), (0, 3 - comps.shape[0])))
    return np.round(proj.reshape(h, w, -1)[..., :3] * 255).astype(np.uint8)

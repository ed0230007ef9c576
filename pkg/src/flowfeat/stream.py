"""Frame streams: a synthetic moving-shape generator with exact ground truth
and a reader for frame directories.

Synthetic streams follow a lap protocol: objects take turns, one per lap,
moving along a closed square circuit at a constant integer per-frame velocity
and returning to their start position. Integer velocities make the emitted
ground-truth flow exact: the flow of a pair equals the object displacement on
the object's pixels in the earlier frame and zero elsewhere.

On-disk layout: ``frames/%06d.png`` (``.pgm`` for grayscale),
``labels/%06d.png`` (palette PNG of class ids, 0 = background) and
``flow/%06d.flo`` for the pair ending at that frame index. The flow file is
binary: float32 magic 202021.25, int32 height, int32 width, then row-major
float32 (u, v) pairs, u horizontal and v vertical, both in pixels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

FLOW_MAGIC = 202021.25


class StreamError(Exception):
    pass


class EndOfStreamError(StreamError):
    pass


@dataclass
class Frame:
    pixels: np.ndarray  # (H, W, C) float32 in [0, 1]
    t: int

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise StreamError("frame pixels must be (H, W, C)")
        if self.t < 0:
            raise StreamError("frame index must be non-negative")


@dataclass
class FramePair:
    prev: Frame
    cur: Frame

    def __post_init__(self):
        if self.prev.pixels.shape != self.cur.pixels.shape:
            raise StreamError("frame pair dimensions differ")


@dataclass
class GroundTruth:
    labels: np.ndarray              # (H, W) int32 class ids, 0 = background
    flow: np.ndarray | None = None  # (H, W, 2) float32, pair (t-1, t)


@dataclass
class ObjectSpec:
    shape: str = "rect"                    # rect | ellipse
    size: tuple[int, int] = (12, 12)       # (height, width)
    velocity: tuple[float, float] = (2, 0)  # (u, v) = (columns, rows) per frame
    color: tuple[float, ...] = (0.8,)
    texture: str = "radial"                # flat | gradient | radial | ramps | noise
    start: tuple[int, int] | None = None   # (row, col), auto-placed if None

    def __post_init__(self):
        if self.shape not in ("rect", "ellipse"):
            raise StreamError(f"unknown object shape {self.shape!r}")
        if self.texture not in ("flat", "gradient", "radial", "ramps", "noise"):
            raise StreamError(f"unknown texture {self.texture!r}")
        if self.size[0] < 2 or self.size[1] < 2:
            raise StreamError("object size must be at least 2x2")


@dataclass
class StreamSpec:
    kind: str = "synthetic"                # synthetic | directory
    height: int = 64
    width: int = 64
    channels: int = 3
    seed: int = 0
    objects: list[ObjectSpec] = field(default_factory=list)
    laps_per_object: int = 1
    frames_per_lap: int = 40
    n_frames: int | None = None            # overrides the lap count when set
    background: float = 0.5
    textured_background: bool = False
    subpixel: bool = False
    loop: bool = False
    directory: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "directory"):
            raise StreamError(f"unknown stream kind {self.kind!r}")
        if self.height <= 0 or self.width <= 0:
            raise StreamError("resolution must be positive")
        if self.channels not in (1, 3):
            raise StreamError("channels must be 1 (grayscale) or 3 (color)")
        if self.kind == "synthetic":
            if self.frames_per_lap % 4 != 0:
                raise StreamError("frames_per_lap must be divisible by 4")
            for obj in self.objects:
                if len(obj.color) != self.channels:
                    raise StreamError("object color length must match channels")
                if not self.subpixel:
                    u, v = obj.velocity
                    if u != int(u) or v != int(v):
                        raise StreamError("non-integer velocity requires subpixel=True")

    @property
    def length(self) -> int:
        if self.n_frames is not None:
            return self.n_frames
        return self.laps_per_object * max(len(self.objects), 1) * self.frames_per_lap

    def class_ids(self) -> list[int]:
        return list(range(1, len(self.objects) + 1))


# ---------------------------------------------------------------------------
# StreamSpec <-> plain-text key-value section
# ---------------------------------------------------------------------------

def _format_object(obj: ObjectSpec) -> str:
    parts = [
        f"shape={obj.shape}",
        f"size={obj.size[0]}x{obj.size[1]}",
        f"velocity={obj.velocity[0]},{obj.velocity[1]}",
        "color=" + ",".join(repr(float(c)) for c in obj.color),
        f"texture={obj.texture}",
    ]
    if obj.start is not None:
        parts.append(f"start={obj.start[0]},{obj.start[1]}")
    return " ".join(parts)


def _parse_object(text: str) -> ObjectSpec:
    kwargs = {}
    for token in text.split():
        key, _, value = token.partition("=")
        if key == "shape":
            kwargs["shape"] = value
        elif key == "size":
            h, w = value.split("x")
            kwargs["size"] = (int(h), int(w))
        elif key == "velocity":
            u, v = value.split(",")
            kwargs["velocity"] = (float(u), float(v))
        elif key == "color":
            kwargs["color"] = tuple(float(c) for c in value.split(","))
        elif key == "texture":
            kwargs["texture"] = value
        elif key == "start":
            r, c = value.split(",")
            kwargs["start"] = (int(r), int(c))
        else:
            raise StreamError(f"unknown object attribute {key!r}")
    return ObjectSpec(**kwargs)


def spec_to_items(spec: StreamSpec) -> dict[str, str]:
    """Flatten a StreamSpec into config-section key/value strings."""
    items = {
        "kind": spec.kind,
        "height": str(spec.height),
        "width": str(spec.width),
        "channels": str(spec.channels),
        "seed": str(spec.seed),
        "laps_per_object": str(spec.laps_per_object),
        "frames_per_lap": str(spec.frames_per_lap),
        "background": repr(float(spec.background)),
        "textured_background": str(spec.textured_background).lower(),
        "subpixel": str(spec.subpixel).lower(),
        "loop": str(spec.loop).lower(),
    }
    if spec.n_frames is not None:
        items["n_frames"] = str(spec.n_frames)
    if spec.directory is not None:
        items["directory"] = spec.directory
    for i, obj in enumerate(spec.objects, start=1):
        items[f"object{i}"] = _format_object(obj)
    return items


def spec_from_items(items: dict[str, str]) -> StreamSpec:
    """Inverse of :func:`spec_to_items`."""
    def _bool(key: str, default: str = "false") -> bool:
        return items.get(key, default).strip().lower() in ("true", "1", "yes", "on")

    objects = []
    i = 1
    while f"object{i}" in items:
        objects.append(_parse_object(items[f"object{i}"]))
        i += 1
    return StreamSpec(
        kind=items.get("kind", "synthetic"),
        height=int(items.get("height", "64")),
        width=int(items.get("width", "64")),
        channels=int(items.get("channels", "3")),
        seed=int(items.get("seed", "0")),
        objects=objects,
        laps_per_object=int(items.get("laps_per_object", "1")),
        frames_per_lap=int(items.get("frames_per_lap", "40")),
        n_frames=int(items["n_frames"]) if "n_frames" in items else None,
        background=float(items.get("background", "0.5")),
        textured_background=_bool("textured_background"),
        subpixel=_bool("subpixel"),
        loop=_bool("loop"),
        directory=items.get("directory"),
    )


# ---------------------------------------------------------------------------
# Flow file IO
# ---------------------------------------------------------------------------

def write_flow_file(path: Path | str, flow: np.ndarray) -> None:
    flow = np.asarray(flow, dtype=np.float32)
    h, w = flow.shape[0], flow.shape[1]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLOW_MAGIC, h, w))
        fh.write(flow.astype("<f4").tobytes())


def read_flow_file(path: Path | str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, h, w = struct.unpack("<fii", fh.read(12))
        if abs(magic - FLOW_MAGIC) > 1e-3:
            raise StreamError(f"{path}: bad flow file magic")
        data = np.frombuffer(fh.read(h * w * 8), dtype="<f4")
    if data.size != h * w * 2:
        raise StreamError(f"{path}: truncated flow file")
    return data.reshape(h, w, 2).copy()


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

def _circuit_displacement(velocity: tuple[float, float], leg: int, j: int) -> tuple[float, float]:
    """(row, col) displacement after j in-lap steps on the square circuit."""
    u, v = velocity
    legs = [(v, u), (u, -v), (-v, -u), (-u, v)]  # (drow, dcol) per step, 90-degree turns
    drow = dcol = 0.0
    remaining = j
    for lr, lc in legs:
        steps = min(remaining, leg)
        drow += steps * lr
        dcol += steps * lc
        remaining -= steps
    return drow, dcol


class _SyntheticWorld:
    """Deterministic renderer for a synthetic StreamSpec."""

    def __init__(self, spec: StreamSpec):
        self.spec = spec
        self.leg = spec.frames_per_lap // 4
        rng = np.random.default_rng(spec.seed)
        self.background = self._make_background(rng)
        self.sprites = [self._make_sprite(obj, rng) for obj in spec.objects]
        self.starts = self._place_objects(rng)
        self._validate_bounds()

    def _make_background(self, rng: np.random.Generator) -> np.ndarray:
        h, w, c = self.spec.height, self.spec.width, self.spec.channels
        base = np.full((h, w, c), round(self.spec.background * 255), dtype=np.uint8)
        if self.spec.textured_background:
            coarse = rng.integers(-24, 25, size=(max(h // 8, 1), max(w // 8, 1), c))
            tex = np.kron(coarse, np.ones((8, 8, 1)))[:h, :w, :]
            base = np.clip(base.astype(np.int32) + tex.astype(np.int32), 0, 255).astype(np.uint8)
        return base

    def _make_sprite(self, obj: ObjectSpec, rng: np.random.Generator):
        sh, sw = obj.size
        ly, lx = np.mgrid[0:sh, 0:sw]
        if obj.shape == "rect":
            mask = np.ones((sh, sw), dtype=bool)
        else:
            cy, cx = (sh - 1) / 2.0, (sw - 1) / 2.0
            mask = ((ly - cy) / (sh / 2.0)) ** 2 + ((lx - cx) / (sw / 2.0)) ** 2 <= 1.0
        color = np.array(obj.color, dtype=np.float64) * 255.0
        if obj.texture == "flat":
            tex = np.broadcast_to(color, (sh, sw, len(obj.color))).copy()
        elif obj.texture == "gradient":
            ramp = 0.45 + 0.55 * (lx + ly) / max(sw + sh - 2, 1)
            tex = color[None, None, :] * ramp[..., None]
        elif obj.texture == "radial":
            # smooth 2-D variation: the iso-lines are circles, so motion is
            # locally observable in every direction (no aperture ambiguity)
            cy, cx = (sh - 1) / 2.0, (sw - 1) / 2.0
            r = np.sqrt(((ly - cy) / max(sh / 2, 1)) ** 2 + ((lx - cx) / max(sw / 2, 1)) ** 2)
            ramp = 1.0 - 0.6 * np.clip(r, 0.0, 1.0)
            tex = color[None, None, :] * ramp[..., None]
        elif obj.texture == "ramps":
            # crossed per-channel ramps; on color streams this constrains both
            # flow components at every interior pixel
            ramps = [0.4 + 0.6 * lx / max(sw - 1, 1), 0.4 + 0.6 * ly / max(sh - 1, 1),
                     0.4 + 0.6 * (lx + ly) / max(sw + sh - 2, 1)]
            tex = np.stack([color[c] * ramps[c % 3] for c in range(len(obj.color))], axis=-1)
        else:  # noise: smooth per-object speckle, rigid with the object
            speckle = rng.integers(-40, 41, size=(sh, sw, 1)).astype(np.float64)
            tex = color[None, None, :] + speckle
        tex = np.clip(np.round(tex), 0, 255).astype(np.uint8)
        return mask, tex

    def _trajectory_extent(self, obj: ObjectSpec) -> tuple[int, int, int, int]:
        rows, cols = [], []
        for j in range(self.spec.frames_per_lap):
            dr, dc = _circuit_displacement(obj.velocity, self.leg, j)
            rows.append(dr)
            cols.append(dc)
        return (int(np.floor(min(rows))), int(np.ceil(max(rows))),
                int(np.floor(min(cols))), int(np.ceil(max(cols))))

    def _place_objects(self, rng: np.random.Generator) -> list[tuple[int, int]]:
        # shelf packing of trajectory bounding boxes, left-to-right then down
        starts = []
        shelf_col, shelf_row, shelf_height = 2, 2, 0
        for obj in self.spec.objects:
            if obj.start is not None:
                starts.append(obj.start)
                continue
            rmin, rmax, cmin, cmax = self._trajectory_extent(obj)
            box_h = rmax - rmin + obj.size[0]
            box_w = cmax - cmin + obj.size[1]
            if shelf_col + box_w > self.spec.width - 2 and shelf_col > 2:
                shelf_row += shelf_height + 2
                shelf_col, shelf_height = 2, 0
            starts.append((shelf_row - rmin, shelf_col - cmin))
            shelf_col += box_w + 2
            shelf_height = max(shelf_height, box_h)
        return starts

    def _validate_bounds(self) -> None:
        boxes = []
        for obj, start in zip(self.spec.objects, self.starts):
            rmin, rmax, cmin, cmax = self._trajectory_extent(obj)
            top, left = start[0] + rmin, start[1] + cmin
            bottom = start[0] + rmax + obj.size[0]
            right = start[1] + cmax + obj.size[1]
            if top < 0 or left < 0 or bottom > self.spec.height or right > self.spec.width:
                raise StreamError(
                    f"object trajectory leaves the frame (rows {top}..{bottom}, cols {left}..{right})")
            for other in boxes:
                if not (bottom <= other[0] or other[2] <= top or right <= other[1] or other[3] <= left):
                    raise StreamError("object trajectories overlap; adjust starts or velocities")
            boxes.append((top, left, bottom, right))

    def position(self, obj_index: int, t: int) -> tuple[float, float]:
        """(row, col) of the object's top-left corner at frame t."""
        n_obj = max(len(self.spec.objects), 1)
        lap = t // self.spec.frames_per_lap
        j = t % self.spec.frames_per_lap
        start = self.starts[obj_index]
        if lap % n_obj != obj_index:
            return float(start[0]), float(start[1])
        dr, dc = _circuit_displacement(self.spec.objects[obj_index].velocity, self.leg, j)
        return start[0] + dr, start[1] + dc

    def render(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Frame pixels (uint8) and label grid (int32) at time t."""
        frame = self.background.copy()
        labels = np.zeros((self.spec.height, self.spec.width), dtype=np.int32)
        for i, (mask, tex) in enumerate(self.sprites):
            row, col = self.position(i, t)
            r0, c0 = int(round(row)), int(round(col))
            sh, sw = mask.shape
            frame[r0:r0 + sh, c0:c0 + sw][mask] = tex[mask]
            labels[r0:r0 + sh, c0:c0 + sw][mask] = i + 1
        return frame, labels

    def flow(self, t: int) -> np.ndarray:
        """Exact flow of the pair (t-1, t) on the grid of frame t-1."""
        if t < 1:
            raise StreamError("flow is defined for t >= 1")
        flow = np.zeros((self.spec.height, self.spec.width, 2), dtype=np.float32)
        _, labels_prev = self.render(t - 1)
        for i in range(len(self.sprites)):
            r1, c1 = self.position(i, t)
            r0, c0 = self.position(i, t - 1)
            du, dv = c1 - c0, r1 - r0
            if du == 0 and dv == 0:
                continue
            sel = labels_prev == i + 1
            flow[sel, 0] = du
            flow[sel, 1] = dv
        return flow


# ---------------------------------------------------------------------------
# Stream handles
# ---------------------------------------------------------------------------

class StreamHandle:
    """Ordered single-consumer frame source with optional ground truth."""

    def __init__(self, spec: StreamSpec, length: int):
        self.spec = spec
        self._length = length
        self._cursor = 0

    def __len__(self) -> int:
        return self._length

    @property
    def cursor(self) -> int:
        return self._cursor

    def seek(self, t: int) -> None:
        if t < 0 or (t > self._length and not self.spec.loop):
            raise StreamError(f"seek out of range: {t}")
        self._cursor = t

    def next_frame(self) -> Frame:
        t = self._cursor
        if t >= self._length:
            if not self.spec.loop:
                raise EndOfStreamError(f"stream exhausted at frame {self._length}")
            t = t % self._length
        frame = self.frame(t)
        self._cursor += 1
        return Frame(pixels=frame.pixels, t=self._cursor - 1)

    def frame(self, t: int) -> Frame:
        raise NotImplementedError

    def ground_truth(self, t: int) -> GroundTruth | None:
        raise NotImplementedError


class SyntheticStream(StreamHandle):
    def __init__(self, spec: StreamSpec):
        if not spec.objects:
            raise StreamError("synthetic stream needs at least one object")
        super().__init__(spec, spec.length)
        self.world = _SyntheticWorld(spec)

    def frame(self, t: int) -> Frame:
        pixels, _ = self.world.render(t)
        return Frame(pixels=pixels.astype(np.float32) / 255.0, t=t)

    def ground_truth(self, t: int) -> GroundTruth:
        _, labels = self.world.render(t)
        flow = self.world.flow(t) if t >= 1 else None
        return GroundTruth(labels=labels, flow=flow)


class DirectoryStream(StreamHandle):
    def __init__(self, spec: StreamSpec):
        if not spec.directory:
            raise StreamError("directory stream needs a directory")
        root = Path(spec.directory)
        frames_dir = root / "frames"
        if not frames_dir.is_dir():
            raise StreamError(f"missing frames directory: {frames_dir}")
        self.paths = sorted(frames_dir.glob("*.png")) + sorted(frames_dir.glob("*.pgm"))
        self.paths.sort(key=lambda p: p.stem)
        if len(self.paths) < 2:
            raise StreamError("frame directory must contain at least 2 frames")
        sizes = set()
        for p in self.paths:
            with Image.open(p) as im:
                sizes.add(im.size)
        if len(sizes) != 1:
            raise StreamError(f"inconsistent frame resolutions: {sorted(sizes)}")
        w, h = sizes.pop()
        if (h, w) != (spec.height, spec.width):
            spec.height, spec.width = h, w
        self.labels_dir = root / "labels" if (root / "labels").is_dir() else None
        self.flow_dir = root / "flow" if (root / "flow").is_dir() else None
        super().__init__(spec, len(self.paths))

    def frame(self, t: int) -> Frame:
        with Image.open(self.paths[t]) as im:
            arr = np.asarray(im)
        if arr.ndim == 2:
            arr = arr[..., None]
        if arr.shape[-1] != self.spec.channels:
            raise StreamError(f"{self.paths[t]}: expected {self.spec.channels} channels")
        return Frame(pixels=arr.astype(np.float32) / 255.0, t=t)

    def ground_truth(self, t: int) -> GroundTruth | None:
        if self.labels_dir is None:
            return None
        label_path = self.labels_dir / f"{t:06d}.png"
        if not label_path.exists():
            return None
        with Image.open(label_path) as im:
            labels = np.asarray(im).astype(np.int32)
        flow = None
        if self.flow_dir is not None and t >= 1:
            flow_path = self.flow_dir / f"{t:06d}.flo"
            if flow_path.exists():
                flow = read_flow_file(flow_path)
        return GroundTruth(labels=labels, flow=flow)


def open_stream(spec: StreamSpec) -> StreamHandle:
    if spec.kind == "synthetic":
        return SyntheticStream(spec)
    return DirectoryStream(spec)


# ---------------------------------------------------------------------------
# Writing streams to disk
# ---------------------------------------------------------------------------

LABEL_PALETTE = [
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
]


def _save_labels(path: Path, labels: np.ndarray) -> None:
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    palette = []
    for rgb in LABEL_PALETTE:
        palette.extend(rgb)
    palette.extend([0] * (768 - len(palette)))
    im.putpalette(palette)
    im.save(path)


def _save_frame(path: Path, pixels_uint8: np.ndarray) -> None:
    if pixels_uint8.shape[-1] == 1:
        Image.fromarray(pixels_uint8[..., 0], mode="L").save(path)
    else:
        Image.fromarray(pixels_uint8, mode="RGB").save(path)


def generate_toy_stream(spec: StreamSpec, out_dir: Path | str) -> dict:
    """Render a synthetic stream to disk with labels and exact flow fields.

    Returns a summary with frame/label/flow counts and the class list.
    """
    if spec.kind != "synthetic":
        raise StreamError("generate_toy_stream requires a synthetic spec")
    out = Path(out_dir)
    frames_dir = out / "frames"
    labels_dir = out / "labels"
    flow_dir = out / "flow"
    for d in (frames_dir, labels_dir, flow_dir):
        d.mkdir(parents=True, exist_ok=True)

    world = _SyntheticWorld(spec)
    ext = "pgm" if spec.channels == 1 else "png"
    n = spec.length
    for t in range(n):
        pixels, labels = world.render(t)
        _save_frame(frames_dir / f"{t:06d}.{ext}", pixels)
        _save_labels(labels_dir / f"{t:06d}.png", labels)
        if t >= 1:
            write_flow_file(flow_dir / f"{t:06d}.flo", world.flow(t))

    items = spec_to_items(spec)
    lines = ["[stream]"] + [f"{k} = {v}" for k, v in items.items()]
    (out / "stream.ini").write_text("\n".join(lines) + "\n")

    return {
        "frames": n,
        "labels": n,
        "flows": n - 1,
        "classes": spec.class_ids(),
        "out_dir": str(out),
    }

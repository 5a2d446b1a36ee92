"""Clip ingestion, the 24-frame sampling protocol, and synthetic motion clips.

Frames on disk are binary PPM (P6) or PGM (P5) files named
``frame_000000.ppm``; a directory may carry ``meta.json`` with an ``fps`` key.
Whole clips may also be stored as one ``.t5b`` tensor of shape (1, c, T, H, W).
Raw intensities are 0..255; :func:`normalize` maps them to [0, 1].
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fastconv import tensor
from fastconv.training import Dataset

DEFAULT_FPS = 24.0
CLIP_FRAMES = 24
CLIP_SIZE = 224
WINDOW_SECONDS = 2.0


# ---------------------------------------------------------------------------
# PNM frames


def read_pnm(path: str | Path) -> np.ndarray:
    """Read a binary PGM/PPM into a (c, H, W) uint8 or uint16 array."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(raw, pos)
        if m is None:
            raise ValueError(f"{path}: malformed PNM header")
        tokens.append(m.group(2))
        pos = m.end()
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM type {magic!r}")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    if data.size != count:
        raise ValueError(f"{path}: truncated pixel data")
    img = data.reshape(height, width, channels).transpose(2, 0, 1)
    if maxval > 255:
        return img.astype(np.uint16)
    return img.copy()


def write_pnm(path: str | Path, img: np.ndarray) -> None:
    """Write (c, H, W) or (H, W) 8-bit data as PGM (c=1) or PPM (c=3)."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError(f"PNM needs 1 or 3 channels, got {c}")
    data = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + data.transpose(1, 2, 0).tobytes())


def write_pgm(path: str | Path, image: np.ndarray, scale: float = 255.0) -> None:
    """Write a 2-D float image as 8-bit PGM after multiplying by ``scale``."""
    write_pnm(path, np.asarray(image, dtype=np.float64)[None] * scale)


# ---------------------------------------------------------------------------
# clip sources


@dataclass
class ClipSource:
    """Raw frames in (T, c, H, W) order at a known frame rate."""

    frames: np.ndarray
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ValueError(f"expected (T, c, H, W) with T >= 1, got {self.frames.shape}")

    @classmethod
    def from_dir(cls, directory: str | Path, fps: float | None = None) -> "ClipSource":
        directory = Path(directory)
        paths = sorted(p for p in directory.iterdir() if re.fullmatch(r"frame_\d+\.p[pg]m", p.name))
        if not paths:
            raise FileNotFoundError(f"no frame_*.ppm/pgm files in {directory}")
        frames = [read_pnm(p) for p in paths]
        shapes = {f.shape for f in frames}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent frame dimensions in {directory}: {sorted(shapes)}")
        if fps is None:
            meta = directory / "meta.json"
            fps = json.loads(meta.read_text()).get("fps", DEFAULT_FPS) if meta.exists() else DEFAULT_FPS
        return cls(np.stack(frames).astype(np.float32), float(fps))

    @classmethod
    def from_t5b(cls, path: str | Path, fps: float = DEFAULT_FPS) -> "ClipSource":
        clip = tensor.load_t5b(path)
        if clip.shape[0] != 1:
            raise ValueError(f"{path}: clip tensors must have batch 1, got {clip.shape}")
        return cls(clip[0].transpose(1, 0, 2, 3), fps)

    @classmethod
    def open(cls, path: str | Path, fps: float | None = None) -> "ClipSource":
        path = Path(path)
        if path.is_dir():
            return cls.from_dir(path, fps)
        return cls.from_t5b(path, fps or DEFAULT_FPS)


def save_frames(clip: np.ndarray, directory: str | Path, fps: float = DEFAULT_FPS) -> None:
    """Dump a (1, c, T, H, W) raw clip as numbered PNM frames."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if clip.shape[1] == 1 else "ppm"
    for t in range(clip.shape[2]):
        write_pnm(directory / f"frame_{t:06d}.{ext}", clip[0, :, t])
    (directory / "meta.json").write_text(json.dumps({"fps": fps}))


def sample_indices(num_frames: int, fps: float = DEFAULT_FPS, count: int = CLIP_FRAMES) -> np.ndarray:
    """Frame indices for one clip.

    A window of ``round(2 s * fps)`` frames centred on the middle frame is
    clamped inside the video, and ``count`` frames are taken at equal spacing
    from its start (every second frame at 24 fps). Videos shorter than the
    window are repeated cyclically to fill it.
    """
    if num_frames < 1:
        raise ValueError("clip has no frames")
    window = max(1, int(round(WINDOW_SECONDS * fps)))
    if num_frames >= window:
        start = min(max(num_frames // 2 - window // 2, 0), num_frames - window)
    else:
        start = 0
    offsets = (np.arange(count) * window) // count
    return (start + offsets) % num_frames


def resize_bilinear(frames: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resize of the last two axes.

    Output pixel ``i`` samples source coordinate ``i * (H_in - 1) / (H_out - 1)``,
    so the four corner pixels are copied exactly.
    """
    out_h, out_w = size
    h, w = frames.shape[-2:]

    def axis_weights(n_in: int, n_out: int):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_weights(h, out_h)
    x0, x1, fx = axis_weights(w, out_w)
    f = frames.astype(np.float64)
    rows = f[..., y0, :] * (1 - fy)[:, None] + f[..., y1, :] * fy[:, None]
    out = rows[..., x0] * (1 - fx) + rows[..., x1] * fx
    return out.astype(np.float32)


def sample_clip(src: ClipSource, size: int = CLIP_SIZE, count: int = CLIP_FRAMES) -> np.ndarray:
    """Select, subsample and resize a source into a (1, c, 24, 224, 224) raw clip."""
    idx = sample_indices(src.frames.shape[0], src.fps, count)
    picked = src.frames[idx]  # (count, c, H, W)
    resized = resize_bilinear(picked, (size, size))
    return np.ascontiguousarray(resized.transpose(1, 0, 2, 3)[None])


class NormalizedClip(np.ndarray):
    """Marker type for clips already scaled to [0, 1]."""


def normalize(clip) -> np.ndarray:
    """Scale raw 0..255 intensities to float32 in [0, 1]."""
    if isinstance(clip, NormalizedClip):
        raise ValueError("clip is already normalized")
    arr = np.asarray(clip)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError(f"raw intensities must lie in [0, 255], got [{arr.min()}, {arr.max()}]")
    return (arr.astype(np.float32) / np.float32(255.0)).view(NormalizedClip)


# ---------------------------------------------------------------------------
# slices


class Plane(str, enum.Enum):
    XT = "xt"
    YT = "yt"


def extract_slice(clip: np.ndarray, plane: Plane | str, index: int) -> np.ndarray:
    """Time-by-space image through a (1, c, T, H, W) clip, averaged over channels.

    XT fixes row ``index`` and returns (T, W); YT fixes column ``index`` and
    returns (T, H). Time runs down the rows.
    """
    plane = Plane(plane)
    clip = np.asarray(clip)
    if clip.ndim != 5 or clip.shape[0] != 1:
        raise ValueError(f"expected a (1, c, T, H, W) clip, got {clip.shape}")
    _, _, _, h, w = clip.shape
    limit = h if plane is Plane.XT else w
    if not 0 <= index < limit:
        raise IndexError(f"{plane.value} index {index} outside [0, {limit})")
    if plane is Plane.XT:
        img = clip[0, :, :, index, :]
    else:
        img = clip[0, :, :, :, index]
    return img.mean(axis=0, dtype=np.float64).astype(np.float32)


def argmax_trajectory(slice_img: np.ndarray) -> np.ndarray:
    """Position of the brightest sample in each row (time step) of a slice."""
    return np.argmax(slice_img, axis=1)


def trajectory_slope(slice_img: np.ndarray) -> float:
    """Least-squares drift of the arg-max position, in pixels per frame.

    Positions are unwrapped across the slice width first, so motion that wraps
    around the border still reads as a straight line.
    """
    pos = argmax_trajectory(slice_img).astype(np.float64)
    period = slice_img.shape[1]
    pos = np.unwrap(pos, period=period)
    t = np.arange(len(pos), dtype=np.float64)
    return float(np.polyfit(t, pos, 1)[0])


# ---------------------------------------------------------------------------
# synthetic motion


class Motion(str, enum.Enum):
    MOVE_LEFT = "move_left"
    MOVE_RIGHT = "move_right"
    MOVE_UP = "move_up"
    MOVE_DOWN = "move_down"
    STATIC = "static"
    GROW = "grow"


# (dy, dx) per frame, in units of speed
_DIRECTIONS = {
    Motion.MOVE_LEFT: (0, -1),
    Motion.MOVE_RIGHT: (0, 1),
    Motion.MOVE_UP: (-1, 0),
    Motion.MOVE_DOWN: (1, 0),
    Motion.STATIC: (0, 0),
}


@dataclass
class SyntheticSpec:
    classes: list[Motion] = field(default_factory=lambda: [
        Motion.MOVE_LEFT, Motion.MOVE_RIGHT, Motion.MOVE_UP, Motion.MOVE_DOWN])
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    shape: str = "rect"  # "rect" or "blob"
    object_size: tuple[int, int] = (6, 6)
    speed: int = 2
    noise: float = 0.1
    intensity: float = 1.0

    def __post_init__(self):
        self.classes = [Motion(c) for c in self.classes]
        self.object_size = tuple(int(s) for s in self.object_size)
        if self.noise < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.shape not in ("rect", "blob"):
            raise ValueError(f"unknown object shape {self.shape!r}")
        oh, ow = self.object_size
        if not (1 <= oh <= self.height and 1 <= ow <= self.width):
            raise ValueError("object must fit on the canvas")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [c.value for c in self.classes]
        d["object_size"] = list(self.object_size)
        return d


def _render(spec: SyntheticSpec, top: int, left: int, size: tuple[int, int]) -> np.ndarray:
    """One (H, W) frame with the object's top-left corner at (top, left), wrapping."""
    h, w = spec.height, spec.width
    oh, ow = size
    if spec.shape == "rect":
        frame = np.zeros((h, w), dtype=np.float64)
        frame[:oh, :ow] = spec.intensity
    else:
        yy = np.minimum(np.arange(h), h - np.arange(h))[:, None]
        xx = np.minimum(np.arange(w), w - np.arange(w))[None, :]
        sy, sx = max(oh / 4, 0.5), max(ow / 4, 0.5)
        frame = spec.intensity * np.exp(-0.5 * ((yy / sy) ** 2 + (xx / sx) ** 2))
        frame = np.roll(frame, (oh // 2, ow // 2), axis=(0, 1))
    return np.roll(frame, (top, left), axis=(0, 1))


def gen_clip(spec: SyntheticSpec, motion: Motion | str, seed: int) -> tuple[np.ndarray, int]:
    """Render one (1, c, T, H, W) float32 clip and its class index.

    The object starts at a seeded random position and moves ``speed`` pixels
    per frame, wrapping at the borders. ``grow`` keeps the object centred and
    widens it by ``speed`` pixels per frame up to the canvas size.
    """
    motion = Motion(motion)
    if motion not in spec.classes:
        raise ValueError(f"{motion.value} is not one of {[c.value for c in spec.classes]}")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(spec.height))
    left = int(rng.integers(spec.width))
    frames = []
    for t in range(spec.frames):
        if motion is Motion.GROW:
            oh = min(spec.object_size[0] + spec.speed * t, spec.height)
            ow = min(spec.object_size[1] + spec.speed * t, spec.width)
            frames.append(_render(spec, top - oh // 2, left - ow // 2, (oh, ow)))
        else:
            dy, dx = _DIRECTIONS[motion]
            frames.append(_render(spec, top + dy * spec.speed * t, left + dx * spec.speed * t,
                                  spec.object_size))
    video = np.stack(frames)  # (T, H, W)
    clip = np.broadcast_to(video, (spec.channels, *video.shape)).copy()
    if spec.noise > 0:
        clip += rng.normal(0.0, spec.noise, size=clip.shape)
    return clip[None].astype(np.float32), spec.classes.index(motion)


def gen_dataset(spec: SyntheticSpec, per_class: int, seed: int) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """``per_class`` clips of every class, interleaved by class.

    Returns clips (N, c, T, H, W), labels (N,) and the per-clip seeds.
    """
    seeds = np.random.SeedSequence(seed).generate_state(per_class * len(spec.classes)).tolist()
    clips, labels, used = [], [], []
    i = 0
    for _ in range(per_class):
        for motion in spec.classes:
            clip, label = gen_clip(spec, motion, seeds[i])
            clips.append(clip[0])
            labels.append(label)
            used.append(seeds[i])
            i += 1
    return np.stack(clips), np.array(labels, dtype=np.int64), used


def make_split(spec: SyntheticSpec, train_per_class: int, val_per_class: int, seed: int) -> Dataset:
    """Train and validation sets drawn from disjoint seed streams."""
    train_x, train_y, _ = gen_dataset(spec, train_per_class, seed)
    val_x, val_y, _ = gen_dataset(spec, val_per_class, seed + 1_000_003)
    return Dataset(train_x, train_y, val_x, val_y, [c.value for c in spec.classes])


def write_dataset(spec: SyntheticSpec, per_class: int, seed: int, directory: str | Path) -> dict:
    """Save every clip as ``.t5b`` with a JSON manifest of (class, seed, path)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    clips, labels, seeds = gen_dataset(spec, per_class, seed)
    entries = []
    for i, (clip, label, s) in enumerate(zip(clips, labels, seeds)):
        name = f"clip_{i:05d}.t5b"
        tensor.save_t5b(directory / name, clip[None])
        entries.append({"class": spec.classes[label].value, "seed": int(s), "path": name})
    manifest = {"spec": spec.to_dict(), "seed": seed, "clips": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest

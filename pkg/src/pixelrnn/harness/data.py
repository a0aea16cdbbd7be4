"""Video clips: directory loading, frame sampling, and the synthetic motion task.

Directory layout read by `load_dataset`::

    root/<class name>/<clip name>/<frame files>

Frames are lossless grayscale images (PNG or PGM, anything Pillow opens
losslessly), sorted by file name.  Classes are numbered in sorted order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_FRAMES = 16
FRAME_SUFFIXES = (".png", ".pgm", ".pnm", ".bmp", ".tif", ".tiff")
DIRECTIONS = ("right", "left", "up", "down")
_STEP = {"right": (0, 1), "left": (0, -1), "up": (-1, 0), "down": (1, 0)}


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W) uint8
    label: int
    source: str = "synthetic"
    name: str = ""
    indices: list = field(default_factory=list)  # source frame index of every sampled frame


def sample_indices(n_available: int, n: int = N_FRAMES) -> list[int]:
    """Evenly spaced frame indices round(i (T - 1) / (n - 1)), halves rounded up."""
    if n_available < 1:
        raise ValueError("clip has no frames")
    if n == 1:
        return [0]
    return [int(np.floor(i * (n_available - 1) / (n - 1) + 0.5)) for i in range(n)]


def pad_indices(n_available: int, n: int, rng: np.random.Generator) -> list[int]:
    """Stretch a short clip to n frames by duplicating a random subset, keeping order."""
    extra = rng.choice(n_available, size=n - n_available, replace=n - n_available > n_available)
    counts = np.ones(n_available, dtype=int) + np.bincount(extra, minlength=n_available)
    return [i for i, c in enumerate(counts) for _ in range(c)]


def select_frames(n_available: int, rng: np.random.Generator, n: int = N_FRAMES) -> list[int]:
    if n_available >= n:
        return sample_indices(n_available, n)
    return pad_indices(n_available, n, rng)


def _read_frame(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I", "1"):
            raise ValueError(f"mode {im.mode} is not grayscale")
        arr = np.asarray(im)
    if arr.dtype != np.uint8:
        if arr.max() > 255:
            arr = arr >> 8 if arr.dtype == np.uint16 else np.clip(arr, 0, 255)
        arr = arr.astype(np.uint8)
    return arr


def _resize(frame: np.ndarray, side: int) -> np.ndarray:
    if frame.shape == (side, side):
        return frame
    from PIL import Image

    return np.asarray(Image.fromarray(frame).resize((side, side), Image.BILINEAR))


def load_dataset(path, side: int = 64, n: int = N_FRAMES, seed: int = 0) -> tuple[list[VideoClip], list[str]]:
    """Read every clip under `path`; returns (clips, class names).

    Clips are resampled to n evenly spaced frames (short clips padded by random
    duplication, seeded) and resized to side x side.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ValueError(f"{root} holds no class directories")
    rng = np.random.default_rng(seed)
    clips, problems = [], []
    for label, cname in enumerate(classes):
        clip_dirs = sorted(p for p in (root / cname).iterdir() if p.is_dir())
        if not clip_dirs:
            problems.append(f"empty class: {root / cname}")
            continue
        for cdir in clip_dirs:
            files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
            if not files:
                problems.append(f"clip without frames: {cdir}")
                continue
            idx = select_frames(len(files), rng, n)
            frames = []
            for i in sorted(set(idx)):
                try:
                    frames.append((i, _resize(_read_frame(files[i]), side)))
                except Exception as exc:  # noqa: BLE001 - collect and report every offender
                    problems.append(f"unreadable frame {files[i]}: {exc}")
            if len(frames) != len(set(idx)):
                continue
            lookup = dict(frames)
            clips.append(VideoClip(np.stack([lookup[i] for i in idx]), label, "directory", str(cdir), idx))
    if problems:
        raise ValueError("dataset problems:\n  " + "\n  ".join(problems))
    return clips, classes


MOTIONS = ("sweep", "wrap")


@dataclass(frozen=True)
class SynthSpec:
    """Moving-squares task.  Class = direction of motion (right, left, up, down).

    motion "sweep": each square crosses the frame center at `speed` pixels per
    frame for the first `visible` frames, then vanishes; the remaining frames
    are blank, so whatever reaches the end-of-clip readout must have been
    carried by recurrent state.  Start offsets are drawn so that every clip's
    set of visited positions is mirror-symmetric about the path center and the
    off-axis coordinate follows the same law as the on-axis one: opposite
    directions visit identical position sets, and a single frame has the same
    distribution whatever the class.

    motion "wrap": `n_objects` squares at uniform random positions, the whole
    scene translated with wraparound, every frame visible.
    """

    n_clips: int = 400
    side: int = 64
    frames: int = N_FRAMES
    size: int = 12
    n_objects: int = 1
    speed: int = 3
    motion: str = "sweep"
    visible: int = 12
    center_jitter: int = 4
    fg: int = 255
    bg: int = 0
    noise: float = 0.0  # std of additive Gaussian pixel noise
    jitter: int = 0  # max per-frame random displacement, pixels
    classes: tuple = DIRECTIONS

    def __post_init__(self):
        unknown = [c for c in self.classes if c not in _STEP]
        if unknown:
            raise ValueError(f"unknown motion classes {unknown}")
        if len(self.classes) < 2:
            raise ValueError("need at least two classes")
        if self.motion not in MOTIONS:
            raise ValueError(f"unknown motion {self.motion!r}; expected one of {MOTIONS}")
        if not 0 < self.size <= self.side:
            raise ValueError("square size must be in 1..side")
        if self.motion == "sweep":
            if not 1 <= self.visible <= self.frames:
                raise ValueError("visible frames must be in 1..frames")
            if self.sweep_range()[0] < 0:
                raise ValueError("sweep does not fit: reduce speed, size, visible frames or center jitter")

    def sweep_range(self) -> tuple[int, int]:
        """Inclusive range of start offsets; lo + hi = free span - path length, so
        the law of the path is mirror-symmetric."""
        total = self.side - self.size - self.speed * (self.visible - 1)
        return total // 2 - self.center_jitter, (total + 1) // 2 + self.center_jitter

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["classes"] = list(self.classes)
        return d


def render_scene(spec: SynthSpec, positions) -> np.ndarray:
    """Frame 0: squares with top-left corners at `positions`, wrapping at the edges."""
    base = np.full((spec.side, spec.side), spec.bg, dtype=np.float64)
    square = np.zeros_like(base, dtype=bool)
    square[:spec.size, :spec.size] = True
    for y, x in positions:
        base[np.roll(square, (int(y), int(x)), axis=(0, 1))] = spec.fg
    return base


def _finish(spec: SynthSpec, frame: np.ndarray, rng) -> np.ndarray:
    if spec.noise and rng is not None:
        frame = frame + rng.normal(0.0, spec.noise, size=frame.shape)
    return np.clip(np.rint(frame), 0, 255).astype(np.uint8)


def _jitter(spec: SynthSpec, rng) -> tuple[int, int]:
    if spec.jitter and rng is not None:
        jy, jx = rng.integers(-spec.jitter, spec.jitter + 1, size=2)
        return int(jy), int(jx)
    return 0, 0


def render_clip(spec: SynthSpec, direction: str, positions, rng: np.random.Generator | None = None) -> np.ndarray:
    """Wraparound motion of the scene with squares at `positions`."""
    dy, dx = _STEP[direction]
    base = render_scene(spec, positions)
    out = np.empty((spec.frames, spec.side, spec.side), dtype=np.uint8)
    for t in range(spec.frames):
        jy, jx = _jitter(spec, rng)
        out[t] = _finish(spec, np.roll(base, (dy * spec.speed * t + jy, dx * spec.speed * t + jx), axis=(0, 1)), rng)
    return out


def sweep_positions(spec: SynthSpec, direction: str, starts, offsets) -> np.ndarray:
    """Top-left corners (visible, n_objects, 2) of a sweep.

    `starts` are on-axis start offsets and `offsets` off-axis coordinates, one
    per object.  Decreasing-coordinate directions mirror the path, so left is
    right played on the mirrored frame, not right played backwards.
    """
    dy, dx = _STEP[direction]
    span = spec.side - spec.size
    t = np.arange(spec.visible)[:, None]
    on = np.asarray(starts)[None, :] + spec.speed * t
    if dx < 0 or dy < 0:
        on = span - on
    off = np.broadcast_to(np.asarray(offsets)[None, :], on.shape)
    yx = (on, off) if dy else (off, on)
    return np.stack(yx, axis=-1)


def render_sweep(spec: SynthSpec, direction: str, starts, offsets, rng: np.random.Generator | None = None) -> np.ndarray:
    pos = sweep_positions(spec, direction, starts, offsets)
    out = np.empty((spec.frames, spec.side, spec.side), dtype=np.uint8)
    for t in range(spec.frames):
        frame = np.full((spec.side, spec.side), spec.bg, dtype=np.float64)
        if t < spec.visible:
            jy, jx = _jitter(spec, rng)
            for y, x in pos[t]:
                y = int(np.clip(y + jy, 0, spec.side - spec.size))
                x = int(np.clip(x + jx, 0, spec.side - spec.size))
                frame[y:y + spec.size, x:x + spec.size] = spec.fg
        out[t] = _finish(spec, frame, rng)
    return out


def synth_dataset(spec: SynthSpec = SynthSpec(), seed: int = 0) -> list[VideoClip]:
    """Balanced, shuffled labeled clips; identical bytes for identical (spec, seed)."""
    rng = np.random.default_rng(seed)
    labels = np.arange(spec.n_clips) % len(spec.classes)
    rng.shuffle(labels)
    clips = []
    for i, label in enumerate(labels):
        direction = spec.classes[label]
        if spec.motion == "wrap":
            positions = rng.integers(0, spec.side, size=(spec.n_objects, 2))
            frames = render_clip(spec, direction, positions, rng)
        else:
            lo, hi = spec.sweep_range()
            starts = rng.integers(lo, hi + 1, size=spec.n_objects)
            # off-axis coordinate: same law as the on-axis position of a visible frame
            offsets = rng.integers(lo, hi + 1, size=spec.n_objects) + spec.speed * rng.integers(
                0, spec.visible, size=spec.n_objects)
            frames = render_sweep(spec, direction, starts, offsets, rng)
        clips.append(VideoClip(frames, int(label), "synthetic", f"clip{i:05d}", list(range(spec.frames))))
    return clips


def to_arrays(clips: list[VideoClip]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([c.frames for c in clips]), np.array([c.label for c in clips], dtype=np.int64)


def split_indices(n: int, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffled train/val/test index arrays; val and test get floor shares, train the rest."""
    if n < 3:
        raise ValueError("need at least three clips to split")
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(n * ratios[1]))
    n_test = max(1, int(n * ratios[2]))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError("split leaves no training clips")
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def pool_frames(frames: np.ndarray, p: int) -> np.ndarray:
    """p x p max pooling of (..., H, W) frames, dropping incomplete edge windows."""
    if p == 1:
        return frames
    h, w = frames.shape[-2:]
    hh, ww = h // p, w // p
    if hh == 0 or ww == 0:
        raise ValueError(f"pool {p} larger than the frame")
    x = frames[..., :hh * p, :ww * p]
    return x.reshape(x.shape[:-2] + (hh, p, ww, p)).max(axis=(-3, -1))

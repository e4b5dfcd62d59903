"""SynthMotion: a deterministic synthetic video dataset whose labels are
temporal by construction.

Every sample is one grayscale shape (square, circle or triangle) undergoing
one of eight motions; four of the classes are time reversals of the other
four (left/right, up/down, grow/shrink, rotate_cw/rotate_ccw), so a model
that ignores frame order cannot separate a reversal pair. Start positions
and speeds are sampled so that reversing a clip of one class yields a clip
drawn from exactly the distribution of its partner class.

Files use the "AFSV1" container: magic (5 bytes), version u8, little-endian
u32 fields n, T, c, h, w, K, then n u16 labels, then u8 pixels sample-major.
A sidecar manifest (key=value lines) echoes the generating spec.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .tensor import Tensor

MAGIC = b"AFSV1"
VERSION = 1
HEADER = 5 + 1 + 6 * 4

ALL_CLASSES = ("left", "right", "up", "down", "grow", "shrink",
               "rotate_cw", "rotate_ccw")
REVERSAL_PAIRS = (("left", "right"), ("up", "down"), ("grow", "shrink"),
                  ("rotate_cw", "rotate_ccw"))
_PARTNER = {a: b for a, b in REVERSAL_PAIRS} | {b: a for a, b in REVERSAL_PAIRS}


@dataclass
class SynthMotionSpec:
    n_samples: int = 2000
    frames: int = 8
    height: int = 32
    width: int = 32
    classes: tuple[str, ...] = ALL_CLASSES
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(self.classes)
        unknown = [c for c in self.classes if c not in ALL_CLASSES]
        if unknown:
            raise ConfigError(f"unknown classes {unknown}; valid: {list(ALL_CLASSES)}")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("duplicate class names")
        if not any(a in self.classes and b in self.classes
                   for a, b in REVERSAL_PAIRS):
            raise ConfigError("classes must contain at least one time-reversal "
                              f"pair, e.g. {REVERSAL_PAIRS[0]}")
        if self.n_samples < 1 or self.frames < 2:
            raise ConfigError("need at least one sample and two frames")
        if min(self.height, self.width) < 16:
            raise ConfigError("frames of at least 16x16 are required for the "
                              "shapes to fit")

    def manifest(self) -> str:
        lines = [f"n_samples={self.n_samples}", f"frames={self.frames}",
                 f"height={self.height}", f"width={self.width}",
                 f"classes={','.join(self.classes)}",
                 f"noise_std={self.noise_std}", f"seed={self.seed}"]
        return "\n".join(lines) + "\n"


@dataclass
class VideoBatch:
    clips: Tensor                 # (n, T, 1, h, w) in [0, 1]
    labels: np.ndarray            # (n,) int

    def __len__(self) -> int:
        return self.clips.shape[0]


# ---------------------------------------------------------------------------
# rendering

_SHAPES = ("square", "circle", "triangle")
_MAX_RADIUS = 5.0
_EDGE = 1.0


def _render_frame(h, w, shape, cx, cy, radius, brightness):
    """Soft-edged signed-distance rendering of one shape on a dark canvas."""
    ys, xs = np.mgrid[0:h, 0:w]
    dx, dy = xs - cx, ys - cy
    if shape == "circle":
        sdf = np.hypot(dx, dy) - radius
    elif shape == "square":
        sdf = np.maximum(np.abs(dx), np.abs(dy)) - radius
    else:  # triangle: three half planes of an upward equilateral triangle
        k = np.sqrt(3.0)
        d1 = dy - radius / 2.0
        d2 = (-dy - k * dx) / 2.0 - radius / 2.0
        d3 = (-dy + k * dx) / 2.0 - radius / 2.0
        sdf = np.maximum(np.maximum(-d1, d2), d3) - radius / 2.0
        sdf = np.maximum(np.abs(dx) - radius * 1.2, sdf)  # clamp width
    cover = np.clip(0.5 - sdf / _EDGE, 0.0, 1.0)
    return brightness * cover


def _span_or_raise(lo: float, hi: float, what: str) -> tuple[float, float]:
    if hi <= lo:
        raise ConfigError(f"degenerate geometry: no room for {what} "
                          "(shape plus travel exceeds the frame)")
    return lo, hi


def _sample_motion(rng, cls, spec):
    """Draw per-sample geometry; returns per-frame (cx, cy, radius).

    Start ranges are chosen so that reversing a clip of one class lands
    exactly in the start distribution of its partner class.
    """
    h, w, frames = spec.height, spec.width, spec.frames
    radius = rng.uniform(2.5, _MAX_RADIUS)
    margin = _MAX_RADIUS * 1.4 + 1.5
    span = frames - 1

    if cls in ("left", "right", "up", "down"):
        speed = rng.uniform(0.8, 1.8)
        drift = speed * span
        lo_x, hi_x = _span_or_raise(margin, w - 1 - margin, "horizontal placement")
        lo_y, hi_y = _span_or_raise(margin, h - 1 - margin, "vertical placement")
        axis_hi = hi_x if cls in ("left", "right") else hi_y
        axis_lo = lo_x if cls in ("left", "right") else lo_y
        _span_or_raise(axis_lo + drift, axis_hi, f"{cls} travel")
        cy = rng.uniform(lo_y, hi_y)
        cx = rng.uniform(lo_x, hi_x)
        if cls == "left":
            cx = rng.uniform(lo_x + drift, hi_x)
            path = [(cx - speed * t, cy) for t in range(frames)]
        elif cls == "right":
            cx = rng.uniform(lo_x, hi_x - drift)
            path = [(cx + speed * t, cy) for t in range(frames)]
        elif cls == "up":
            cy = rng.uniform(lo_y + drift, hi_y)
            path = [(cx, cy - speed * t) for t in range(frames)]
        else:
            cy = rng.uniform(lo_y, hi_y - drift)
            path = [(cx, cy + speed * t) for t in range(frames)]
        return [(px, py, radius) for px, py in path]

    if cls in ("grow", "shrink"):
        lo_x, hi_x = _span_or_raise(margin, w - 1 - margin, "shape placement")
        lo_y, hi_y = _span_or_raise(margin, h - 1 - margin, "shape placement")
        r0 = rng.uniform(2.0, 3.0)
        rate = rng.uniform(0.25, (_MAX_RADIUS - r0) / span)
        cx = rng.uniform(lo_x, hi_x)
        cy = rng.uniform(lo_y, hi_y)
        if cls == "grow":
            return [(cx, cy, r0 + rate * t) for t in range(frames)]
        return [(cx, cy, r0 + rate * (span - t)) for t in range(frames)]

    # orbital rotation around the frame center; cw reversed is ccw
    lo_o, hi_o = _span_or_raise(4.0, min(h, w) / 2.0 - margin, "orbital motion")
    orbit = rng.uniform(lo_o, hi_o)
    omega = rng.uniform(0.15, 0.35)
    theta0 = rng.uniform(0.0, 2.0 * np.pi)
    sign = 1.0 if cls == "rotate_cw" else -1.0
    cx0, cy0 = (w - 1) / 2.0, (h - 1) / 2.0
    return [(cx0 + orbit * np.cos(theta0 + sign * omega * t),
             cy0 + orbit * np.sin(theta0 + sign * omega * t), radius)
            for t in range(frames)]


def render_sample(spec: SynthMotionSpec, index: int) -> tuple[np.ndarray, int]:
    """Render one sample as (T, 1, h, w) u8 pixels; pure function of
    (spec, index). Labels are assigned round-robin."""
    label = index % len(spec.classes)
    cls = spec.classes[label]
    rng = np.random.default_rng([spec.seed, index])
    shape = _SHAPES[rng.integers(0, len(_SHAPES))]
    brightness = rng.uniform(0.6, 1.0)
    path = _sample_motion(rng, cls, spec)
    frames = np.empty((spec.frames, 1, spec.height, spec.width), dtype=np.uint8)
    for t, (cx, cy, radius) in enumerate(path):
        img = _render_frame(spec.height, spec.width, shape, cx, cy, radius,
                            brightness)
        img = img + rng.normal(0.0, spec.noise_std, img.shape)
        frames[t, 0] = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return frames, label


def centroid_drift(clip_u8: np.ndarray) -> tuple[float, float]:
    """Mean per-frame intensity-centroid displacement (dx, dy); the defining
    statistic of the translation classes."""
    t_axis = clip_u8.shape[0]
    xs, ys = [], []
    for t in range(t_axis):
        img = clip_u8[t, 0].astype(np.float64)
        total = img.sum()
        gy, gx = np.mgrid[0:img.shape[0], 0:img.shape[1]]
        xs.append((gx * img).sum() / total)
        ys.append((gy * img).sum() / total)
    return float(np.mean(np.diff(xs))), float(np.mean(np.diff(ys)))


# ---------------------------------------------------------------------------
# container IO


def generate(spec: SynthMotionSpec, path) -> None:
    """Write the dataset file plus its .manifest sidecar. Byte-identical for
    identical specs."""
    n, frames = spec.n_samples, spec.frames
    h, w = spec.height, spec.width
    labels = np.empty(n, dtype="<u2")
    payload = np.empty((n, frames, 1, h, w), dtype=np.uint8)
    for i in range(n):
        payload[i], labels[i] = render_sample(spec, i)
    header = MAGIC + bytes([VERSION])
    header += b"".join(int(v).to_bytes(4, "little")
                       for v in (n, frames, 1, h, w, len(spec.classes)))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(labels.tobytes())
        fh.write(payload.tobytes())
    with open(str(path) + ".manifest", "w") as fh:
        fh.write(spec.manifest())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER)
    if len(raw) < HEADER:
        raise FormatError(f"truncated header: file ends at offset {len(raw)}, "
                          f"need {HEADER}")
    if raw[:5] != MAGIC:
        raise FormatError("bad magic at offset 0: not an AFSV1 dataset")
    if raw[5] != VERSION:
        raise FormatError(f"unsupported dataset version {raw[5]} at offset 5")
    vals = [int.from_bytes(raw[6 + 4 * i:10 + 4 * i], "little") for i in range(6)]
    n, frames, c, h, w, k = vals
    return {"n": n, "frames": frames, "channels": c, "height": h, "width": w,
            "num_classes": k}


def load(path, batch_size: int | None = None):
    """Stream VideoBatches of at most ``batch_size`` clips (all clips when
    None). Pixels are dequantized to float64 in [0, 1]."""
    meta = read_header(path)
    n = meta["n"]
    clip_bytes = meta["frames"] * meta["channels"] * meta["height"] * meta["width"]
    expected = HEADER + 2 * n + n * clip_bytes
    actual = os.path.getsize(path)
    if actual != expected:
        raise FormatError(f"file size {actual} does not match expected {expected}; "
                          f"truncated at offset {actual}")
    with open(path, "rb") as fh:
        fh.seek(HEADER)
        labels = np.frombuffer(fh.read(2 * n), dtype="<u2").astype(np.int64)
        if labels.size and labels.max() >= meta["num_classes"]:
            raise FormatError(f"label {labels.max()} out of range at offset {HEADER}")
        step = n if batch_size is None else batch_size
        for start in range(0, n, step):
            count = min(step, n - start)
            raw = fh.read(count * clip_bytes)
            if len(raw) != count * clip_bytes:
                raise FormatError(f"truncated payload at offset "
                                  f"{HEADER + 2 * n + start * clip_bytes + len(raw)}")
            arr = np.frombuffer(raw, dtype=np.uint8).reshape(
                count, meta["frames"], meta["channels"], meta["height"],
                meta["width"])
            yield VideoBatch(clips=Tensor(arr.astype(np.float64) / 255.0),
                             labels=labels[start:start + count].copy())


def load_all(path) -> VideoBatch:
    return next(load(path, batch_size=None))


def save(path, batch: VideoBatch, num_classes: int, manifest: str | None = None) -> None:
    """Re-serialize a batch; quantization inverts ``load`` exactly."""
    data = batch.clips.data
    n, frames, c, h, w = data.shape
    header = MAGIC + bytes([VERSION])
    header += b"".join(int(v).to_bytes(4, "little")
                       for v in (n, frames, c, h, w, num_classes))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(batch.labels.astype("<u2").tobytes())
        fh.write(np.round(data * 255.0).astype(np.uint8).tobytes())
    if manifest is not None:
        with open(str(path) + ".manifest", "w") as fh:
            fh.write(manifest)

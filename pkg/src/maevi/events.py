"""Event-stream and sequence-sample file formats.

Event files are plain text: a header ``W H t_start t_end`` followed by one
``t,x,y,p`` line per event.  A sample directory holds ``frame_{-2,-1,0,1,2}.png``
(``frame_0`` optional), ``events_{0..3}.txt`` and optionally ``timestamps.txt``
with the five frame times in microseconds.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

FRAME_INDICES = (-2, -1, 1, 2)
N_INTERVALS = 4


class FormatError(ValueError):
    pass


@dataclass
class EventStream:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    t_start: int
    t_end: int
    width: int
    height: int

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int64)
        self.t_start = int(self.t_start)
        self.t_end = int(self.t_end)

    @classmethod
    def empty(cls, width, height, t_start, t_end):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, t_start, t_end, width, height)

    def __len__(self):
        return len(self.t)

    def validate(self):
        if self.t_start >= self.t_end:
            raise FormatError(f"empty interval [{self.t_start}, {self.t_end}]")
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise FormatError("event columns have different lengths")
        if n == 0:
            return self
        bad = np.flatnonzero((self.x < 0) | (self.x >= self.width) | (self.y < 0) | (self.y >= self.height))
        if bad.size:
            raise FormatError(f"event {bad[0]} out of bounds")
        bad = np.flatnonzero((self.t < self.t_start) | (self.t > self.t_end))
        if bad.size:
            raise FormatError(f"event {bad[0]} outside interval")
        bad = np.flatnonzero(np.diff(self.t) < 0)
        if bad.size:
            raise FormatError(f"event {bad[0] + 1} not sorted by time")
        bad = np.flatnonzero(np.abs(self.p) != 1)
        if bad.size:
            raise FormatError(f"event {bad[0]} has polarity {self.p[bad[0]]}")
        return self

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return ((self.t_start, self.t_end, self.width, self.height)
                == (other.t_start, other.t_end, other.width, other.height)
                and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in "txyp"))


def read_events(path):
    """Read and validate an event file; errors name the offending line (1-based)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: missing header line")
    head = lines[0].split()
    if len(head) != 4:
        raise FormatError(f"{path}:1: header must be 'W H t_start t_end'")
    try:
        width, height, t0, t1 = (int(v) for v in head)
    except ValueError:
        raise FormatError(f"{path}:1: non-integer header field") from None
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}:1: non-positive sensor size")
    if t0 >= t1:
        raise FormatError(f"{path}:1: t_start must be < t_end")

    rows = []
    last_t = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 't,x,y,p', got {line!r}")
        try:
            t, x, y, p = (int(v) for v in parts)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-integer field in {line!r}") from None
        if not (0 <= x < width and 0 <= y < height):
            raise FormatError(f"{path}:{lineno}: coordinate ({x},{y}) outside {width}x{height}")
        if p not in (-1, 1):
            raise FormatError(f"{path}:{lineno}: polarity must be -1 or 1, got {p}")
        if not (t0 <= t <= t1):
            raise FormatError(f"{path}:{lineno}: timestamp {t} outside [{t0}, {t1}]")
        if last_t is not None and t < last_t:
            raise FormatError(f"{path}:{lineno}: timestamp {t} precedes {last_t} (unsorted)")
        last_t = t
        rows.append((t, x, y, p))
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return EventStream(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], t0, t1, width, height)


def write_events(path, stream):
    stream.validate()
    with open(path, "w") as fh:
        fh.write(f"{stream.width} {stream.height} {stream.t_start} {stream.t_end}\n")
        if len(stream):
            body = np.stack([stream.t, stream.x, stream.y, stream.p], axis=1)
            fh.write("\n".join(",".join(map(str, r)) for r in body.tolist()))
            fh.write("\n")


def read_image(path):
    """8-bit raster -> float64 ``[3,H,W]`` in [0,1] (v/255)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_image(path, image):
    """Write ``[3,H,W]`` or ``[H,W]`` floats in [0,1] as an 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    q = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if q.ndim == 3:
        q = q.transpose(1, 2, 0)
    Image.fromarray(q).save(path)


@dataclass
class SequenceSample:
    frames: np.ndarray                 # [4,3,H,W]: I-2, I-1, I1, I2
    intervals: list                    # four EventStreams
    ground_truth: np.ndarray | None = None
    timestamps: tuple = ()
    name: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def height(self):
        return self.frames.shape[2]

    @property
    def width(self):
        return self.frames.shape[3]

    def validate(self):
        if self.frames.ndim != 4 or self.frames.shape[:2] != (4, 3):
            raise FormatError(f"frames must be [4,3,H,W], got {self.frames.shape}")
        h, w = self.frames.shape[2:]
        if self.ground_truth is not None and self.ground_truth.shape != (3, h, w):
            raise FormatError(f"ground truth shape {self.ground_truth.shape} != {(3, h, w)}")
        if len(self.intervals) != N_INTERVALS:
            raise FormatError(f"expected {N_INTERVALS} event intervals, got {len(self.intervals)}")
        for k, s in enumerate(self.intervals):
            if (s.width, s.height) != (w, h):
                raise FormatError(f"interval {k} is {s.width}x{s.height}, frames are {w}x{h}")
            s.validate()
        ts = self.timestamps
        if len(ts) != 5:
            raise FormatError("need five frame timestamps")
        for k, s in enumerate(self.intervals):
            if (s.t_start, s.t_end) != (ts[k], ts[k + 1]):
                raise FormatError(f"interval {k} spans [{s.t_start}, {s.t_end}] but frames are at "
                                  f"[{ts[k]}, {ts[k + 1]}]")
        return self


def save_sample(directory, sample):
    sample.validate()
    os.makedirs(directory, exist_ok=True)
    for idx, frame in zip(FRAME_INDICES, sample.frames):
        write_image(os.path.join(directory, f"frame_{idx}.png"), frame)
    if sample.ground_truth is not None:
        write_image(os.path.join(directory, "frame_0.png"), sample.ground_truth)
    for k, s in enumerate(sample.intervals):
        write_events(os.path.join(directory, f"events_{k}.txt"), s)
    with open(os.path.join(directory, "timestamps.txt"), "w") as fh:
        fh.write(" ".join(str(int(t)) for t in sample.timestamps) + "\n")


def load_sample(directory):
    """Load and validate a sample directory; ``ground_truth`` is None when ``frame_0`` is absent."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"sample directory not found: {directory}")

    def need(name):
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise FileNotFoundError(f"{directory}: missing {name}")
        return path

    images = [read_image(need(f"frame_{i}.png")) for i in FRAME_INDICES]
    gt_path = os.path.join(directory, "frame_0.png")
    gt = read_image(gt_path) if os.path.exists(gt_path) else None
    for i, img in zip(FRAME_INDICES, images):
        if img.shape != images[0].shape:
            raise FormatError(f"{directory}: frame_{i} is {img.shape[2]}x{img.shape[1]}, "
                              f"frame_{FRAME_INDICES[0]} is {images[0].shape[2]}x{images[0].shape[1]}")
    frames = np.stack(images)
    intervals = [read_events(need(f"events_{k}.txt")) for k in range(N_INTERVALS)]

    ts_path = os.path.join(directory, "timestamps.txt")
    if os.path.exists(ts_path):
        with open(ts_path) as fh:
            try:
                ts = tuple(int(v) for v in fh.read().split())
            except ValueError:
                raise FormatError(f"{ts_path}: non-integer timestamp") from None
        if len(ts) != 5:
            raise FormatError(f"{ts_path}: expected 5 timestamps, got {len(ts)}")
    else:
        # no timestamp file: intervals must chain end-to-start
        for k in range(N_INTERVALS - 1):
            if intervals[k].t_end != intervals[k + 1].t_start:
                raise FormatError(f"{directory}: events_{k} ends at {intervals[k].t_end} but "
                                  f"events_{k + 1} starts at {intervals[k + 1].t_start}")
        ts = tuple(s.t_start for s in intervals) + (intervals[-1].t_end,)

    sample = SequenceSample(frames=frames, intervals=intervals, ground_truth=gt,
                            timestamps=ts, name=os.path.basename(os.path.normpath(directory)))
    return sample.validate()


def list_samples(root):
    """Sample directories under a dataset root, sorted by name."""
    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset root not found: {root}")
    names = sorted(d for d in os.listdir(root)
                   if os.path.isdir(os.path.join(root, d)) and not d.startswith("."))
    return [os.path.join(root, d) for d in names]

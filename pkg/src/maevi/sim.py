"""Synthetic moving-shape scenes, threshold-crossing events and key frames.

Pixel ``(row, col)`` has its centre at ``(x=col, y=row)``.  Shapes move
linearly at a constant velocity given in pixels per frame gap and are drawn
with hard edges; later shapes occlude earlier ones.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import config
from .events import EventStream, SequenceSample, save_sample

LOG_FLOOR = 1e-3


@dataclass
class Shape:
    kind: str                       # "rectangle" or "disk"
    color: tuple                    # RGB in [0,1]
    position: tuple                 # centre (x, y) at t = 0
    velocity: tuple = (0.0, 0.0)    # px per frame gap
    size: tuple = (8.0, 8.0)        # rectangle (w, h); disk (radius,)

    def __post_init__(self):
        if self.kind not in ("rectangle", "disk"):
            raise ValueError(f"unknown shape kind {self.kind!r}")


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    background: float = 0.5
    frame_gap_us: int = 10000
    substeps: int = 32
    threshold: float = 0.2
    n_random_shapes: int = 0
    max_speed: float = 4.0
    shapes: tuple = field(default_factory=tuple)

    def validate(self):
        if self.substeps < 8:
            raise ValueError(f"substeps must be >= 8, got {self.substeps}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"contrast threshold must lie in (0, 1), got {self.threshold}")
        if self.height < 1 or self.width < 1 or self.frame_gap_us < 1:
            raise ValueError("canvas size and frame gap must be positive")
        return self


_SCALAR_KEYS = {"height": int, "width": int, "background": float, "frame_gap_us": int,
                "substeps": int, "threshold": float, "n_random_shapes": int, "max_speed": float}


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def parse_shape(text):
    """``rectangle color=r,g,b pos=x,y vel=vx,vy size=w,h`` (``size=r`` for a disk)."""
    parts = text.split()
    if not parts:
        raise config.ConfigError("empty shape description")
    kw = {}
    for item in parts[1:]:
        if "=" not in item:
            raise config.ConfigError(f"shape field {item!r} is not key=value")
        k, v = item.split("=", 1)
        kw[k] = v
    unknown = set(kw) - {"color", "pos", "vel", "size"}
    if unknown:
        raise config.ConfigError(f"unknown shape field(s) {sorted(unknown)}")
    try:
        color = _floats(kw.get("color", "1,1,1"))
        if len(color) == 1:
            color = color * 3
        return Shape(kind=parts[0], color=color, position=_floats(kw["pos"]),
                     velocity=_floats(kw.get("vel", "0,0")), size=_floats(kw.get("size", "8,8")))
    except KeyError:
        raise config.ConfigError(f"shape {text!r} needs pos=x,y") from None
    except ValueError as exc:
        raise config.ConfigError(f"bad shape {text!r}: {exc}") from None


def scene_from_pairs(pairs, base=None, source="scene"):
    spec = base or SceneSpec()
    shapes = list(spec.shapes)
    updates = {}
    for key, value, lineno in pairs:
        if key == "shape":
            shapes.append(parse_shape(value))
        elif key in _SCALAR_KEYS:
            try:
                updates[key] = _SCALAR_KEYS[key](value)
            except ValueError:
                raise config.ConfigError(f"{source}:{lineno}: invalid value {value!r} for {key!r}") from None
        else:
            raise config.ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    return replace(spec, shapes=tuple(shapes), **updates).validate()


def load_scene(path):
    return scene_from_pairs(config.read_pairs(path), source=path)


def scene_to_text(spec):
    lines = [f"{k} = {getattr(spec, k)}" for k in _SCALAR_KEYS]
    for s in spec.shapes:
        fmt = lambda v: ",".join(repr(float(x)) for x in v)  # noqa: E731
        lines.append(f"shape = {s.kind} color={fmt(s.color)} pos={fmt(s.position)} "
                     f"vel={fmt(s.velocity)} size={fmt(s.size)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- rendering

def shape_mask(shape, spec, t):
    """Boolean ``[H,W]`` coverage of ``shape`` at time ``t`` (microseconds)."""
    frac = t / spec.frame_gap_us
    cx = shape.position[0] + shape.velocity[0] * frac
    cy = shape.position[1] + shape.velocity[1] * frac
    ys = np.arange(spec.height, dtype=np.float64)[:, None]
    xs = np.arange(spec.width, dtype=np.float64)[None, :]
    if shape.kind == "disk":
        r = shape.size[0]
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    w, h = shape.size[0], shape.size[-1]
    return ((xs >= cx - w / 2) & (xs < cx + w / 2)) & ((ys >= cy - h / 2) & (ys < cy + h / 2))


def render(spec, t, shapes=None):
    """Deterministic ``[3,H,W]`` rendering at time ``t``."""
    shapes = spec.shapes if shapes is None else shapes
    img = np.full((3, spec.height, spec.width), float(spec.background))
    for s in shapes:
        m = shape_mask(s, spec, t)
        img[:, m] = np.asarray(s.color, dtype=np.float64)[:, None]
    return img


def log_luminance(img):
    return np.log(np.maximum(img.mean(axis=0), LOG_FLOOR))


def events_from_log_frames(logs, times, threshold, t_start=None, t_end=None):
    """Threshold-crossing events from a sequence of log-luminance images.

    ``logs[j]`` is observed at ``times[j]``.  Each pixel keeps a reference
    level (initially ``logs[0]``); an event fires whenever the signal moves a
    full ``threshold`` away from it, and its time is placed linearly inside
    the substep where the crossing happens.
    """
    logs = np.asarray(logs, dtype=np.float64)
    h, w = logs.shape[1:]
    ref = logs[0].copy()
    ts, xs, ys, ps = [], [], [], []
    for j in range(1, len(logs)):
        prev, cur = logs[j - 1], logs[j]
        t0, dt = float(times[j - 1]), float(times[j] - times[j - 1])
        diff = cur - ref
        n_cross = np.floor(np.abs(diff) / threshold).astype(np.int64)
        active = np.flatnonzero(n_cross.ravel())
        if active.size == 0:
            continue
        sign = np.sign(diff.ravel()[active])
        ref_a = ref.ravel()[active]
        prev_a = prev.ravel()[active]
        step = cur.ravel()[active] - prev_a
        n_a = n_cross.ravel()[active]
        for k in range(1, int(n_a.max()) + 1):
            sel = n_a >= k
            level = ref_a[sel] + sign[sel] * k * threshold
            frac = np.clip((level - prev_a[sel]) / step[sel], 0.0, 1.0)
            ts.append(t0 + frac * dt)
            pix = active[sel]
            ys.append(pix // w)
            xs.append(pix % w)
            ps.append(sign[sel].astype(np.int64))
        ref.ravel()[active] = ref_a + sign * n_a * threshold

    t_start = times[0] if t_start is None else t_start
    t_end = times[-1] if t_end is None else t_end
    if not ts:
        return EventStream.empty(w, h, t_start, t_end)
    t = np.concatenate(ts)
    order = np.argsort(t, kind="stable")
    t_int = np.clip(np.round(t[order]), t_start, t_end).astype(np.int64)
    return EventStream(t_int, np.concatenate(xs)[order], np.concatenate(ys)[order],
                       np.concatenate(ps)[order], t_start, t_end, w, h)


def simulate_events(spec, t_a, t_b, shapes=None):
    """Events emitted between ``t_a`` and ``t_b`` (microseconds) with ``spec.substeps`` per frame gap."""
    if not t_a < t_b:
        raise ValueError(f"need t_a < t_b, got {t_a}, {t_b}")
    n = max(spec.substeps, int(np.ceil(spec.substeps * (t_b - t_a) / spec.frame_gap_us)))
    times = np.linspace(t_a, t_b, n + 1)
    logs = [log_luminance(render(spec, t, shapes)) for t in times]
    return events_from_log_frames(logs, times, spec.threshold, int(t_a), int(t_b))


# ---------------------------------------------------------------- datasets

def random_shapes(spec, rng, n):
    out = []
    for _ in range(n):
        kind = "rectangle" if rng.random() < 0.5 else "disk"
        speed = rng.uniform(0.5, 1.0) * spec.max_speed
        ang = rng.uniform(0, 2 * np.pi)
        vel = (speed * np.cos(ang), speed * np.sin(ang))
        # start so that the t = 2 gap position lands well inside the canvas
        mid = (rng.uniform(0.3, 0.7) * spec.width, rng.uniform(0.3, 0.7) * spec.height)
        pos = (mid[0] - 2 * vel[0], mid[1] - 2 * vel[1])
        color = tuple(rng.uniform(0.05, 0.95, size=3))
        if kind == "disk":
            size = (rng.uniform(0.08, 0.18) * min(spec.height, spec.width),)
        else:
            size = tuple(rng.uniform(0.15, 0.35, size=2) * (spec.width, spec.height))
        out.append(Shape(kind, color, pos, vel, size))
    return out


def make_sample(spec, shapes, name=""):
    """Frames at ``k * gap`` for ``k = 0..4``; ``I0`` at ``2 * gap``."""
    gap = spec.frame_gap_us
    times = [k * gap for k in range(5)]
    images = [render(spec, t, shapes) for t in times]
    intervals = [simulate_events(spec, times[k], times[k + 1], shapes) for k in range(4)]
    frames = np.stack([images[0], images[1], images[3], images[4]])
    return SequenceSample(frames=frames, intervals=intervals, ground_truth=images[2],
                          timestamps=tuple(times), name=name)


def sample_shapes(spec, seed, index):
    rng = np.random.default_rng([int(seed), int(index)])
    return list(spec.shapes) + random_shapes(spec, rng, spec.n_random_shapes)


def make_dataset(spec, n_samples, out_dir, seed=0, workers=1):
    """Write ``n_samples`` sample directories ``sample_00000`` ... under ``out_dir``."""
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(spec, seed, i, os.path.join(out_dir, f"sample_{i:05d}")) for i in range(n_samples)]
    if workers > 1 and n_samples > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            paths = list(pool.map(_write_one, jobs))
    else:
        paths = [_write_one(j) for j in jobs]
    with open(os.path.join(out_dir, "scene.txt"), "w") as fh:
        fh.write(scene_to_text(spec))
    return paths


def _write_one(job):
    spec, seed, index, path = job
    sample = make_sample(spec, sample_shapes(spec, seed, index), name=os.path.basename(path))
    save_sample(path, sample)
    return path

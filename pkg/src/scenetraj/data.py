"""Annotation ingestion, window extraction, splits and synthetic scenes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

T_OBS = 8
T_PRED = 12
CANONICAL_HEADER = "frame,ped_id,x_m,y_m"


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


class BoundsError(DataError):
    pass


@dataclass(frozen=True)
class TrackPoint:
    frame: int
    ped_id: int
    x: float
    y: float


@dataclass
class SceneDataset:
    scene_id: str
    points: list[TrackPoint]
    bounds: tuple[float, float, float, float] | None
    frame_stride: int = 1
    fps: float = 25.0
    # synthetic scenes only: branch taken by each ped_id
    branches: list[int] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: (p.frame, p.ped_id))
        if self.bounds is not None:
            x0, y0, x1, y1 = self.bounds
            if not (x0 < x1 and y0 < y1):
                raise BoundsError(f"degenerate bounds {self.bounds}")
            for p in self.points:
                if not (x0 <= p.x <= x1 and y0 <= p.y <= y1):
                    raise BoundsError(f"point {p} outside scene bounds {self.bounds}")

    def require_bounds(self) -> tuple[float, float, float, float]:
        if self.bounds is None:
            raise BoundsError(f"scene {self.scene_id!r} has no bounds (empty dataset?)")
        return self.bounds

    @property
    def frame_span(self) -> tuple[int, int]:
        if not self.points:
            raise DataError(f"scene {self.scene_id!r} is empty")
        return self.points[0].frame, self.points[-1].frame

    def tracks(self, frame_lo: int | None = None, frame_hi: int | None = None
               ) -> list[tuple[int, list[TrackPoint]]]:
        """Maximal runs of consecutive frames per pedestrian, ordered by (ped_id, start)."""
        by_ped: dict[int, list[TrackPoint]] = {}
        for p in self.points:
            if frame_lo is not None and p.frame < frame_lo:
                continue
            if frame_hi is not None and p.frame > frame_hi:
                continue
            by_ped.setdefault(p.ped_id, []).append(p)
        runs = []
        for pid in sorted(by_ped):
            run: list[TrackPoint] = []
            for p in by_ped[pid]:
                if run and p.frame - run[-1].frame != self.frame_stride:
                    runs.append((pid, run))
                    run = []
                run.append(p)
            if run:
                runs.append((pid, run))
        return runs


@dataclass(frozen=True)
class Schema:
    """Column layout of an annotation file; unused columns are named '_'."""

    columns: tuple[str, ...] = ("frame", "ped_id", "x", "y")
    delimiter: str | None = None  # None splits on any whitespace

    @classmethod
    def parse(cls, columns: str, delimiter: str | None = None) -> "Schema":
        names = tuple(c.strip() for c in columns.split(","))
        missing = {"frame", "ped_id", "x", "y"} - set(names)
        if missing:
            raise DataError(f"schema lacks columns {sorted(missing)}")
        delim = {"whitespace": None, "comma": ",", "tab": "\t", "space": " ",
                 "": None, None: None}.get(delimiter, delimiter)
        return cls(names, delim)


CANONICAL_SCHEMA = Schema(("frame", "ped_id", "x", "y"), ",")


def _as_int(tok: str) -> int:
    v = float(tok)
    if not v.is_integer():
        raise ValueError(f"{tok!r} is not an integer")
    return int(v)


def infer_frame_stride(frames: Iterable[int]) -> int:
    fs = sorted(set(frames))
    gaps = [b - a for a, b in zip(fs, fs[1:])]
    return reduce(math.gcd, gaps) if gaps else 1


def padded_bounds(xs: np.ndarray, ys: np.ndarray, pad: float = 0.01):
    def one(v):
        lo, hi = float(v.min()), float(v.max())
        ext = hi - lo
        d = pad * ext if ext > 0 else 0.5
        return lo - d, hi + d

    (x0, x1), (y0, y1) = one(xs), one(ys)
    return (x0, y0, x1, y1)


def load_annotations(path, schema: Schema = Schema(), scene_id: str | None = None,
                     bounds: Sequence[float] | None = None, fps: float = 25.0,
                     frame_stride: int | None = None) -> SceneDataset:
    path = Path(path)
    idx = {name: k for k, name in enumerate(schema.columns)}
    points: list[TrackPoint] = []
    seen: set[tuple[int, int]] = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if lineno == 1 and text == CANONICAL_HEADER:
                continue
            toks = text.split(schema.delimiter)
            try:
                if len(toks) < len(schema.columns):
                    raise ValueError(f"expected {len(schema.columns)} fields, got {len(toks)}")
                pt = TrackPoint(_as_int(toks[idx["frame"]]), _as_int(toks[idx["ped_id"]]),
                                float(toks[idx["x"]]), float(toks[idx["y"]]))
                if not (math.isfinite(pt.x) and math.isfinite(pt.y)):
                    raise ValueError("non-finite coordinate")
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed line {text!r} ({exc})") from None
            key = (pt.frame, pt.ped_id)
            if key in seen:
                raise DataError(f"{path}:{lineno}: duplicate (frame, ped_id) = {key}")
            seen.add(key)
            points.append(pt)
    if bounds is None and points:
        bounds = padded_bounds(np.array([p.x for p in points]), np.array([p.y for p in points]))
    stride = frame_stride or infer_frame_stride(p.frame for p in points)
    return SceneDataset(scene_id or path.stem, points,
                        tuple(map(float, bounds)) if bounds is not None else None, stride, fps)


def write_canonical_csv(d: SceneDataset, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(CANONICAL_HEADER + "\n")
        for p in d.points:
            fh.write(f"{p.frame},{p.ped_id},{p.x!r},{p.y!r}\n")


def write_scene_meta(d: SceneDataset, path) -> None:
    x0, y0, x1, y1 = d.require_bounds()
    with open(path, "w") as fh:
        fh.write(f"scene_id = {d.scene_id}\n")
        fh.write(f"bounds = {x0!r},{y0!r},{x1!r},{y1!r}\n")
        fh.write(f"fps = {d.fps!r}\n")
        fh.write(f"frame_stride = {d.frame_stride}\n")


def read_scene_meta(path) -> dict:
    meta = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        meta[k] = v
    try:
        return {
            "scene_id": meta["scene_id"],
            "bounds": tuple(float(t) for t in meta["bounds"].split(",")),
            "fps": float(meta["fps"]),
            "frame_stride": int(meta["frame_stride"]),
        }
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad scene metadata ({exc})") from None


def load_canonical(csv_path, meta_path=None) -> SceneDataset:
    csv_path = Path(csv_path)
    meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".meta")
    meta = read_scene_meta(meta_path)
    return load_annotations(csv_path, CANONICAL_SCHEMA, meta["scene_id"], meta["bounds"],
                            meta["fps"], meta["frame_stride"])


# ---------------------------------------------------------------- coordinates

def to_unit(p, bounds) -> tuple[float, float]:
    """Affine map of an in-bounds point onto the half-open unit square."""
    x0, y0, x1, y1 = bounds
    x, y = float(p[0]), float(p[1])
    if not (x0 <= x <= x1 and y0 <= y <= y1):
        raise BoundsError(f"point ({x}, {y}) outside bounds {tuple(bounds)}")
    u = (x - x0) / (x1 - x0)
    v = (y - y0) / (y1 - y0)
    below_one = math.nextafter(1.0, 0.0)
    return min(u, below_one), min(v, below_one)


def from_unit(u, bounds) -> tuple[float, float]:
    x0, y0, x1, y1 = bounds
    return x0 + u[0] * (x1 - x0), y0 + u[1] * (y1 - y0)


def to_unit_array(xy: np.ndarray, bounds, clamp: bool = False) -> np.ndarray:
    x0, y0, x1, y1 = bounds
    xy = np.asarray(xy, dtype=np.float64)
    uv = np.empty_like(xy)
    uv[..., 0] = (xy[..., 0] - x0) / (x1 - x0)
    uv[..., 1] = (xy[..., 1] - y0) / (y1 - y0)
    if clamp:
        np.clip(uv, 0.0, 1.0, out=uv)
    elif np.any(uv < 0.0) or np.any(uv > 1.0):
        bad = xy[np.any((uv < 0) | (uv > 1), axis=-1)][0]
        raise BoundsError(f"point ({bad[0]}, {bad[1]}) outside bounds {tuple(bounds)}")
    return np.minimum(uv, math.nextafter(1.0, 0.0))


# ---------------------------------------------------------------- windows

@dataclass(eq=False)
class TrajectoryWindow:
    scene_id: str
    ped_id: int
    start_frame: int
    positions: np.ndarray  # (T_obs + T_pred, 2) meters
    frame_stride: int
    t_obs: int = T_OBS
    t_pred: int = T_PRED

    @property
    def end_frame(self) -> int:
        return self.start_frame + (len(self.positions) - 1) * self.frame_stride

    @property
    def observed(self) -> np.ndarray:
        return self.positions[:self.t_obs]

    @property
    def future(self) -> np.ndarray:
        return self.positions[self.t_obs:]

    def key(self) -> tuple:
        return (self.scene_id, self.ped_id, self.start_frame)


def extract_windows(d: SceneDataset, t_obs: int = T_OBS, t_pred: int = T_PRED,
                    stride: int = 1, frame_lo: int | None = None,
                    frame_hi: int | None = None) -> list[TrajectoryWindow]:
    """Sliding windows over each maximal consecutive run, ordered by (ped_id, start_frame).

    With ``frame_lo``/``frame_hi`` only windows lying entirely inside the
    inclusive frame range are produced.
    """
    if stride < 1:
        raise ValueError("window stride must be >= 1")
    length = t_obs + t_pred
    out = []
    for pid, run in d.tracks(frame_lo, frame_hi):
        if len(run) < length:
            continue
        xy = np.array([(p.x, p.y) for p in run])
        for s in range(0, len(run) - length + 1, stride):
            out.append(TrajectoryWindow(d.scene_id, pid, run[s].frame, xy[s:s + length].copy(),
                                        d.frame_stride, t_obs, t_pred))
    return out


def to_relative(w: TrajectoryWindow) -> np.ndarray:
    return np.diff(w.positions, axis=0)


def from_relative(start, disp: np.ndarray) -> np.ndarray:
    out = np.empty((len(disp) + 1, 2))
    out[0] = start
    out[1:] = start + np.cumsum(disp, axis=0)
    return out


# ---------------------------------------------------------------- splits

STAGE1_TRAIN = "stage1_train"
STAGE1_VAL = "stage1_val"
STAGE2_TRAIN = "stage2_train"
TEST = "test"


@dataclass
class Split:
    role: str
    ranges: dict[str, tuple[int, int]]  # scene_id -> inclusive frame range
    windows: list[TrajectoryWindow] = field(default_factory=list)


def stage2_boundary(d: SceneDataset, fraction: float) -> int:
    lo, hi = d.frame_span
    span = hi - lo + d.frame_stride
    return lo + int(round(fraction * span))


def make_splits(datasets: Sequence[SceneDataset], held_out: str, stage2_fraction: float = 0.5,
                seed: int = 0, stride: int = 1, val_ratio: float = 0.2,
                test_from: float | None = None) -> dict[str, Split]:
    """Leave-one-out splits.

    Stage 1 takes every scene but ``held_out``, its windows split ``1 - val_ratio``
    / ``val_ratio`` at random.  The held-out scene's first ``stage2_fraction`` of
    frames trains stage 2; the test range starts at the stage-2 boundary, or at
    ``test_from`` (a frame fraction) when given, so that a sweep over
    ``stage2_fraction`` can share one test set.  Windows straddling a boundary
    are dropped.
    """
    by_id = {d.scene_id: d for d in datasets}
    if held_out not in by_id:
        raise DataError(f"held-out scene {held_out!r} not among {sorted(by_id)}")
    if not 0.0 <= stage2_fraction < 1.0:
        raise ValueError("stage2_fraction must lie in [0, 1)")
    others = [d for d in datasets if d.scene_id != held_out]
    if not others:
        raise DataError("leave-one-out needs at least two scenes")

    rng = np.random.default_rng(seed)
    s1_train = Split(STAGE1_TRAIN, {})
    s1_val = Split(STAGE1_VAL, {})
    for d in sorted(others, key=lambda d: d.scene_id):
        wins = extract_windows(d, stride=stride)
        perm = rng.permutation(len(wins))
        n_val = int(round(val_ratio * len(wins)))
        val_idx = set(perm[:n_val].tolist())
        s1_train.windows += [w for k, w in enumerate(wins) if k not in val_idx]
        s1_val.windows += [w for k, w in enumerate(wins) if k in val_idx]
        span = d.frame_span if d.points else (0, -1)
        s1_train.ranges[d.scene_id] = span
        s1_val.ranges[d.scene_id] = span

    h = by_id[held_out]
    lo, hi = h.frame_span
    boundary = stage2_boundary(h, stage2_fraction)
    test_lo = boundary if test_from is None else max(boundary, stage2_boundary(h, test_from))
    s2 = Split(STAGE2_TRAIN, {})
    if boundary > lo:
        s2.ranges[held_out] = (lo, boundary - 1)
        s2.windows = extract_windows(h, stride=stride, frame_lo=lo, frame_hi=boundary - 1)
    test = Split(TEST, {held_out: (test_lo, hi)},
                 extract_windows(h, stride=1, frame_lo=test_lo, frame_hi=hi))
    return {STAGE1_TRAIN: s1_train, STAGE1_VAL: s1_val, STAGE2_TRAIN: s2, TEST: test}


# ---------------------------------------------------------------- synthetic scenes

LAYOUTS = ("straight", "tjunction", "door")

# Scene boxes (x0, y0, x1, y1) in meters.  Corridors sit in the middle of a
# column of the default 8x8 grid so that noise does not make them straddle
# a cell border.
_BOX = {
    "straight": (-10.0, -4.0, 10.0, 4.0),
    "tjunction": (-10.0, -2.0, 10.0, 6.0),
    "door": (-10.0, -2.0, 10.0, 8.0),
}
_JUNCTION_Y = 4.5
_CORRIDOR_X = 1.25
_DOOR_X = 1.25
_WALL_Y = 1.125


@dataclass
class SynthSceneSpec:
    layout: str = "tjunction"
    branch_probs: tuple[float, ...] = (0.85, 0.15)
    n_peds: int = 1000
    speed_mean: float = 0.45  # m per annotated step
    speed_std: float = 0.03
    noise: float = 0.05
    seed: int = 0
    track_len: int = 21
    spawn_interval: int = 1  # annotated steps between arrivals
    frame_stride: int = 10
    fps: float = 25.0
    scene_id: str | None = None

    def validate(self) -> None:
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}; choose from {LAYOUTS}")
        p = np.asarray(self.branch_probs, dtype=float)
        if len(p) != 2 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"branch probabilities must be two non-negatives summing to 1, got {self.branch_probs}")
        if self.noise < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.n_peds < 0 or self.track_len < 2 or self.spawn_interval < 1:
            raise ValueError("invalid pedestrian count, track length or spawn interval")


def _along_polyline(vertices: np.ndarray, step: float, n: int) -> np.ndarray:
    seg = np.diff(vertices, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = np.arange(n) * step
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    t = (s - cum[k]) / seg_len[k]
    return vertices[k] + t[:, None] * seg[k]


def synth_generate(spec: SynthSceneSpec) -> SceneDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    x0, y0, x1, y1 = _BOX[spec.layout]
    far = 2.0 * (x1 - x0)
    points = []
    branches = []
    for pid in range(spec.n_peds):
        speed = float(np.clip(rng.normal(spec.speed_mean, spec.speed_std),
                              0.5 * spec.speed_mean, 1.25 * spec.speed_mean))
        branch = int(rng.random() >= spec.branch_probs[0])
        branches.append(branch)
        if spec.layout == "straight":
            y = rng.uniform(-2.5, 2.5)
            xs = rng.uniform(-9.5, -8.5)
            verts = np.array([[xs, y], [xs + far, y]])
            if branch == 1:
                verts[:, 0] *= -1.0
        elif spec.layout == "tjunction":
            x = _CORRIDOR_X + rng.uniform(-0.4, 0.4)
            yj = _JUNCTION_Y + rng.uniform(-0.25, 0.25)
            ys = _JUNCTION_Y - rng.uniform(3.0, 6.0)
            side = -1.0 if branch == 0 else 1.0
            verts = np.array([[x, ys], [x, yj], [x + side * far, yj]])
        else:  # door: walk along the wall, enter (branch 0) or pass by
            y = _WALL_Y + rng.uniform(-0.4, 0.4)
            xd = _DOOR_X + rng.uniform(-0.25, 0.25)
            xs = _DOOR_X - rng.uniform(3.0, 6.0)
            if branch == 0:
                verts = np.array([[xs, y], [xd, y], [xd, y + far]])
            else:
                verts = np.array([[xs, y], [xs + far, y]])
        xy = _along_polyline(verts, speed, spec.track_len)
        if spec.noise > 0:
            xy = xy + rng.normal(0.0, spec.noise, xy.shape)
        start = pid * spec.spawn_interval
        for k, (px, py) in enumerate(xy):
            if x0 <= px <= x1 and y0 <= py <= y1:
                points.append(TrackPoint((start + k) * spec.frame_stride, pid, float(px), float(py)))
    return SceneDataset(spec.scene_id or spec.layout, points, _BOX[spec.layout],
                        spec.frame_stride, spec.fps, branches)

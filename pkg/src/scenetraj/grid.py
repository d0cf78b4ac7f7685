"""Two-level grid: cell/subgrid indexing, linear-cell classification,
common subgrid paths, and the per-cell scene state bank."""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import to_unit_array
from .nn import Tensor, as_tensor, put_rows, take_rows

GRID_FORMAT = "scenetraj-grid"
GRID_VERSION = 1
DEFAULT_THETA_LIN = 0.10
DEFAULT_P = 3


@dataclass(frozen=True)
class GridSpec:
    n: int = 8  # cells per axis
    m: int = 8  # subgrids per axis inside a cell

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError(f"grid sizes must be >= 1, got n={self.n}, m={self.m}")

    @property
    def n_cells(self) -> int:
        return self.n * self.n

    @property
    def n_sub(self) -> int:
        return self.m * self.m


def _index_1d(u: np.ndarray, k: int) -> np.ndarray:
    """floor(u * k), corrected so that i / k <= u < (i + 1) / k holds in floats."""
    i = np.clip(np.floor(u * k).astype(np.int64), 0, k - 1)
    i = np.where((i > 0) & (i / k > u), i - 1, i)
    i = np.where((i < k - 1) & ((i + 1) / k <= u), i + 1, i)
    return i


def locate_array(uv: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    uv = np.asarray(uv, dtype=np.float64)
    if np.any(uv < 0.0) or np.any(uv >= 1.0):
        raise ValueError("unit coordinates must lie in [0, 1)")
    n, m = spec.n, spec.m
    col = _index_1d(uv[..., 0], n)
    row = _index_1d(uv[..., 1], n)
    # subgrid index on the fine lattice, kept inside the owning cell
    gx = np.clip(_index_1d(uv[..., 0], n * m), col * m, col * m + m - 1)
    gy = np.clip(_index_1d(uv[..., 1], n * m), row * m, row * m + m - 1)
    return row * n + col, (gy - row * m) * m + (gx - col * m)


def locate(u, spec: GridSpec) -> tuple[int, int]:
    """(CellId, SubgridId) of a unit-square point; ids are row-major."""
    cell, sub = locate_array(np.asarray(u, dtype=np.float64).reshape(1, 2), spec)
    return int(cell[0]), int(sub[0])


def cell_bounds(cell: int, spec: GridSpec) -> tuple[float, float, float, float]:
    row, col = divmod(cell, spec.n)
    return col / spec.n, row / spec.n, (col + 1) / spec.n, (row + 1) / spec.n


def subgrid_bounds(cell: int, sub: int, spec: GridSpec) -> tuple[float, float, float, float]:
    row, col = divmod(cell, spec.n)
    srow, scol = divmod(sub, spec.m)
    k = spec.n * spec.m
    gx, gy = col * spec.m + scol, row * spec.m + srow
    return gx / k, gy / k, (gx + 1) / k, (gy + 1) / k


def one_hot(sub: int, spec: GridSpec) -> np.ndarray:
    if not 0 <= sub < spec.n_sub:
        raise ValueError(f"subgrid id {sub} outside [0, {spec.n_sub})")
    v = np.zeros(spec.n_sub)
    v[sub] = 1.0
    return v


def chord_deviation(points) -> float:
    """Largest perpendicular distance of interior points from the first-to-last chord."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        return 0.0
    a, b = pts[0], pts[-1]
    d = b - a
    rel = pts[1:-1] - a
    length = math.hypot(d[0], d[1])
    if length == 0.0:
        return float(np.max(np.hypot(rel[:, 0], rel[:, 1])))
    return float(np.max(np.abs(rel[:, 0] * d[1] - rel[:, 1] * d[0])) / length)


def is_linear_segment(points, theta_lin: float = DEFAULT_THETA_LIN) -> bool:
    return chord_deviation(points) <= theta_lin


def _runs(values: np.ndarray) -> list[tuple[int, int]]:
    """Half-open index ranges of maximal runs of equal values."""
    if len(values) == 0:
        return []
    cuts = np.flatnonzero(values[1:] != values[:-1]) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [len(values)]])
    return list(zip(starts.tolist(), ends.tolist()))


@dataclass
class Segment:
    ped_id: int
    cell: int
    points: np.ndarray  # meters
    subgrids: np.ndarray


def cell_segments(trajectories: Iterable[tuple[int, np.ndarray]], bounds, spec: GridSpec
                  ) -> list[Segment]:
    """Split each (ped_id, positions) trajectory into maximal same-cell runs."""
    out = []
    for pid, xy in trajectories:
        xy = np.asarray(xy, dtype=np.float64)
        if len(xy) == 0:
            continue
        cells, subs = locate_array(to_unit_array(xy, bounds), spec)
        for s, e in _runs(cells):
            out.append(Segment(int(pid), int(cells[s]), xy[s:e], subs[s:e]))
    return out


def classify_cells(segments: Iterable[Segment], spec: GridSpec,
                   theta_lin: float = DEFAULT_THETA_LIN) -> np.ndarray:
    """Boolean mask over cells, True where some segment is non-linear."""
    nonlinear = np.zeros(spec.n_cells, dtype=bool)
    for seg in segments:
        if not nonlinear[seg.cell] and not is_linear_segment(seg.points, theta_lin):
            nonlinear[seg.cell] = True
    return nonlinear


def parse_subgrid_paths(subgrids: Sequence[int]) -> list[tuple[int, int]]:
    """Directed edges between consecutive distinct subgrid occupancies."""
    return [(int(a), int(b)) for a, b in zip(subgrids, subgrids[1:]) if a != b]


@dataclass
class CommonCell:
    edge_counts: dict[tuple[int, int], int] = field(default_factory=dict)
    common_edges: set[tuple[int, int]] = field(default_factory=set)
    common_subgrids: set[int] = field(default_factory=set)


@dataclass
class CommonPathTable:
    p: int = DEFAULT_P
    cells: dict[int, CommonCell] = field(default_factory=dict)

    def common_subgrids(self, cell: int) -> set[int]:
        entry = self.cells.get(cell)
        return entry.common_subgrids if entry else set()


def mine_common_paths(edges: Mapping[int, Iterable[tuple[int, tuple[int, int]]]],
                      p: int = DEFAULT_P) -> CommonPathTable:
    """Count distinct pedestrians per directed subgrid edge; keep counts > p.

    ``edges`` maps a non-linear cell id to ``(ped_id, (from, to))`` records.
    """
    table = CommonPathTable(p)
    for cell, records in edges.items():
        walkers: dict[tuple[int, int], set[int]] = defaultdict(set)
        for pid, edge in records:
            walkers[(int(edge[0]), int(edge[1]))].add(pid)
        entry = CommonCell({e: len(ps) for e, ps in walkers.items()})
        entry.common_edges = {e for e, c in entry.edge_counts.items() if c > p}
        for a, b in entry.common_edges:
            entry.common_subgrids.update((a, b))
        table.cells[int(cell)] = entry
    return table


@dataclass
class GridArtifacts:
    """Preprocessing output for one scene: cell classes plus common-path table."""

    spec: GridSpec
    bounds: tuple[float, float, float, float]
    theta_lin: float
    nonlinear: np.ndarray  # (n*n,) bool
    table: CommonPathTable

    def __post_init__(self):
        mask = np.zeros((self.spec.n_cells, self.spec.n_sub), dtype=bool)
        for cell, entry in self.table.cells.items():
            for s in entry.common_subgrids:
                mask[cell, s] = True
        self.common_mask = mask

    @property
    def n_nonlinear(self) -> int:
        return int(self.nonlinear.sum())

    def to_dict(self) -> dict:
        cells = {}
        for cell in sorted(self.table.cells):
            e = self.table.cells[cell]
            cells[str(cell)] = {
                "edge_counts": [[a, b, c] for (a, b), c in sorted(e.edge_counts.items())],
                "common_edges": [list(x) for x in sorted(e.common_edges)],
                "common_subgrids": sorted(e.common_subgrids),
            }
        doc = {
            "format": GRID_FORMAT,
            "version": GRID_VERSION,
            "n": self.spec.n,
            "m": self.spec.m,
            "bounds": list(self.bounds),
            "theta_lin": self.theta_lin,
            "p": self.table.p,
            "nonlinear_cells": np.flatnonzero(self.nonlinear).tolist(),
            "cells": cells,
        }
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "GridArtifacts":
        if doc.get("format") != GRID_FORMAT or doc.get("version") != GRID_VERSION:
            raise ValueError(f"unsupported grid artifact format/version: "
                             f"{doc.get('format')}/{doc.get('version')}")
        spec = GridSpec(doc["n"], doc["m"])
        nonlinear = np.zeros(spec.n_cells, dtype=bool)
        nonlinear[doc["nonlinear_cells"]] = True
        table = CommonPathTable(doc["p"])
        for key, e in doc["cells"].items():
            table.cells[int(key)] = CommonCell(
                {(a, b): c for a, b, c in e["edge_counts"]},
                {tuple(x) for x in e["common_edges"]},
                set(e["common_subgrids"]),
            )
        return cls(spec, tuple(doc["bounds"]), doc["theta_lin"], nonlinear, table)

    @classmethod
    def from_json(cls, text: str) -> "GridArtifacts":
        return cls.from_dict(json.loads(text))

    def same_tables(self, other: "GridArtifacts") -> bool:
        return (self.spec == other.spec and tuple(self.bounds) == tuple(other.bounds)
                and self.theta_lin == other.theta_lin
                and np.array_equal(self.nonlinear, other.nonlinear)
                and self.table == other.table)


def build_grid_artifacts(trajectories: Iterable[tuple[int, np.ndarray]], bounds,
                         spec: GridSpec = GridSpec(), theta_lin: float = DEFAULT_THETA_LIN,
                         p: int = DEFAULT_P) -> GridArtifacts:
    segments = cell_segments(trajectories, bounds, spec)
    nonlinear = classify_cells(segments, spec, theta_lin)
    edges: dict[int, list] = {int(c): [] for c in np.flatnonzero(nonlinear)}
    for seg in segments:
        if nonlinear[seg.cell]:
            edges[seg.cell].extend((seg.ped_id, e) for e in parse_subgrid_paths(seg.subgrids))
    return GridArtifacts(spec, tuple(bounds), theta_lin, nonlinear, mine_common_paths(edges, p))


def scene_trajectories(dataset, frame_lo=None, frame_hi=None) -> list[tuple[int, np.ndarray]]:
    return [(pid, np.array([(q.x, q.y) for q in run]))
            for pid, run in dataset.tracks(frame_lo, frame_hi)]


def hard_filter(u, art: GridArtifacts) -> int | None:
    """Cell id when scene memory applies at unit position ``u`` (UseScene), else None."""
    cell, sub = locate(u, art.spec)
    if art.nonlinear[cell] and art.common_mask[cell, sub]:
        return cell
    return None


class FrozenBankError(RuntimeError):
    pass


class SceneStateBank:
    """Per-cell Scene-LSTM state (h_g, c_g), stored as two (n*n, H) tensors.

    Updates go through :func:`put_rows`, so within one recorded forward pass
    gradients flow through the bank from later readers back to earlier writers.
    """

    def __init__(self, n_cells: int, hidden: int, updatable: np.ndarray | None = None):
        self.n_cells = n_cells
        self.hidden = hidden
        self.updatable = (np.ones(n_cells, dtype=bool) if updatable is None
                          else np.asarray(updatable, dtype=bool).copy())
        self.frozen = False
        self.reset()

    def reset(self) -> None:
        if self.frozen:
            raise FrozenBankError("cannot reset a frozen scene bank")
        self.h = Tensor(np.zeros((self.n_cells, self.hidden)))
        self.c = Tensor(np.zeros((self.n_cells, self.hidden)))

    def freeze(self) -> None:
        self.detach()
        self.frozen = True

    def detach(self) -> None:
        self.h = Tensor(self.h.value.copy())
        self.c = Tensor(self.c.value.copy())

    def read(self, cell: int) -> tuple[np.ndarray, np.ndarray]:
        return self.h.value[cell].copy(), self.c.value[cell].copy()

    def update(self, cell: int, h_new, c_new) -> None:
        """Replace one cell's state with constant values (no graph edge)."""
        h = np.asarray(as_tensor(h_new).value).reshape(1, self.hidden)
        c = np.asarray(as_tensor(c_new).value).reshape(1, self.hidden)
        self.write_rows(np.array([cell]), Tensor(h), Tensor(c))

    def read_rows(self, cells: np.ndarray) -> tuple[Tensor, Tensor]:
        return take_rows(self.h, cells), take_rows(self.c, cells)

    def write_rows(self, cells: np.ndarray, h_rows: Tensor, c_rows: Tensor) -> None:
        if self.frozen:
            raise FrozenBankError("scene bank is frozen")
        cells = np.asarray(cells)
        if not np.all(self.updatable[cells]):
            bad = cells[~self.updatable[cells]]
            raise ValueError(f"cell(s) {bad.tolist()} are linear and never hold scene state")
        self.h = put_rows(self.h, cells, h_rows)
        self.c = put_rows(self.c, cells, c_rows)

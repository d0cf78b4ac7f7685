"""Two-stage training protocol, model selection and the ablation sweeps."""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, generator_from_state, generator_state
from .data import (
    STAGE1_TRAIN,
    STAGE1_VAL,
    STAGE2_TRAIN,
    TEST,
    SceneDataset,
    Split,
    TrajectoryWindow,
    make_splits,
)
from .evaluate import MetricsReport, score
from .grid import GridArtifacts, GridSpec, build_grid_artifacts, scene_trajectories
from .model import VARIANTS, ModelParams, Optimizer, RolloutConfig, SceneContext, epoch_pass, predict
from .nn import AdamState
from .rng import substream, substream_seed

Logger = Callable[[str], None]


@dataclass
class TrainConfig:
    lr: float = 0.003
    dropout: float = 0.2
    clip: float = 10.0
    hidden: int = 128
    embed: int = 64
    stage1_epochs: int = 100
    stage2_epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    variant: str = "full"
    n: int = 8
    m: int = 8
    theta_lin: float = 0.10
    p: int = 3
    val_ratio: float = 0.2
    window_stride: int = 1

    def __post_init__(self):
        for name in ("lr", "clip", "hidden", "embed", "batch_size", "n", "m", "window_stride"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("stage1_epochs", "stage2_epochs", "seed", "p", "theta_lin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0.0 <= self.val_ratio < 1.0:
            raise ValueError("val_ratio must lie in [0, 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")

    @property
    def rollout(self) -> RolloutConfig:
        return VARIANTS[self.variant]

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.n, self.m)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    train_loss: float
    val_loss: float | None = None


@dataclass
class RunManifest:
    config: dict
    dataset_hashes: dict[str, str]
    epochs: list[EpochRecord] = field(default_factory=list)
    checkpoint: str | None = None
    wall_clock_s: float = 0.0
    fingerprint: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    def losses_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "epoch", "train_loss", "val_loss"])
        for r in self.epochs:
            w.writerow([r.stage, r.epoch, repr(r.train_loss),
                        "" if r.val_loss is None else repr(r.val_loss)])
        return buf.getvalue()


def dataset_hash(d: SceneDataset) -> str:
    h = hashlib.sha256()
    h.update(repr((d.scene_id, d.bounds, d.frame_stride, d.fps)).encode())
    for p in d.points:
        h.update(repr((p.frame, p.ped_id, p.x, p.y)).encode())
    return h.hexdigest()


def scene_grid(d: SceneDataset, cfg: TrainConfig,
               frame_range: tuple[int, int] | None = None) -> GridArtifacts:
    """Grid preprocessing over the scene's trajectories inside ``frame_range``."""
    lo, hi = frame_range if frame_range is not None else (None, None)
    return build_grid_artifacts(scene_trajectories(d, lo, hi), d.require_bounds(), cfg.grid,
                                cfg.theta_lin, cfg.p)


def stage2_grid(held_out: SceneDataset, frame_range: tuple[int, int] | None,
                cfg: TrainConfig) -> GridArtifacts:
    if frame_range is None or frame_range[1] < frame_range[0]:
        return build_grid_artifacts([], held_out.require_bounds(), cfg.grid, cfg.theta_lin, cfg.p)
    return scene_grid(held_out, cfg, frame_range)


def protocol_grids(datasets: Sequence[SceneDataset], splits: dict[str, Split], held_out: str,
                   cfg: TrainConfig) -> dict[str, GridArtifacts]:
    """Grid preprocessing for every scene over exactly its training frames."""
    out = {}
    for d in datasets:
        if d.scene_id == held_out:
            out[d.scene_id] = stage2_grid(d, splits[STAGE2_TRAIN].ranges.get(held_out), cfg)
        else:
            out[d.scene_id] = scene_grid(d, cfg)
    return out


def init_checkpoint(cfg: TrainConfig) -> Checkpoint:
    params = ModelParams.init(cfg.hidden, cfg.embed, cfg.grid.n_sub,
                              substream(cfg.seed, "init_ped"), substream(cfg.seed, "init_scene"))
    seeds = {name: substream_seed(cfg.seed, name) for name in ("init_ped", "init_scene", "dropout")}
    return Checkpoint(params, cfg.rollout, cfg.grid, seeds=seeds, adam=AdamState(),
                      rng_state=generator_state(substream(cfg.seed, "dropout")),
                      meta={"config": asdict(cfg), "fingerprint": cfg.fingerprint(), "stage": 0})


def _mean_loss(total: float, windows: Sequence[TrajectoryWindow]) -> float:
    return total / max(len(windows), 1)


def run_epochs(ckpt: Checkpoint, windows: Sequence[TrajectoryWindow], cfg: TrainConfig,
               epochs: int, contexts: dict[str, SceneContext] | None = None) -> list[float]:
    """Train ``ckpt`` in place for ``epochs`` passes; resumes optimizer and dropout state."""
    contexts = contexts if contexts is not None else ckpt.contexts()
    opt = Optimizer(cfg.lr, cfg.clip, ckpt.adam or AdamState())
    rng = generator_from_state(ckpt.rng_state) if ckpt.rng_state else substream(cfg.seed, "dropout")
    losses = []
    for _ in range(epochs):
        total = epoch_pass(ckpt.params, windows, contexts, ckpt.rollout, opt,
                           batch_size=cfg.batch_size, dropout_rate=cfg.dropout, rng=rng)
        losses.append(_mean_loss(total, windows))
    ckpt.adam = opt.state
    ckpt.rng_state = generator_state(rng)
    return losses


def validation_loss(ckpt: Checkpoint, windows: Sequence[TrajectoryWindow], cfg: TrainConfig,
                    contexts: dict[str, SceneContext]) -> float:
    total = epoch_pass(ckpt.params, windows, contexts, ckpt.rollout, None,
                       batch_size=cfg.batch_size)
    return _mean_loss(total, windows)


def train_stage1(datasets: Sequence[SceneDataset], train_windows: Sequence[TrajectoryWindow],
                 val_windows: Sequence[TrajectoryWindow], cfg: TrainConfig,
                 log: Logger | None = None, grids: dict[str, GridArtifacts] | None = None
                 ) -> tuple[Checkpoint, list[EpochRecord]]:
    """Train on the stage-1 scenes, keeping the epoch with the lowest validation NLL."""
    if not train_windows:
        raise ValueError("stage 1 needs at least one training window")
    used = {w.scene_id for w in train_windows} | {w.scene_id for w in val_windows}
    ckpt = init_checkpoint(cfg)
    grids = grids or {}
    ckpt.grids = {d.scene_id: grids.get(d.scene_id) or scene_grid(d, cfg)
                  for d in datasets if d.scene_id in used}
    contexts = ckpt.contexts()
    records: list[EpochRecord] = []
    best = None
    for epoch in range(1, cfg.stage1_epochs + 1):
        tl = run_epochs(ckpt, train_windows, cfg, 1, contexts)[0]
        vl = validation_loss(ckpt, val_windows, cfg, contexts) if val_windows else tl
        records.append(EpochRecord(1, epoch, tl, vl))
        if log:
            log(f"stage1 epoch {epoch}: train {tl:.4f} val {vl:.4f}")
        if best is None or vl < best[0]:
            best = (vl, epoch, ckpt.params.state_dict(), copy.deepcopy(ckpt.adam), ckpt.rng_state)
    if best is not None:
        _, epoch, state, adam, rng_state = best
        ckpt.params.load_state_dict(state)
        ckpt.adam, ckpt.rng_state = adam, rng_state
        ckpt.meta["best_epoch"] = epoch
    # scene states are rebuilt from zero every epoch, so none is worth keeping
    ckpt.banks = {}
    ckpt.meta["stage"] = 1
    return ckpt, records


def train_stage2(stage1: Checkpoint, held_out: SceneDataset,
                 windows: Sequence[TrajectoryWindow], frame_range: tuple[int, int] | None,
                 fraction: float, cfg: TrainConfig, log: Logger | None = None,
                 art: GridArtifacts | None = None) -> tuple[Checkpoint, list[EpochRecord]]:
    """Fine-tune on the first ``fraction`` of the held-out scene and freeze its bank.

    The held-out grid is preprocessed from the stage-2 frames before any step.
    With no stage-2 data the weights stay as in stage 1 and the bank stays zero.
    """
    if not 0.0 <= fraction <= 0.5:
        raise ValueError(f"stage-2 fraction must lie in [0, 0.5], got {fraction}")
    ckpt = Checkpoint.from_dict(copy.deepcopy(stage1.to_dict()))
    sid = held_out.scene_id
    if art is None:
        art = stage2_grid(held_out, frame_range, cfg)
    ckpt.grids = {sid: art}
    ckpt.banks = {}
    contexts = ckpt.contexts()
    records = []
    if windows:
        for epoch, tl in enumerate(run_epochs(ckpt, windows, cfg, cfg.stage2_epochs, contexts), 1):
            records.append(EpochRecord(2, epoch, tl))
            if log:
                log(f"stage2 epoch {epoch}: train {tl:.4f}")
        # one read-through with the final weights leaves the bank in a consistent state
        epoch_pass(ckpt.params, windows, contexts, ckpt.rollout, None, batch_size=cfg.batch_size)
    contexts[sid].bank.freeze()
    ckpt.meta.update(stage=2, stage2_fraction=fraction, held_out=sid)
    return ckpt, records


def evaluate_checkpoint(ckpt: Checkpoint, windows: Sequence[TrajectoryWindow],
                        theta_lin: float, label: str | None = None,
                        chunk: int = 512) -> MetricsReport:
    """Test-phase metrics of a frozen checkpoint."""
    contexts = ckpt.contexts()
    preds = np.zeros((len(windows), windows[0].t_pred if windows else 0, 2))
    by_scene: dict[str, list[int]] = {}
    for k, w in enumerate(windows):
        by_scene.setdefault(w.scene_id, []).append(k)
    for sid, idx in sorted(by_scene.items()):
        ctx = contexts.get(sid)
        if ctx is None and ckpt.rollout.use_scene:
            raise ValueError(f"checkpoint has no grid for scene {sid!r}")
        for k in range(0, len(idx), chunk):
            part = idx[k:k + chunk]
            preds[part] = predict(ckpt.params, [windows[i] for i in part], ctx, ckpt.rollout)
    return score(label or ckpt.meta.get("config", {}).get("variant", "model"), windows, preds,
                 theta_lin, ckpt.meta.get("fingerprint", ""))


@dataclass
class ProtocolResult:
    stage1: Checkpoint
    final: Checkpoint
    splits: dict[str, Split]
    manifest: RunManifest
    report: MetricsReport


def run_protocol(datasets: Sequence[SceneDataset], held_out: str, cfg: TrainConfig,
                 fraction: float = 0.5, test_from: float | None = None,
                 stage1: Checkpoint | None = None, log: Logger | None = None,
                 grids: dict[str, GridArtifacts] | None = None) -> ProtocolResult:
    """Leave-one-out: stage 1 on the other scenes, stage 2 on part of ``held_out``, test on the rest.

    A precomputed ``stage1`` checkpoint may be passed to share it across a sweep.
    """
    t0 = time.perf_counter()
    splits = make_splits(datasets, held_out, fraction, seed=substream_seed(cfg.seed, "split"),
                         stride=cfg.window_stride, val_ratio=cfg.val_ratio, test_from=test_from)
    manifest = RunManifest(asdict(cfg), {d.scene_id: dataset_hash(d) for d in datasets})
    grids = grids or protocol_grids(datasets, splits, held_out, cfg)
    if stage1 is None:
        stage1, rec = train_stage1(datasets, splits[STAGE1_TRAIN].windows,
                                   splits[STAGE1_VAL].windows, cfg, log, grids)
        manifest.epochs += rec
    s2 = splits[STAGE2_TRAIN]
    test_lo = splits[TEST].ranges[held_out][0]
    if any(w.end_frame >= test_lo for w in s2.windows):
        raise AssertionError("stage-2 windows reach into the test range")
    by_id = {d.scene_id: d for d in datasets}
    final, rec = train_stage2(stage1, by_id[held_out], s2.windows, s2.ranges.get(held_out),
                              fraction, cfg, log, grids.get(held_out))
    manifest.epochs += rec
    report = evaluate_checkpoint(final, splits[TEST].windows, cfg.theta_lin, cfg.variant)
    manifest.wall_clock_s = time.perf_counter() - t0
    return ProtocolResult(stage1, final, splits, manifest, report)


SWEEP_COLUMNS = ("sweep", "n", "m", "ade", "fde")


def sweep_grid_sizes(datasets: Sequence[SceneDataset], held_out: str, cfg: TrainConfig,
                     sizes: Sequence[int], fraction: float = 0.5,
                     log: Logger | None = None) -> list[dict]:
    """Vary m at n = 8, then vary n at the best m (by FDE)."""
    if not sizes:
        raise ValueError("sizes must be non-empty")
    rows = []

    def run(sweep: str, n: int, m: int) -> dict:
        res = run_protocol(datasets, held_out, cfg.replace(n=n, m=m), fraction, log=log)
        row = {"sweep": sweep, "n": n, "m": m, "ade": res.report.ade, "fde": res.report.fde}
        rows.append(row)
        return row

    m_rows = [run("m", 8, m) for m in sizes]
    best_m = min(m_rows, key=lambda r: (r["fde"], r["m"]))["m"]
    for n in sizes:
        run("n", n, best_m)
    return rows


def sweep_fractions(datasets: Sequence[SceneDataset], held_out: str, cfg: TrainConfig,
                    fractions: Sequence[float], log: Logger | None = None) -> list[dict]:
    """Stage-2 data sweep sharing one stage-1 model and one test set."""
    if not fractions:
        raise ValueError("fractions must be non-empty")
    test_from = max(fractions)
    stage1 = None
    rows = []
    for f in fractions:
        res = run_protocol(datasets, held_out, cfg, f, test_from=test_from, stage1=stage1, log=log)
        stage1 = res.stage1
        rows.append({"fraction": f, "ade": res.report.ade, "fde": res.report.fde,
                     "nde": res.report.nde})
    return rows


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else ("" if v is None else v)
                    for k, v in r.items()})
    return buf.getvalue()

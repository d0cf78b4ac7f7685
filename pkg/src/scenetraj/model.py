"""Coupled Pedestrian-LSTM / Scene-LSTM forward pass.

Per input step and pedestrian: embed the displacement, advance the
pedestrian LSTM, then, where the hard filter allows, fuse soft-filtered
scene memory into the hidden state.  The fused state feeds the Gaussian
head, the next recurrence step and the Scene-LSTM update of its cell.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import TrajectoryWindow, to_unit_array
from .grid import GridArtifacts, SceneStateBank, locate_array
from .nn import (
    AdamState,
    GaussianParams,
    LSTMCellParams,
    Parameter,
    Tensor,
    adam_step,
    add,
    as_tensor,
    backward,
    bvn_mean,
    bvn_nll,
    bvn_sample,
    clip_global_norm,
    concat,
    dropout,
    embed_relu,
    gaussian_head,
    linear_sigmoid,
    lstm_step,
    mul,
    no_grad,
    put_rows,
    take_rows,
    total,
)

TRAIN = "train"
TEST = "test"


@dataclass(frozen=True)
class RolloutConfig:
    use_scene: bool = True
    use_hf_grid: bool = True
    use_hf_subgrid: bool = True
    use_sf: bool = True
    location: str = "relative"  # or "absolute"
    decode: str = "mean"  # or "sample"
    sample_seed: int = 0

    def __post_init__(self):
        if self.use_hf_subgrid and not self.use_hf_grid:
            raise ValueError("the subgrid hard filter requires the grid hard filter")
        if (self.use_sf or self.use_hf_grid) and not self.use_scene:
            raise ValueError("filters require the scene module")
        if self.location not in ("relative", "absolute"):
            raise ValueError(f"unknown location mode {self.location!r}")
        if self.decode not in ("mean", "sample"):
            raise ValueError(f"unknown decode mode {self.decode!r}")

    def with_(self, **kw) -> "RolloutConfig":
        return RolloutConfig(**{**asdict(self), **kw})


# Ablation rows, in the order of the comparison table.
VARIANTS: dict[str, RolloutConfig] = {
    "pm_abs": RolloutConfig(False, False, False, False, location="absolute"),
    "pm_rel": RolloutConfig(False, False, False, False),
    "pm_rel_sd": RolloutConfig(True, False, False, False),
    "pm_rel_sd_hfgrid": RolloutConfig(True, True, False, False),
    "pm_rel_sd_hfgrid_hfsub": RolloutConfig(True, True, True, False),
    "pm_rel_sd_hfgrid_sf": RolloutConfig(True, True, False, True),
    "full": RolloutConfig(True, True, True, True),
}


@dataclass
class ModelParams:
    W_ie: Parameter
    ped: LSTMCellParams
    scene: LSTMCellParams
    W_sf: Parameter
    b_sf: Parameter
    W_of: Parameter

    @classmethod
    def init(cls, hidden: int = 128, embed: int = 64, n_sub: int = 64,
             ped_rng: np.random.Generator | None = None,
             scene_rng: np.random.Generator | None = None) -> "ModelParams":
        """Pedestrian-side and scene-side weights draw from separate streams,
        so a scene-free model shares its initial weights with the full one."""
        ped_rng = ped_rng or np.random.default_rng(0)
        scene_rng = scene_rng or np.random.default_rng(1)
        W_ie = Parameter(ped_rng.uniform(-1 / np.sqrt(2), 1 / np.sqrt(2), (embed, 2)), "embed.W")
        ped = LSTMCellParams.init("ped_lstm", embed, hidden, ped_rng)
        W_of = Parameter(ped_rng.uniform(-1 / np.sqrt(hidden), 1 / np.sqrt(hidden), (5, hidden)),
                         "head.W")
        d_in = n_sub + hidden
        scene = LSTMCellParams.init("scene_lstm", d_in, hidden, scene_rng)
        k = 1 / np.sqrt(d_in)
        W_sf = Parameter(scene_rng.uniform(-k, k, (hidden, d_in)), "soft_filter.W")
        b_sf = Parameter(scene_rng.uniform(-k, k, hidden), "soft_filter.b")
        return cls(W_ie, ped, scene, W_sf, b_sf, W_of)

    @property
    def hidden(self) -> int:
        return self.ped.hidden

    @property
    def n_sub(self) -> int:
        return self.scene.input_dim - self.hidden

    def parameters(self) -> list[Parameter]:
        return [self.W_ie, *self.ped.parameters(), *self.scene.parameters(),
                self.W_sf, self.b_sf, self.W_of]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if state[p.name].shape != p.shape:
                raise ValueError(f"shape mismatch for {p.name}")
            p.value[...] = state[p.name]

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray]) -> "ModelParams":
        embed = state["embed.W"].shape[0]
        hidden = state["ped_lstm.W_hh"].shape[1]
        n_sub = state["scene_lstm.W_ih"].shape[1] - hidden
        params = cls.init(hidden, embed, n_sub)
        params.load_state_dict(state)
        return params


class SceneContext:
    """Grid artifacts of one scene plus its Scene-LSTM state bank."""

    def __init__(self, art: GridArtifacts, hidden: int, cfg: RolloutConfig,
                 bank: SceneStateBank | None = None):
        self.art = art
        updatable = art.nonlinear if cfg.use_hf_grid else np.ones(art.spec.n_cells, dtype=bool)
        self.bank = bank or SceneStateBank(art.spec.n_cells, hidden, updatable)
        self.eye = np.eye(art.spec.n_sub)

    def lookup(self, pos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # positions that leave the scene are clamped onto its border
        return locate_array(to_unit_array(pos, self.art.bounds, clamp=True), self.art.spec)


@dataclass
class StepTrace:
    """Per-step record used by tests: which rows fused scene memory."""

    used_scene: list[np.ndarray] = field(default_factory=list)


def _fuse(params: ModelParams, cfg: RolloutConfig, ctx: SceneContext, h: Tensor,
          rows: np.ndarray, cells: np.ndarray, subs: np.ndarray) -> Tensor:
    """Soft filter plus additive fusion for ``rows``; other rows pass through unchanged."""
    h_i = take_rows(h, rows)
    h_g = take_rows(ctx.bank.h, cells)
    if cfg.use_sf:
        S = soft_filter_gate(params, Tensor(ctx.eye[subs]), h_i)
        F = mul(S, h_g)
    else:
        F = h_g
    return put_rows(h, rows, add(h_i, F))


def soft_filter_gate(params: ModelParams, V: Tensor, h_i: Tensor) -> Tensor:
    return linear_sigmoid(params.W_sf, params.b_sf, concat([V, h_i]))


def soft_filter(params: ModelParams, V, h_i, h_g) -> Tensor:
    """F = sigmoid(W_sf [V, h_i] + b_sf) * h_g."""
    return mul(soft_filter_gate(params, as_tensor(V), as_tensor(h_i)), as_tensor(h_g))


def fuse(h_i, F) -> Tensor:
    return add(as_tensor(h_i), as_tensor(F))


def scene_update(params: ModelParams, ctx: SceneContext, cells: np.ndarray, V: Tensor,
                 h_i: Tensor) -> None:
    """Advance the Scene-LSTM of each (distinct) cell with input [V, h_i]."""
    h_g, c_g = ctx.bank.read_rows(cells)
    h_new, c_new = lstm_step(params.scene, concat([V, h_i]), h_g, c_g)
    ctx.bank.write_rows(cells, h_new, c_new)


def scene_block(params: ModelParams, cfg: RolloutConfig, ctx: SceneContext | None,
                h: Tensor, pos: np.ndarray, trace: StepTrace | None = None) -> Tensor:
    """Hard filter, soft filter, fusion and Scene-LSTM updates for one step.

    Rows are processed in their given order; several rows in one cell are
    handled in rounds so each reads the state left by the rows before it.
    """
    if not cfg.use_scene or ctx is None:
        if trace is not None:
            trace.used_scene.append(np.zeros(len(pos), dtype=bool))
        return h
    cells, subs = ctx.lookup(pos)
    bank = ctx.bank
    in_cell = bank.updatable[cells]
    use = in_cell & ctx.art.common_mask[cells, subs] if cfg.use_hf_subgrid else in_cell.copy()
    if trace is not None:
        trace.used_scene.append(use.copy())
    if bank.frozen:
        r = np.flatnonzero(use)
        if r.size:
            h = _fuse(params, cfg, ctx, h, r, cells[r], subs[r])
        return h

    rows = np.flatnonzero(in_cell)
    if rows.size == 0:
        return h
    seen: dict[int, int] = {}
    rank = np.empty(rows.size, dtype=np.int64)
    for k, r in enumerate(rows):
        c = int(cells[r])
        rank[k] = seen.get(c, 0)
        seen[c] = rank[k] + 1
    for rnd in range(int(rank.max()) + 1):
        R = rows[rank == rnd]
        readers = R[use[R]]
        if readers.size:
            h = _fuse(params, cfg, ctx, h, readers, cells[readers], subs[readers])
        scene_update(params, ctx, cells[R], Tensor(ctx.eye[subs[R]]), take_rows(h, R))
    return h


def ped_step(params: ModelParams, x_in: np.ndarray, h, c) -> tuple[Tensor, Tensor]:
    e = embed_relu(params.W_ie, Tensor(x_in))
    return lstm_step(params.ped, e, h, c)


def model_step(params: ModelParams, cfg: RolloutConfig, ctx: SceneContext | None,
               x_in: np.ndarray, pos: np.ndarray, h, c, *, train: bool, dropout_rate: float,
               rng: np.random.Generator | None, trace: StepTrace | None = None):
    """One recurrence step for a batch of rows; returns (h_fused, c, GaussianParams)."""
    h, c = ped_step(params, x_in, h, c)
    h = scene_block(params, cfg, ctx, h, pos, trace)
    g = gaussian_head(params.W_of, dropout(h, dropout_rate, train, rng))
    return h, c, g


def _inputs(cfg: RolloutConfig, pos: np.ndarray, prev: np.ndarray, first: bool) -> np.ndarray:
    if cfg.location == "absolute":
        return pos
    return np.zeros_like(pos) if first else pos - prev


@dataclass
class RolloutResult:
    predictions: np.ndarray  # (B, T_pred, 2)
    gaussians: list[GaussianParams]  # one (B, 5) entry per input step
    step_nll: list[Tensor]  # per step, (B,) nll against the true next displacement
    loss: Tensor
    trace: StepTrace


def rollout_batch(params: ModelParams, windows: Sequence[TrajectoryWindow],
                  ctx: SceneContext | None, cfg: RolloutConfig, phase: str = TEST, *,
                  dropout_rate: float = 0.0, rng: np.random.Generator | None = None
                  ) -> RolloutResult:
    """Roll windows out in lock-step.

    TRAIN teacher-forces all input steps, so its predictions are one-step
    ahead from the true previous position.  TEST observes ``t_obs`` positions
    and feeds back decoded positions afterwards; it needs a frozen bank, as
    windows are then independent of each other.
    """
    if not windows:
        raise ValueError("no windows to roll out")
    if phase == TEST and ctx is not None and cfg.use_scene and not ctx.bank.frozen:
        raise RuntimeError("test rollout requires a frozen scene bank")
    if phase == TRAIN and ctx is not None and cfg.use_scene and len(windows) > 1:
        raise ValueError("lock-step training of several windows would bypass frame ordering; "
                         "use epoch_pass")
    truth = np.stack([w.positions for w in windows])
    B, T, _ = truth.shape
    t_obs = windows[0].t_obs
    H = params.hidden
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    sample_rng = np.random.default_rng(cfg.sample_seed) if cfg.decode == "sample" else None
    pos = truth[:, 0].copy()
    prev = pos
    preds = []
    gaussians, nlls = [], []
    trace = StepTrace()
    loss = None
    for s in range(T - 1):
        x_in = _inputs(cfg, pos, prev, s == 0)
        h, c, g = model_step(params, cfg, ctx, x_in, pos, h, c, train=phase == TRAIN,
                             dropout_rate=dropout_rate, rng=rng, trace=trace)
        gaussians.append(g)
        nll = bvn_nll(g, truth[:, s + 1] - truth[:, s])
        nlls.append(nll)
        step_total = total(nll)
        loss = step_total if loss is None else add(loss, step_total)
        prev = pos
        if s + 1 >= t_obs:
            disp = bvn_mean(g) if sample_rng is None else bvn_sample(g, sample_rng)
            preds.append(pos + disp)
        pos = preds[-1] if phase == TEST and s + 1 >= t_obs else truth[:, s + 1]
    predictions = np.stack(preds, axis=1) if preds else np.zeros((B, 0, 2))
    return RolloutResult(predictions, gaussians, nlls, loss, trace)


def rollout(params: ModelParams, window: TrajectoryWindow, ctx: SceneContext | None,
            cfg: RolloutConfig, phase: str = TEST, **kw) -> RolloutResult:
    return rollout_batch(params, [window], ctx, cfg, phase, **kw)


def predict(params: ModelParams, windows: Sequence[TrajectoryWindow], ctx: SceneContext | None,
            cfg: RolloutConfig) -> np.ndarray:
    """Test-phase predictions (N, T_pred, 2); the network is not recorded."""
    with no_grad():
        return rollout_batch(params, windows, ctx, cfg, TEST).predictions


# ---------------------------------------------------------------- frame-synchronous training

@dataclass
class Optimizer:
    lr: float = 0.003
    clip: float = 10.0
    state: AdamState = field(default_factory=AdamState)


def _frame_batches(windows: Sequence[TrajectoryWindow], batch_size: int):
    order = sorted(windows, key=lambda w: (w.start_frame, w.ped_id))
    for k in range(0, len(order), batch_size):
        yield order[k:k + batch_size]


def batch_forward(params: ModelParams, windows: Sequence[TrajectoryWindow],
                  ctx: SceneContext | None, cfg: RolloutConfig, *, train: bool,
                  dropout_rate: float, rng: np.random.Generator | None) -> Tensor:
    """Teacher-forced NLL of a mini-batch, processed frame by frame.

    At each frame the active windows advance in ascending (ped_id, start_frame)
    order, so pedestrians sharing a cell interleave their Scene-LSTM updates.
    """
    wins = sorted(windows, key=lambda w: (w.ped_id, w.start_frame))
    stride = wins[0].frame_stride
    steps = len(wins[0].positions) - 1
    starts = np.array([w.start_frame for w in wins])
    truth = np.stack([w.positions for w in wins])
    B, H = len(wins), params.hidden
    h_all = Tensor(np.zeros((B, H)))
    c_all = Tensor(np.zeros((B, H)))
    loss = None
    f_lo, f_hi = int(starts.min()), int(starts.max()) + (steps - 1) * stride
    for f in range(f_lo, f_hi + 1, stride):
        s_idx = (f - starts) // stride
        active = np.flatnonzero(((f - starts) % stride == 0) & (s_idx >= 0) & (s_idx < steps))
        if active.size == 0:
            continue
        s = s_idx[active]
        pos = truth[active, s]
        if cfg.location == "absolute":
            x_in = pos
        else:
            prev = truth[active, np.maximum(s - 1, 0)]
            x_in = pos - prev
        full = active.size == B
        h = h_all if full else take_rows(h_all, active)
        c = c_all if full else take_rows(c_all, active)
        h, c, g = model_step(params, cfg, ctx, x_in, pos, h, c, train=train,
                             dropout_rate=dropout_rate, rng=rng)
        step_total = total(bvn_nll(g, truth[active, s + 1] - pos))
        loss = step_total if loss is None else add(loss, step_total)
        if full:
            h_all, c_all = h, c
        else:
            h_all = put_rows(h_all, active, h)
            c_all = put_rows(c_all, active, c)
    return loss


def epoch_pass(params: ModelParams, windows: Sequence[TrajectoryWindow],
               contexts: dict[str, SceneContext], cfg: RolloutConfig,
               opt: Optimizer | None, *, batch_size: int = 8, dropout_rate: float = 0.2,
               rng: np.random.Generator | None = None) -> float:
    """One pass over ``windows``; updates weights when ``opt`` is given.

    Scenes are visited in sorted id order and each scene bank starts from
    zero.  Returns the summed NLL.
    """
    by_scene: dict[str, list[TrajectoryWindow]] = {}
    for w in windows:
        by_scene.setdefault(w.scene_id, []).append(w)
    train = opt is not None
    total_loss = 0.0
    for sid in sorted(by_scene):
        ctx = contexts.get(sid)
        if ctx is not None:
            ctx.bank.reset()
        for batch in _frame_batches(by_scene[sid], batch_size):
            if train:
                loss = batch_forward(params, batch, ctx, cfg, train=True,
                                     dropout_rate=dropout_rate, rng=rng)
                params.zero_grad()
                backward(loss)
                clip_global_norm(params.parameters(), opt.clip)
                adam_step(params.parameters(), opt.state, opt.lr)
            else:
                with no_grad():
                    loss = batch_forward(params, batch, ctx, cfg, train=False,
                                         dropout_rate=0.0, rng=None)
            total_loss += float(loss.value)
            if ctx is not None:
                ctx.bank.detach()
    return total_loss

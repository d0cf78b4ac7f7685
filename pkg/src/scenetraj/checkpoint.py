"""Versioned JSON checkpoint: weights, grids, frozen banks, optimizer and RNG state."""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridArtifacts, GridSpec, SceneStateBank
from .model import ModelParams, RolloutConfig, SceneContext
from .nn import AdamState, Tensor

CHECKPOINT_FORMAT = "scenetraj-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    dtype = "<f8" if a.dtype.kind == "f" else "|b1" if a.dtype.kind == "b" else "<i8"
    return {"dtype": dtype, "shape": list(a.shape),
            "data": base64.b64encode(a.astype(dtype).tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def _encode_adam(st: AdamState) -> dict:
    return {"beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "t": st.t,
            "m": {k: encode_array(v) for k, v in sorted(st.m.items())},
            "v": {k: encode_array(v) for k, v in sorted(st.v.items())}}


def _decode_adam(d: dict) -> AdamState:
    return AdamState(d["beta1"], d["beta2"], d["eps"], d["t"],
                     {k: decode_array(v) for k, v in d["m"].items()},
                     {k: decode_array(v) for k, v in d["v"].items()})


def _encode_bank(b: SceneStateBank) -> dict:
    return {"frozen": b.frozen, "updatable": encode_array(b.updatable),
            "h": encode_array(b.h.value), "c": encode_array(b.c.value)}


def _decode_bank(d: dict) -> SceneStateBank:
    h = decode_array(d["h"])
    bank = SceneStateBank(h.shape[0], h.shape[1], decode_array(d["updatable"]))
    bank.h = Tensor(h)
    bank.c = Tensor(decode_array(d["c"]))
    if d["frozen"]:
        bank.freeze()
    return bank


@dataclass
class Checkpoint:
    params: ModelParams
    rollout: RolloutConfig
    grid: GridSpec
    grids: dict[str, GridArtifacts] = field(default_factory=dict)
    banks: dict[str, SceneStateBank] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    adam: AdamState | None = None
    rng_state: dict | None = None  # dropout generator state
    meta: dict = field(default_factory=dict)

    def contexts(self) -> dict[str, SceneContext]:
        """Scene contexts sharing this checkpoint's banks (creating any missing one)."""
        out = {}
        for sid, art in sorted(self.grids.items()):
            bank = self.banks.get(sid)
            out[sid] = SceneContext(art, self.params.hidden, self.rollout, bank)
            self.banks[sid] = out[sid].bank
        return out

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "params": {k: encode_array(v) for k, v in sorted(self.params.state_dict().items())},
            "rollout": asdict(self.rollout),
            "grid": {"n": self.grid.n, "m": self.grid.m},
            "grids": {k: v.to_dict() for k, v in sorted(self.grids.items())},
            "banks": {k: _encode_bank(v) for k, v in sorted(self.banks.items())},
            "seeds": dict(sorted(self.seeds.items())),
            "adam": None if self.adam is None else _encode_adam(self.adam),
            "rng_state": self.rng_state,
            "meta": self.meta,
        }

    def to_bytes(self) -> bytes:
        return (json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n").encode()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError("not a scenetraj checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {d.get('version')} is not supported "
                                  f"(expected {CHECKPOINT_VERSION})")
        params = ModelParams.from_state_dict({k: decode_array(v) for k, v in d["params"].items()})
        return cls(
            params,
            RolloutConfig(**d["rollout"]),
            GridSpec(d["grid"]["n"], d["grid"]["m"]),
            {k: GridArtifacts.from_dict(v) for k, v in d["grids"].items()},
            {k: _decode_bank(v) for k, v in d["banks"].items()},
            dict(d["seeds"]),
            None if d["adam"] is None else _decode_adam(d["adam"]),
            d["rng_state"],
            d["meta"],
        )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(doc)


def generator_state(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state))


def generator_from_state(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng

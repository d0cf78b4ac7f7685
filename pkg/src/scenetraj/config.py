"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # training
    lr: float = 0.003
    dropout: float = 0.2
    clip: float = 10.0
    hidden: int = 128
    embed: int = 64
    stage1_epochs: int = 100
    stage2_epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    n: int = 8
    m: int = 8
    theta_lin: float = 0.10
    p: int = 3
    val_ratio: float = 0.2
    window_stride: int = 1
    variants: str = "full,pm_rel"
    # data and splits
    data_dir: str = "data"  # relative paths resolve against out_dir
    scenes: str = ""  # comma-separated scene ids; empty means every scene in data_dir
    held_out: str = ""
    stage2_fraction: float = 0.5
    test_from: float | None = None
    # ingest
    input: str = ""
    schema: str = "frame,ped_id,x,y"
    delimiter: str = "whitespace"
    scene_id: str = ""
    bounds: str = ""  # x0,y0,x1,y1; empty pads the data extent
    fps: float = 25.0
    frame_stride: int = 0  # 0 infers the stride
    # synthetic scenes
    synth_layouts: str = "tjunction,straight,door"
    synth_peds: int = 300
    synth_noise: float = 0.05
    synth_left: float = 0.85
    # decoding, plots, sweeps
    decode: str = "mean"
    plot_limit: int = 6
    sweep: str = "fraction"
    sweep_sizes: str = "1,2,4,8"
    sweep_fractions: str = "0,0.1,0.2,0.3,0.4,0.5"
    out_dir: str = "runs"

    def __post_init__(self):
        if self.decode not in ("mean", "sample"):
            raise ConfigError("decode must be mean or sample")
        if self.sweep not in ("fraction", "grid"):
            raise ConfigError("sweep must be fraction or grid")
        self.train_config(self.variant_list()[0])  # validates training keys

    def variant_list(self) -> list[str]:
        out = _split(self.variants)
        if not out:
            raise ConfigError("variants must name at least one model variant")
        return out

    def scene_list(self) -> list[str]:
        return _split(self.scenes)

    def train_config(self, variant: str) -> TrainConfig:
        keys = {f.name for f in fields(TrainConfig)} - {"variant"}
        try:
            return TrainConfig(variant=variant, **{k: getattr(self, k) for k in keys})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def out_path(self) -> Path:
        return Path(self.out_dir)

    def data_path(self) -> Path:
        p = Path(self.data_dir)
        return p if p.is_absolute() else self.out_path() / p

    def fingerprint(self) -> str:
        """Hash of every key except the output directory."""
        d = asdict(self)
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _coerce(name: str, annotation, raw: str):
    hint = typing.get_type_hints(RunConfig)[name]
    optional = isinstance(hint, types.UnionType) and type(None) in hint.__args__
    if optional:
        if raw.strip().lower() in ("", "none"):
            return None
        hint = next(a for a in hint.__args__ if a is not type(None))
    raw = raw.strip()
    try:
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: expected {hint.__name__}, got {raw!r}") from None
    return raw


def parse_assignments(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    known = {f.name: f for f in fields(RunConfig)}
    values = asdict(base)
    for k, v in pairs.items():
        if k not in known:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = _coerce(k, known[k].type, v)
    return RunConfig(**values)


def read_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        k, v = (t.strip() for t in s.split("=", 1))
        if k in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {k!r}")
        pairs[k] = v
    return pairs


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None
                ) -> RunConfig:
    pairs = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        pairs = read_pairs(path.read_text(), str(path))
    pairs.update(overrides or {})
    return parse_assignments(pairs)

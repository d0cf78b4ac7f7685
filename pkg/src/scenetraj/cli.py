"""Command-line pipeline: synth, ingest, preprocess, train, predict, eval, sweep, plot."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig, load_config
from .data import (
    STAGE1_TRAIN,
    STAGE1_VAL,
    STAGE2_TRAIN,
    TEST,
    DataError,
    Schema,
    SceneDataset,
    SynthSceneSpec,
    load_annotations,
    load_canonical,
    make_splits,
    synth_generate,
    write_canonical_csv,
    write_scene_meta,
)
from .evaluate import linear_predictions, nonlinear_mask, reports_to_csv, score
from .grid import GridArtifacts
from .model import predict
from .plot import render_svg, write_svgs
from .rng import substream_seed
from .train import (
    SWEEP_COLUMNS,
    RunManifest,
    dataset_hash,
    evaluate_checkpoint,
    protocol_grids,
    rows_to_csv,
    sweep_fractions,
    sweep_grid_sizes,
    train_stage1,
    train_stage2,
)

OUT_ENV = "SCENETRAJ_OUT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("scenetraj")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing artifact: {path}")
    return path


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _stamped(rc: RunConfig, table: str) -> str:
    """CSV artifacts carry the config fingerprint as a leading comment line."""
    return f"# fingerprint {rc.fingerprint()}\n{table}"


def _write_meta(rc: RunConfig, d: SceneDataset, path: Path) -> None:
    write_scene_meta(d, path)
    with open(path, "a") as fh:
        fh.write(f"fingerprint = {rc.fingerprint()}\n")


# ---------------------------------------------------------------- shared plumbing

def load_scenes(rc: RunConfig) -> list[SceneDataset]:
    data = rc.data_path()
    ids = rc.scene_list() or sorted(p.stem for p in data.glob("*.csv"))
    if not ids:
        raise FileNotFoundError(f"missing artifact: no scene CSV files in {data}")
    return [load_canonical(_require(data / f"{sid}.csv")) for sid in ids]


def held_out_id(rc: RunConfig, scenes: list[SceneDataset]) -> str:
    ids = [d.scene_id for d in scenes]
    if rc.held_out:
        if rc.held_out not in ids:
            raise DataError(f"held_out scene {rc.held_out!r} not among {ids}")
        return rc.held_out
    return ids[0]


def splits_for(rc: RunConfig, scenes: list[SceneDataset], held_out: str):
    cfg = rc.train_config(rc.variant_list()[0])
    return make_splits(scenes, held_out, rc.stage2_fraction, seed=substream_seed(rc.seed, "split"),
                       stride=cfg.window_stride, val_ratio=cfg.val_ratio, test_from=rc.test_from)


def grid_path(rc: RunConfig, sid: str) -> Path:
    return rc.out_path() / "grid" / f"{sid}.json"


def checkpoint_path(rc: RunConfig, variant: str, stage: int = 2) -> Path:
    suffix = "_stage1" if stage == 1 else ""
    return rc.out_path() / "checkpoints" / f"{variant}{suffix}.json"


def load_grids(rc: RunConfig, scenes: list[SceneDataset]) -> dict[str, GridArtifacts]:
    cfg = rc.train_config(rc.variant_list()[0])
    grids = {}
    for d in scenes:
        art = GridArtifacts.from_json(_require(grid_path(rc, d.scene_id)).read_text())
        if (art.spec != cfg.grid or art.theta_lin != cfg.theta_lin or art.table.p != cfg.p):
            raise DataError(f"{grid_path(rc, d.scene_id)} was built with other grid settings; "
                            "rerun preprocess")
        grids[d.scene_id] = art
    return grids


def _decode_rollout(rc: RunConfig, ckpt: Checkpoint) -> Checkpoint:
    if rc.decode == "sample":
        ckpt.rollout = ckpt.rollout.with_(decode="sample",
                                          sample_seed=substream_seed(rc.seed, "sample"))
    return ckpt


# ---------------------------------------------------------------- commands

def cmd_synth(rc: RunConfig) -> int:
    data = rc.data_path()
    data.mkdir(parents=True, exist_ok=True)
    for k, layout in enumerate(s.strip() for s in rc.synth_layouts.split(",") if s.strip()):
        spec = SynthSceneSpec(layout=layout, n_peds=rc.synth_peds, noise=rc.synth_noise,
                              branch_probs=(rc.synth_left, 1.0 - rc.synth_left),
                              seed=substream_seed(rc.seed, f"synth/{layout}"), scene_id=layout)
        try:
            d = synth_generate(spec)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        write_canonical_csv(d, data / f"{d.scene_id}.csv")
        _write_meta(rc, d, data / f"{d.scene_id}.meta")
        log.info("synth %s: %d points", d.scene_id, len(d.points))
    return EXIT_OK


def cmd_ingest(rc: RunConfig) -> int:
    if not rc.input:
        raise UsageError("ingest needs input = <annotation file>")
    src = _require(Path(rc.input))
    bounds = tuple(float(t) for t in rc.bounds.split(",")) if rc.bounds else None
    if bounds is not None and len(bounds) != 4:
        raise UsageError("bounds must be x0,y0,x1,y1")
    d = load_annotations(src, Schema.parse(rc.schema, rc.delimiter), rc.scene_id or None,
                         bounds, rc.fps, rc.frame_stride or None)
    if not d.points:
        raise DataError(f"{src}: no annotations")
    data = rc.data_path()
    data.mkdir(parents=True, exist_ok=True)
    write_canonical_csv(d, data / f"{d.scene_id}.csv")
    _write_meta(rc, d, data / f"{d.scene_id}.meta")
    log.info("ingest %s: %d points -> %s", d.scene_id, len(d.points), data)
    return EXIT_OK


def cmd_preprocess(rc: RunConfig) -> int:
    scenes = load_scenes(rc)
    held = held_out_id(rc, scenes)
    splits = splits_for(rc, scenes, held)
    grids = protocol_grids(scenes, splits, held, rc.train_config(rc.variant_list()[0]))
    for sid, art in sorted(grids.items()):
        doc = {**art.to_dict(), "fingerprint": rc.fingerprint()}
        _write(grid_path(rc, sid), json.dumps(doc, indent=1, sort_keys=True) + "\n")
        log.info("preprocess %s: %d NonLinear cells", sid, art.n_nonlinear)
    return EXIT_OK


def cmd_train(rc: RunConfig) -> int:
    if not 0.0 <= rc.stage2_fraction <= 0.5:
        raise UsageError("stage2_fraction must lie in [0, 0.5]")
    scenes = load_scenes(rc)
    held = held_out_id(rc, scenes)
    splits = splits_for(rc, scenes, held)
    grids = load_grids(rc, scenes)
    by_id = {d.scene_id: d for d in scenes}
    for variant in rc.variant_list():
        t0 = time.perf_counter()
        cfg = rc.train_config(variant)
        s1, rec1 = train_stage1(scenes, splits[STAGE1_TRAIN].windows, splits[STAGE1_VAL].windows,
                                cfg, log.info, grids)
        s1.meta["run_fingerprint"] = rc.fingerprint()
        s1.save(checkpoint_path(rc, variant, 1))
        s2 = splits[STAGE2_TRAIN]
        final, rec2 = train_stage2(s1, by_id[held], s2.windows, s2.ranges.get(held),
                                   rc.stage2_fraction, cfg, log.info, grids[held])
        final.meta["run_fingerprint"] = rc.fingerprint()
        path = final.save(checkpoint_path(rc, variant))
        manifest = RunManifest(asdict(rc), {d.scene_id: dataset_hash(d) for d in scenes},
                               rec1 + rec2, str(path), time.perf_counter() - t0, rc.fingerprint())
        runs = rc.out_path() / "runs"
        _write(runs / f"{variant}_manifest.json", manifest.to_json())
        _write(runs / f"{variant}_losses.csv", _stamped(rc, manifest.losses_csv()))
        log.info("train %s -> %s", variant, path)
    return EXIT_OK


def _test_windows(rc: RunConfig):
    scenes = load_scenes(rc)
    held = held_out_id(rc, scenes)
    return scenes, held, splits_for(rc, scenes, held)[TEST].windows


def cmd_predict(rc: RunConfig, checkpoint: str | None = None) -> int:
    _, _, windows = _test_windows(rc)
    variant = rc.variant_list()[0]
    path = Path(checkpoint) if checkpoint else checkpoint_path(rc, variant)
    ckpt = _decode_rollout(rc, Checkpoint.load(_require(path)))
    contexts = ckpt.contexts()
    buf = io.StringIO()
    buf.write("scene_id,ped_id,start_frame,step,frame,x_m,y_m\n")
    n_rows = 0
    for sid in sorted({w.scene_id for w in windows}):
        wins = [w for w in windows if w.scene_id == sid]
        preds = predict(ckpt.params, wins, contexts.get(sid), ckpt.rollout)
        for w, pr in zip(wins, preds):
            for k, (x, y) in enumerate(pr):
                frame = w.start_frame + (w.t_obs + k) * w.frame_stride
                buf.write(f"{sid},{w.ped_id},{w.start_frame},{k + 1},{frame},{float(x)!r},{float(y)!r}\n")
                n_rows += 1
    out = _write(rc.out_path() / "predictions" / f"{path.stem}.csv", _stamped(rc, buf.getvalue()))
    log.info("predict: %d rows -> %s", n_rows, out)
    return EXIT_OK


def cmd_eval(rc: RunConfig) -> int:
    _, _, windows = _test_windows(rc)
    if not windows:
        raise DataError("no test windows in the held-out range")
    cfg = rc.train_config(rc.variant_list()[0])
    reports = []
    for variant in rc.variant_list():
        ckpt = _decode_rollout(rc, Checkpoint.load(_require(checkpoint_path(rc, variant))))
        reports.append(evaluate_checkpoint(ckpt, windows, cfg.theta_lin, variant))
    reports.append(score("linear", windows, linear_predictions(windows), cfg.theta_lin))
    for r in reports:
        r.fingerprint = rc.fingerprint()
    out = rc.out_path() / "reports"
    _write(out / "metrics.json",
           json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=1) + "\n")
    table = reports_to_csv(reports)
    _write(out / "metrics.csv", _stamped(rc, table))
    sys.stdout.write(table)
    return EXIT_OK


def cmd_sweep(rc: RunConfig) -> int:
    scenes = load_scenes(rc)
    held = held_out_id(rc, scenes)
    cfg = rc.train_config(rc.variant_list()[0])
    out = rc.out_path() / "sweeps"
    try:
        if rc.sweep == "grid":
            sizes = [int(t) for t in rc.sweep_sizes.split(",") if t.strip()]
            rows = sweep_grid_sizes(scenes, held, cfg, sizes, rc.stage2_fraction, log.info)
            text = rows_to_csv(rows, SWEEP_COLUMNS)
            path = _write(out / "grid_sizes.csv", _stamped(rc, text))
        else:
            fracs = [float(t) for t in rc.sweep_fractions.split(",") if t.strip()]
            rows = sweep_fractions(scenes, held, cfg, fracs, log.info)
            text = rows_to_csv(rows, ("fraction", "ade", "fde", "nde"))
            path = _write(out / "fractions.csv", _stamped(rc, text))
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise UsageError(str(exc)) from None
    sys.stdout.write(text)
    log.info("sweep -> %s", path)
    return EXIT_OK


def cmd_plot(rc: RunConfig) -> int:
    scenes, held, windows = _test_windows(rc)
    variant = rc.variant_list()[0]
    art = GridArtifacts.from_json(_require(grid_path(rc, held)).read_text())
    pred_path = _require(rc.out_path() / "predictions" / f"{variant}.csv")
    preds: dict[tuple, list[tuple[float, float]]] = {}
    with open(pred_path, newline="") as fh:
        for row in csv.DictReader(line for line in fh if not line.startswith("#")):
            key = (row["scene_id"], int(row["ped_id"]), int(row["start_frame"]))
            preds.setdefault(key, []).append((float(row["x_m"]), float(row["y_m"])))
    wins = [w for w in windows if (w.scene_id, w.ped_id, w.start_frame) in preds]
    if wins:
        # turning windows first, then in canonical order
        turning = nonlinear_mask(np.stack([w.future for w in wins]), art.theta_lin)
        wins = [w for _, w in sorted(zip(~turning, wins), key=lambda t: (t[0], t[1].key()))]
    wins = wins[:rc.plot_limit]
    if not wins:
        log.warning("plot: no windows selected, nothing written")
        return EXIT_OK
    items = []
    for w in wins:
        stem = f"{w.scene_id}_{w.ped_id}_{w.start_frame}"
        items.append((stem, render_svg(art, w.observed, w.future,
                                       np.array(preds[(w.scene_id, w.ped_id, w.start_frame)]),
                                       title=f"{variant} {stem}",
                                       note=f"fingerprint {rc.fingerprint()}")))
    paths = write_svgs(items, rc.out_path() / "plots")
    log.info("plot: %d SVG files", len(paths))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scenetraj", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--out", help="output directory (overrides config and $" + OUT_ENV + ")")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable")
        p.add_argument("-q", "--quiet", action="store_true")
        if name == "predict":
            p.add_argument("--checkpoint", help="checkpoint file (default: first variant's)")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {}
    if os.environ.get(OUT_ENV):
        overrides["out_dir"] = os.environ[OUT_ENV]
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out:
        overrides["out_dir"] = args.out
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        rc = resolve_config(args)
        if args.command == "predict":
            return cmd_predict(rc, args.checkpoint)
        return COMMANDS[args.command](rc)
    except (UsageError, ConfigError) as exc:
        print(f"scenetraj {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"scenetraj {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # invariant violations and bugs
        print(f"scenetraj {args.command}: internal error: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

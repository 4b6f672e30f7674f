"""Command line entry point: ``oscar <subcommand> ...``.

Every stage reads and writes plain files so stages can be rerun in isolation.
Failures print one line ``oscar: error[<category>]: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .geometry import (marching_cubes, mesh_metrics, query_occupancy_grid, read_ply, write_obj,
                       write_ply)
from .losses import LossLog, LossWeights
from .render import DIRECT, TRANSMISSION, ProbeSpec, render_frame_numpy
from .simdata.dataset import (DatasetError, SimConfig, read_dataset, read_grid, read_pose, simulate_dataset,
                              write_dataset, write_pgm, write_pose)
from .simdata.simulate import LOOK_DOWN, make_pose
from .training import CheckpointError, ModelCheckpoint, NonFiniteError, TrainConfig, load_checkpoint, \
    save_checkpoint, train
from .tto import TTOConfig, interpolate_latents, invert_from_shape, optimize_latent, read_latent, write_latent

log = logging.getLogger("oscar")

METRIC_COLUMNS = ["subject_id", "method", "hd95_mm", "chamfer", "f1"]


class ConfigError(ValueError):
    pass


# -- run configuration -------------------------------------------------------------------
@dataclasses.dataclass
class EvalConfig:
    resolution: int = 64
    samples: int = 10_000
    tau: float = 0.01
    seed: int = 0


@dataclasses.dataclass
class RunSettings:
    seed: int = 0
    threads: int = 1
    deterministic: bool = False


@dataclasses.dataclass
class Paths:
    data: str = ""
    out: str = ""


SECTIONS = {
    "run": RunSettings,
    "sim": SimConfig,
    "train": TrainConfig,
    "tto": TTOConfig,
    "weights": LossWeights,
    "eval": EvalConfig,
    "paths": Paths,
}
# set through their own sections
_NESTED = {"weights"}


def _coerce(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def _fields(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in _NESTED:
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        else:
            out[f.name] = f.default_factory()
    return out


class RunConfig:
    """Typed view of a sectioned ``key = value`` file; unknown sections or keys are errors."""

    def __init__(self, values: dict[str, dict] | None = None):
        self.values = {name: _fields(cls) for name, cls in SECTIONS.items()}
        self.explicit: dict[str, set] = {name: set() for name in SECTIONS}
        for sec, kv in (values or {}).items():
            for k, v in kv.items():
                self.set(sec, k, v)

    def set(self, section: str, key: str, value) -> None:
        if section not in self.values:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in self.values[section]:
            raise ConfigError(f"unknown config key {key!r} in [{section}]")
        default = self.values[section][key]
        if isinstance(value, str) and not isinstance(default, str):
            value = _coerce(value, default, f"[{section}] {key}")
        self.values[section][key] = value
        self.explicit[section].add(key)

    @classmethod
    def load(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None
        cfg = cls()
        for sec in parser.sections():
            for k, v in parser.items(sec):
                cfg.set(sec, k, v)
        return cfg

    def _seeded(self, section: str) -> dict:
        kv = dict(self.values[section])
        if "seed" in kv and "seed" not in self.explicit[section]:
            kv["seed"] = self.values["run"]["seed"]
        return kv

    @property
    def weights(self) -> LossWeights:
        return LossWeights(**self.values["weights"])

    @property
    def sim(self) -> SimConfig:
        return SimConfig(**self._seeded("sim"))

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(**self._seeded("train"), weights=self.weights)

    @property
    def tto(self) -> TTOConfig:
        return TTOConfig(**self._seeded("tto"), weights=self.weights)

    @property
    def eval(self) -> EvalConfig:
        return EvalConfig(**self._seeded("eval"))

    @property
    def run(self) -> RunSettings:
        return RunSettings(**self.values["run"])

    def dumps(self) -> str:
        lines = []
        for sec in SECTIONS:
            lines.append(f"[{sec}]")
            seeded = self._seeded(sec)
            for k in sorted(seeded):
                v = seeded[k]
                lines.append(f"{k} = {repr(v) if isinstance(v, float) else v}")
            lines.append("")
        return "\n".join(lines)

    def write_resolved(self, out_dir) -> None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "resolved_config.txt").write_text(self.dumps())


def write_manifest(out_dir) -> Path:
    """MANIFEST.txt with one ``sha256  relative/path`` line per file, sorted by path."""
    out_dir = Path(out_dir)
    rows = []
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "MANIFEST.txt":
            rows.append(f"{hashlib.sha256(p.read_bytes()).hexdigest()}  {p.relative_to(out_dir).as_posix()}")
    path = out_dir / "MANIFEST.txt"
    path.write_text("\n".join(rows) + "\n")
    return path


# -- pipeline pieces shared by subcommands ----------------------------------------------
def ablation_direct_regression(dataset, config: TrainConfig, loss_log: LossLog | None = None,
                               max_steps: int | None = None) -> ModelCheckpoint:
    """Same network and schedule, but frames are regressed as beta + sigma with T = 1."""
    return train(dataset, dataclasses.replace(config, render_mode=DIRECT), loss_log, max_steps)


def _latent_for(ckpt: ModelCheckpoint, ref: str) -> np.ndarray:
    """``ref`` is a latent file, a training subject id, or ``mean``."""
    if ref == "mean":
        return ckpt.mean_latent
    if ref in ckpt.subjects:
        return ckpt.code_for(ref)
    if Path(ref).is_file():
        return read_latent(ref, ckpt.latent_dim)
    raise ConfigError(f"latent {ref!r} is neither a file, a training subject nor 'mean'")


def _write_mesh(mesh, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    (write_obj if path.suffix.lower() == ".obj" else write_ply)(mesh, path)


def _metrics_row(sid, method, pred, gt, ev: EvalConfig, mm_per_unit: float) -> dict:
    m = mesh_metrics(pred, gt, samples=ev.samples, tau=ev.tau, seed=ev.seed)
    return {"subject_id": sid, "method": method, "hd95_mm": repr(m["hd95"] * mm_per_unit),
            "chamfer": repr(m["chamfer"]), "f1": repr(m["f1"])}


def _write_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _complete_subject(ds, sid, ckpt, cfg: RunConfig, out: Path, tag: str):
    s = ds.get(sid)
    loss_log = LossLog()
    res = optimize_latent(s.images, s.poses, ckpt, cfg.tto, ds.probe, loss_log=loss_log)
    write_latent(out / f"{tag}_{sid}.lat", res.z)
    loss_log.write(out / f"{tag}_{sid}_tto_loss.csv")
    mesh = marching_cubes(query_occupancy_grid(ckpt.params, res.z, cfg.eval.resolution))
    log.info("%s %s: tto loss %.5f -> %.5f (iteration %d)", tag, sid, res.initial_loss, res.loss,
             res.best_iteration)
    return res, mesh


# -- subcommands -------------------------------------------------------------------------
def cmd_simulate(args, cfg: RunConfig) -> None:
    out = Path(args.out or cfg.values["paths"]["out"] or "data")
    ds = simulate_dataset(cfg.sim, _threads(cfg))
    write_dataset(ds, out)
    cfg.write_resolved(out)
    log.info("wrote %d subjects to %s", len(ds.subjects), out)


def cmd_train(args, cfg: RunConfig) -> None:
    ds = read_dataset(_data_dir(args, cfg))
    out = _out_dir(args, cfg)
    loss_log = LossLog()
    tc = cfg.train
    fn = ablation_direct_regression if args.ablation else train
    ckpt = fn(ds, tc, loss_log, args.max_steps)
    name = "ablation.ckpt" if args.ablation else "model.ckpt"
    save_checkpoint(ckpt, out / name)
    loss_log.write(out / name.replace(".ckpt", "_loss.csv"))
    cfg.write_resolved(out)
    print(out / name)


def cmd_tto(args, cfg: RunConfig) -> None:
    ds = read_dataset(_data_dir(args, cfg))
    ckpt = load_checkpoint(args.ckpt)
    out = _out_dir(args, cfg)
    sids = args.subject or [s.sid for s in ds.split("test")]
    for sid in sids:
        s = _subject(ds, sid)
        loss_log = LossLog()
        res = optimize_latent(s.images, s.poses, ckpt, cfg.tto, ds.probe, loss_log=loss_log)
        write_latent(out / f"{sid}.lat", res.z)
        loss_log.write(out / f"{sid}_tto_loss.csv")
        print(f"{sid} initial={res.initial_loss!r} final={res.loss!r} best_iteration={res.best_iteration}")
    cfg.write_resolved(out)


def cmd_extract(args, cfg: RunConfig) -> None:
    ckpt = load_checkpoint(args.ckpt)
    z = _latent_for(ckpt, args.latent)
    mesh = marching_cubes(query_occupancy_grid(ckpt.params, z, args.resolution or cfg.eval.resolution))
    if mesh.is_empty:
        log.warning("extracted mesh is empty")
    _write_mesh(mesh, args.out)
    print(f"{args.out} vertices={len(mesh.vertices)} faces={len(mesh.triangles)}")


def cmd_evaluate(args, cfg: RunConfig) -> None:
    pred = read_ply(args.pred)
    mm = cfg.sim.mm_per_unit
    if args.gt:
        gt = read_ply(args.gt)
        sid = args.subject or Path(args.gt).stem
    else:
        if not args.subject:
            raise ConfigError("evaluate needs --gt or --data with --subject")
        ds = read_dataset(_data_dir(args, cfg))
        gt, sid, mm = marching_cubes(_subject(ds, args.subject).occupancy), args.subject, ds.mm_per_unit
    row = _metrics_row(sid, args.method, pred, gt, cfg.eval, mm)
    if args.out:
        _write_rows(args.out, [row])
    print(",".join(row[c] for c in METRIC_COLUMNS))


def cmd_interpolate(args, cfg: RunConfig) -> None:
    ckpt = load_checkpoint(args.ckpt)
    out = _out_dir(args, cfg)
    za, zb = _latent_for(ckpt, args.a), _latent_for(ckpt, args.b)
    res = args.resolution or cfg.eval.resolution
    rows = []
    for i, z in enumerate(interpolate_latents(za, zb, args.steps)):
        mesh = marching_cubes(query_occupancy_grid(ckpt.params, z, res))
        write_ply(mesh, out / f"step_{i:02d}.ply")
        frac = mesh.largest_component_fraction() if not mesh.is_empty else 0.0
        rows.append((i, len(mesh.triangles), frac))
    with open(out / "interpolation.csv", "w") as fh:
        fh.write("step,faces,largest_component_fraction\n")
        fh.writelines(f"{i},{n},{f!r}\n" for i, n, f in rows)
    print(out / "interpolation.csv")


def cmd_invert(args, cfg: RunConfig) -> None:
    ckpt = load_checkpoint(args.ckpt)
    out = _out_dir(args, cfg)
    if args.grid:
        target = read_grid(args.grid)
    elif args.subject:
        target = _subject(read_dataset(_data_dir(args, cfg)), args.subject).occupancy
    else:
        raise ConfigError("invert needs --grid or --data with --subject")
    loss_log = LossLog()
    res = invert_from_shape(target, ckpt, cfg.tto, loss_log)
    write_latent(out / "inverted.lat", res.z)
    loss_log.write(out / "invert_loss.csv")
    print(f"{out / 'inverted.lat'} initial={res.initial_loss!r} final={res.loss!r}")


def cmd_render(args, cfg: RunConfig) -> None:
    ckpt = load_checkpoint(args.ckpt)
    z = _latent_for(ckpt, args.latent)
    pose = read_pose(args.pose) if args.pose else make_pose(LOOK_DOWN, [0.0, 0.0, 0.95])
    spec: ProbeSpec = cfg.sim.probe
    frame = render_frame_numpy(ckpt.params, z, pose, spec, args.mode or ckpt.render_mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out, frame)
    write_pose(out.with_suffix(".pose.txt"), pose)
    print(out)


def run_repro(cfg: RunConfig, out: Path, max_train_steps: int | None = None) -> list[dict]:
    """Simulate, train both models, complete each test subject with TTO and score the meshes."""
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    ds = simulate_dataset(cfg.sim, _threads(cfg))
    write_dataset(ds, out / "data")
    tc = cfg.train
    if cfg.run.deterministic:
        tc = dataclasses.replace(tc, deterministic=True)
    models = {}
    for method, fn in (("oscar", train), ("ablation", ablation_direct_regression)):
        loss_log = LossLog()
        ckpt = fn(ds, tc, loss_log, max_train_steps)
        save_checkpoint(ckpt, out / f"{method}.ckpt")
        loss_log.write(out / f"{method}_train_loss.csv")
        models[method] = ckpt
        log.info("%s: trained %d epochs, validation %.5f", method, ckpt.epoch, ckpt.val_score)
    rows = []
    (out / "meshes").mkdir(exist_ok=True)
    (out / "latents").mkdir(exist_ok=True)
    for s in ds.split("test"):
        gt = marching_cubes(s.occupancy)
        write_ply(gt, out / "meshes" / f"{s.sid}_gt.ply")
        for method, ckpt in models.items():
            _, mesh = _complete_subject(ds, s.sid, ckpt, cfg, out / "latents", method)
            write_ply(mesh, out / "meshes" / f"{s.sid}_{method}.ply")
            rows.append(_metrics_row(s.sid, method, mesh, gt, cfg.eval, ds.mm_per_unit))
    _write_rows(out / "metrics.csv", rows)
    write_manifest(out)
    return rows


def cmd_repro(args, cfg: RunConfig) -> None:
    rows = run_repro(cfg, _out_dir(args, cfg), args.max_steps)
    for r in rows:
        print(",".join(r[c] for c in METRIC_COLUMNS))


# -- argument handling -------------------------------------------------------------------
def _threads(cfg: RunConfig) -> int:
    return 1 if cfg.run.deterministic else max(1, cfg.run.threads)


def _data_dir(args, cfg: RunConfig) -> Path:
    d = getattr(args, "data", None) or cfg.values["paths"]["data"]
    if not d:
        raise ConfigError("no dataset directory given (--data or [paths] data)")
    return Path(d)


def _out_dir(args, cfg: RunConfig) -> Path:
    d = Path(args.out or cfg.values["paths"]["out"] or "run")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _subject(ds, sid):
    try:
        return ds.get(sid)
    except KeyError:
        raise DatasetError(f"unknown subject {sid!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "--spec", dest="config", help="run configuration file")
    common.add_argument("--seed", type=int, help="overrides [run] seed")
    common.add_argument("--threads", type=int, help="BLAS/simulation thread count")
    common.add_argument("--deterministic", action="store_true", help="single thread, fixed reduction order")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="oscar", description="ultrasound shape completion with coupled implicit fields")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("simulate", parents=[common], help="generate a procedural dataset")
    s.add_argument("--out")

    s = sub.add_parser("train", parents=[common], help="auto-decoder training")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--ablation", action="store_true", help="direct regression without transmission")
    s.add_argument("--max-steps", type=int)

    s = sub.add_parser("tto", parents=[common], help="fit latent codes to frames with the network frozen")
    s.add_argument("--data")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--subject", action="append", help="subject id (repeatable; default: test split)")
    s.add_argument("--out")

    s = sub.add_parser("extract", parents=[common], help="mesh the 0.5 iso-surface of o(.|z)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--latent", default="mean", help="latent file, training subject id, or 'mean'")
    s.add_argument("--resolution", type=int)
    s.add_argument("--out", required=True, help=".ply or .obj")

    s = sub.add_parser("evaluate", parents=[common], help="hd95/chamfer/f1 between meshes")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt")
    s.add_argument("--data")
    s.add_argument("--subject")
    s.add_argument("--method", default="oscar")
    s.add_argument("--out")

    s = sub.add_parser("interpolate", parents=[common], help="meshes along a latent path")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--steps", type=int, default=8)
    s.add_argument("--resolution", type=int)
    s.add_argument("--out")

    s = sub.add_parser("invert", parents=[common], help="fit z to an occupancy grid")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--grid")
    s.add_argument("--data")
    s.add_argument("--subject")
    s.add_argument("--out")

    s = sub.add_parser("render", parents=[common], help="render one B-mode frame")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--latent", default="mean")
    s.add_argument("--pose", help="4x4 pose text file (default: centred, looking down)")
    s.add_argument("--mode", choices=[TRANSMISSION, DIRECT])
    s.add_argument("--out", required=True)

    s = sub.add_parser("repro", parents=[common], help="desk-scale experiment end to end")
    s.add_argument("--out")
    s.add_argument("--max-steps", type=int, help=argparse.SUPPRESS)
    p.subcommands = sub.choices
    return p


COMMANDS = {
    "simulate": cmd_simulate, "train": cmd_train, "tto": cmd_tto, "extract": cmd_extract,
    "evaluate": cmd_evaluate, "interpolate": cmd_interpolate, "invert": cmd_invert, "render": cmd_render,
    "repro": cmd_repro,
}


def _category(exc: BaseException) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, DatasetError):
        return "dataset"
    if isinstance(exc, NonFiniteError):
        return "numeric"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, ValueError):
        return "invalid-input"
    return "internal"


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra:
        # report against the subcommand so its own usage line is shown
        parser.subcommands[args.command].error(f"unrecognized arguments: {' '.join(extra)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.set("run", "seed", args.seed)
        if args.threads is not None:
            cfg.set("run", "threads", args.threads)
        if args.deterministic:
            cfg.set("run", "deterministic", True)
        with threadpool_limits(limits=_threads(cfg)):
            COMMANDS[args.command](args, cfg)
    except Exception as exc:        # noqa: BLE001 - reported as one line
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"oscar: error[{_category(exc)}]: {msg}", file=sys.stderr)
        if args.verbose:
            log.exception("traceback")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: ``schnet <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure
(divergence, non-finite MD, failed verification).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (Dataset, ExtXYZError, MissingLabelsError, Normalizer, SplitSpec, read_extxyz,
                   split, write_extxyz)
from .md import MdState, SimulationError, velocity_verlet
from .model import ModelConfig, SchNetModel
from .synthetic import MorseOracle, default_template, generate_synthetic
from .training import (LossConfig, LrSchedule, MeanPredictor, TrainConfig, TrainingDiverged,
                       evaluate, predict, save_train_state, train)
from .verify import (InvarianceTolerances, check_force_consistency, check_invariances,
                     format_report, random_molecules, work_integral_rows, CheckRow)

log = logging.getLogger("schnet")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    """Bad configuration or input; maps to exit status 2."""


class NumericFailure(Exception):
    """Maps to exit status 3."""


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    # model
    n_features: int = 64
    n_interactions: int = 3
    rbf_min: float = 0.0
    rbf_spacing: float = 0.1
    rbf_count: int = 300
    rbf_gamma: float = 10.0
    max_atomic_number: int = 100
    include_self_pairs: bool = False
    # loss
    rho: float = 0.01
    train_forces: bool = True
    # optimiser
    lr: float = 1e-3
    decay_ratio: float = 0.96
    decay_every: int = 100_000
    staircase: bool = True
    batch_size: int = 32
    max_steps: int = 1_000_000
    eval_interval: int = 1000
    patience: int = 25
    ema_decay: float = 0.99
    selection: str = "combined"
    # split; n_train = -1 uses everything not in validation
    split_mode: str = "random"
    n_train: int = -1
    n_val: int = 1000
    id_fraction: float = 0.8
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.n_features, self.n_interactions, self.rbf_min, self.rbf_spacing,
                           self.rbf_count, self.rbf_gamma, self.max_atomic_number,
                           self.include_self_pairs)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, max_steps=self.max_steps,
            eval_interval=self.eval_interval, patience=self.patience, seed=self.seed,
            ema_decay=self.ema_decay,
            schedule=LrSchedule(self.lr, self.decay_ratio, self.decay_every, self.staircase),
            loss=LossConfig(self.rho, self.train_forces), selection=self.selection)

    def format(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_TYPES = {f.name: f.type for f in fields(RunConfig)}
_PARSERS = {"int": int, "float": float, "str": str, "bool": _parse_bool}


def parse_value(key: str, text: str):
    if key not in _TYPES:
        raise UsageError(f"unknown config key {key!r}")
    try:
        return _PARSERS[_TYPES[key]](text.strip())
    except ValueError as exc:
        raise UsageError(f"config key {key}: {exc}") from None


def read_config(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = parse_value(key, value)
        except UsageError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from None
    return values


def build_run_config(args) -> RunConfig:
    values = read_config(args.config) if args.config else {}
    for f in fields(RunConfig):
        override = getattr(args, f.name, None)
        if override is not None:
            values[f.name] = override
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = parse_value(key.strip(), value)
    cfg = RunConfig(**values)
    try:
        cfg.model_config()
        cfg.train_config()
        if cfg.split_mode not in ("random", "molecule_wise"):
            raise ValueError(f"unknown split_mode {cfg.split_mode!r}")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    g = p.add_argument_group("config keys (override the file)")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            g.add_argument(flag, dest=f.name, type=_PARSERS[f.type], default=None,
                           help=f"default {_fmt(f.default)}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _read(path) -> Dataset:
    try:
        return read_extxyz(path)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    except ExtXYZError as exc:
        raise UsageError(str(exc)) from None


def _load(path) -> tuple[SchNetModel, dict]:
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None


def _check_elements(model: SchNetModel, ds: Dataset):
    zmax = model.config.max_atomic_number
    for k, c in enumerate(ds):
        bad = [int(z) for z in c.Z if not 1 <= z <= zmax]
        if bad:
            raise UsageError(f"frame {k}: atomic number {bad[0]} outside the model's range 1..{zmax}")


def run_directory(out: str | None, seed: int, root: str = "runs") -> Path:
    path = Path(out) if out else Path(root) / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = build_run_config(args)
    ds = _read(args.data)
    n_train = cfg.n_train if cfg.n_train >= 0 else len(ds) - cfg.n_val
    try:
        tr, va, te = split(ds, SplitSpec(n_train, cfg.n_val, cfg.split_mode, cfg.seed,
                                         cfg.id_fraction))
    except ValueError as exc:
        raise UsageError(f"split: {exc}") from None
    if len(tr) == 0 or len(va) == 0:
        raise UsageError("training and validation sets must be non-empty")
    out = run_directory(args.out, cfg.seed)
    (out / "config.txt").write_text(cfg.format())
    model = SchNetModel(cfg.model_config(), normalizer=Normalizer.fit(tr), seed=cfg.seed)
    meta = {"run_config": dataclasses.asdict(cfg), "data": str(args.data), "version": __version__}
    try:
        result = train(model, tr, va, cfg.train_config(), log_path=out / "metrics.csv")
    except MissingLabelsError as exc:
        raise UsageError(str(exc)) from None
    except TrainingDiverged as exc:
        if exc.result is not None:
            save_checkpoint(out / "checkpoint.npz", exc.result.model, {**meta, "diverged": True})
        raise NumericFailure(str(exc)) from None
    save_checkpoint(out / "checkpoint.npz", result.model, meta)
    save_train_state(out / "train_state.npz", result.state)
    rows = []
    for name, part in (("val", va), ("test", te)):
        if len(part):
            m = evaluate(result.model, part, forces=part.has_forces)
            rows.append((name, len(part), repr(m.energy_mae),
                         "" if m.force_mae is None else repr(m.force_mae)))
    _write_csv(out / "eval.csv", ("split", "n", "energy_mae", "force_mae"), rows)
    for r in rows:
        print(f"{r[0]}: n={r[1]} energy_mae={r[2]} force_mae={r[3] or 'n/a'}")
    print(f"run directory: {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _read(args.data)
    if len(ds) == 0:
        raise UsageError(f"{args.data}: no conformations")
    if not ds.has_energies:
        raise UsageError(f"{args.data}: every conformation needs an energy label")
    if args.baseline == "mean":
        if args.checkpoint:
            model = MeanPredictor(_load(args.checkpoint)[0].normalizer.mean)
        else:
            model = MeanPredictor.fit(ds)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint unless --baseline mean is given")
        model = _load(args.checkpoint)[0]
        _check_elements(model, ds)
    forces = ds.has_forces
    if not forces:
        log.warning("%s has no force labels on every frame; reporting energy MAE only", args.data)
    m = evaluate(model, ds, forces=forces)
    print(f"energy_mae={m.energy_mae!r}")
    if m.force_mae is not None:
        print(f"force_mae={m.force_mae!r}")
    if args.csv:
        _write_csv(args.csv, ("n", "energy_mae", "force_mae"),
                   [(len(ds), repr(m.energy_mae), "" if m.force_mae is None else repr(m.force_mae))])
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = _load(args.checkpoint)
    ds = _read(args.input)
    _check_elements(model, ds)
    energies, forces = predict(model, ds, forces=True)
    out = [dataclasses.replace(c, energy=float(e), forces=f)
           for c, e, f in zip(ds, energies, forces)]
    write_extxyz(args.output, out)
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.checkpoint:
        model, _ = _load(args.checkpoint)
    else:
        model = SchNetModel(ModelConfig(), seed=args.seed)
    types = tuple(z for z in (1, 6, 7, 8) if z <= model.config.max_atomic_number) or (1,)
    mols = random_molecules(args.n_molecules, seed=args.seed, types=types)
    rows = check_invariances(model, mols, n_trials=args.n_trials, seed=args.seed,
                             tol=InvarianceTolerances())
    for k, (Z, R) in enumerate(mols[:args.n_gradient]):
        rows.append(CheckRow("force_consistency", k, check_force_consistency(model, Z, R, 1e-4),
                             1e-5))
    rows += work_integral_rows(model, mols[:args.n_gradient], seed=args.seed)
    report = format_report(rows)
    if args.report:
        Path(args.report).write_text(report)
    failed = [r for r in rows if not r.passed]
    by_check = {}
    for r in rows:
        by_check.setdefault(r.check, []).append(r)
    for name, rs in by_check.items():
        worst = max(r.metric for r in rs)
        status = "PASS" if all(r.passed for r in rs) else "FAIL"
        print(f"{status} {name}: worst={worst:.3e} tol={rs[0].tolerance:.1e} n={len(rs)}")
    if failed:
        raise NumericFailure(f"{len(failed)} of {len(rows)} checks failed")
    return EXIT_OK


def cmd_md(args) -> int:
    model, _ = _load(args.checkpoint)
    ds = _read(args.init)
    if len(ds) == 0:
        raise UsageError(f"{args.init}: no conformations")
    _check_elements(model, ds)
    if args.dt < 0 or args.steps < 0:
        raise UsageError("dt and steps must be non-negative")
    c = ds[0]
    rng = np.random.default_rng(args.seed)
    V = args.velocity_scale * rng.normal(size=c.R.shape)
    V -= V.mean(axis=0)
    state = MdState(c.Z, c.R, V, dt=args.dt)
    out = run_directory(args.out, args.seed)
    frames = [dataclasses.replace(c, energy=None, forces=None)]

    def dump(s):
        if s.step % args.dump_every == 0:
            frames.append(dataclasses.replace(c, R=s.R.copy(), energy=s.potential[-1], forces=None))

    try:
        velocity_verlet(model, state, args.steps, callback=dump)
    except SimulationError as exc:
        raise NumericFailure(str(exc)) from None
    finally:
        frames[0] = dataclasses.replace(c, energy=state.potential[0] if state.potential else None,
                                        forces=None)
        write_extxyz(out / "trajectory.xyz", frames)
        _write_csv(out / "energies.csv", ("step", "potential", "kinetic", "total"),
                   [(k, repr(p), repr(kin), repr(p + kin))
                    for k, (p, kin) in enumerate(zip(state.potential, state.kinetic))])
    ke0 = state.kinetic[0]
    print(f"steps={state.step} max_drift={state.max_drift():.6e} initial_kinetic={ke0:.6e}")
    print(f"run directory: {out}")
    return EXIT_OK


def cmd_export_filters(args) -> int:
    model, _ = _load(args.checkpoint)
    if not (args.step > 0 and args.d_max >= 0):
        raise UsageError("--step must be positive and --d-max non-negative")
    d = np.round(np.arange(0.0, args.d_max + args.step / 2, args.step), 10)
    rows = []
    for b in range(model.config.n_interactions):
        W = model.filter_values(d, b)
        for ch in range(W.shape[1]):
            rows.extend((b, ch, repr(float(dk)), repr(float(w))) for dk, w in zip(d, W[:, ch]))
    _write_csv(args.out, ("block", "channel", "d", "value"), rows)
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    if args.n_frames < 0 or args.displacement < 0:
        raise UsageError("--n-frames and --displacement must be non-negative")
    template = default_template()
    if args.template:
        ds = _read(args.template)
        if len(ds) == 0:
            raise UsageError(f"{args.template}: no conformations")
        template = ds[0]
    ds = generate_synthetic(MorseOracle(), template, args.n_frames, args.displacement, args.seed)
    write_extxyz(args.out, ds.conformations)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="schnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on an extended-XYZ dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", help="run directory (default runs/<timestamp>-seed<seed>)")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="energy and force MAE on a labelled dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--baseline", choices=["mean"], help="evaluate a constant mean predictor")
    e.add_argument("--csv", help="also write the metrics here")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="write predicted energies and forces")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True)
    pr.add_argument("--output", required=True)
    pr.set_defaults(func=cmd_predict)

    v = sub.add_parser("verify", help="symmetry, gradient and work-integral checks")
    v.add_argument("--checkpoint", help="omit to check a fresh random-weight model")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--n-molecules", type=int, default=20)
    v.add_argument("--n-trials", type=int, default=3)
    v.add_argument("--n-gradient", type=int, default=3,
                   help="molecules used for the finite-difference and work checks")
    v.add_argument("--report", help="CSV report path")
    v.set_defaults(func=cmd_verify)

    m = sub.add_parser("md", help="velocity-Verlet run in reduced units (masses 1)")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--init", required=True, help="extended-XYZ; the first frame is used")
    m.add_argument("--steps", type=int, default=1000)
    m.add_argument("--dt", type=float, default=1e-3)
    m.add_argument("--velocity-scale", type=float, default=0.0,
                   help="std of random initial velocities (net momentum removed)")
    m.add_argument("--dump-every", type=int, default=10)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", help="run directory")
    m.set_defaults(func=cmd_md)

    x = sub.add_parser("export-filters", help="CSV of filter values W(d) per block and channel")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--d-max", type=float, default=10.0)
    x.add_argument("--step", type=float, default=0.05)
    x.set_defaults(func=cmd_export_filters)

    g = sub.add_parser("gen-synthetic", help="Morse-labelled perturbations of a template")
    g.add_argument("--out", required=True)
    g.add_argument("--n-frames", type=int, default=1000)
    g.add_argument("--displacement", type=float, default=0.05, help="Gaussian std, Å")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--template", help="extended-XYZ template (default: bent O-H-H)")
    g.set_defaults(func=cmd_gen_synthetic)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"schnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"schnet {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

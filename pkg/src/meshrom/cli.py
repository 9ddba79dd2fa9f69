"""``meshrom`` command line: gen | train-ae | encode | train-dyn | rollout | eval.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric divergence,
3 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, RunConfig, apply_overrides, flag_specs, preset, read_config, write_config
from .errors import ConfigError, FormatError, MeshromError, NumericError, ValidationError

log = logging.getLogger("meshrom")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
RUN_MANIFEST = "run_manifest.json"
CONFIG_FILE = "config.ini"


class UsageError(ConfigError):
    pass


# --- run manifests and output directories --------------------------------------------


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_manifest(out: Path, command: str, cfg: RunConfig, seed: int, started: str, inputs: dict,
                       outputs: list, extra: dict | None = None) -> None:
    man = {
        "command": command,
        "argv": sys.argv[1:],
        "config_hash": cfg.section_hash("data", "encoder", "decoder", "temporal", "train"),
        "coder_hash": cfg.coder_hash(),
        "dynamics_hash": cfg.dynamics_hash(),
        "seed": seed,
        "started": started,
        "finished": _now(),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": sorted(outputs),
        "version": __version__,
    }
    man.update(extra or {})
    (out / RUN_MANIFEST).write_text(json.dumps(man, indent=1, sort_keys=True))


def _dry_run(args, command: str, cfg: RunConfig, started: str, inputs: dict) -> int:
    """Resolve everything, then record what would run without producing data."""
    out = prepare_out(args.out, args.force)
    write_run_manifest(out, command, cfg, cfg.train.seed, started, inputs, [],
                       {"dry_run": True, "config": cfg.to_dict()})
    return EXIT_OK


def _listing(out: Path) -> list:
    return [str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != RUN_MANIFEST]


# --- configuration resolution ---------------------------------------------------------


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    """Preset or stored base, then ``--config`` file, then ``--section.key`` flags, then ``--seed``."""
    if args.preset:
        cfg = preset(args.preset)
    elif base is not None:
        cfg = base
    else:
        cfg = preset("toy")
    if args.config:
        cfg = read_config(args.config, base=cfg)
    overrides = {k: v for k, v in vars(args).get("overrides", {}).items()}
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    if args.seed is not None:
        cfg = apply_overrides(cfg, {"train.seed": args.seed, "data.seed": args.seed})
    return cfg.validate()


def _stored_config(directory: Path) -> RunConfig | None:
    path = Path(directory) / CONFIG_FILE
    if path.is_file():
        return read_config(path, base=RunConfig())
    return None


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} directory {p} does not exist")
    return p


# --- commands -------------------------------------------------------------------------------


def cmd_gen(args) -> int:
    from .datagen import generate_dataset
    from .dataset import write_dataset

    cfg = resolve_config(args)
    started = _now()
    if args.dry_run:
        return _dry_run(args, "gen", cfg, started, {})
    out = prepare_out(args.out, args.force)
    write_config(cfg, out / CONFIG_FILE)
    ds = generate_dataset(cfg.data)
    write_dataset(ds, out, {"run_manifest": RUN_MANIFEST, "coder_hash": cfg.coder_hash()})
    write_run_manifest(out, "gen", cfg, cfg.data.seed, started, {}, _listing(out))
    log.info("wrote %d trajectories x %s snapshots on %d nodes to %s", ds.n_trajectories, ds.lengths(),
             ds.graph.node_count, out)
    return EXIT_OK


def _train_out(args) -> Path:
    """Resuming in place keeps the directory that holds the checkpoint."""
    if args.checkpoint and Path(args.out).resolve() == Path(args.checkpoint[0]).resolve().parent:
        return Path(args.out)
    return prepare_out(args.out, args.force)


def _loss_csv(path: Path, history, header="step,loss") -> None:
    path.write_text(header + "\n" + "".join(f"{s},{v!r}\n" for s, v in history))


def cmd_train_ae(args) -> int:
    from .dataset import compute_norm_stats, read_dataset
    from .training import build_autoencoder, load_autoencoder, save_autoencoder, train_autoencoder, TrainingDiverged

    data = _require_dir(args.data, "dataset")
    cfg = resolve_config(args, _stored_config(data))
    ds = read_dataset(data)
    started = _now()
    state = None
    if args.checkpoint:
        model, state, man = load_autoencoder(args.checkpoint[0], ds.graph, expect_hash=cfg.coder_hash())
        model.config = apply_overrides(model.config, {f"train.{k}": v for k, v in vars(cfg.train).items()})
        log.info("resuming autoencoder training at step %d", state.step)
    else:
        model = build_autoencoder(cfg, ds.graph, compute_norm_stats(ds))
    if args.dry_run:
        return _dry_run(args, "train-ae", model.config, started, {"data": data})
    out = _train_out(args)
    ckpt = out / "autoencoder.glwt"
    write_config(model.config, out / CONFIG_FILE)
    code = EXIT_OK
    try:
        state = train_autoencoder(ds, model, state=state, checkpoint=ckpt, until=args.steps)
    except TrainingDiverged as exc:
        log.error("%s", exc)
        code = EXIT_DIVERGED
    else:
        save_autoencoder(ckpt, model, state, {"run_manifest": RUN_MANIFEST})
        _loss_csv(out / "ae_loss.csv", state.history)
        _loss_csv(out / "ae_eval.csv", state.evals, "step,val_rrmse")
    write_run_manifest(out, "train-ae", model.config, model.config.train.seed, started,
                       {"data": data, **({"resume": args.checkpoint[0]} if args.checkpoint else {})}, _listing(out),
                       {"exit_code": code})
    return code


def cmd_encode(args) -> int:
    from .dataset import read_dataset
    from .training import encode_dataset, load_autoencoder

    data = _require_dir(args.data, "dataset")
    if not args.checkpoint:
        raise UsageError("encode needs --checkpoint pointing at an autoencoder checkpoint")
    ds = read_dataset(data)
    expect = resolve_config(args, _stored_config(data)).coder_hash() if (args.config or args.preset) else None
    started = _now()
    model, _, _ = load_autoencoder(args.checkpoint[0], ds.graph, expect_hash=expect)
    if args.dry_run:
        return _dry_run(args, "encode", model.config, started, {"data": data, "checkpoint": args.checkpoint[0]})
    out = prepare_out(args.out, args.force)
    encode_dataset(ds, model, out)
    write_config(model.config, out / CONFIG_FILE)
    write_run_manifest(out, "encode", model.config, model.config.train.seed, started,
                       {"data": data, "checkpoint": args.checkpoint[0]}, _listing(out))
    return EXIT_OK


def cmd_train_dyn(args) -> int:
    from .training import (TrainingDiverged, build_dynamics, load_dynamics, param_stats, read_latent_dataset,
                           save_dynamics, train_dynamics)

    latent = _require_dir(args.latent, "latent dataset")
    seqs, lman = read_latent_dataset(latent)
    cfg = resolve_config(args, _stored_config(latent))
    if cfg.coder_hash() != lman["coder_hash"]:
        raise UsageError("config hash differs from the one the latent dataset was encoded with")
    if seqs[0].tokens.shape[1] != cfg.token_dim:
        raise UsageError(f"latent tokens have width {seqs[0].tokens.shape[1]}, config expects {cfg.token_dim}")
    started = _now()
    state = None
    if args.checkpoint:
        model, state, _ = load_dynamics(args.checkpoint[0], expect_hash=cfg.dynamics_hash())
        model.config = apply_overrides(model.config, {f"train.{k}": v for k, v in vars(cfg.train).items()})
    else:
        mean, std = param_stats([s.param for s in seqs])
        model = build_dynamics(cfg, seqs[0].param.size, mean, std)
    if args.dry_run:
        return _dry_run(args, "train-dyn", model.config, started, {"latent": latent})
    out = _train_out(args)
    ckpt = out / "dynamics.glwt"
    write_config(model.config, out / CONFIG_FILE)
    code = EXIT_OK
    try:
        state = train_dynamics(seqs, model, lman["n_train"], state=state, checkpoint=ckpt, until=args.steps)
    except TrainingDiverged as exc:
        log.error("%s", exc)
        code = EXIT_DIVERGED
    else:
        save_dynamics(ckpt, model, state, {"run_manifest": RUN_MANIFEST})
        _loss_csv(out / "dyn_loss.csv", state.history)
    write_run_manifest(out, "train-dyn", model.config, model.config.train.seed, started, {"latent": latent},
                       _listing(out), {"exit_code": code})
    return code


def _load_pair(paths, graph):
    from .nn import read_checkpoint
    from .training import load_autoencoder, load_dynamics

    if len(paths) != 2:
        raise UsageError("pass --checkpoint twice: the autoencoder and the dynamics checkpoint")
    kinds = {read_checkpoint(p)[0].get("kind"): p for p in paths}
    if set(kinds) != {"autoencoder", "dynamics"}:
        raise UsageError(f"expected one autoencoder and one dynamics checkpoint, got {sorted(map(str, kinds))}")
    ae, _, _ = load_autoencoder(kinds["autoencoder"], graph)
    dyn, _, man = load_dynamics(kinds["dynamics"])
    if man["coder_hash"] != ae.config.coder_hash():
        raise ValidationError("the dynamics checkpoint was trained on latents of a different autoencoder config")
    return ae, dyn


def _read_initial(args):
    from .dataset import read_dataset_manifest
    from .mesh import build_graph, read_snapshot

    if args.initial:
        snap_path = Path(args.initial)
        seq_file = snap_path.parent / "sequence.json"
        names = tuple(json.loads(seq_file.read_text())["field_names"]) if seq_file.is_file() else None
        mesh = Path(args.mesh) if args.mesh else (snap_path.parent / json.loads(seq_file.read_text())["mesh"]
                                                  if seq_file.is_file() else None)
        if mesh is None:
            raise UsageError("--mesh is required when the initial snapshot has no sequence.json beside it")
        g = build_graph(mesh)
        dt = float(json.loads(seq_file.read_text())["dt"]) if seq_file.is_file() else args.dt
        return g, read_snapshot(snap_path, names), dt, mesh
    if args.data:
        data = _require_dir(args.data, "dataset")
        man = read_dataset_manifest(data)
        traj = man["trajectories"][args.traj]
        g = build_graph(data / man["mesh"])
        snap = read_snapshot(data / traj["dir"] / f"snap_{args.start:05d}.gled", tuple(man["field_names"]))
        return g, snap, float(man["dt"]), data / man["mesh"]
    raise UsageError("rollout needs --initial SNAPSHOT or --data DIR")


def cmd_rollout(args) -> int:
    from .dataset import TIMING_FILE
    from .mesh import write_mesh, write_snapshot
    from .temporal import write_latent_sequence
    from .training import predict

    g, initial, dt, _ = _read_initial(args)
    ae, dyn = _load_pair(args.checkpoint, g)
    steps = 0 if args.steps is None else args.steps
    if steps < 0:
        raise UsageError("--steps must be >= 0")
    started = _now()
    if args.dry_run:
        return _dry_run(args, "rollout", dyn.config, started, {"checkpoints": ",".join(map(str, args.checkpoint))})
    pred = predict(ae, dyn, initial, steps, dt)
    out = prepare_out(args.out, args.force)
    write_mesh(g, out / "mesh.txt")
    for k, s in enumerate(pred.snapshots):
        write_snapshot(s, out / f"snap_{k:05d}.gled")
    write_latent_sequence(pred.latent, out / "latent.glzt")
    seq = {"field_names": list(ae.norm.field_names), "dt": dt, "times": [s.time for s in pred.snapshots],
           "param": np.atleast_1d(initial.param).tolist(), "mesh": "mesh.txt", "steps": steps,
           "run_manifest": RUN_MANIFEST}
    (out / "sequence.json").write_text(json.dumps(seq, indent=1, sort_keys=True))
    (out / TIMING_FILE).write_text(json.dumps({
        "wall_time": pred.wall_time, "encode": pred.wall_time_encode, "rollout": pred.wall_time_rollout,
        "decode": pred.wall_time_decode}))
    write_run_manifest(out, "rollout", dyn.config, dyn.config.train.seed, started,
                       {"checkpoints": ",".join(map(str, args.checkpoint)),
                        "initial": args.initial or f"{args.data}#traj{args.traj}/{args.start}"}, _listing(out))
    log.info("rolled out %d steps in %.3fs (decode included)", steps, pred.wall_time)
    return EXIT_OK


def read_sequence_dir(path):
    """Snapshots of a rollout or dataset trajectory directory, its mesh path and its wall time."""
    from .dataset import read_wall_time
    from .mesh import read_snapshot

    d = _require_dir(path, "sequence")
    seq_file = d / "sequence.json"
    if not seq_file.is_file():
        raise FileNotFoundError(f"{seq_file} not found")
    meta = json.loads(seq_file.read_text())
    names = tuple(meta["field_names"])
    snaps = [read_snapshot(p, names) for p in sorted(d.glob("snap_*.gled"))]
    if not snaps:
        raise FileNotFoundError(f"no snapshots in {d}")
    return snaps, (d / meta["mesh"]).resolve(), read_wall_time(d), meta


def _align(pred, truth):
    """Truth snapshots at the prediction times (matched to 1e-9)."""
    times = np.array([s.time for s in truth])
    out = []
    for s in pred:
        k = int(np.argmin(np.abs(times - s.time)))
        if abs(times[k] - s.time) > 1e-9 * max(1.0, abs(s.time)):
            raise ValidationError(f"no truth snapshot at t = {s.time}")
        out.append(truth[k])
    return out


def cmd_eval(args) -> int:
    from .mesh import build_graph
    from .metrics import evaluate, vorticity_sequence

    pred, mesh_path, wall_pred, pmeta = read_sequence_dir(args.pred)
    truth_all, truth_mesh, wall_truth_total, tmeta = read_sequence_dir(args.truth)
    g = build_graph(Path(args.mesh) if args.mesh else mesh_path)
    if not g.same_as(build_graph(truth_mesh)):
        raise ValidationError("prediction and truth live on different meshes")
    missing = [n for n in tmeta["field_names"] if n not in pmeta["field_names"]]
    if missing:
        raise ValidationError(f"prediction lacks field(s) {missing}")
    if len(pred) > len(truth_all):
        raise ValidationError(f"prediction has {len(pred)} snapshots, truth only {len(truth_all)}")
    truth = _align(pred, truth_all)
    # reference cost of simulating the same span of time
    n_steps = len(pred) - 1
    wall_ref = wall_truth_total * n_steps / max(len(truth_all) - 1, 1)
    ensemble = [read_sequence_dir(p)[0] for p in (args.ensemble or [])]
    started = _now()
    if args.dry_run:
        return _dry_run(args, "eval", RunConfig(), started, {"pred": args.pred, "truth": args.truth})
    rep = evaluate(pred, truth, g, ensemble=ensemble, wall_time_predict=wall_pred, wall_time_reference=wall_ref)
    out = prepare_out(args.out, args.force)
    rep.write(out / "report.txt")
    rep.write_profiles(out / "profiles_pred.csv", out / "profiles_truth.csv")
    wp, wt = vorticity_sequence(g, pred), vorticity_sequence(g, truth)
    pick = sorted({0, n_steps // 2, n_steps})
    for k in pick:
        cols = [g.coords[:, 0], g.coords[:, 1]]
        head = ["x", "y"]
        for name in tmeta["field_names"]:
            cols += [truth[k].field(name), pred[k].field(name)]
            head += [f"{name}_truth", f"{name}_pred"]
        cols += [wt[k], wp[k]]
        head += ["vorticity_truth", "vorticity_pred"]
        np.savetxt(out / f"fields_step{k:05d}.csv", np.column_stack(cols), delimiter=",", header=",".join(head),
                   comments="", fmt="%.17g")
    err = np.column_stack([np.arange(len(pred)), [s.time for s in pred],
                           [np.sqrt(np.mean((p.field("scalar") - t.field("scalar")) ** 2)) for p, t in zip(pred, truth)]
                           if "scalar" in tmeta["field_names"] else np.zeros(len(pred))])
    np.savetxt(out / "error_vs_step.csv", err, delimiter=",", header="step,time,rmse_scalar", comments="",
               fmt="%.17g")
    cfg = RunConfig()
    write_run_manifest(out, "eval", cfg, 0, started, {"pred": args.pred, "truth": args.truth}, _listing(out))
    print(rep.to_text(), end="")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------------


COMMANDS = {
    "gen": cmd_gen,
    "train-ae": cmd_train_ae,
    "encode": cmd_encode,
    "train-dyn": cmd_train_dyn,
    "rollout": cmd_rollout,
    "eval": cmd_eval,
}


class _Override(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        d = dict(getattr(namespace, "overrides", None) or {})
        d[self.dest] = values
        namespace.overrides = d


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="INI config with [data] [encoder] [decoder] [temporal] [train]")
    g.add_argument("--preset", choices=PRESETS, help="start from a named preset")
    g.add_argument("--seed", type=int, help="sets data.seed and train.seed")
    g.add_argument("--out", help="output directory")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.add_argument("--dry-run", action="store_true", help="resolve inputs and config, write no data")
    g.add_argument("--steps", type=int, help="rollout steps, or pause training after this many total steps")
    g.add_argument("--checkpoint", action="append", help="checkpoint path (repeatable)")
    g.add_argument("-v", "--verbose", action="count", default=0)
    keys = common.add_argument_group("config keys")
    for flag, dotted, default in flag_specs():
        keys.add_argument(flag, dest=dotted, action=_Override, metavar=type(default).__name__.upper(),
                          default=argparse.SUPPRESS, help=f"default {default!r}")

    p = argparse.ArgumentParser(prog="meshrom", description="Graph autoencoder + attention dynamics on meshes")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    s = sub.add_parser("train-ae", parents=[common], help="train the graph autoencoder")
    s.add_argument("--data", required=True)
    s = sub.add_parser("encode", parents=[common], help="encode a dataset into latent trajectories")
    s.add_argument("--data", required=True)
    s = sub.add_parser("train-dyn", parents=[common], help="train the latent dynamics model")
    s.add_argument("--latent", required=True)
    s = sub.add_parser("rollout", parents=[common], help="predict a trajectory from one snapshot")
    s.add_argument("--initial", help="initial snapshot file")
    s.add_argument("--mesh", help="mesh file (defaults to the one beside the snapshot)")
    s.add_argument("--data", help="dataset directory to take the initial snapshot from")
    s.add_argument("--traj", type=int, default=0)
    s.add_argument("--start", type=int, default=0)
    s.add_argument("--dt", type=float, default=1.0, help="snapshot stride when no sequence.json is present")
    s = sub.add_parser("eval", parents=[common], help="compare a prediction with ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--mesh")
    s.add_argument("--ensemble", action="append", help="extra rollout directories for the CRPS")
    return p


def _threads():
    raw = os.environ.get("GLED_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"GLED_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("GLED_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad usage; 2 is reserved for divergence here
        return EXIT_OK if not exc.code else EXIT_CONFIG
    if not hasattr(args, "overrides"):
        args.overrides = {}
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.out:
        print(f"meshrom {args.command}: --out is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        limiter = _threads()
        try:
            return COMMANDS[args.command](args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except NumericError as exc:
        print(f"meshrom {args.command}: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, OSError) as exc:
        print(f"meshrom {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MeshromError, ValueError) as exc:
        print(f"meshrom {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

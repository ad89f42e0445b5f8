"""Command-line entry point: train, eval, plot, gradcheck, export-scene.

Exit codes: 0 success, 2 config error, 3 runtime error, 4 gradcheck failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import pickle
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w

from copo import gradcheck
from copo.env.scene import SceneError, dump_scene, load_scene
from copo.env.simulator import EnvConfig
from copo.eval import (load_policy, load_trajectories, map_jobs, mixed_population_eval, run_episode,
                       trajectory_density, write_metrics_csv, write_pgm)
from copo.trainer import IterationStats, Trainer, TrainerConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 2, 3, 4
log = logging.getLogger("copo")


class ConfigError(ValueError):
    pass


# -- configuration ------------------------------------------------------------------

RUN_KEYS = ("scene", "seeds", "out_dir", "checkpoint_every")


@dataclass
class RunConfig:
    scene: str = "intersection4"
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str = "runs"
    checkpoint_every: int = 10
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    env: EnvConfig = field(default_factory=EnvConfig)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in RUN_KEYS}
        d["seeds"] = list(self.seeds)
        t = dataclasses.asdict(self.trainer)
        t["hidden"] = list(self.trainer.hidden)
        d.update({k: v for k, v in t.items() if v is not None})
        d["env"] = dataclasses.asdict(self.env)
        return d

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())


def _coerce(name: str, value, default):
    """Convert ``value`` to the type of ``default`` (strings come from overrides)."""
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                return value.lower() in ("true", "1")
            return bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float) or default is None:
            return None if value in ("none", "None", None) else float(value)
        if isinstance(default, (list, tuple)):
            if isinstance(value, str):
                value = [v for v in value.strip("[]()").split(",") if v.strip()]
            return [int(v) for v in value]
        return str(value)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad value for {name!r}: {value!r}") from err


def run_config_from_dict(d: dict) -> RunConfig:
    base = RunConfig()
    trainer_fields = {f.name: getattr(base.trainer, f.name) for f in dataclasses.fields(TrainerConfig)}
    env_fields = {f.name: getattr(base.env, f.name) for f in dataclasses.fields(EnvConfig)}
    run, trainer, env = {}, {}, {}
    for key, value in d.items():
        if key == "env":
            if not isinstance(value, dict):
                raise ConfigError("'env' must be a table")
            for k, v in value.items():
                if k not in env_fields:
                    raise ConfigError(f"unknown config key 'env.{k}'")
                env[k] = _coerce(f"env.{k}", v, env_fields[k])
        elif key == "seed":
            run["seeds"] = [_coerce(key, value, 0)]
        elif key in RUN_KEYS:
            run[key] = _coerce(key, value, getattr(base, key))
        elif key in trainer_fields:
            trainer[key] = _coerce(key, value, trainer_fields[key])
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return RunConfig(**run, trainer=TrainerConfig(**trainer), env=EnvConfig(**env))
    except ValueError as err:
        raise ConfigError(str(err)) from err


def parse_overrides(pairs: list[str]) -> dict:
    out: dict = {}
    for p in pairs:
        if "=" not in p:
            raise ConfigError(f"override {p!r} is not key=value")
        k, v = p.split("=", 1)
        k = k.strip()
        if k.startswith("env."):
            out.setdefault("env", {})[k[4:]] = v.strip()
        else:
            out[k] = v.strip()
    return out


def load_run_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    d: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            d = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"{p}: {err}") from err
    for k, v in parse_overrides(overrides or []).items():
        if k == "env":
            d.setdefault("env", {}).update(v)
        else:
            d[k] = v
    return run_config_from_dict(d)


# -- train ---------------------------------------------------------------------------

def _train_seed(args) -> dict:
    rc, seed = args
    scene = load_scene(rc.scene)
    out = Path(rc.out_dir) / f"seed_{seed}"
    out.mkdir(parents=True, exist_ok=True)
    state_path = out / "resume.pkl"
    metrics_path = out / "metrics.csv"
    env = dataclasses.replace(rc.env)
    trainer = None
    if state_path.exists():
        with open(state_path, "rb") as fh:
            trainer = pickle.load(fh)
        same_cfg = dataclasses.replace(trainer.cfg, max_env_steps=rc.trainer.max_env_steps) == rc.trainer
        if trainer.scene.name != scene.name or not same_cfg:
            raise SceneError(f"checkpoint in {out} was made for scene {trainer.scene.name!r} with a different "
                             f"configuration; use a fresh out_dir")
        trainer.cfg.max_env_steps = rc.trainer.max_env_steps
    else:
        trainer = Trainer(scene, rc.trainer, seed=seed, env_config=env)
        if metrics_path.exists():
            metrics_path.unlink()
    new_file = not metrics_path.exists()
    with open(metrics_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(IterationStats.CSV_FIELDS))
        if new_file:
            writer.writeheader()
        while trainer.env_steps < trainer.cfg.max_env_steps:
            stats = trainer.train_iteration()
            writer.writerow(stats.csv_row())
            fh.flush()
            tmp = state_path.with_suffix(".tmp")
            with open(tmp, "wb") as sf:
                pickle.dump(trainer, sf)
            os.replace(tmp, state_path)
            if trainer.iteration % rc.checkpoint_every == 0:
                trainer.save(out / f"checkpoint_{trainer.iteration:06d}.npz")
    trainer.save(out / "checkpoint_final.npz")
    return {"seed": seed, "iterations": trainer.iteration, "env_steps": trainer.env_steps}


def cmd_train(args) -> int:
    rc = load_run_config(args.config, args.override)
    if args.out:
        rc.out_dir = args.out
    load_scene(rc.scene)
    Path(rc.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(rc.out_dir) / "config.toml").write_text(rc.dumps())
    results = map_jobs(_train_seed, [(rc, s) for s in rc.seeds], args.workers)
    for r in results:
        print(f"seed {r['seed']}: {r['iterations']} iterations, {r['env_steps']} env steps")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------------

def _parse_counts(text: str | None) -> list[int | None]:
    if not text:
        return [None]
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as err:
        raise ConfigError(f"--initial-agents expects comma-separated integers, got {text!r}") from err


def cmd_eval(args) -> int:
    if not 0.0 <= args.idm_fraction < 1.0:
        raise ConfigError(f"--idm-fraction must lie in [0, 1), got {args.idm_fraction}")
    scene = load_scene(args.scene)
    env = EnvConfig(horizon=args.horizon)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    rows = []
    for count in _parse_counts(args.initial_agents):
        m = mixed_population_eval(ckpt, scene, args.idm_fraction, args.seed, args.episodes, count, env,
                                  workers=args.workers)
        rows.append({"initial_agents": count if count is not None else scene.target_agent_count,
                     "idm_fraction": args.idm_fraction, **m.row()})
    if args.out:
        write_metrics_csv(args.out, rows)
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)
    if args.export_trajectory:
        policy, _ = load_policy(ckpt)
        _, traj = run_episode(policy, scene, args.seed, env, record=True)
        with open(args.export_trajectory, "w") as fh:
            for rec in traj:
                fh.write(json.dumps(rec) + "\n")
    return EXIT_OK


# -- plot ----------------------------------------------------------------------------

def cmd_plot(args) -> int:
    if not args.trajectories:
        raise ConfigError("plot needs at least one trajectory file")
    for path in args.trajectories:
        if not Path(path).exists():
            raise ConfigError(f"trajectory file not found: {path}")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in args.trajectories:
        episodes = load_trajectories([path])
        dm = trajectory_density(episodes, cell=args.cell)
        stem = out_dir / Path(path).stem
        np.save(f"{stem}_density.npy", dm.total)
        write_pgm(f"{stem}_density.pgm", dm.total)
        fig, ax = plt.subplots(figsize=(6, 6))
        extent = (dm.origin[0], dm.origin[0] + dm.shape[1] * dm.cell,
                  dm.origin[1], dm.origin[1] + dm.shape[0] * dm.cell)
        cmap = plt.get_cmap("tab20")
        for n, (group, grid) in enumerate(sorted(dm.groups.items())):
            rgba = np.zeros(grid.shape + (4,))
            rgba[..., :3] = cmap(n % 20)[:3]
            rgba[..., 3] = np.clip(np.log1p(grid) / max(np.log1p(grid).max(), 1e-9), 0, 1)
            ax.imshow(rgba, origin="lower", extent=extent, interpolation="nearest")
        if dm.crashes:
            c = np.array(dm.crashes)
            ax.scatter(c[:, 0], c[:, 1], s=12, c="black", marker="x", label="crash")
            ax.legend(loc="upper right")
        ax.set_aspect("equal")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        fig.savefig(f"{stem}_density.png", dpi=120, bbox_inches="tight")
        plt.close(fig)
        print(f"wrote {stem}_density.png")
    return EXIT_OK


# -- gradcheck -----------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    try:
        results = gradcheck.run(args.fixture)
    except KeyError as err:
        raise ConfigError(str(err.args[0])) from err
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_GRADCHECK


def cmd_export_scene(args) -> int:
    dump_scene(load_scene(args.scene), args.path)
    print(f"wrote {args.path}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    default_workers = int(os.environ.get("COPO_WORKERS", "1"))
    p = argparse.ArgumentParser(prog="copo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run per seed")
    t.add_argument("--config", help="TOML run configuration")
    t.add_argument("--override", nargs="*", default=[], metavar="KEY=VALUE")
    t.add_argument("--out", default=os.environ.get("COPO_OUT_DIR"), help="output directory")
    t.add_argument("--workers", type=int, default=default_workers)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--scene", required=True, help="scene file or built-in name")
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--initial-agents", help="comma-separated agent counts, one row each")
    e.add_argument("--idm-fraction", type=float, default=0.0)
    e.add_argument("--horizon", type=int, default=1000)
    e.add_argument("--out", help="metrics CSV path")
    e.add_argument("--export-trajectory", help="write one recorded episode as JSONL")
    e.add_argument("--workers", type=int, default=default_workers)
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="trajectory density images with crash overlay")
    pl.add_argument("trajectories", nargs="*")
    pl.add_argument("--out", default=".")
    pl.add_argument("--cell", type=float, default=0.5)
    pl.set_defaults(func=cmd_plot)

    g = sub.add_parser("gradcheck", help="run finite-difference and brute-force oracles")
    g.add_argument("fixture", help="mlp, ppo_loss, lcf_bandit, gae, neighborhood or all")
    g.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-scene", help="write a scene as TOML")
    x.add_argument("scene")
    x.add_argument("path")
    x.set_defaults(func=cmd_export_scene)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SceneError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``residiff <command> [options]``.

Commands write only into ``--out``. Failures exit nonzero with a JSON
object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import experiments as ex
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .controllers import GainSet, PIDGains
from .data import Normalizer, load_dataset, save_dataset
from .diffusion import (BaselineModel, DiffusionModel, TrainConfig, TrainingError, load_checkpoint,
                        save_checkpoint, train_baseline_mlp, train_diffusion, write_loss_csv)
from .dynamics import DisturbanceSpec, QuadrotorParams, ToyParams
from .harness import EpisodeConfig, run_episode
from .multimodality import segment_and_test, write_report
from .networks import MLPConfig, NoisePredictorConfig
from .trajectory import PRIMITIVES, TrajectorySpec, primitive_specs, sample_trajectory

log = logging.getLogger("residiff")

MANIFEST_SCHEMA = "residiff.manifest/1"


class ArtifactError(FileNotFoundError):
    pass


def _need(path, what: str) -> Path:
    p = Path(path) if path else None
    if p is None or not p.exists():
        raise ArtifactError(f"missing {what}: {path}")
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    return str(o)


# -- config -> objects ----------------------------------------------------------

def experiment_config(cfg: RunConfig, seed: int | None) -> ex.ExperimentConfig:
    e = ex.ExperimentConfig()
    sec = cfg.section("experiment")
    kw = {k: v for k, v in sec.items() if k in e.to_dict()}
    plant = cfg.section("plant")
    if "mass" in plant:
        kw["base_mass"] = plant["mass"]
    if "drag_coeffs" in plant:
        kw["drag"] = plant["drag_coeffs"]
    if "actuator_lag_tau" in plant:
        kw["actuator_lag"] = plant["actuator_lag_tau"]
    if "m_bar" in cfg.section("gains"):
        kw["m_bar"] = cfg.get("gains", "m_bar")
    data = cfg.section("data")
    if "horizon" in data:
        kw["horizon"] = data["horizon"]
    traj = cfg.section("trajectory")
    for key in ("mean_velocity", "duration"):
        if key in traj:
            kw[key] = traj[key]
    ep = cfg.section("episode")
    for key in ("control_rate", "physics_rate"):
        if key in ep:
            kw[key] = ep[key]
    if seed is not None:
        kw["seed"] = seed
    elif cfg.get("run", "seed") is not None:
        kw["seed"] = cfg.get("run", "seed")
    return replace(e, **kw)


def disturbance(cfg: RunConfig, seed: int = 0) -> DisturbanceSpec:
    sec = cfg.section("disturbance")
    kind = sec.pop("kind", "none")
    return DisturbanceSpec(kind, sec, seed)


def train_config(cfg: RunConfig, steps: int | None, seed: int | None) -> TrainConfig:
    sec = {k: v for k, v in cfg.section("train").items() if k in TrainConfig().to_dict()}
    if steps is not None:
        sec["steps"] = steps
    if seed is not None:
        sec["seed"] = seed
    return TrainConfig(**sec)


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> dict:
    e = experiment_config(cfg, args.seed)
    data = cfg.section("data")
    if args.preset == "payload":
        payloads, velocities = (0.2, 0.6), (0.2, 0.4)
    else:
        payloads, velocities = (cfg.get("plant", "payload_mass", 0.0),), (e.mean_velocity,)
    payloads = data.get("payloads", payloads)
    velocities = data.get("velocities", velocities)
    kinds = [k.strip() for k in data.get("kinds", ",".join(PRIMITIVES)).split(",") if k.strip()]
    if not kinds or not payloads or not velocities:
        raise ConfigError("empty trajectory list", cfg.path)
    dist = disturbance(cfg) if cfg.section("disturbance") else e.wind()
    logs, manifest_runs = [], []
    for pi, payload in enumerate(payloads):
        for vi, vel in enumerate(velocities):
            specs = [s for s in primitive_specs(vel, e.duration) if s.kind in kinds]
            if not specs:
                raise ConfigError(f"no primitive matches kinds {kinds}", cfg.path)
            seed0 = e.seed * 1000 + 100 * pi + 10 * vi * len(specs)
            logs += ex.collect(specs, e.plant(payload), dist, e, seed0)
            manifest_runs += [{"trajectory": s.name, "payload": payload, "velocity": vel, "seed": seed0 + i}
                              for i, s in enumerate(specs)]
    ds = ex.dataset_from_logs(logs, data.get("horizon", e.horizon), e.m_bar)
    norm = Normalizer.fit(ds)
    out = Path(args.out)
    save_dataset(out / "dataset.npz", ds, norm, e.to_dict())
    manifest = {"schema": MANIFEST_SCHEMA, "version": __version__, "command": "gen-data", "seed": e.seed,
                "config": cfg.values, "experiment": e.to_dict(), "disturbance": dist.kind,
                "records": len(ds), "runs": manifest_runs}
    _write_json(out / "manifest.json", manifest)
    return {"dataset": str(out / "dataset.npz"), "records": len(ds)}


def cmd_train(args, cfg: RunConfig) -> dict:
    ds, norm, header = load_dataset(_need(args.dataset, "dataset"))
    norm = norm or Normalizer.fit(ds)
    tcfg = train_config(cfg, args.steps, args.seed)
    out = Path(args.out)
    if args.baseline_mlp:
        model = train_baseline_mlp(ds, norm, tcfg, MLPConfig())
        name = "mlp.npz"
    else:
        sec = cfg.section("train")
        net = NoisePredictorConfig(horizon=ds.horizon, widths=sec.get("widths", (16, 32, 64)),
                                   kernel_size=sec.get("kernel_size", 5))
        resume = load_checkpoint(_need(args.resume, "checkpoint")) if args.resume else None
        if resume is not None and not isinstance(resume, DiffusionModel):
            raise ValueError("can only resume a diffusion checkpoint")
        model = train_diffusion(ds, norm, tcfg, net, sec.get("K", 20), resume)
        name = "diffusion.npz"
    save_checkpoint(out / name, model)
    write_loss_csv(out / (Path(name).stem + "_loss.csv"), model.losses)
    _write_json(out / "manifest.json", {"schema": MANIFEST_SCHEMA, "command": "train", "dataset": str(args.dataset),
                                        "train": tcfg.to_dict(), "config": cfg.values,
                                        "final_loss": float(np.mean(model.losses[-50:])) if model.losses else None})
    return {"checkpoint": str(out / name), "steps": len(model.losses)}


def _models(args) -> dict:
    models = {}
    if args.checkpoint:
        models["diffusion"] = load_checkpoint(_need(args.checkpoint, "diffusion checkpoint"))
    if args.mlp_checkpoint:
        models["mlp"] = load_checkpoint(_need(args.mlp_checkpoint, "mlp checkpoint"))
    return models


def cmd_track(args, cfg: RunConfig) -> dict:
    e = experiment_config(cfg, args.seed)
    models = _models(args)
    out = Path(args.out)
    if args.preset:
        need = {"table1-analog": ("diffusion", "mlp"), "payload-sweep": ("diffusion", "mlp"),
                "wind-hover": ("diffusion", "mlp"), "horizon-sweep": ("diffusion",)}[args.preset]
        for k in need:
            if k not in models:
                raise ArtifactError(f"preset {args.preset} needs a {k} checkpoint")
        if args.preset == "horizon-sweep":
            reuse = cfg.get("experiment", "reuse", (1, 8, 32, 64))
            res = ex.horizon_sweep(e, models["diffusion"], reuse, cfg.get("experiment", "latency_steps", 2))
        else:
            res = {"table1-analog": ex.table1_analog, "payload-sweep": ex.payload_sweep,
                   "wind-hover": ex.wind_hover}[args.preset](e, models)
        _write_json(out / f"{args.preset}.json", res)
        return {"result": str(out / f"{args.preset}.json"), "runs": len(res["runs"])}

    tsec = cfg.section("trajectory")
    rate = tsec.pop("rate", e.control_rate)
    spec = TrajectorySpec(**{k: v for k, v in tsec.items()})
    ep = {k: v for k, v in cfg.section("episode").items()}
    ep.setdefault("seed", e.seed)
    ecfg = EpisodeConfig(**ep)
    gains = GainSet(**cfg.section("gains"))
    pid = PIDGains(m_bar=gains.m_bar, **cfg.section("pid"))
    params = QuadrotorParams(**cfg.section("plant"))
    if ecfg.estimator in ("diffusion", "mlp") and ecfg.estimator not in models:
        raise ArtifactError(f"estimator {ecfg.estimator} needs a checkpoint")
    est = ex.make_estimator(ecfg.estimator, models, params, gains.m_bar)
    elog, metrics = run_episode(sample_trajectory(spec, rate), params, disturbance(cfg, ecfg.seed), est,
                                ecfg, gains, pid)
    elog.to_csv(out / "episode.csv")
    _write_json(out / "metrics.json", {"metrics": metrics.to_dict(), "trajectory": spec.name,
                                       "config": cfg.values})
    return metrics.to_dict()


def cmd_toy(args, cfg: RunConfig) -> dict:
    sec = cfg.section("toy")
    params = ToyParams(**{k: sec.pop(k) for k in ("a", "k_gain", "dt", "duration") if k in sec})
    tc = ex.ToyConfig(params=params, seed=args.seed or 0, **sec)
    if args.disturbance:
        tc = replace(tc, disturbance=args.disturbance)
    res = ex.toy_fig2(tc)
    out = Path(args.out)
    _write_json(out / f"toy_{tc.disturbance}.json", res)
    return {k: v for k, v in res.items() if k.startswith("median")}


def _read_episode_csv(path: Path, column: str):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty episode log")
    try:
        p_d = np.array([[float(r[f"p_d_{a}"]) for a in "xyz"] for r in rows])
        h = np.array([[float(r[f"{column}_{a}"]) for a in "xyz"] for r in rows])
    except KeyError as exc:
        raise ValueError(f"{path}: missing column {exc}") from None
    return p_d, h


def cmd_analyze(args, cfg: RunConfig) -> dict:
    runs = [_read_episode_csv(_need(p, "episode log"), args.column) for p in args.logs]
    rep = segment_and_test(runs, args.segments, args.bootstrap, args.seed or 0)
    out = Path(args.out)
    write_report(rep, out / "dip_report.json", out / "dip_table.csv")
    return {"combined": rep["combined"], "skipped": len(rep["skipped"]), "low_n": rep["low_n"]}


def cmd_report(args, cfg: RunConfig) -> dict:
    rows = []
    for p in args.inputs:
        res = json.loads(_need(p, "result file").read_text())
        for key, val in res.get(args.metric, {}).items():
            rows.append({"source": Path(p).name, "preset": res.get("preset", ""), "key": key, args.metric: val})
    if not rows:
        raise ValueError(f"no {args.metric} entries in the inputs")
    rows.sort(key=lambda r: (r["preset"], r["key"]))
    out = Path(args.out)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["source", "preset", "key", args.metric])
        w.writeheader()
        w.writerows(rows)
    _write_json(out / "report.json", rows)
    return {"rows": len(rows), "table": str(out / "report.csv")}


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "track": cmd_track, "toy": cmd_toy,
            "analyze": cmd_analyze, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="residiff", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key-value config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("gen-data", help="fly demonstrations and build a dataset"))
    p.add_argument("--preset", choices=("primitives", "payload"), default="primitives")

    p = common(sub.add_parser("train", help="train the diffusion model or the baseline"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--baseline-mlp", action="store_true")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume")

    p = common(sub.add_parser("track", help="closed-loop episode or experiment preset"))
    p.add_argument("--checkpoint")
    p.add_argument("--mlp-checkpoint")
    p.add_argument("--preset", choices=[x for x in ex.PRESETS if x != "toy-fig2"])

    p = common(sub.add_parser("toy", help="scalar disturbance-rejection experiment"))
    p.add_argument("--disturbance", choices=("gaussian", "cauchy"))

    p = common(sub.add_parser("analyze", help="dip tests over episode logs"))
    p.add_argument("logs", nargs="+")
    p.add_argument("--segments", type=int, default=100)
    p.add_argument("--bootstrap", type=int, default=2000)
    p.add_argument("--column", default="h_true", choices=("h_true", "h_hat"))

    p = common(sub.add_parser("report", help="aggregate preset results into a table"))
    p.add_argument("inputs", nargs="+")
    p.add_argument("--metric", default="median_rmse_position")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = apply_overrides(cfg, args.set)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 2
    except ArtifactError as exc:
        print(json.dumps({"error": "missing_artifact", "message": str(exc)}), file=sys.stderr)
        return 3
    except TrainingError as exc:
        print(json.dumps({"error": "training", "message": str(exc)}), file=sys.stderr)
        return 4
    except (ValueError, TypeError, FloatingPointError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, default=_jsonable))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Command-line entry point: ``snode-dmd simulate|train|eval|baseline``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""

from __future__ import annotations

import os

_threads = os.environ.get("SNODE_DMD_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
import warnings  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402

SYSTEMS = ("synthetic", "grayscott", "vorticity")
METRICS = ("l1", "modes", "eigs", "portraits", "traj")
RUN_MANIFEST = "run_manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    p = _Parser(prog="snode-dmd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a benchmark dataset")
    s.add_argument("--system", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--T", type=int)
    s.add_argument("--grid", type=int)
    s.add_argument("--sensor-frac", type=float, dest="sensor_frac")
    s.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    s.add_argument("--realizations", type=int, help="vorticity: number of viscosity draws")
    s.add_argument("--config")

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--rank", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-min", type=float, dest="lr_min", help="cosine-decay floor for the lr")
    t.add_argument("--seed", type=int)
    t.add_argument("--window", type=int)
    t.add_argument("--L", type=int)
    t.add_argument("--from", dest="resume")
    t.add_argument("--stop-after", type=int, dest="stop_after",
                   help="stop after this many epochs of the schedule (for later --from)")
    t.add_argument("--config")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--horizon", choices=("1", "m"))
    e.add_argument("--metrics")
    e.add_argument("--grid-out", dest="grid_out")
    e.add_argument("--seed", type=int)
    e.add_argument("--samples", type=int)
    e.add_argument("--config")

    b = sub.add_parser("baseline", help="exact DMD baseline")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--rank", type=int)
    b.add_argument("--use-truth", action="store_true", dest="use_truth",
                   help="fit the full-grid truth instead of the sensor observations")
    b.add_argument("--config")
    return p


def _resolve(args, defaults: dict) -> dict:
    """Defaults, then the JSON config, then explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
        cfg.update(loaded)
    for k, v in vars(args).items():
        if k not in ("command", "config") and v is not None and v is not False:
            cfg[k] = v
    return cfg


def _write_manifest(out, command, cfg, inputs, outputs, t0):
    from .core import write_json
    write_json(Path(out) / RUN_MANIFEST, {
        "command": command, "config": cfg, "seed": cfg.get("seed"), "version": __version__,
        "inputs": inputs, "outputs": outputs, "wall_time_s": round(time.time() - t0, 3),
    })


# -- simulate -----------------------------------------------------------------------

def cmd_simulate(args):
    from dataclasses import replace

    from . import sim
    from .core import save_dataset

    t0 = time.time()
    cfg = _resolve(args, {"seed": 0, "sensor_frac": 0.1, "realizations": 1})
    system = cfg["system"]
    if system not in SYSTEMS:
        raise UsageError(f"unsupported system: {system}")
    cls, _ = sim.SYSTEMS[system]
    sc = cls(**cfg.get("sim_config", {}))
    over = {"sensor_fraction": cfg["sensor_frac"]}
    if cfg.get("T") is not None:
        over["T"] = cfg["T"]
    if cfg.get("grid") is not None:
        over["grid"] = cfg["grid"]
    if cfg.get("noise_sigma") is not None:
        over["noise_sigma"] = cfg["noise_sigma"]
    if not 0 < over["sensor_fraction"] <= 1:
        raise UsageError("--sensor-frac must lie in (0, 1]")
    sc = replace(sc, **over)
    out = Path(cfg["out"])
    n_real = int(cfg["realizations"])
    if n_real < 1:
        raise UsageError("--realizations must be >= 1")
    if n_real > 1 and system != "vorticity":
        raise UsageError("--realizations is only supported for vorticity")
    if system == "synthetic":
        datasets = [sim.gen_synthetic(sc, cfg["seed"])]
    elif system == "grayscott":
        datasets = [sim.gen_grayscott(sc, cfg["seed"])]
    else:
        datasets = sim.gen_vorticity_ensemble(sc, cfg["seed"], n_real)
    outputs = []
    if len(datasets) == 1:
        save_dataset(datasets[0], out)
        outputs.append(str(out))
    else:
        for i, ds in enumerate(datasets):
            save_dataset(ds, out / f"r{i:03d}")
            outputs.append(str(out / f"r{i:03d}"))
    cfg["sim_config"] = sim._cfg_dict(sc)
    _write_manifest(out, "simulate", cfg, [], outputs, t0)
    print(f"wrote {len(datasets)} dataset(s) to {out} "
          f"({len(datasets[0].sensor_indices)} sensors)")
    return 0


# -- train --------------------------------------------------------------------------

def load_data(path):
    """A dataset directory, or a directory of realization subdirectories."""
    from .core import load_dataset

    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} not found")
    if (d / "manifest.json").exists():
        return [load_dataset(d)]
    subs = sorted(p for p in d.iterdir() if (p / "manifest.json").exists())
    if not subs:
        raise FileNotFoundError(f"no dataset found in {d}")
    return [load_dataset(p) for p in subs]


def default_rank(system: str) -> int:
    return 4 if system == "synthetic" else 8


def cmd_train(args):
    from . import train as tr

    t0 = time.time()
    cfg = _resolve(args, {})
    datasets = load_data(cfg["data"])
    resume = None
    if cfg.get("resume"):
        resume = tr.Checkpoint.load(cfg["resume"])
        base = resume.train_cfg.to_dict()
    else:
        base = tr.TrainConfig(rank=default_rank(datasets[0].system)).to_dict()
    base.update(cfg.get("train_config", {}))
    flag_map = {"rank": "rank", "epochs": "epochs", "batch": "batch_size", "lr": "lr",
                "seed": "seed", "window": "window", "L": "L", "lr_min": "lr_min"}
    for flag, key in flag_map.items():
        if cfg.get(flag) is not None:
            base[key] = cfg[flag]
    for key, name in (("epochs", "--epochs"), ("rank", "--rank"), ("batch_size", "--batch")):
        if int(base[key]) < 1:
            raise UsageError(f"{name} must be >= 1")
    if not float(base["lr"]) > 0:
        raise UsageError("--lr must be positive")
    try:
        tcfg = tr.TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt = tr.train(datasets, tcfg, out_dir=out, resume=resume,
                    until_epoch=cfg.get("stop_after"))
    cfg["train_config"] = tcfg.to_dict()
    _write_manifest(out, "train", cfg, [cfg["data"]] + ([cfg["resume"]] if resume else []),
                    [str(out / "final"), str(out / "best"), str(out / "train_log.csv")], t0)
    last = ckpt.history[-1] if ckpt.history else {}
    print(f"trained to epoch {ckpt.epoch}; loss {last.get('loss_total', float('nan')):.5g}; "
          f"best epoch {ckpt.best_epoch}")
    return 0


# -- eval ---------------------------------------------------------------------------

def _parse_grid(spec):
    try:
        w, h = (int(v) for v in spec.lower().split("x"))
    except ValueError:
        raise UsageError(f"--grid-out expects WxH, got {spec!r}") from None
    if w < 1 or h < 1:
        raise UsageError("--grid-out dimensions must be positive")
    return w, h


def cmd_eval(args):
    from . import analysis as an
    from .core import grid_coords, write_array
    from .model import AUTOREGRESSIVE, TEACHER
    from .train import Checkpoint

    t0 = time.time()
    cfg = _resolve(args, {"horizon": "1", "metrics": "l1", "seed": 0, "samples": 10})
    metrics = [m.strip() for m in str(cfg["metrics"]).split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise UsageError(f"unknown metric(s): {', '.join(bad)}")
    grid_out = _parse_grid(cfg["grid_out"]) if cfg.get("grid_out") else None
    ckpt = Checkpoint.load(cfg["ckpt"])
    datasets = load_data(cfg["data"])
    ds = datasets[0]
    P, mcfg = ckpt.params, ckpt.model_cfg
    mode = TEACHER if str(cfg["horizon"]) == "1" else AUTOREGRESSIVE
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    report, notes = {"horizon": str(cfg["horizon"]), "mode": mode}, {}
    fc = an.forecast_grid(P, mcfg, ds, mode)
    enc = an.forecast_grid(P, mcfg, ds, TEACHER) if mode != TEACHER else fc
    spec = ds.gt_spectrum

    if "l1" in metrics:
        if ds.truth is None:
            notes["l1"] = "dataset has no truth"
        else:
            report["l1"] = an.l1_error(fc.mean, ds.truth[1:1 + fc.mean.shape[0]], ds.is_complex)
    if "modes" in metrics:
        if spec is None or spec.modes is None or spec.modes.shape[1] != fc.modes.shape[1]:
            notes["modes"] = "skipped: no ground-truth modes of matching rank"
        else:
            report["modes"] = an.mode_similarity(fc.modes, spec.modes).to_dict()
    if "eigs" in metrics:
        lam = an.eigen_log_ratio(enc.encoded, ds.dt)
        report["eigs"] = {"lambda_hat": [[z.real, z.imag] for z in lam]}
        if spec is None or len(spec.lambdas) != len(lam):
            notes["eigs"] = "no ground-truth spectrum of matching rank; errors skipped"
        else:
            err, perm = an.eigen_errors(lam, spec.lambdas)
            report["eigs"].update({"abs_error": err.tolist(), "matching": perm.tolist(),
                                   "mean_abs_error": float(err.mean()),
                                   "lambda_gt": [[z.real, z.imag] for z in spec.lambdas]})
    if "portraits" in metrics:
        lv = an.mode_portrait_levels(enc.modes, enc.encoded)
        report["portraits"] = {"levels": lv.levels.tolist(),
                               "degenerate": lv.degenerate.tolist(),
                               "percentiles": [30, 60, 90]}
        for k in range(enc.modes.shape[1]):
            write_array(out / f"mode_{k}.bin", enc.modes[:, k], True)
    if "traj" in metrics:
        if ds.system != "vorticity":
            notes["traj"] = "skipped: particle trajectories need a vorticity dataset"
        else:
            n = int(cfg["samples"])
            fields = an.posterior_vorticity(P, mcfg, ds, n, int(cfg["seed"]))
            L = 2 * np.pi
            start = (L / 2, L / 2)
            trajs = an.trajectory_ensemble(fields, ds.grid_shape, start, ds.dt)
            an.write_trajectories(out / "trajectories.csv", trajs)
            report["traj"] = {"samples": n, "dispersion": an.ensemble_dispersion(trajs[:, -1])}
    if grid_out is not None:
        w, h = grid_out
        periodic = ds.system != "synthetic"
        Q = grid_coords(w, h, periodic=periodic)
        fq = an.forecast_grid(P, mcfg, ds, mode, coords=Q)
        if not np.isfinite(fq.mean).all():
            raise RuntimeError("non-finite reconstruction on the requested grid")
        write_array(out / "recon_grid.bin", fq.mean, True)
        report["grid_out"] = {"shape": [h, w], "file": "recon_grid.bin", "finite": True}
    write_array(out / "recon.bin", fc.mean, True)
    report["notes"] = notes
    an.write_report(out, "metrics", report)
    _write_manifest(out, "eval", cfg, [cfg["ckpt"], cfg["data"]], [str(out / "metrics.json")],
                    t0)
    print(json.dumps({k: v for k, v in report.items() if k in ("l1",)} | {"notes": notes}))
    return 0


# -- baseline -----------------------------------------------------------------------

def cmd_baseline(args):
    from . import analysis as an

    t0 = time.time()
    cfg = _resolve(args, {})
    ds = load_data(cfg["data"])[0]
    rank = cfg.get("rank", default_rank(ds.system))
    if int(rank) < 1:
        raise UsageError("--rank must be >= 1")
    X = ds.truth if cfg.get("use_truth") else ds.observations
    if X is None:
        raise RuntimeError("dataset has no truth")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = an.exact_dmd(X, int(rank), ds.dt)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    report = {"rank": res.rank, "residual": res.residual,
              "mus": [[z.real, z.imag] for z in res.mus],
              "lambdas": [[z.real, z.imag] for z in res.lambdas]}
    spec = ds.gt_spectrum
    if spec is not None and len(spec.mus) == res.rank:
        err, perm = an.eigen_errors(res.mus, spec.mus)
        report["mu_abs_error"] = err.tolist()
        report["mu_max_abs_error"] = float(err.max())
        report["matching"] = perm.tolist()
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    from .core import write_array
    write_array(out / "dmd_modes.bin", res.modes, True)
    an.write_report(out, "baseline", report)
    _write_manifest(out, "baseline", cfg, [cfg["data"]], [str(out / "baseline.json")], t0)
    print(json.dumps({k: report[k] for k in ("rank", "residual") if k in report}))
    return 0


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval,
            "baseline": cmd_baseline}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (OSError, RuntimeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

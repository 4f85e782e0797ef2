"""Command-line entry point: ``gantrack <subcommand> [--config FILE] [--key value ...]``.

Every subcommand reads an optional JSON config file whose keys are the long
flag names with dashes replaced by underscores.  Precedence is
defaults < config file < flags.  Unknown config keys are rejected.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numerical error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines, dataio, evalsuite, gameopt, lvsys, mixtracker, nets

log = logging.getLogger("gantrack")

SWEEP_GAMMAS = (0.0, 0.33, 1.0)
SUMMARY_VERSION = 1
MODELS = ("CAM", "GMR", "P-MLP", "P-LSTM", "GAN")


class UsageError(Exception):
    """Bad flags or configuration (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _bool(s: str) -> bool:
    low = str(s).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


# Shared key groups: (key, default, type, help)
_LV_KEYS = [
    ("dt", 0.05, float, "integration step"),
    ("T_h", 10, int, "history length in steps"),
    ("T", 40, int, "prediction horizon in steps"),
    ("param_min", 3.0, float, "lower bound of a, b, c, d"),
    ("param_max", 5.0, float, "upper bound of a, b, c, d"),
    ("init_min", 1.0, float, "lower bound of x0, y0"),
    ("init_max", 3.0, float, "upper bound of x0, y0"),
]

COMMANDS: dict[str, dict] = {
    "gen-data": {
        "help": "sample a synthetic dataset and write it with a manifest",
        "keys": [
            ("out", "dataset.json", str, "dataset file to write; manifest goes to <out>.manifest.json"),
            ("count", 200, int, "number of cases"),
            ("seed", 0, int, "random seed"),
            ("system", "lv", str, "lv (Lotka-Volterra) or const_accel (quadratic trajectories)"),
            *_LV_KEYS,
        ],
    },
    "train": {
        "help": "train the conditional GAN (optionally a sweep over gamma = 0.00, 0.33, 1.00)",
        "keys": [
            ("dataset", "dataset.json", str, "dataset file from gen-data"),
            ("out_dir", "run", str, "output directory"),
            ("profile", "full", str, "network profile: full or scaled"),
            ("alpha", 0.01, float, "learning rate"),
            ("gamma", 0.0, float, "consensus coefficient (ignored with --sweep)"),
            ("iterations", 30000, int, "training iterations"),
            ("batch_size", 64, int, "minibatch size"),
            ("log_every", 100, int, "log interval in iterations"),
            ("checkpoint_every", 1000, int, "checkpoint interval (0 = only at the end)"),
            ("val_cases", 20, int, "trailing dataset cases held out for validation MAE"),
            ("val_pairs", 256, int, "maximum validation pairs"),
            ("seed", 0, int, "random seed"),
            ("sweep", False, _bool, "train once per gamma in 0.00, 0.33, 1.00"),
        ],
    },
    "eval": {
        "help": "compare pooled predicted and true state distributions",
        "keys": [
            ("checkpoint", "run/checkpoint.json", str, "GAN checkpoint"),
            ("out_dir", "eval", str, "output directory"),
            ("profile", "", str, "expected network profile (empty = accept any)"),
            ("m", 20, int, "number of parameter draws"),
            ("n", 50, int, "rollouts per draw"),
            ("pool", "terminal", str, "terminal or all"),
            ("oracle", False, _bool, "replace the generator with the exact dynamics"),
            ("seed", 0, int, "random seed"),
            *_LV_KEYS,
        ],
    },
    "track": {
        "help": "mixture particle filter on a held-out case",
        "keys": [
            ("checkpoint", "run/checkpoint.json", str, "GAN checkpoint"),
            ("out_dir", "track", str, "output directory"),
            ("n_particles", 100, int, "particles per component"),
            ("components", 1, int, "mixture components (histories jittered independently)"),
            ("sigma", 0.05, float, "measurement noise standard deviation"),
            ("ess_threshold", 0.5, float, "resample when ESS / N falls below this"),
            ("jitter", 0.01, float, "initial particle jitter"),
            ("seed", 0, int, "random seed"),
            *_LV_KEYS,
        ],
    },
    "baseline": {
        "help": "rollout MAE table over 5 horizons for CAM, GMR, P-MLP, P-LSTM and the GAN",
        "keys": [
            ("dataset", "dataset.json", str, "dataset file from gen-data"),
            ("gan_checkpoint", "run/checkpoint.json", str, "GAN checkpoint"),
            ("out_dir", "baseline", str, "output directory"),
            ("gmr_checkpoint", "", str, "fitted GMR (empty = fit on the training cases)"),
            ("pmlp_checkpoint", "", str, "trained P-MLP (empty = train on the training cases)"),
            ("plstm_checkpoint", "", str, "trained P-LSTM (empty = train on the training cases)"),
            ("eval_cases", 20, int, "trailing dataset cases used for evaluation"),
            ("horizons", "1,2,3,4,5", str, "comma-separated horizons in seconds"),
            ("steps_per_second", 10, int, "steps per horizon second"),
            ("samples", 10, int, "rollouts per case for stochastic models"),
            ("gmr_components", 8, int, "GMR mixture components"),
            ("pnet_alpha", 1e-4, float, "P-net learning rate"),
            ("pnet_iterations", 100000, int, "P-net training iterations"),
            ("pnet_sigma", 0.1, float, "P-net input perturbation std (normalized units)"),
            ("pnet_hidden", 128, int, "P-net hidden width"),
            ("seed", 0, int, "random seed"),
        ],
    },
    "smooth": {
        "help": "constant-acceleration Kalman smoothing of a trajectory CSV",
        "keys": [
            ("input", "tracks.csv", str, "CSV with agent_id,t,x,y[,vx,vy]"),
            ("out", "smoothed.csv", str, "output CSV"),
            ("process_noise", 1.0, float, "jerk spectral density"),
            ("position_noise", 0.25, float, "position measurement variance"),
            ("velocity_noise", 1.0, float, "velocity measurement variance"),
            ("initial_variance", 100.0, float, "initial state variance"),
            ("seed", 0, int, "unused (smoothing is deterministic); accepted for uniformity"),
        ],
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gantrack", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, entry in COMMANDS.items():
        p = sub.add_parser(name, help=entry["help"], description=entry["help"])
        p.add_argument("--config", default=None, help="JSON config file (keys as below, dashes -> underscores)")
        for key, default, typ, text in entry["keys"]:
            shown = "off" if default is False else repr(default)
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ, default=None,
                           metavar=typ.__name__.lstrip("_").upper(), help=f"{text} (default: {shown})")
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """defaults < config file < flags."""
    known = {k: (d, t) for k, d, t, _ in COMMANDS[command]["keys"]}
    cfg = {k: d for k, (d, _) in known.items()}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        for k, v in doc.items():
            try:
                cfg[k] = known[k][1](v)
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {k!r}: {exc}") from None
    for k in known:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _ranges(cfg) -> lvsys.SampleRanges:
    try:
        return lvsys.SampleRanges((cfg["param_min"], cfg["param_max"]), (cfg["init_min"], cfg["init_max"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write_json(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(cfg) -> Path:
    d = Path(cfg["out_dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: dict) -> dict:
    if cfg["system"] == "lv":
        ds = lvsys.sample_dataset(cfg["count"], cfg["seed"], _ranges(cfg), cfg["dt"], cfg["T_h"], cfg["T"])
    elif cfg["system"] == "const_accel":
        ds = lvsys.sample_const_accel_dataset(cfg["count"], cfg["seed"], cfg["dt"], cfg["T_h"], cfg["T"])
    else:
        raise UsageError(f"unknown system {cfg['system']!r}")
    out = ds.save(cfg["out"])
    manifest = {"version": SUMMARY_VERSION, "dataset": str(out), "system": ds.system, "count": len(ds.cases),
                "seed": ds.seed, "dt": ds.dt, "T_h": ds.T_h, "T": ds.T, "ranges": ds.ranges,
                "redraws": ds.redraws, "sha256": hashlib.sha256(out.read_bytes()).hexdigest()}
    _write_json(Path(str(out) + ".manifest.json"), manifest)
    return manifest


def _load_dataset(path) -> lvsys.Dataset:
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return lvsys.Dataset.load(path)


def _split(ds: lvsys.Dataset, held_out: int) -> tuple[list[int], list[int]]:
    n = len(ds.cases)
    if not 0 < held_out < n:
        raise UsageError(f"held-out case count must be in [1, {n - 1}], got {held_out}")
    return list(range(n - held_out)), list(range(n - held_out, n))


def _train_one(cfg, ds, gamma: float, out: Path, tag: str) -> dict:
    train_idx, val_idx = _split(ds, cfg["val_cases"])
    train_pairs = ds.pairs(train_idx)
    val = ds.pairs(val_idx)
    val = val.subset(np.arange(min(cfg["val_pairs"], len(val))))
    try:
        model = nets.GANModel(nets.profile(cfg["profile"]), seed=cfg["seed"])
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    ocfg = gameopt.OptimizerConfig(alpha=cfg["alpha"], gamma=gamma, iterations=cfg["iterations"],
                                   batch_size=cfg["batch_size"], log_every=cfg["log_every"],
                                   checkpoint_every=cfg["checkpoint_every"], seed=cfg["seed"])
    log_path, ckpt = out / f"train_log{tag}.csv", out / f"checkpoint{tag}.json"
    if log_path.exists():
        log_path.unlink()
    tlog = gameopt.train(model, train_pairs, ocfg, val=val, log_path=log_path, checkpoint_path=ckpt)
    its, maes = tlog.curve()
    curve = evalsuite.export_mae_curve(its, maes, out / f"mae_curve{tag}.csv")
    if tlog.diverged:
        raise FloatingPointError(tlog.diagnostic)
    return {"gamma": gamma, "log": str(log_path), "checkpoint": str(ckpt), "curve": str(curve),
            "initial_val_mae": tlog.initial.val_mae, "final_val_mae": tlog.final_val_mae,
            "log_rows": len(tlog.records)}


def cmd_train(cfg: dict) -> dict:
    ds = _load_dataset(cfg["dataset"])
    out = _out_dir(cfg)
    if cfg["sweep"]:
        runs = [_train_one(cfg, ds, g, out, f"_gamma{g:.2f}") for g in SWEEP_GAMMAS]
    else:
        runs = [_train_one(cfg, ds, cfg["gamma"], out, "")]
    summary = {"version": SUMMARY_VERSION, "config": cfg, "runs": runs}
    _write_json(out / "train_summary.json", summary)
    return summary


def _load_gan(path, profile: str = "") -> nets.GANModel:
    model = nets.load_checkpoint(path)
    if getattr(model, "kind", None) != "gan":
        raise nets.CheckpointError(f"{path}: expected a GAN checkpoint, found kind {getattr(model, 'kind', None)!r}")
    if profile:
        try:
            want = nets.profile(profile)
        except (KeyError, ValueError) as exc:
            raise UsageError(str(exc)) from None
        if want != model.cfg:
            raise nets.CheckpointShapeError(f"{path}: checkpoint network does not match profile {profile!r}")
    return model


def cmd_eval(cfg: dict) -> dict:
    ranges = _ranges(cfg)
    if cfg["pool"] not in ("terminal", "all"):
        raise UsageError("pool must be 'terminal' or 'all'")
    if cfg["oracle"]:
        factory, source = evalsuite.LVOraclePolicy, "oracle"
    else:
        factory, source = evalsuite.constant(_load_gan(cfg["checkpoint"], cfg["profile"]).policy()), "generator"
    sums = evalsuite.evaluate_distribution(factory, cfg["m"], cfg["n"], cfg["T"], cfg["seed"], ranges,
                                           cfg["dt"], cfg["T_h"], cfg["pool"])
    out = _out_dir(cfg)
    evalsuite.export_violin_data(sums, out / "violin.csv")
    summary = {"version": SUMMARY_VERSION, "source": source, "m": cfg["m"], "n": cfg["n"], "T": cfg["T"],
               "seed": cfg["seed"], "pool": cfg["pool"], "variables": [s.as_dict() for s in sums]}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_track(cfg: dict) -> dict:
    ranges = _ranges(cfg)
    policy = _load_gan(cfg["checkpoint"]).policy()
    rng = np.random.default_rng(cfg["seed"])
    while True:
        lv = lvsys.sample_config(rng, ranges, cfg["dt"], cfg["T"], cfg["T_h"])
        try:
            traj = lvsys.case_trajectory(lv)
            break
        except lvsys.IntegrationError:
            continue
    model = mixtracker.MeasurementModel.isotropic(cfg["sigma"])
    case = mixtracker.make_case(traj.states, cfg["T_h"], model, rng)
    tcfg = mixtracker.TrackConfig(cfg["n_particles"], cfg["sigma"], cfg["ess_threshold"], cfg["jitter"])
    histories = [case.history] * cfg["components"]
    result = mixtracker.track(policy, histories, case.measurements, tcfg, rng, model)
    open_loop = mixtracker.open_loop_rmse(policy, case, np.random.default_rng([cfg["seed"], 1]))
    out = _out_dir(cfg)
    mixtracker.export_track(result, case, out / "track.csv")
    summary = {"version": SUMMARY_VERSION, "seed": cfg["seed"], "steps": int(len(case.measurements)),
               "n_particles": cfg["n_particles"], "components": cfg["components"], "sigma": cfg["sigma"],
               "tracking_rmse": result.rmse(case.truth), "open_loop_rmse": open_loop,
               "measurement_rmse": evalsuite.rmse(case.measurements, case.truth),
               "within_band_fraction": float(np.mean(result.within_band())),
               "normalization_error": result.normalization_error, "warnings": result.warnings,
               "case": {"params": list(lv.params), "s0": lv.s0.tolist()}}
    _write_json(out / "summary.json", summary)
    return summary


def _horizon_steps(cfg) -> list[tuple[float, int]]:
    try:
        secs = [float(h) for h in str(cfg["horizons"]).split(",") if h.strip()]
    except ValueError:
        raise UsageError(f"bad horizons {cfg['horizons']!r}") from None
    steps = [(h, int(round(h * cfg["steps_per_second"]))) for h in secs]
    if not steps or any(k < 1 for _, k in steps):
        raise UsageError("horizons must map to at least one step each")
    return steps


def _baseline_models(cfg, ds, train_idx, out: Path) -> dict:
    pairs = ds.pairs(train_idx)
    policies = {"CAM": baselines.CAMPolicy()}
    if cfg["gmr_checkpoint"]:
        gmr = nets.load_checkpoint(cfg["gmr_checkpoint"])
    else:
        gmr = baselines.gmr_fit(pairs, K=cfg["gmr_components"], seed=cfg["seed"])
        nets.save_checkpoint(gmr, out / "gmr.json")
    policies["GMR"] = baselines.GMRPolicy(gmr)
    for name, variant, key in (("P-MLP", "mlp", "pmlp_checkpoint"), ("P-LSTM", "lstm", "plstm_checkpoint")):
        if cfg[key]:
            net = nets.load_checkpoint(cfg[key])
        else:
            net = baselines.PerturbedNet(baselines.PNetConfig(variant=variant, steps=ds.T_h + 1,
                                                              hidden=cfg["pnet_hidden"], sigma_in=cfg["pnet_sigma"]),
                                         seed=cfg["seed"])
            baselines.pnet_train(net, pairs, baselines.PNetTrainConfig(alpha=cfg["pnet_alpha"],
                                                                       iterations=cfg["pnet_iterations"],
                                                                       seed=cfg["seed"]))
            nets.save_checkpoint(net, out / f"{variant}.json")
        policies[name] = net
    policies["GAN"] = _load_gan(cfg["gan_checkpoint"]).policy()
    return policies


def baseline_table(policies: dict, ds: lvsys.Dataset, cases, horizons, samples: int, seed: int) -> np.ndarray:
    """MAE (rows: horizons, columns: models in ``policies`` order) of positions at each horizon step."""
    K = max(k for _, k in horizons)
    hist, fut = zip(*(ds.extended(i, K) for i in cases))
    hist, fut = np.asarray(hist), np.asarray(fut)  # (C, T_h+1, d), (C, K+1, d)
    table = np.empty((len(horizons), len(policies)))
    for j, (name, pol) in enumerate(policies.items()):
        reps = 1 if name == "CAM" else samples
        rng = np.random.default_rng([seed, j])
        pred = evalsuite.rollout_batch(pol, np.repeat(hist, reps, axis=0), K, rng)
        truth = np.repeat(fut, reps, axis=0)
        for r, (_, k) in enumerate(horizons):
            table[r, j] = evalsuite.mae(pred[:, k], truth[:, k])
    return table


def cmd_baseline(cfg: dict) -> dict:
    ds = _load_dataset(cfg["dataset"])
    horizons = _horizon_steps(cfg)
    train_idx, eval_idx = _split(ds, cfg["eval_cases"])
    out = _out_dir(cfg)
    policies = _baseline_models(cfg, ds, train_idx, out)
    table = baseline_table(policies, ds, eval_idx, horizons, cfg["samples"], cfg["seed"])
    with open(out / "table.csv", "w") as fh:
        fh.write(",".join(["horizon_s", "steps", *policies]) + "\n")
        for (sec, k), row in zip(horizons, table):
            fh.write(",".join([repr(sec), str(k), *(repr(float(v)) for v in row)]) + "\n")
    summary = {"version": SUMMARY_VERSION, "models": list(policies), "horizons_s": [h for h, _ in horizons],
               "steps": [k for _, k in horizons], "eval_cases": eval_idx, "mae": table.tolist()}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_smooth(cfg: dict) -> dict:
    try:
        ekf = dataio.EKFConfig(cfg["process_noise"], cfg["position_noise"], cfg["velocity_noise"],
                               cfg["initial_variance"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    groups = dataio.ingest_csv(cfg["input"])
    trajs = dataio.smooth_all(groups, ekf)
    dataio.export_smoothed(trajs, cfg["out"])
    return {"agents": len(trajs), "rows": sum(len(t.t) for t in trajs), "out": cfg["out"]}


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "track": cmd_track,
            "baseline": cmd_baseline, "smooth": cmd_smooth}

RUNTIME_ERRORS = (OSError, ValueError, ArithmeticError, np.linalg.LinAlgError, RuntimeError,
                  nets.CheckpointError, lvsys.IntegrationError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        cfg = resolve_config(args.command, args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        result = HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"gantrack: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except RUNTIME_ERRORS as exc:
        print(f"gantrack: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``scoreflow <command> [options]``.

Every command takes ``--config`` (TOML), ``--seed``, ``--out`` and
``--threads`` and writes its artifacts plus ``manifest.json`` into the output
location. Exit codes: 0 success, 2 configuration error, 3 I/O error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import compare_sequences, energy_spectrum
from .field import (Boundary, FrameFormatError, Grid2, Sequence, make_advected_blob_sequence,
                    make_gaussian_mixture_dataset, make_spectral_field, read_sequence,
                    write_sequence)
from .filtering import PmConfig, pm_filter
from .ftle import BUILTIN_FLOWS, FlowError, NoChaoticStretchingError, SequenceFlow, ftle_field, \
    global_lyapunov_time
from .physics import PhysicsCorrConfig, balanced_weights, physics_correct
from .sampling import RolloutError, SamplerConfig, SamplingError, rollout, sample
from .score import ScoreNet, TrainConfig, TrainingDivergedError, load_checkpoint, save_checkpoint, \
    train
from .sde import PRESETS, SdeSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# --- configuration schema ---------------------------------------------------

_num = (int, float)
SCHEMA: dict[str, dict[str, type | tuple]] = {
    "": {"seed": int, "out": str, "threads": int},
    "sde": {"preset": str, "kind": str, "beta_min": _num, "beta_max": _num,
            "sigma_min": _num, "sigma_max": _num, "n_steps": int},
    "model": {"hidden": list, "emb_dim": int, "max_freq": _num, "std_scale": bool},
    "train": {"batch_size": int, "epochs": int, "lr": _num, "beta1": _num, "beta2": _num,
              "eps": _num, "lambda_w": _num, "weighting": str},
    "sampler": {"method": str, "n_steps": int, "n_corr": int, "snr": _num, "n_samples": int},
    "data": {"kind": str, "nx": int, "ny": int, "dx": _num, "dy": _num, "boundary": str,
             "cx": _num, "cy": _num, "n_frames": int, "n_sequences": int, "noise": _num,
             "n_blobs": int, "slope": _num, "k_min": int, "k_max": int, "rms": _num,
             "n_samples": int, "weights": list, "means": list, "stds": list},
    "rollout": {"steps": int, "physics": bool, "filter": bool, "filter_channels": list},
    "physics": {"n_gd": int, "eta_u": _num, "eta_rho": _num, "eta_p": _num, "lambda1": _num,
                "lambda2": _num, "lambda3": _num, "tau_cool": _num, "dtau": _num,
                "balanced": bool},
    "pm": {"gamma": _num, "eta": _num, "epsilon": _num, "n_iters": int},
    "ftle": {"flow": str, "tau0": _num, "dtau": _num, "nx": int, "ny": int, "h_fd": _num,
             "steps": int},
    "paths": {"data": str, "checkpoint": str, "initial": str, "pred": str, "gt": str},
}

# values checked at load time so a typo fails before any work starts
CHOICES: dict[str, tuple] = {
    "sde.preset": tuple(PRESETS),
    "sde.kind": ("vp", "subvp", "ve"),
    "train.weighting": ("variance", "likelihood"),
    "sampler.method": ("em", "pf_ode", "pc"),
    "data.kind": ("blob", "spectral", "mixture"),
    "data.boundary": ("periodic", "replicate"),
}

DEFAULTS: dict = {
    "seed": 0,
    "sde": {"kind": "vp", "beta_min": 0.1, "beta_max": 20.0, "n_steps": 1000},
    "model": {"hidden": [64, 64], "emb_dim": 16, "max_freq": 64.0, "std_scale": False},
    "train": {},
    "sampler": {"method": "em", "n_steps": 1000, "n_corr": 1, "snr": 0.16, "n_samples": 1000},
    "data": {"kind": "blob", "nx": 32, "ny": 16, "dx": 1.0, "dy": 1.0, "boundary": "periodic",
             "cx": 1.0, "cy": 0.0, "n_frames": 20, "n_sequences": 1, "noise": 0.01,
             "n_blobs": 3, "slope": -5.0 / 3.0, "k_min": 1, "k_max": 8, "rms": 1.0,
             "n_samples": 10000, "weights": [0.5, 0.5], "means": [-2.0, 2.0],
             "stds": [0.5, 0.5]},
    "rollout": {"steps": 20, "physics": False, "filter": False},
    "physics": {"balanced": False},
    "pm": {},
    "ftle": {"flow": "double-gyre", "tau0": 0.0, "dtau": 10.0, "nx": 64, "ny": 32,
             "steps": 200},
    "paths": {},
}


def _type_name(t) -> str:
    if isinstance(t, tuple):
        return "number"
    return t.__name__


def validate_config(raw: dict) -> dict:
    """Check section and key names and value types; raise ``ConfigError`` naming the key."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in SCHEMA or key == "":
                raise ConfigError(f"unknown config section [{key}]")
            section, items, prefix = SCHEMA[key], value, f"{key}."
        else:
            section, items, prefix = SCHEMA[""], {key: value}, ""
        for k, v in items.items():
            if k not in section:
                raise ConfigError(f"unknown config key '{prefix}{k}'")
            want = section[k]
            ok = isinstance(v, want) and not (isinstance(v, bool) and want is not bool)
            if not ok:
                raise ConfigError(f"config key '{prefix}{k}' must be {_type_name(want)}, "
                                  f"got {type(v).__name__}")
            allowed = CHOICES.get(f"{prefix}{k}")
            if allowed is not None and v not in allowed:
                raise ConfigError(f"config key '{prefix}{k}': {v!r} is not one of "
                                  f"{', '.join(allowed)}")
    return raw


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return validate_config(raw)


def merge_config(raw: dict) -> dict:
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULTS.items()}
    for key, value in raw.items():
        if isinstance(value, dict):
            if key == "sde" and ("preset" in value or "kind" in value):
                cfg["sde"] = {}
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def sde_from_config(c: dict) -> SdeSpec:
    c = dict(c)
    try:
        if "preset" in c:
            name = c.pop("preset")
            if name not in PRESETS:
                raise ConfigError(f"config key 'sde.preset': unknown preset {name!r}")
            base = PRESETS[name].to_dict()
            base.update(c)
            return SdeSpec.from_dict(base)
        return SdeSpec.from_dict(c)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"config section [sde]: {exc}") from exc


def _build(section: str, cls, values: dict, **extra):
    try:
        return cls(**values, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config section [{section}]: {exc}") from exc


# --- helpers ----------------------------------------------------------------


def version_string() -> str:
    """Package version, suffixed with ``git describe`` output when available."""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        desc = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{__version__}+{desc}" if desc else __version__


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, (np.floating, np.integer)):
        return _jsonable(obj.item())
    return obj


def write_manifest(path, command: str, cfg: dict, seed: int, wall: dict, extra=None) -> None:
    doc = {"command": command, "version": version_string(), "seed": seed,
           "config": cfg, "wall_time": wall}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def _grid(d: dict) -> Grid2:
    try:
        return Grid2(d["nx"], d["ny"], float(d["dx"]), float(d["dy"]), Boundary(d["boundary"]))
    except ValueError as exc:
        raise ConfigError(f"config section [data]: {exc}") from exc


def _read_sequences(path) -> list[Sequence]:
    """A sequence directory, or a directory of ``seq_*`` sequence directories."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p} does not exist")
    subs = sorted(d for d in p.glob("seq_*") if d.is_dir())
    return [read_sequence(d) for d in subs] if subs else [read_sequence(p)]


def _resolve(args_value, cfg: dict, key: str, what: str) -> str:
    value = args_value or cfg["paths"].get(key)
    if not value:
        raise ConfigError(f"missing {what}: pass it on the command line or set 'paths.{key}'")
    return value


# --- commands ---------------------------------------------------------------


def cmd_gen(args, cfg, out: Path, seed: int) -> dict:
    d = cfg["data"]
    kind = d["kind"]
    out.mkdir(parents=True, exist_ok=True)
    if kind == "blob":
        grid = _grid(d)
        for i in range(d["n_sequences"]):
            seq = make_advected_blob_sequence(grid, (d["cx"], d["cy"]), d["n_frames"], seed + i,
                                              d["noise"], d["n_blobs"])
            write_sequence(seq, out / f"seq_{i:03d}")
        return {"sequences": d["n_sequences"]}
    if kind == "spectral":
        grid = _grid(d)
        frame = make_spectral_field(grid, d["slope"], d["k_min"], d["k_max"], seed, d["rms"])
        write_sequence(Sequence([frame], {"generator": "spectral"}), out / "seq_000")
        return {"sequences": 1}
    if kind == "mixture":
        x = make_gaussian_mixture_dataset(d["weights"], d["means"], d["stds"], d["n_samples"], seed)
        np.savetxt(out / "samples.csv", x, fmt="%.17g", header="x", comments="")
        return {"samples": len(x)}
    raise ConfigError(f"config key 'data.kind': unknown generator {kind!r}")


def _load_training_data(path):
    p = Path(path)
    if p.is_file():
        return np.loadtxt(p, skiprows=1, ndmin=1)
    if (p / "samples.csv").is_file():
        return np.loadtxt(p / "samples.csv", skiprows=1, ndmin=1)
    return _read_sequences(p)


def cmd_train(args, cfg, out: Path, seed: int) -> dict:
    spec = sde_from_config(cfg["sde"])
    tcfg = _build("train", TrainConfig, cfg["train"], seed=seed)
    data = _load_training_data(_resolve(args.data, cfg, "data", "training data path"))
    m = cfg["model"]
    if isinstance(data, np.ndarray):
        dim = 1 if data.ndim == 1 else data.shape[1]
        cond = 0
    else:
        dim = cond = data[0][0].flat().size
    net = _build("model", ScoreNet, {}, data_dim=dim, cond_dim=cond, hidden=tuple(m["hidden"]),
                 emb_dim=m["emb_dim"], seed=seed, max_freq=m["max_freq"],
                 std_scale=spec if m["std_scale"] else None)
    net, hist = train(net, spec, data, tcfg)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, spec, out / "model.snet")
    hist.write_csv(out / "history.csv")
    return {"final_loss": hist.loss[-1], "n_params": net.n_params}


def _sampler_cfg(cfg, seed) -> SamplerConfig:
    s = {k: v for k, v in cfg["sampler"].items() if k != "n_samples"}
    return _build("sampler", SamplerConfig, s, seed=seed)


def cmd_sample(args, cfg, out: Path, seed: int) -> dict:
    net, spec = load_checkpoint(_resolve(args.checkpoint, cfg, "checkpoint", "checkpoint path"))
    if net.cond_dim:
        raise ConfigError("conditional checkpoints are sampled with 'rollout'")
    scfg = _sampler_cfg(cfg, seed)
    n = args.n or cfg["sampler"]["n_samples"]
    x = sample(net.score_fn(), spec, (n, net.data_dim), scfg)
    out.mkdir(parents=True, exist_ok=True)
    header = ",".join(f"x{i}" for i in range(net.data_dim)) if net.data_dim > 1 else "x"
    np.savetxt(out / "samples.csv", x, delimiter=",", fmt="%.17g", header=header, comments="")
    return {"samples": n}


def cmd_rollout(args, cfg, out: Path, seed: int) -> dict:
    net, spec = load_checkpoint(_resolve(args.checkpoint, cfg, "checkpoint", "checkpoint path"))
    init_seq = _read_sequences(_resolve(args.initial, cfg, "initial", "initial sequence"))[0]
    steps = cfg["rollout"]["steps"] if args.steps is None else args.steps
    scfg = _sampler_cfg(cfg, seed)
    hooks, gd_log = [], []
    if cfg["rollout"]["filter"]:
        pcfg = _build("pm", PmConfig, cfg["pm"])
        chans = cfg["rollout"].get("filter_channels")
        hooks.append(lambda f, prev: pm_filter(f, chans, pcfg))
    if cfg["rollout"]["physics"]:
        phys = {k: v for k, v in cfg["physics"].items() if k != "balanced"}
        base = _build("physics", PhysicsCorrConfig, phys)

        def correct(frame, prev):
            c = balanced_weights(frame, prev, base) if cfg["physics"]["balanced"] else base
            res = physics_correct(frame, prev, c)
            gd_log.append({"tau": frame.tau, "l_gd": res.history, "halvings": res.halvings})
            return res.frame
        hooks.append(correct)
    records: list = []
    try:
        seq = rollout(net, spec, init_seq[0], steps, scfg, hooks, records, init_seq.metadata)
    except RolloutError as exc:
        write_sequence(exc.partial, out)
        raise
    write_sequence(seq, out)
    extra = {"steps": steps}
    if gd_log:
        extra["physics"] = gd_log
    return {"_timing": [r["seconds"] for r in records], **extra}


def cmd_metrics(args, cfg, out: Path, seed: int) -> dict:
    pred = read_sequence(_resolve(args.pred, cfg, "pred", "predicted sequence"))
    gt = read_sequence(_resolve(args.gt, cfg, "gt", "ground-truth sequence"))
    rep = compare_sequences(pred, gt)
    out.mkdir(parents=True, exist_ok=True)
    rep.write(out / "metrics.txt")
    return {"metrics": rep.as_dict()}


def cmd_spectrum(args, cfg, out: Path, seed: int) -> dict:
    seq = read_sequence(_resolve(args.seq, cfg, "data", "sequence directory"))
    res = energy_spectrum(seq)
    out.mkdir(parents=True, exist_ok=True)
    res.write_csv(out / "spectrum.csv")
    res.write_dat(out / "spectrum.dat")
    return {"shells": int(res.shells.size)}


def cmd_filter(args, cfg, out: Path, seed: int) -> dict:
    seq = read_sequence(_resolve(args.seq, cfg, "data", "sequence directory"))
    pm = dict(cfg["pm"])
    for key, val in (("gamma", args.gamma), ("eta", args.eta), ("n_iters", args.iters)):
        if val is not None:
            pm[key] = val
    pcfg = _build("pm", PmConfig, pm)
    chans = args.channels.split(",") if args.channels else None
    try:
        frames = [pm_filter(f, chans, pcfg) for f in seq]
    except KeyError as exc:
        raise ConfigError(f"--channels: {exc.args[0]}") from exc
    write_sequence(Sequence(frames, seq.metadata), out)
    cfg["pm"] = pm
    return {"channels": chans or seq.names}


def cmd_ftle(args, cfg, out: Path, seed: int) -> dict:
    f = dict(cfg["ftle"])
    for key, val in (("flow", args.flow), ("tau0", args.tau0), ("dtau", args.dtau)):
        if val is not None:
            f[key] = val
    if args.grid:
        f["nx"], f["ny"] = args.grid
    cfg["ftle"] = f
    name = f["flow"]
    if name in BUILTIN_FLOWS:
        flow = BUILTIN_FLOWS[name]()
        (x0, x1), (y0, y1) = ((0.0, 2.0), (0.0, 1.0)) if name == "double-gyre" else \
            ((-1.0, 1.0), (-1.0, 1.0))
        xs, ys = np.linspace(x0, x1, f["nx"]), np.linspace(y0, y1, f["ny"])
    elif Path(name).is_dir():
        seq = read_sequence(name)
        flow = SequenceFlow(seq)
        g = seq.grid
        xs = np.linspace(0, (g.nx - 1) * g.dx, f["nx"])
        ys = np.linspace(0, (g.ny - 1) * g.dy, f["ny"])
    else:
        raise ConfigError(f"--flow: {name!r} is neither a builtin ({sorted(BUILTIN_FLOWS)}) "
                          f"nor a sequence directory")
    spacing = min(np.diff(xs).min() if xs.size > 1 else 1.0, np.diff(ys).min() if ys.size > 1 else 1.0)
    h_fd = f.get("h_fd", 0.1 * spacing)
    if not 0 < h_fd < spacing:
        raise ConfigError("config key 'ftle.h_fd' must be positive and below the seed spacing")
    field = ftle_field(flow, xs, ys, f["tau0"], f["dtau"], h_fd, f["steps"])
    out.parent.mkdir(parents=True, exist_ok=True)
    field.write_csv(out)
    try:
        tl = global_lyapunov_time(field)
    except NoChaoticStretchingError:
        tl = math.inf
    return {"global_lyapunov_time": tl, "max_chi": float(np.nanmax(field.chi))}


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "sample": cmd_sample, "rollout": cmd_rollout,
            "metrics": cmd_metrics, "spectrum": cmd_spectrum, "filter": cmd_filter,
            "ftle": cmd_ftle}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (a CSV path for 'ftle')")
    common.add_argument("--threads", type=int, help="cap on BLAS/OpenMP threads")
    p = argparse.ArgumentParser(prog="scoreflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    s = sub.add_parser("train", parents=[common], help="train a score network")
    s.add_argument("data", nargs="?", help="samples CSV or sequence directory")
    s = sub.add_parser("sample", parents=[common], help="draw unconditional samples")
    s.add_argument("checkpoint", nargs="?")
    s.add_argument("-n", type=int, help="number of samples")
    s = sub.add_parser("rollout", parents=[common], help="autoregressive rollout")
    s.add_argument("checkpoint", nargs="?")
    s.add_argument("initial", nargs="?", help="sequence whose first frame seeds the rollout")
    s.add_argument("--steps", type=int)
    s = sub.add_parser("metrics", parents=[common], help="compare two sequences")
    s.add_argument("pred", nargs="?")
    s.add_argument("gt", nargs="?")
    s = sub.add_parser("spectrum", parents=[common], help="energy spectrum of a sequence")
    s.add_argument("seq", nargs="?")
    s = sub.add_parser("filter", parents=[common], help="Perona-Malik filter a sequence")
    s.add_argument("seq", nargs="?")
    s.add_argument("--gamma", type=float)
    s.add_argument("--eta", type=float)
    s.add_argument("--iters", type=int)
    s.add_argument("--channels", help="comma-separated channel names")
    s = sub.add_parser("ftle", parents=[common], help="FTLE field of a flow")
    s.add_argument("--flow", help=f"builtin flow ({', '.join(BUILTIN_FLOWS)}) or sequence dir")
    s.add_argument("--tau0", type=float)
    s.add_argument("--dtau", type=float)
    s.add_argument("--grid", type=int, nargs=2, metavar=("NX", "NY"))
    return p


def _threads(args, cfg) -> int | None:
    if args.threads is not None:
        return args.threads
    if "threads" in cfg:
        return cfg["threads"]
    env = os.environ.get("SCOREFLOW_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"SCOREFLOW_THREADS must be an integer, got {env!r}") from None
    return None


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = load_config(args.config)
        cfg = merge_config(raw)
        seed = cfg["seed"] if args.seed is None else args.seed
        if seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        cfg["seed"] = seed
        default_out = "ftle.csv" if args.command == "ftle" else f"scoreflow-{args.command}"
        out = Path(args.out or cfg.get("out") or default_out)
        threads = _threads(args, cfg)
        if threads is not None and threads < 1:
            raise ConfigError("threads must be >= 1")
        start = time.perf_counter()
        if threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=threads):
                info = COMMANDS[args.command](args, cfg, out, seed)
        else:
            info = COMMANDS[args.command](args, cfg, out, seed)
        wall = {"total": time.perf_counter() - start}
        timing = info.pop("_timing", None)
        if timing is not None:
            wall["per_step"] = timing
        mpath = out.with_suffix(".manifest.json") if args.command == "ftle" else out / "manifest.json"
        write_manifest(mpath, args.command, cfg, seed, wall, info)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FrameFormatError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SamplingError, RolloutError, TrainingDivergedError, FlowError,
            FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()

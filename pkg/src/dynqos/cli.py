"""Command-line entry point: ``dynqos {synth,train,eval,sweep,ablate}``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .data import DataError, generate_synthetic, load_dataset, normalize_values, save_dataset, split
from .evaluation import (
    ABLATION_VARIANTS,
    ablation_configs,
    evaluate,
    run_once,
    sweep,
    write_ablation_csv,
    write_json,
)
from .model import DivergenceError, load_checkpoint, save_checkpoint
from .tensor_core import ShapeError
from .train import ConfigError, TrainConfig, fit, write_history_csv

log = logging.getLogger("dynqos")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

# run options that live next to the model hyperparameters in config files
RUN_DEFAULTS = {"train_fraction": 0.1, "normalize": False}


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_config_file(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def resolve_config(args: argparse.Namespace) -> tuple[TrainConfig, dict]:
    """Defaults, then the config file, then explicit flags."""
    merged: dict = {}
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    for f in dataclasses.fields(TrainConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            merged[f.name] = flag
    run = dict(RUN_DEFAULTS)
    for key in RUN_DEFAULTS:
        if key in merged:
            run[key] = merged.pop(key)
        if getattr(args, key, None) is not None:
            run[key] = getattr(args, key)
    try:
        run["train_fraction"] = float(run["train_fraction"])
    except ValueError:
        raise ConfigError(f"bad train_fraction: {run['train_fraction']!r}") from None
    run["normalize"] = _parse_bool(run["normalize"])
    config = TrainConfig.from_dict(merged)
    config.validate()
    return config, run


def add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and training (override --config)")
    g.add_argument("--config", help="key = value file with any of the options below")
    g.add_argument("--d", type=int, help="latent dimension (default 32)")
    g.add_argument("--L", type=int, help="propagation layers (default 3)")
    g.add_argument("--K", type=int, help="temporal window radius, 2K+1 <= slices (default 2)")
    g.add_argument("--pooling", choices=("mean", "sum", "concatenation"), help="layer pooling (default mean)")
    g.add_argument("--tau", type=float, help="regularization coefficient (default 0.01)")
    g.add_argument("--learning-rate", dest="learning_rate", type=float, help="Adam step size (default 0.001)")
    g.add_argument("--max-epochs", dest="max_epochs", type=int, help="epoch budget (default 1000)")
    g.add_argument("--patience", type=int, help="early-stopping patience in epochs (default 30)")
    g.add_argument("--seed", type=int, help="seed for the split, validation carve and initialization (default 0)")
    g.add_argument("--adjacency-mode", dest="adjacency_mode", choices=("binary", "weighted"))
    g.add_argument("--val-fraction", dest="val_fraction", type=float,
                   help="share of training entries held out for early stopping (default 0.1)")
    g.add_argument("--train-fraction", dest="train_fraction", type=float,
                   help="share of observed entries used for training (default 0.1)")
    g.add_argument("--normalize", action="store_const", const=True, default=None,
                   help="min-max scale values to [0, 10] before splitting")


def load_and_split(path: str, config: TrainConfig, run: dict):
    tensor = load_dataset(path)
    if run["normalize"]:
        tensor = normalize_values(tensor)
    config.validate(tensor.dims[2])
    return tensor, split(tensor, run["train_fraction"], config.seed)


def manifest(command: str, argv: list[str], inputs: list[str], outputs: list[Path], **extra) -> dict:
    return {
        "tool": "dynqos",
        "tool_version": __version__,
        "command": command,
        "argv": argv,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": sorted(str(p) for p in outputs),
        **extra,
    }


# -- commands -----------------------------------------------------------------


def cmd_synth(args, argv) -> int:
    t0 = time.perf_counter()
    tensor = generate_synthetic(
        args.users, args.services, args.slices, args.rank,
        temporal_smoothness=args.smoothness, noise_std=args.noise, density=args.density,
        seed=args.seed, scale=args.scale,
    )
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(tensor, out)
    params = {k: getattr(args, k) for k in
              ("users", "services", "slices", "rank", "smoothness", "noise", "density", "seed", "scale")}
    write_json(manifest("synth", argv, [], [out], seed=args.seed, parameters=params,
                        entries=len(tensor), wall_time=time.perf_counter() - t0),
               out.with_name(out.name + ".manifest.json"))
    print(f"wrote {len(tensor)} entries with dims {tensor.dims} to {out}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    t0 = time.perf_counter()
    config, run = resolve_config(args)
    tensor, sp = load_and_split(args.data, config, run)
    result = fit(config, sp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = result.checkpoint()
    ckpt.extra.update(split={"train_fraction": run["train_fraction"], "seed": config.seed, "normalize": run["normalize"]})
    paths = [out / "checkpoint.npz", out / "history.csv"]
    save_checkpoint(ckpt, paths[0])
    write_history_csv(result.history, paths[1])
    write_json(manifest("train", argv, [args.data], paths, seed=config.seed, config=config.to_dict(), run=run,
                        epochs_run=len(result.history), best_epoch=result.state.best_epoch,
                        stopped_early=result.stopped_early, wall_time=time.perf_counter() - t0),
               out / "manifest.json")
    best = result.history[result.state.best_epoch - 1]
    print(f"trained {len(result.history)} epochs; best epoch {result.state.best_epoch} "
          f"(train RMSE {best['train_rmse']:.4f}, val RMSE {best['val_rmse']:.4f}); outputs in {out}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    t0 = time.perf_counter()
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except (ValueError, KeyError) as exc:
        raise DataError(f"{args.checkpoint}: unreadable checkpoint ({exc})") from None
    saved = (ckpt.extra or {}).get("split", {})
    fraction = args.train_fraction if args.train_fraction is not None else saved.get("train_fraction", RUN_DEFAULTS["train_fraction"])
    seed = args.seed if args.seed is not None else saved.get("seed", ckpt.config.get("seed", 0))
    normalize = args.normalize if args.normalize is not None else saved.get("normalize", False)
    tensor = load_dataset(args.data)
    if tuple(tensor.dims) != tuple(ckpt.dims):
        raise DataError(f"dimension mismatch: checkpoint {tuple(ckpt.dims)} vs dataset {tensor.dims}")
    if normalize:
        tensor = normalize_values(tensor)
    report = evaluate(ckpt, split(tensor, fraction, seed).test)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = report.to_json()
    payload["split"] = {"train_fraction": fraction, "seed": seed, "normalize": normalize}
    write_json(payload, out)
    write_json(manifest("eval", argv, [args.checkpoint, args.data], [out], seed=seed,
                        wall_time=time.perf_counter() - t0),
               out.with_name(out.stem + ".manifest.json"))
    print(f"RMSE {report.rmse:.6f}  MAE {report.mae:.6f}  over {report.entry_count} test entries")
    return EXIT_OK


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def cmd_sweep(args, argv) -> int:
    t0 = time.perf_counter()
    config, run = resolve_config(args)
    tensor = load_dataset(args.data)
    if run["normalize"]:
        tensor = normalize_values(tensor)
    sp = split(tensor, run["train_fraction"], config.seed)
    values, seeds = _parse_ints(args.values), _parse_ints(args.seeds or str(config.seed))
    result = sweep(config, args.axis, values, seeds, sp, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [out / f"sweep_{args.axis}.csv"]
    result.write_csv(outputs[0])
    for row in result.rows:
        if row.ok:
            path = out / "runs" / f"{args.axis}{row.value}_seed{row.seed}" / "metrics.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            write_json(row.report.to_json(), path)
            outputs.append(path)
    failures = [{"value": r.value, "seed": r.seed, "error": r.error} for r in result.rows if not r.ok]
    write_json(manifest("sweep", argv, [args.data], outputs, seed=config.seed, config=config.to_dict(), run=run,
                        axis=args.axis, values=values, seeds=seeds, failures=failures,
                        summary={str(k): v for k, v in result.summary().items()},
                        wall_time=time.perf_counter() - t0),
               out / "manifest.json")
    for v, s in result.summary().items():
        if s["runs"]:
            print(f"{args.axis}={v}: RMSE {s['rmse_mean']:.4f} ± {s['rmse_std']:.4f}  "
                  f"MAE {s['mae_mean']:.4f} ± {s['mae_std']:.4f}  ({s['runs']} runs)")
    if failures:
        print(f"warning: {len(failures)} run(s) failed; see {out / 'manifest.json'}", file=sys.stderr)
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    t0 = time.perf_counter()
    config, run = resolve_config(args)
    tensor, sp = load_and_split(args.data, config, run)
    seeds = _parse_ints(args.seeds or str(config.seed))
    by_seed = {}
    out = Path(args.out)
    outputs = [out / "ablation.csv"]
    for seed in seeds:
        by_seed[seed] = {}
        for name, cfg in ablation_configs(dataclasses.replace(config, seed=seed)).items():
            report = run_once(cfg, sp)
            by_seed[seed][name] = report
            path = out / "runs" / f"{name.replace('/', '_').replace('&', 'and')}_seed{seed}" / "metrics.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            write_json(report.to_json(), path)
            outputs.append(path)
    write_ablation_csv(by_seed, outputs[0])
    write_json(manifest("ablate", argv, [args.data], outputs, seed=config.seed, config=config.to_dict(), run=run,
                        seeds=seeds, wall_time=time.perf_counter() - t0),
               out / "manifest.json")
    for name in ABLATION_VARIANTS:
        rm = sum(by_seed[s][name].rmse for s in seeds) / len(seeds)
        ma = sum(by_seed[s][name].mae for s in seeds) / len(seeds)
        print(f"{name:12s} RMSE {rm:.4f}  MAE {ma:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynqos", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic low-rank dynamic QoS tensor")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--services", type=int, required=True)
    p.add_argument("--slices", type=int, required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--smoothness", type=float, default=0.95, help="AR(1) coefficient of the factor walk")
    p.add_argument("--noise", type=float, default=0.1, help="Gaussian noise standard deviation")
    p.add_argument("--density", type=float, default=0.3, help="fraction of cells observed")
    p.add_argument("--scale", type=float, default=5.0, help="typical QoS value")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a model and write checkpoint, history and manifest")
    p.add_argument("--data", required=True, help="triples file")
    p.add_argument("-o", "--out", default="run", help="output directory")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out RMSE/MAE of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--out", default="metrics.json")
    p.add_argument("--train-fraction", dest="train_fraction", type=float,
                   help="override the split recorded in the checkpoint")
    p.add_argument("--seed", type=int, help="override the split seed recorded in the checkpoint")
    p.add_argument("--normalize", action="store_const", const=True, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train across values of L or K")
    p.add_argument("--data", required=True)
    p.add_argument("--axis", choices=("L", "K"), required=True)
    p.add_argument("--values", required=True, help="comma-separated, e.g. 1,2,3")
    p.add_argument("--seeds", help="comma-separated training seeds (default: --seed)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("-o", "--out", default="sweep", help="output directory")
    add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="full model vs. K=0 vs. L=0 on one split")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", help="comma-separated training seeds (default: --seed)")
    p.add_argument("-o", "--out", default="ablation", help="output directory")
    add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

"""``fluxfl`` command line: gen-data, train, eval, sweep, verify.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .. import __version__
from ..datagen import IdxParseError, load_federation, save_federation
from ..federation import ExperimentConfig, check_compatible, evaluate, run_experiment
from ..numcore import ConfigurationError
from . import io
from .config import RunManifest, apply_overrides, config_hash, federation_for, load_config, read_json
from .properties import SUITES, run_suites
from .sweep import SweepSpec, metrics_row, run_sweep

log = logging.getLogger("fluxfl")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _setup_logging() -> None:
    level_name = os.environ.get("FLUX_FED_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _overrides(args) -> dict:
    return {"mode": args.mode, "seed": args.seed, "dp_epsilon": args.dp_epsilon, "dbscan_scale": args.scale}


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigurationError("config: --config is required")
    return load_config(args.config, **_overrides(args))


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigurationError("out: --out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    config = _config(args)
    out = _out_dir(args)
    fed = federation_for(config)
    save_federation(fed, out, {"config_hash": config_hash(config)})
    print(f"wrote {len(fed.clients)} client files and {len(fed.test_clients)} test files to {out}")
    return EXIT_OK


def _federation(args, config: ExperimentConfig):
    if args.data:
        fed = load_federation(args.data)
        check_compatible(config, fed)
        return fed
    return federation_for(config)


def cmd_train(args) -> int:
    config = _config(args)
    out = _out_dir(args)
    fed = _federation(args, config)
    digest = config_hash(config)
    manifest = RunManifest(digest)
    rounds_path = out / "rounds.jsonl"
    result = run_experiment(config, fed, args.threads)
    io.write_round_log(rounds_path, result.logs)
    run_id = digest[:12]
    row = metrics_row(run_id, config, result)
    io.write_csv(out / "metrics.csv", io.METRICS_COLUMNS, [row])
    io.save_state(result.state, out)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    manifest.outputs = {"round_log": "rounds.jsonl", "metrics": "metrics.csv", "state": "state.npz",
                        "state_meta": "state.json", "config": "config.json"}
    manifest.finish()
    manifest.write(out / "manifest.json")
    print(f"run {run_id}: M_found={result.M_found} known_assoc_acc={io.format_value(result.known_assoc_acc)} "
          f"test_phase_acc={io.format_value(result.test_phase_acc)} L/p={result.descriptor_ratio:.3e}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.out:
        raise ConfigurationError("out: --out must point at a training run directory")
    run = Path(args.out)
    if args.config:
        config = _config(args)
    else:
        config = ExperimentConfig.from_dict(apply_overrides(read_json(run / "config.json"), **_overrides(args)))
    state = io.load_state(run)
    fed = _federation(args, config)
    known, test_phase, assignments = evaluate(config, state, fed)
    row = {
        "run_id": config_hash(config)[:12], "mode": config.mode.value, "shift_type": config.shift_type.value,
        "level": config.level, "seed": config.seed, "known_assoc_acc": known, "test_phase_acc": test_phase,
        "M_found": state.cluster_state.M if state.triggered else 1, "M_true": fed.num_distributions,
        "wall_time_ms": None,
    }
    io.write_csv(run / "eval.csv", io.METRICS_COLUMNS, [row])
    print(f"known_assoc_acc={io.format_value(known)} test_phase_acc={io.format_value(test_phase)} "
          f"assignments={assignments}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.config:
        raise ConfigurationError("config: --config is required")
    data = read_json(args.config)
    base = apply_overrides(data.get("base", {}), **{k: v for k, v in _overrides(args).items()
                                                     if k not in ("mode", "seed")})
    grid = dict(data, base=base)
    if args.mode:
        grid["modes"] = [args.mode]
    if args.seed is not None:
        grid["seeds"] = [args.seed]
    spec = SweepSpec.from_dict(grid)
    out = _out_dir(args)
    summary = run_sweep(spec, out, args.threads)
    for cell in summary:
        print(f"{cell['status']:6s} {cell['mode']} {cell['shift_type']} level={cell['level']} "
              f"known={io.format_value(cell['known_assoc_mean'])} runs={cell['n_runs']}")
    if all(c["status"] == "failed" for c in summary):
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_verify(args) -> int:
    selector = args.selector
    if selector != "all" and selector not in SUITES:
        print(f"error: unknown property suite {selector!r} (choose from all, {', '.join(SUITES)})",
              file=sys.stderr)
        return EXIT_USAGE
    results = run_suites(selector)
    for r in results:
        print(r.line())
        for note in r.notes:
            print(f"    {note}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fluxfl", description="Clustered federated learning simulator.")
    parser.add_argument("--version", action="version", version=f"fluxfl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="experiment config (JSON)")
        if data:
            p.add_argument("--data", help="federation directory written by gen-data")
        p.add_argument("--out", help="output directory")
        p.add_argument("--mode", choices=["fedavg", "flux", "flux-prior"])
        p.add_argument("--seed", type=int)
        p.add_argument("--dp-epsilon", type=float, dest="dp_epsilon")
        p.add_argument("--scale", type=float, help="DBSCAN epsilon multiplier")
        p.add_argument("--threads", type=int, default=1, help="client worker threads")

    common(sub.add_parser("gen-data", help="generate and serialise a synthetic federation"), data=False)
    common(sub.add_parser("train", help="run one experiment"))
    common(sub.add_parser("eval", help="re-evaluate a trained run on test clients"))
    common(sub.add_parser("sweep", help="run a grid of experiments"), data=False)
    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("selector", nargs="?", default="all", help=f"all or one of: {', '.join(SUITES)}")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "verify": cmd_verify}


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) is not None and getattr(args, "threads", 1) < 1:
        print("error: threads: must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, IdxParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``rcnf <command> [flags]``.

Commands
  encode-tasks   optimize the spherical task codebook
  gen-data       write a synthetic episode set plus manifest
  train          fit the conditional flow on nominal episodes
  calibrate      per-task conformal threshold profiles
  score          batch anomaly scores for every window of a dataset
  eval           AUC / AP benchmark report and score curves
  monitor        stream frames through the live monitor, write a verdict log

Exit codes: 0 success, 2 validation error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .artifacts import dumps_json, write_json
from .config import ABLATIONS, RunConfig, load_config_file, resolve_config
from .const import (
    ALL_EPISODE_KINDS,
    ANOMALY_KINDS,
    ANOMALY_NONE,
    DOMAIN,
    EXIT_OK,
    EXIT_RUNTIME_ERROR,
    EXIT_VALIDATION_ERROR,
)
from .dataset import (
    RobotStateNormalizer,
    load_episodes,
    nominal_windows,
    read_manifest,
    save_episode,
    stack_windows,
    write_manifest,
)
from .exceptions import ConfigError, RCNFError, RCNFRuntimeError, RCNFValidationError
from .flow import RCNFlow, load_checkpoint, save_checkpoint
from .metrics import evaluate_benchmark, save_bench_report, score_episode, write_score_curves
from .monitor import FrameMonitor, VerdictLog, calibrate_all, load_profiles, save_profiles, summarize_latency
from .scene_sim import generate_episode
from .seeding import derive_seed
from .stream_monitor import RCNFStreamMonitor, async_frame_source, iter_frame_records, stdin_source
from .task_codec import load_codebook, optimize_codebook, save_codebook
from .trainer import save_train_report, train

_LOGGER = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


# ─────────────────────────────────────────────
# Shared helpers
# ─────────────────────────────────────────────

def _task_ids(count: int) -> list[str]:
    return [f"task_{i:02d}" for i in range(count)]


def _require_path(config: RunConfig, key: str, flag: str) -> Path:
    value = config.paths.get(key)
    if not value:
        raise ConfigError(f"{flag} is required")
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"{flag} {path} does not exist")
    return path


def _output_path(config: RunConfig, key: str, flag: str, force: bool) -> Path:
    value = config.paths.get(key)
    if not value:
        raise ConfigError(f"{flag} is required")
    path = Path(value)
    if path.exists() and not force:
        raise ConfigError(f"{path} already exists (use --force to overwrite)")
    return path


def _echo(config: RunConfig, command: str) -> dict:
    """Config record stored in every artifact the command writes."""
    return {"command": command, "config": config.to_dict()}


def _check_manifest_dims(manifest: dict, config: RunConfig) -> None:
    for key in ("N", "J"):
        if manifest.get(key) != config.dims[key]:
            raise ConfigError(
                f"dataset was generated with {key}={manifest.get(key)}, config has {key}={config.dims[key]}"
            )


def _check_model_dims(model: RCNFlow, config: RunConfig) -> None:
    flow = model.config
    for key, value in (("T", flow.T), ("N", flow.N), ("J", flow.joints)):
        if config.dims[key] != value:
            raise ConfigError(f"checkpoint has {key}={value}, config has {key}={config.dims[key]}")


# ─────────────────────────────────────────────
# Commands
# ─────────────────────────────────────────────

def cmd_encode_tasks(config: RunConfig, args: argparse.Namespace) -> dict:
    out = _output_path(config, "codebook", "--out", args.force)
    dims = config.dims
    codebook = optimize_codebook(
        dims["M"], dims["T"], dims["R"], derive_seed(config.seed, "codebook"), _task_ids(dims["M"])
    )
    save_codebook(codebook, out, force=args.force, extra=_echo(config, "encode-tasks"))
    return {
        "codebook": str(out),
        "tasks": len(codebook),
        "min_pairwise_angle_deg": codebook.min_pairwise_angle,
    }


def _expand_kinds(kinds: Sequence[str] | None) -> list[str]:
    expanded: list[str] = []
    for kind in kinds or [ANOMALY_NONE]:
        for item in ANOMALY_KINDS if kind == "all" else [kind]:
            if item not in expanded:
                expanded.append(item)
    return expanded


def cmd_gen_data(config: RunConfig, args: argparse.Namespace) -> dict:
    if not config.paths.get("data_dir"):
        raise ConfigError("--out-dir is required")
    out_dir = Path(config.paths["data_dir"])
    if (out_dir / "manifest.json").exists() and not args.force:
        raise ConfigError(f"{out_dir} already holds a dataset (use --force to overwrite)")
    dims = config.dims
    if config.paths.get("codebook"):
        task_ids = load_codebook(_require_path(config, "codebook", "--codebook")).task_ids
    else:
        task_ids = _task_ids(dims["M"])
    kinds = _expand_kinds(args.anomaly)

    # generate everything before writing anything
    episodes = []
    for kind in kinds:
        for task_id in task_ids:
            for index in range(dims["episodes_per_task"]):
                seed = derive_seed(config.seed, "episode", kind, task_id, index)
                episodes.append(generate_episode(
                    task_id, kind, seed, dims["episode_length"],
                    window=dims["T"], num_points=dims["N"], mask_size=dims["mask_size"],
                    joints=dims["J"], task_ids=task_ids,
                    episode_id=f"{kind}-{task_id}-{index:03d}",
                ))

    entries = []
    for episode in episodes:
        name = f"{episode.anomaly_kind}/{episode.episode_id}.json"
        save_episode(episode, out_dir / name)
        entries.append({
            "file": name,
            "episode_id": episode.episode_id,
            "task_id": episode.task_id,
            "anomaly_kind": episode.anomaly_kind,
            "t_anomaly": episode.t_anomaly,
        })

    nominal = [ep for ep in episodes if ep.anomaly_kind == ANOMALY_NONE]
    normalizer = None
    if nominal:
        normalizer = RobotStateNormalizer.fit(
            np.stack([frame.robot.as_vector() for ep in nominal for frame in ep.frames])
        )
    write_manifest(
        out_dir, T=dims["T"], N=dims["N"], J=dims["J"], task_ids=task_ids,
        episodes=entries, normalizer=normalizer, extra=_echo(config, "gen-data"),
    )
    _LOGGER.info("Wrote %d episodes (%s) to %s", len(episodes), ", ".join(kinds), out_dir)
    return {"data_dir": str(out_dir), "episodes": len(episodes), "kinds": kinds}


def cmd_train(config: RunConfig, args: argparse.Namespace) -> dict:
    data_dir = _require_path(config, "data_dir", "--data-dir")
    codebook_path = _require_path(config, "codebook", "--codebook")
    out = _output_path(config, "checkpoint", "--out", args.force)
    flow_config = config.flow_config()
    train_config = config.train_config()

    _check_manifest_dims(read_manifest(data_dir), config)
    codebook = load_codebook(codebook_path)
    if codebook.T != flow_config.T:
        raise ConfigError(f"codebook has T={codebook.T}, config has T={flow_config.T}")

    windows = nominal_windows(load_episodes(data_dir, anomaly_kinds=[ANOMALY_NONE]), flow_config.T, config.dims["stride"])
    if not windows:
        raise RCNFValidationError(f"{data_dir} holds no nominal episodes")
    unknown = sorted({w.task_id for w in windows} - set(codebook.task_ids))
    if unknown:
        raise RCNFValidationError(f"tasks missing from the codebook: {unknown}")
    _, states, _ = stack_windows(windows)
    normalizer = RobotStateNormalizer.fit(states)

    model = RCNFlow(flow_config, codebook, normalizer, seed=derive_seed(config.seed, "model"))
    reports_dir = Path(config.paths["reports_dir"]) if config.paths.get("reports_dir") else None
    checkpoint_dir = reports_dir / "checkpoints" if reports_dir else None
    model, report = train(model, windows, train_config, checkpoint_dir=checkpoint_dir)

    echo = _echo(config, "train")
    save_checkpoint(model, out, force=args.force, extra=echo)
    summary = {
        "checkpoint": str(out),
        "epochs_run": report.epochs_run,
        "final_validation_nll": report.final_validation_nll,
        "best_epoch": report.best_epoch,
    }
    if reports_dir:
        report_path = save_train_report(report, reports_dir / "train_report.json", extra=echo)
        summary["report"] = str(report_path)
    return summary


def cmd_calibrate(config: RunConfig, args: argparse.Namespace) -> dict:
    checkpoint = _require_path(config, "checkpoint", "--checkpoint")
    data_dir = _require_path(config, "data_dir", "--data-dir")
    out = _output_path(config, "profiles", "--out", args.force)

    model = load_checkpoint(checkpoint)
    _check_model_dims(model, config)
    episodes = load_episodes(data_dir, anomaly_kinds=[ANOMALY_NONE])
    windows = nominal_windows(episodes, model.config.T, config.dims["stride"])
    alpha = config.monitor["alpha"]
    profiles = calibrate_all(model, windows, alpha, derive_seed(config.seed, "calibration"))
    save_profiles(profiles, out, force=args.force, extra=_echo(config, "calibrate"))
    return {
        "profiles": str(out),
        "alpha": alpha,
        "upper": {task_id: profile.upper for task_id, profile in sorted(profiles.items())},
    }


def cmd_score(config: RunConfig, args: argparse.Namespace) -> dict:
    checkpoint = _require_path(config, "checkpoint", "--checkpoint")
    data_dir = _require_path(config, "data_dir", "--data-dir")
    out = Path(args.out) if args.out else None
    if out is not None and out.exists() and not args.force:
        raise ConfigError(f"{out} already exists (use --force to overwrite)")

    model = load_checkpoint(checkpoint)
    _check_model_dims(model, config)
    rows = []
    for episode in load_episodes(data_dir):
        for item in score_episode(model, episode):
            rows.append({
                "episode_id": item.episode_id,
                "task_id": item.task_id,
                "anomaly_kind": item.anomaly_kind,
                "frame": item.frame,
                "score": item.score,
                "label": item.label,
            })
    if out is not None:
        write_json(out, {"scores": rows, **_echo(config, "score")}, force=args.force)
    return {"scores": str(out) if out else None, "windows": len(rows)}


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> dict:
    checkpoint = _require_path(config, "checkpoint", "--checkpoint")
    profiles_path = _require_path(config, "profiles", "--profiles")
    data_dir = _require_path(config, "data_dir", "--data-dir")
    if not config.paths.get("reports_dir"):
        raise ConfigError("--reports-dir is required")
    reports_dir = Path(config.paths["reports_dir"])
    report_path = reports_dir / "bench_report.json"
    if report_path.exists() and not args.force:
        raise ConfigError(f"{report_path} already exists (use --force to overwrite)")

    model = load_checkpoint(checkpoint)
    _check_model_dims(model, config)
    profiles = load_profiles(profiles_path)
    report = evaluate_benchmark(model, profiles, load_episodes(data_dir))
    save_bench_report(report, report_path, extra=_echo(config, "eval"))
    if not args.no_curves:
        write_score_curves(report, reports_dir / "curves")
    return {
        "report": str(report_path),
        "macro_auc": report.macro_auc,
        "macro_ap": report.macro_ap,
        "missing_kinds": report.missing_kinds,
    }


async def _stream(frame_monitor: FrameMonitor, source, sink: Callable) -> None:
    stream = RCNFStreamMonitor(frame_monitor, source, sink)
    await stream.async_start()
    try:
        await stream.async_wait()
    finally:
        await stream.async_stop()


def cmd_monitor(config: RunConfig, args: argparse.Namespace) -> dict:
    checkpoint = _require_path(config, "checkpoint", "--checkpoint")
    profiles_path = _require_path(config, "profiles", "--profiles")
    out = Path(args.out) if args.out else None
    if out is None:
        raise ConfigError("--out is required")
    if out.exists() and not args.force:
        raise ConfigError(f"{out} already exists (use --force to overwrite)")
    if args.input and not Path(args.input).exists():
        raise ConfigError(f"--input {args.input} does not exist")

    model = load_checkpoint(checkpoint)
    _check_model_dims(model, config)
    profiles = load_profiles(profiles_path)
    if args.task not in profiles:
        raise ConfigError(f"no threshold profile for task {args.task!r} in {profiles_path}")
    frame_monitor = FrameMonitor(model, profiles[args.task], config.policy())

    verdicts = []
    header = {
        **_echo(config, "monitor"),
        "task_id": args.task,
        "upper": profiles[args.task].upper,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    with VerdictLog(out, header) as log:
        def sink(verdict) -> None:
            verdicts.append(verdict)
            log.write(verdict)

        if args.input:
            with open(args.input, encoding="utf-8") as handle:
                asyncio.run(_stream(frame_monitor, async_frame_source(iter_frame_records(handle)), sink))
        else:
            asyncio.run(_stream(frame_monitor, stdin_source(), sink))

    latency = summarize_latency(verdicts)
    budget = config.monitor["latency_budget_ms"]
    if latency["p95_ms"] is not None and latency["p95_ms"] > budget:
        _LOGGER.warning("p95 frame latency %.1f ms exceeds the %.1f ms budget", latency["p95_ms"], budget)
    return {
        "verdict_log": str(out),
        "state": frame_monitor.store.to_dict(),
        "latency": latency,
    }


COMMANDS: dict[str, Callable[[RunConfig, argparse.Namespace], dict]] = {
    "encode-tasks": cmd_encode_tasks,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "score": cmd_score,
    "eval": cmd_eval,
    "monitor": cmd_monitor,
}


# ─────────────────────────────────────────────
# Argument parsing
# ─────────────────────────────────────────────

def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run-config file (flags take precedence)")
    common.add_argument("--seed", type=int, help="root seed; every other seed is derived from it")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--print-config", action="store_true", help="print the resolved config as JSON and exit")
    return common


def _add_dims(parser: argparse.ArgumentParser, *names: str) -> None:
    flags = {
        "T": ("--window", "window length T"),
        "N": ("--points", "points per frame N"),
        "K": ("--flow-steps", "number of flow steps K"),
        "J": ("--joints", "robot joints J"),
    }
    for name in names:
        flag, text = flags[name]
        parser.add_argument(flag, dest=f"dims.{name}", type=int, help=text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rcnf", description="Conditional normalizing-flow anomaly monitor for robot manipulation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_parser()

    p = sub.add_parser("encode-tasks", parents=[common], help="optimize the task codebook")
    p.add_argument("--tasks", dest="dims.M", type=int, help="number of tasks M")
    p.add_argument("--dim", dest="dims.T", type=int, help="embedding dimension (= window length T)")
    p.add_argument("--radius", dest="dims.R", type=float, help="sphere radius R")
    p.add_argument("--out", dest="paths.codebook", help="codebook JSON to write")

    p = sub.add_parser("gen-data", parents=[common], help="generate synthetic episodes")
    p.add_argument("--out-dir", dest="paths.data_dir", help="dataset directory")
    p.add_argument("--codebook", dest="paths.codebook", help="take task ids from this codebook")
    p.add_argument("--tasks", dest="dims.M", type=int, help="number of tasks when no codebook is given")
    p.add_argument("--episodes-per-task", dest="dims.episodes_per_task", type=int)
    p.add_argument("--episode-length", dest="dims.episode_length", type=int)
    p.add_argument("--mask-size", dest="dims.mask_size", type=int)
    p.add_argument(
        "--anomaly", action="append", choices=ALL_EPISODE_KINDS + ["all"],
        help="episode kind to generate; repeatable, 'all' means every anomaly kind (default: none)",
    )
    _add_dims(p, "T", "N", "J")

    p = sub.add_parser("train", parents=[common], help="train the flow on nominal episodes")
    p.add_argument("--data-dir", dest="paths.data_dir")
    p.add_argument("--codebook", dest="paths.codebook")
    p.add_argument("--out", dest="paths.checkpoint", help="checkpoint (.npz) to write")
    p.add_argument("--reports-dir", dest="paths.reports_dir", help="train report and periodic checkpoints")
    p.add_argument("--epochs", dest="training.epochs", type=int)
    p.add_argument("--next-stage-epoch", dest="training.next_stage_epoch", type=int)
    p.add_argument("--batch-size", dest="training.batch_size", type=int)
    p.add_argument("--lr", dest="training.learning_rate", type=float)
    p.add_argument("--grad-clip", dest="training.grad_clip", type=float)
    p.add_argument("--weight-refresh", dest="training.weight_refresh_interval", type=int)
    p.add_argument("--stride", dest="dims.stride", type=int)
    p.add_argument("--ablate", action="append", choices=ABLATIONS, help="disable one conditioning input; repeatable")
    _add_dims(p, "T", "N", "K", "J")

    p = sub.add_parser("calibrate", parents=[common], help="conformal threshold profiles")
    p.add_argument("--checkpoint", dest="paths.checkpoint")
    p.add_argument("--data-dir", dest="paths.data_dir", help="held-out nominal episodes")
    p.add_argument("--out", dest="paths.profiles", help="profiles JSON to write")
    p.add_argument("--alpha", dest="monitor.alpha", type=float)
    p.add_argument("--stride", dest="dims.stride", type=int)
    _add_dims(p, "T", "N", "J")

    p = sub.add_parser("score", parents=[common], help="score every window of a dataset")
    p.add_argument("--checkpoint", dest="paths.checkpoint")
    p.add_argument("--data-dir", dest="paths.data_dir")
    p.add_argument("--out", help="scores JSON to write")
    _add_dims(p, "T", "N", "J")

    p = sub.add_parser("eval", parents=[common], help="benchmark AUC / AP")
    p.add_argument("--checkpoint", dest="paths.checkpoint")
    p.add_argument("--profiles", dest="paths.profiles")
    p.add_argument("--data-dir", dest="paths.data_dir", help="benchmark episodes, nominal and anomalous")
    p.add_argument("--reports-dir", dest="paths.reports_dir")
    p.add_argument("--no-curves", action="store_true", help="skip the per-episode score-curve CSVs")
    _add_dims(p, "T", "N", "J")

    p = sub.add_parser("monitor", parents=[common], help="run the live monitor over a frame stream")
    p.add_argument("--checkpoint", dest="paths.checkpoint")
    p.add_argument("--profiles", dest="paths.profiles")
    p.add_argument("--task", required=True, help="task id of the running episode")
    p.add_argument("--input", help="JSON-lines frame file (default: stdin)")
    p.add_argument("--out", help="verdict log (JSON lines) to write")
    p.add_argument("--persist-k", dest="monitor.persist_k", type=int)
    p.add_argument("--hysteresis", dest="monitor.hysteresis", type=float)
    _add_dims(p, "T", "N", "J")

    return parser


def overrides_from_args(args: argparse.Namespace) -> dict:
    """Dotted ``section.key`` destinations become a nested override dict."""
    overrides: dict = {}
    for dest, value in vars(args).items():
        if "." not in dest or value is None:
            continue
        section, key = dest.split(".", 1)
        overrides.setdefault(section, {})[key] = value
    if getattr(args, "ablate", None):
        overrides.setdefault("model", {})["ablate"] = list(args.ablate)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return overrides


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format=LOG_FORMAT, stream=sys.stderr)
    # --log-level applies to this package; third-party loggers stay at WARNING
    logging.getLogger(DOMAIN).setLevel(getattr(logging, args.log_level))

    try:
        config = resolve_config(load_config_file(args.config), overrides_from_args(args))
        if args.print_config:
            sys.stdout.write(dumps_json(config.to_dict()))
            return EXIT_OK
        _LOGGER.info("%s with config %s", args.command, json.dumps(config.to_dict(), sort_keys=True))
        summary = COMMANDS[args.command](config, args)
    except RCNFValidationError as err:
        _LOGGER.error("%s: %s", args.command, err)
        return EXIT_VALIDATION_ERROR
    except RCNFRuntimeError as err:
        _LOGGER.error("%s failed: %s", args.command, err)
        return EXIT_RUNTIME_ERROR
    except RCNFError as err:
        _LOGGER.error("%s failed: %s", args.command, err)
        return EXIT_RUNTIME_ERROR
    except FileExistsError as err:
        _LOGGER.error("%s", err)
        return EXIT_VALIDATION_ERROR
    except (OSError, ValueError) as err:
        _LOGGER.error("%s: %s", args.command, err, exc_info=True)
        return EXIT_RUNTIME_ERROR

    sys.stdout.write(dumps_json(summary))
    return EXIT_OK

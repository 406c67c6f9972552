"""Command-line entry point.

Exit status: 0 success, 1 user error (bad config, genome, paths, replay
mismatch), 2 internal fault.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .controller import Controller, ControllerConfig
from .errors import ContractError, SearchAborted
from .masks import sample_conv_mask, sample_transformer_mask, write_pgm
from .rewards import make_evaluator, random_search
from .scheduler import SchedulerConfig, WorkerTrace, run_search
from .searchlog import (CHECKPOINT, HEADER, LOG, LOG_SCHEMA_VERSION, REPORT, LogWriter, file_digest, read_log,
                        summary_text, write_report)
from .space import GenomeSyntaxError, decode_genome, parse_genome

log = logging.getLogger("dropsearch")

EXIT_OK, EXIT_USER, EXIT_FAULT = 0, 1, 2


def build_trace(cfg: RunConfig) -> WorkerTrace:
    s = cfg.search
    if s.trace == "constant":
        return WorkerTrace.constant(s.workers)
    if s.trace == "fluctuating":
        horizon = 4.0 * s.budget / max(1, s.workers) + 100.0
        return WorkerTrace.fluctuating(s.seed, horizon=horizon, low=1, high=s.workers)
    return WorkerTrace(tuple(tuple(p) for p in s.trace))


def controller_config(cfg: RunConfig) -> ControllerConfig:
    c = cfg.controller
    return ControllerConfig(backend=c.backend, lr=c.lr, entropy_coef=c.entropy_coef,
                            baseline_momentum=c.baseline_momentum, batch_size=cfg.search.batch_size,
                            ratio_clip=c.ratio_clip, init_std=c.init_std, n_layers=c.n_layers,
                            d_model=c.d_model, n_heads=c.n_heads, d_head=c.d_head, d_ff=c.d_ff)


def run_dir_for(command: str, cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / f"{command}-{cfg.digest()[:12]}"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def execute(command: str, cfg: RunConfig, run_dir: Path) -> dict:
    """Run ``search`` or ``random-search`` into ``run_dir``; returns the final header."""
    run_dir.mkdir(parents=True, exist_ok=True)
    evaluator, space = make_evaluator(cfg.reward.kind, cfg.reward.params, seed=cfg.search.seed)
    trace = build_trace(cfg) if cfg.search.mode == "simulated" else None
    header = {
        "format": "dropsearch-run", "log_schema": LOG_SCHEMA_VERSION, "version": __version__,
        "command": command, "config": cfg.canonical(), "config_hash": cfg.digest(),
        "seed": cfg.search.seed, "mode": cfg.search.mode,
        "trace": trace.to_list() if trace else None, "completed": False,
    }
    _write_json(run_dir / HEADER, header)
    s = cfg.search
    with LogWriter(run_dir / LOG) as writer:
        if command == "search":
            ctl = Controller(space, controller_config(cfg), seed=s.seed)
            sched = SchedulerConfig(budget=s.budget, batch_size=s.batch_size, capacity=s.capacity,
                                    seed=s.seed, max_failure_rate=s.max_failure_rate)
            result = run_search(ctl, evaluator, sched, mode=s.mode, trace=trace, workers=s.workers,
                                on_record=writer)
            ctl.save(run_dir / CHECKPOINT)
        else:
            result = random_search(space, evaluator, s.budget, seed=s.seed, on_record=writer,
                                   max_failure_rate=s.max_failure_rate)
            _write_json(run_dir / CHECKPOINT, {"format": "dropsearch-random", "seed": s.seed,
                                               "evaluated": result.successes, "failed": result.failures})
    write_report(result.records, run_dir)
    header.update({
        "completed": True, "n_records": len(result.records), "n_updates": len(result.updates),
        "clock": result.clock, "log_sha256": file_digest(run_dir / LOG),
        "checkpoint_sha256": file_digest(run_dir / CHECKPOINT), "report_sha256": file_digest(run_dir / REPORT),
    })
    _write_json(run_dir / HEADER, header)
    return header


# -- commands --------------------------------------------------------------------------

def _overrides(args) -> dict:
    return {
        "search.budget": args.budget, "search.seed": args.seed, "search.batch_size": args.batch_size,
        "search.capacity": args.capacity, "search.mode": args.mode, "search.workers": args.workers,
        "search.trace": args.trace, "controller.backend": getattr(args, "backend", None),
        "reward.kind": args.reward, "output_dir": None,
    }


def cmd_run(args, command: str) -> int:
    ov = _overrides(args)
    ov.pop("output_dir")
    cfg = load_config(args.config, ov)
    if args.out is not None:
        cfg = cfg.model_copy(update={"output_dir": args.out})
    run_dir = run_dir_for(command, cfg)
    if (run_dir / HEADER).exists():
        if not args.force:
            raise ConfigError(f"run directory {run_dir} already exists for this config; use --force to overwrite")
        shutil.rmtree(run_dir)
    header = execute(command, cfg, run_dir)
    report = json.loads((run_dir / REPORT).read_text())
    print(f"run directory  {run_dir}")
    print(f"records        {header['n_records']}  (log sha256 {header['log_sha256'][:16]})")
    print(summary_text(report))
    return EXIT_OK


def _resolve_run_dir(target: str) -> Path:
    p = Path(target)
    if p.is_file():
        p = p.parent
    if not (p / HEADER).exists():
        raise ConfigError(f"no {HEADER} in {p}")
    return p


def _first_difference(a: Path, b: Path) -> str:
    la, lb = a.read_text().splitlines(), b.read_text().splitlines()
    for i, (x, y) in enumerate(zip(la, lb), 1):
        if x != y:
            return f"{a.name} line {i} differs"
    return f"{a.name}: {len(la)} vs {len(lb)} lines"


def cmd_replay(args) -> int:
    run_dir = _resolve_run_dir(args.run)
    header = json.loads((run_dir / HEADER).read_text())
    if not header.get("completed"):
        raise ConfigError(f"{run_dir} holds an incomplete run")
    if header["mode"] != "simulated":
        raise ConfigError("only simulated-trace runs can be replayed bit for bit")
    cfg = RunConfig.model_validate({**header["config"], "output_dir": str(run_dir)})
    if cfg.digest() != header["config_hash"]:
        raise ConfigError("header config does not match its recorded hash")
    with tempfile.TemporaryDirectory() as tmp:
        again = execute(header["command"], cfg, Path(tmp))
        problems = []
        for key, name in (("log_sha256", LOG), ("checkpoint_sha256", CHECKPOINT), ("report_sha256", REPORT)):
            if again[key] != header[key]:
                problems.append(_first_difference(run_dir / name, Path(tmp) / name))
            elif file_digest(run_dir / name) != header[key]:
                problems.append(f"{name} was modified after the run")
    if problems:
        for p in problems:
            print(f"replay mismatch: {p}", file=sys.stderr)
        return EXIT_USER
    print(f"replay ok: {header['n_records']} records, log sha256 {header['log_sha256'][:16]}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = _resolve_run_dir(args.run)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    report = write_report(read_log(run_dir / LOG), out)
    print(summary_text(report))
    return EXIT_OK


def _parse_genome_arg(text: str, space=None):
    try:
        return parse_genome(text, space)
    except GenomeSyntaxError as exc:
        caret = " " * (exc.pos or 0) + "^"
        raise ContractError(f"{exc}\n  {text}\n  {caret}") from exc


def cmd_eval(args) -> int:
    cfg = load_config(args.config, {"reward.kind": args.reward})
    evaluator, space = make_evaluator(cfg.reward.kind, cfg.reward.params, seed=cfg.search.seed)
    genome = _parse_genome_arg(args.genome, space)
    result = evaluator(genome, args.seed)
    print(json.dumps({"genome": str(genome), "perf": result.perf, "metrics": result.metrics}, sort_keys=True))
    return EXIT_OK


def cmd_render(args) -> int:
    genome = _parse_genome_arg(args.genome)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    written = []
    if genome.kind == "conv":
        for label, spec in zip(genome.labels, decode_genome(genome)):
            m = sample_conv_mask(spec, (1, args.size, args.size, args.channels), args.rate, rng)
            for c in range(args.channels):
                path = out / f"{label}_c{c}.pgm"
                write_pgm(path, m[0, :, :, c])
                written.append(path)
    else:
        for site, spec in decode_genome(genome).items():
            m = sample_transformer_mask(spec, (1, args.seq_len, args.channels), args.rate, rng)
            path = out / f"{site}.pgm"
            write_pgm(path, m[0].T)  # rows are channels, columns are positions
            written.append(path)
    for p in written:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dropsearch", description="Search for structured dropout patterns.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    for name, help_ in (("search", "controller search"), ("random-search", "uniform random baseline")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--budget", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--capacity", type=int)
        sp.add_argument("--mode", choices=("simulated", "live"))
        sp.add_argument("--workers", type=int)
        sp.add_argument("--trace", choices=("constant", "fluctuating"))
        sp.add_argument("--reward", choices=("synthetic", "toy-conv", "toy-lm"))
        if name == "search":
            sp.add_argument("--backend", choices=("attention", "factorized"))
        sp.add_argument("--out", help="parent directory for run directories")
        sp.add_argument("--force", action="store_true", help="overwrite an existing run directory")

    sp = sub.add_parser("eval-genome", help="evaluate one genome and print the result")
    sp.add_argument("genome")
    sp.add_argument("--config")
    sp.add_argument("--reward", choices=("synthetic", "toy-conv", "toy-lm"))
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("render-mask", help="write PGM renders of a genome's masks")
    sp.add_argument("genome")
    sp.add_argument("--out", required=True)
    sp.add_argument("--rate", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=16, help="spatial extent for conv genomes")
    sp.add_argument("--seq-len", type=int, default=70, help="sequence length for transformer genomes")
    sp.add_argument("--channels", type=int, default=1)

    sp = sub.add_parser("report", help="recompute curve.csv and report.json from a search log")
    sp.add_argument("run", help="run directory or its search_log.jsonl")
    sp.add_argument("--out", help="write outputs here instead of the run directory")

    sp = sub.add_parser("replay", help="re-run a simulated search and compare outputs byte for byte")
    sp.add_argument("run", help="run directory or its search_log.jsonl")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USER
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "search": lambda a: cmd_run(a, "search"),
        "random-search": lambda a: cmd_run(a, "random-search"),
        "eval-genome": cmd_eval,
        "render-mask": cmd_render,
        "report": cmd_report,
        "replay": cmd_replay,
    }
    try:
        return handlers[args.command](args)
    except (ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except SearchAborted as exc:
        print(f"search aborted: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except Exception as exc:  # noqa: BLE001 - last-resort fault report
        log.debug("internal fault", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())

"""Search-log persistence, best-so-far curves and reports.

A run directory holds::

    header.json        command, effective config, trace, seed, log digest
    search_log.jsonl   one record per job, in the order each job's fate was settled
    checkpoint.json    controller state at the end of the run
    curve.csv          sample_index, perf, best_so_far
    report.json        summary derived from the log alone

Records are serialised with sorted keys and compact separators so that the
same run always produces the same bytes.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from collections import Counter
from dataclasses import asdict
from pathlib import Path

from .errors import ContractError
from .space import decode_genome, parse_genome

LOG_SCHEMA_VERSION = 1
LOG_FIELDS = ("job_id", "genome", "logp_old", "theta_version", "seed", "status", "perf", "staleness",
              "consumed_by", "spawned_at", "clock", "error", "metrics")
STATUSES = ("consumed", "leftover", "failed", "evaluated")
CURVE_COLUMNS = ("sample_index", "perf", "best_so_far")

HEADER = "header.json"
LOG = "search_log.jsonl"
CHECKPOINT = "checkpoint.json"
CURVE = "curve.csv"
REPORT = "report.json"


def dumps_record(rec: dict) -> str:
    missing = [f for f in LOG_FIELDS if f not in rec]
    extra = [f for f in rec if f not in LOG_FIELDS]
    if missing or extra:
        raise ContractError(f"log record fields: missing {missing}, unexpected {extra}")
    return json.dumps(rec, sort_keys=True, separators=(",", ":"), allow_nan=False)


def loads_record(line: str, lineno: int = 0) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ContractError(f"search log line {lineno}: {exc.msg} at column {exc.colno}") from exc
    if not isinstance(rec, dict) or set(rec) != set(LOG_FIELDS):
        raise ContractError(f"search log line {lineno}: record does not match schema v{LOG_SCHEMA_VERSION}")
    if rec["status"] not in STATUSES:
        raise ContractError(f"search log line {lineno}: unknown status {rec['status']!r}")
    return rec


class LogWriter:
    """Appends records to a JSONL file and keeps a running digest."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = self.path.open("w")
        self._sha = hashlib.sha256()
        self.count = 0

    def __call__(self, rec: dict) -> None:
        line = dumps_record(rec) + "\n"
        self._fh.write(line)
        self._fh.flush()
        self._sha.update(line.encode())
        self.count += 1

    @property
    def digest(self) -> str:
        return self._sha.hexdigest()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_log(path) -> list[dict]:
    with Path(path).open() as fh:
        return [loads_record(line, i) for i, line in enumerate(fh, 1) if line.strip()]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def completion_order(records) -> list[dict]:
    """Successful records in the order they finished."""
    done = [r for r in records if r["status"] != "failed"]
    return sorted(done, key=lambda r: (r["clock"], r["job_id"]))


def curve_rows(records) -> list[tuple]:
    rows, best = [], None
    for i, r in enumerate(completion_order(records)):
        best = r["perf"] if best is None else max(best, r["perf"])
        rows.append((i, r["perf"], best))
    if not rows:
        raise ContractError("cannot build a best-so-far curve from an empty log")
    return rows


def export_curves(records, path=None) -> str:
    """CSV text with columns sample_index, perf, best_so_far; written to ``path`` if given."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for i, perf, best in curve_rows(records):
        w.writerow((i, repr(perf), repr(best)))
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def build_report(records) -> dict:
    rows = curve_rows(records)
    ordered = completion_order(records)
    best = max(ordered, key=lambda r: (r["perf"], -r["job_id"]))
    genome = parse_genome(best["genome"])
    decoded = decode_genome(genome)
    if isinstance(decoded, dict):
        spec = {k: asdict(v) for k, v in decoded.items()}
    else:
        spec = {label: asdict(v) for label, v in zip(genome.labels, decoded)}
    staleness = Counter(r["staleness"] for r in records if r["staleness"] is not None)
    statuses = Counter(r["status"] for r in records)
    return {
        "best": {"job_id": best["job_id"], "perf": best["perf"], "genome": best["genome"], "spec": spec},
        "best_so_far": [b for _, _, b in rows],
        "n_records": len(records),
        "n_successful": len(rows),
        "n_failed": statuses.get("failed", 0),
        "statuses": dict(sorted(statuses.items())),
        "n_updates": len({r["consumed_by"] for r in records if r["consumed_by"] is not None}),
        "staleness_histogram": {str(k): v for k, v in sorted(staleness.items())},
        "degenerate_masks": sum(int(r["metrics"].get("degenerate_masks", 0)) for r in records),
    }


def write_report(records, run_dir) -> dict:
    run_dir = Path(run_dir)
    report = build_report(records)
    (run_dir / REPORT).write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    export_curves(records, run_dir / CURVE)
    return report


def summary_text(report: dict) -> str:
    lines = [
        f"best perf      {report['best']['perf']:.6g}  (job {report['best']['job_id']})",
        f"best genome    {report['best']['genome']}",
        f"evaluations    {report['n_successful']} ok, {report['n_failed']} failed",
        f"updates        {report['n_updates']}",
        f"degenerate     {report['degenerate_masks']}",
    ]
    if report["staleness_histogram"]:
        hist = ", ".join(f"{k}:{v}" for k, v in report["staleness_histogram"].items())
        lines.append(f"staleness      {hist}")
    return "\n".join(lines)

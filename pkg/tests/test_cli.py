import csv
import io
import json
from pathlib import Path

import pytest

from dropsearch import cli
from dropsearch.config import ConfigError, load_config, parse_config, schema
from dropsearch.errors import ContractError
from dropsearch.masks import read_pgm
from dropsearch.searchlog import (LOG_FIELDS, build_report, dumps_record, export_curves, loads_record, read_log,
                                  write_report)


def _only_run(parent: Path, prefix: str) -> Path:
    (d,) = [p for p in parent.iterdir() if p.name.startswith(prefix)]
    return d


@pytest.fixture(scope="module")
def search_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    code = cli.main(["search", "--budget", "512", "--trace", "fluctuating", "--backend", "factorized",
                     "--out", str(out)])
    assert code == 0
    return _only_run(out, "search-")


def test_search_writes_log_checkpoint_report(search_run):
    lines = (search_run / "search_log.jsonl").read_text().splitlines()
    assert len(lines) == 512
    header = json.loads((search_run / "header.json").read_text())
    assert header["n_updates"] == 32 and header["completed"]
    ckpt = json.loads((search_run / "checkpoint.json").read_text())
    assert ckpt["theta_version"] == 32
    report = json.loads((search_run / "report.json").read_text())
    assert report["n_updates"] == 32 and len(report["best_so_far"]) == 512


def test_replay_passes_then_detects_tampering(search_run, tmp_path, capsys):
    assert cli.main(["replay", str(search_run)]) == 0
    copy = tmp_path / "copy"
    copy.mkdir()
    for f in search_run.iterdir():
        (copy / f.name).write_bytes(f.read_bytes())
    log = copy / "search_log.jsonl"
    lines = log.read_text().splitlines()
    rec = json.loads(lines[10])
    rec["perf"] = 0.123
    lines[10] = dumps_record(rec)
    log.write_text("\n".join(lines) + "\n")
    assert cli.main(["replay", str(copy)]) == 1
    assert "modified" in capsys.readouterr().err


def test_report_recomputes_byte_identically(search_run, tmp_path):
    assert cli.main(["report", str(search_run / "search_log.jsonl"), "--out", str(tmp_path)]) == 0
    for name in ("report.json", "curve.csv"):
        assert (tmp_path / name).read_bytes() == (search_run / name).read_bytes()


def test_existing_run_dir_not_overwritten(search_run):
    out = search_run.parent
    argv = ["search", "--budget", "512", "--trace", "fluctuating", "--backend", "factorized", "--out", str(out)]
    assert cli.main(argv) == 1


def test_random_search_curve_joins_rl_curve(search_run, tmp_path):
    assert cli.main(["random-search", "--budget", "512", "--out", str(tmp_path)]) == 0
    rdir = _only_run(tmp_path, "random-search-")
    assert cli.main(["replay", str(rdir)]) == 0
    rl = list(csv.DictReader(io.StringIO((search_run / "curve.csv").read_text())))
    rs = list(csv.DictReader(io.StringIO((rdir / "curve.csv").read_text())))
    assert [r["sample_index"] for r in rl] == [r["sample_index"] for r in rs]
    assert list(rl[0]) == ["sample_index", "perf", "best_so_far"] == list(rs[0])


def test_bad_config_reports_line(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{\n  "search": {\n    "budget": 64,\n    "bogus": 1\n  }\n}\n')
    assert cli.main(["search", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert f"{cfg}:4:" in capsys.readouterr().err
    cfg.write_text('{\n  "search": {\n    "budget": 64,\n  }\n}\n')
    assert cli.main(["search", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert f"{cfg}:4:" in capsys.readouterr().err


def test_config_validation_and_overrides(tmp_path):
    with pytest.raises(ConfigError) as info:
        parse_config('{"search": {"budget": 8, "batch_size": 16}}')
    assert "budget" in str(info.value)
    with pytest.raises(ConfigError):
        parse_config('{"controller": {"backend": "lstm"}}')
    cfg = parse_config('{"search": {"budget": 64}}', overrides={"search.budget": 128, "search.seed": None})
    assert cfg.search.budget == 128 and cfg.search.seed == 0
    assert cfg.controller.lr == 3.5e-4 and cfg.controller.entropy_coef == 1e-5
    assert cfg.controller.baseline_momentum == 0.95 and cfg.search.batch_size == 16
    a = load_config(None)
    b = a.model_copy(update={"output_dir": "elsewhere"})
    assert a.digest() == b.digest()
    assert "properties" in schema()


def test_eval_genome(capsys):
    g = "transformer;query:size=70,stride=0,share_t=true,share_c=false;key:size=0,stride=0,share_t=true,share_c=false"
    assert cli.main(["eval-genome", g]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["genome"] == g and 0 < out["perf"] <= 1.0


def test_eval_genome_bad_token_points_at_column(capsys):
    g = "transformer;query:size=70,stride=3,share_t=true,share_c=false;key:size=0,stride=0,share_t=true,share_c=false"
    assert cli.main(["eval-genome", g]) == 1
    err = capsys.readouterr().err
    assert "stride" in err and "^" in err


def test_render_mask_identity_is_white(tmp_path):
    g = "conv;g:size=0,stride=1,repeat=1,share_c=false,residual=false,rotate=0,shear_x=0.0,shear_y=0.0"
    assert cli.main(["render-mask", g, "--out", str(tmp_path), "--channels", "2"]) == 0
    for c in range(2):
        assert (read_pgm(tmp_path / f"g_c{c}.pgm") == 255).all()


def test_render_mask_transformer(tmp_path):
    g = "transformer;ffn_inner:size=10,stride=5,share_t=false,share_c=true"
    assert cli.main(["render-mask", g, "--out", str(tmp_path), "--channels", "4"]) == 0
    img = read_pgm(tmp_path / "ffn_inner.pgm")
    assert img.shape == (4, 70)
    assert (img == img[:1]).all()


def test_unknown_command_is_user_error():
    assert cli.main(["frobnicate"]) == 1


def test_internal_fault_exit_code(monkeypatch, tmp_path):
    def boom(*a, **k):
        raise RuntimeError("kaput")

    monkeypatch.setattr(cli, "execute", boom)
    assert cli.main(["search", "--budget", "16", "--out", str(tmp_path)]) == 2


def _rec(i, perf, clock=None, status="consumed"):
    return {"job_id": i, "genome": "transformer;query:size=0,stride=0,share_t=false,share_c=false",
            "logp_old": -1.5, "theta_version": 0, "seed": 1, "status": status, "perf": perf,
            "staleness": 0, "consumed_by": 1, "spawned_at": 0.0, "clock": float(i if clock is None else clock),
            "error": None, "metrics": {"degenerate_masks": 1}}


def test_export_curves_example(tmp_path):
    text = export_curves([_rec(0, 0.2), _rec(1, 0.5), _rec(2, 0.3)])
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["sample_index", "perf", "best_so_far"]
    assert [float(r[2]) for r in rows[1:]] == [0.2, 0.5, 0.5]
    with pytest.raises(ContractError):
        export_curves([])


def test_curve_follows_completion_order_and_skips_failures():
    recs = [_rec(0, 0.9, clock=5.0), _rec(1, 0.1, clock=1.0), _rec(2, None, clock=2.0, status="failed")]
    text = export_curves(recs)
    rows = list(csv.reader(io.StringIO(text)))[1:]
    assert [float(r[1]) for r in rows] == [0.1, 0.9]


def test_record_round_trip_and_schema():
    rec = _rec(3, 0.1 + 0.2)
    assert loads_record(dumps_record(rec)) == rec
    with pytest.raises(ContractError):
        dumps_record({**rec, "extra": 1})
    with pytest.raises(ContractError):
        loads_record('{"job_id": 1}', 7)
    assert set(LOG_FIELDS) == set(rec)


def test_report_contents(tmp_path):
    recs = [_rec(0, 0.2), _rec(1, 0.5), _rec(2, None, status="failed")]
    report = write_report(recs, tmp_path)
    assert report["best"]["perf"] == 0.5 and report["n_failed"] == 1
    assert report["best"]["spec"]["query"]["size"] == 0
    assert report["degenerate_masks"] == 3
    assert report == build_report(recs)
    (tmp_path / "search_log.jsonl").write_text("".join(dumps_record(r) + "\n" for r in recs))
    assert read_log(tmp_path / "search_log.jsonl") == recs

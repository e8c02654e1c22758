import csv
import json
from pathlib import Path

import pytest

from cbseq.cli import main
from cbseq.config import config_from_dict, load_config
from cbseq.pipeline import StageError, parse_emb_list, run_pipeline

SMOKE = Path(__file__).parent.parent / "configs" / "smoke.toml"


def test_smoke_run_writes_artifacts(tmp_path, monkeypatch):
    monkeypatch.delenv("CBSEQ_SEED", raising=False)
    cfg = load_config(SMOKE)
    cfg.out_dir = str(tmp_path / "out")
    art = run_pipeline(cfg)
    rows = list(csv.DictReader(open(art["metrics"])))
    assert len(rows) == cfg.eval.k * cfg.eval.repeats
    assert all(0.0 <= float(r["auc"]) <= 1.0 for r in rows)
    manifest = json.loads(art["manifest"].read_text())
    assert manifest["seed"] == 7
    assert set(manifest["artifacts"]) >= {"flows", "model", "metrics", "emb_pn"}
    assert manifest["stages"]["channels"]["channels"] > 0


def test_missing_input_names_stage(tmp_path, monkeypatch):
    monkeypatch.delenv("CBSEQ_SEED", raising=False)
    cfg = config_from_dict({"out_dir": str(tmp_path), "input": {"flows": str(tmp_path / "no")}})
    with pytest.raises(StageError) as e:
        run_pipeline(cfg)
    assert e.value.stage == "ingest" and isinstance(e.value.cause, FileNotFoundError)


def test_no_input_configured(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('out_dir = "o"\n')
    assert main(["pipeline", "--config", str(cfg)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "StageError" and err["stage"] == "ingest"


def test_parse_emb_list():
    assert parse_emb_list("a,b,c,d") == {"pn": "a", "iat": "b", "sp": "c", "dp": "d"}
    with pytest.raises(ValueError):
        parse_emb_list("a,b")

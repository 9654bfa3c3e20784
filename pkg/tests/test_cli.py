import json
import shutil
import subprocess
import sys

import pytest

from plantocc import io
from plantocc.cli import main
from plantocc.pipeline import load_section, split_names


def _json(path):
    return json.loads(path.read_text())


def test_generate_writes_scenes_split_and_manifest(small_corpus):
    names = sorted(p.name for p in small_corpus.glob("scene_*.json") if p.name.count(".") == 1)
    assert names == ["scene_000100.json", "scene_000101.json", "scene_000102.json"]
    split = _json(small_corpus / "split.json")
    assert sorted(split["train"] + split["val"]) == names and len(split["train"]) == 2
    manifest = _json(small_corpus / "manifest.generate.json")
    assert manifest["command"] == "generate" and manifest["seeds"] == [100, 101, 102]
    assert {"config_digest", "tool_version", "wall_time"} <= set(manifest)


def test_split_is_floor_eighty_percent():
    names = [f"s{i}" for i in range(10)]
    train, val = split_names(names, 0)
    assert len(train) == 8 and len(val) == 2 and not set(train) & set(val)
    assert split_names(names, 0) == (train, val)
    assert len(split_names(names[:7], 1)[0]) == 5


def test_label_outputs(small_corpus):
    for scene in sorted(small_corpus.glob("scene_??????.json")):
        stem = scene.name[:-5]
        labels = _json(small_corpus / f"{stem}.labels.json")
        graph = _json(small_corpus / f"{stem}.graph.json")
        assert labels["schema"] == "plantocc.labels/1"
        assert labels["provenance"]["label_config"]["Z"] == 3
        assert graph["schema"] == "plantocc.graph/1" and graph["edges"]
    manifest = _json(small_corpus / "manifest.label.json")
    assert manifest["workers"] == 1 and manifest["extra"]["scenes"] == 3


def test_oracle_predictions_score_perfectly(small_corpus, tmp_path):
    preds = tmp_path / "preds.json"
    report = tmp_path / "report.json"
    assert main(["predict", "--labels", str(small_corpus), "--out", str(preds)]) == 0
    assert main(["eval", "--labels", str(small_corpus), "--preds", str(preds), "--out", str(report)]) == 0
    r = _json(report)
    assert r["ndcg_at_3"] == 1.0 and r["recall_at_1"] == 1.0 and r["recall_at_3"] == 1.0
    assert r["occl_dir_f1"] == 1.0 and r["edge_exist_f1"] == 1.0
    assert r["mae_centroid"] == 0.0 and r["mae_extent"] == 0.0
    for name in ("low", "mid", "high"):
        assert r[f"mae_u_{name}"] in (0.0, None)
    assert r["provenance"]["ranking_score"] == "z"


def test_scorer_predictions_and_losscheck(small_corpus, tmp_path):
    weights = tmp_path / "w.bin"
    preds = tmp_path / "preds.json"
    out = tmp_path / "loss.json"
    assert main(["init-weights", "--seed", "1", "--out", str(weights)]) == 0
    assert main(["predict", "--labels", str(small_corpus), "--mode", "scorer", "--weights", str(weights),
                 "--out", str(preds)]) == 0
    assert _json(preds)["mode"] == "scorer"
    assert main(["eval", "--labels", str(small_corpus), "--preds", str(preds)]) == 0
    assert main(["losscheck", "--labels", str(small_corpus), "--preds", str(preds), "--out", str(out)]) == 0
    report = _json(out)
    assert report["failing_ops"] == [] and report["checks"]
    assert all(row["rel_error"] <= 1e-4 for row in report["checks"])


def test_losscheck_on_oracle_predictions(small_corpus, tmp_path):
    preds = tmp_path / "preds.json"
    out = tmp_path / "loss.json"
    main(["predict", "--labels", str(small_corpus), "--out", str(preds)])
    assert main(["losscheck", "--labels", str(small_corpus), "--preds", str(preds), "--out", str(out)]) == 0
    ops = {row["op"] for row in _json(out)["checks"]}
    assert ops == {"union_bce", "potential_gated_bce", "listwise_rank_loss", "noisy_or_consistency",
                   "node_ce", "edge_exist_wbce", "relation_ce", "geom_smooth_l1"}


def test_losscheck_failure_exit_code(small_corpus, tmp_path, capsys):
    weights = tmp_path / "w.bin"
    preds = tmp_path / "preds.json"
    main(["init-weights", "--out", str(weights)])
    main(["predict", "--labels", str(small_corpus), "--mode", "scorer", "--weights", str(weights), "--out", str(preds)])
    code = main(["losscheck", "--labels", str(small_corpus), "--preds", str(preds), "--tolerance", "0",
                 "--out", str(tmp_path / "l.json")])
    assert code == 1
    assert "gradient check failed for:" in capsys.readouterr().err


def test_verify_ortho_and_exit_codes(small_corpus, tmp_path):
    out = tmp_path / "agree.json"
    assert main(["verify", "--scenes", str(small_corpus), "--out", str(out)]) == 0
    r = _json(out)
    assert r["union_mae"] <= 0.05 and r["n_pairs"] > 0
    assert main(["verify", "--scenes", str(small_corpus), "--jitter-deg", "10", "--tolerance", "0",
                 "--out", str(out)]) == 1
    assert main(["verify", "--scenes", str(small_corpus), "--projection", "persp", "--standoff", "0.05",
                 "--out", str(out)]) == 2


def test_malformed_scene_names_file(tmp_path, capsys):
    (tmp_path / "scene_000001.json").write_text("{not json")
    assert main(["label", "--scenes", str(tmp_path)]) == 2
    assert "scene_000001.json" in capsys.readouterr().err


def test_scene_with_bad_schema_names_file(small_corpus, tmp_path, capsys):
    src = sorted(small_corpus.glob("scene_??????.json"))[0]
    data = _json(src)
    del data["instances"]
    (tmp_path / src.name).write_text(json.dumps(data))
    assert main(["label", "--scenes", str(tmp_path)]) == 2
    assert src.name in capsys.readouterr().err


def test_eval_rejects_incomplete_predictions(small_corpus, tmp_path, capsys):
    preds = tmp_path / "preds.json"
    main(["predict", "--labels", str(small_corpus), "--out", str(preds)])
    data = _json(preds)
    data["scenes"].pop(sorted(data["scenes"])[0])
    preds.write_text(json.dumps(data))
    assert main(["eval", "--labels", str(small_corpus), "--preds", str(preds)]) == 2
    preds.write_text(json.dumps({"schema": "other"}))
    assert main(["eval", "--labels", str(small_corpus), "--preds", str(preds)]) == 2


def test_config_sections(tmp_path):
    flat = tmp_path / "flat.json"
    flat.write_text(json.dumps({"Z": 2}))
    assert load_section(flat, "label") == {"Z": 2}
    assert load_section(flat, "graph", flat=False) == {}
    sectioned = tmp_path / "all.json"
    sectioned.write_text(json.dumps({"label": {"Z": 4}, "graph": {"k": 5}}))
    assert load_section(sectioned, "label") == {"Z": 4}
    assert load_section(sectioned, "loss") == {}
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"label": {}, "bogus": {}}))
    with pytest.raises(ValueError):
        load_section(bad, "label")


def test_label_config_file_is_applied(small_corpus, tmp_path):
    scenes = tmp_path / "s"
    scenes.mkdir()
    src = sorted(small_corpus.glob("scene_??????.json"))[0]
    shutil.copy(src, scenes / src.name)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"label": {"Z": 1}, "graph": {"k": 2}}))
    assert main(["label", "--scenes", str(scenes), "--config", str(cfg)]) == 0
    stem = src.name[:-5]
    assert _json(scenes / f"{stem}.labels.json")["provenance"]["label_config"]["Z"] == 1
    assert _json(scenes / f"{stem}.graph.json")["params"]["k"] == 2


def test_workers_env_validation(monkeypatch, small_corpus, capsys):
    monkeypatch.setenv("PLANTOCC_WORKERS", "zero")
    assert main(["label", "--scenes", str(small_corpus), "--out", str(small_corpus / "x")]) == 2
    assert "PLANTOCC_WORKERS" in capsys.readouterr().err


def test_generate_bad_config_key(tmp_path):
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps({"generation": {"stems": 3}}))
    assert main(["generate", "--config", str(cfg), "--count", "1", "--out", str(tmp_path / "o")]) == 2


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "plantocc.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "generate" in proc.stdout


def test_outputs_are_stable_json(small_corpus):
    text = (small_corpus / "split.json").read_text()
    assert text == io.dumps(json.loads(text)) + "\n"


def test_generate_zero_scenes(tmp_path):
    assert main(["generate", "--count", "0", "--out", str(tmp_path)]) == 0
    manifest = _json(tmp_path / "manifest.generate.json")
    assert manifest["outputs"] == ["split.json"] and manifest["extra"]["generated"] == 0
    assert _json(tmp_path / "split.json")["train"] == []


def test_label_empty_directory_is_noop(tmp_path):
    assert main(["label", "--scenes", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["manifest.label.json"]


def test_generation_is_byte_identical_across_runs(tmp_path):
    for run in ("a", "b"):
        assert main(["generate", "--count", "2", "--seed", "9", "--out", str(tmp_path / run)]) == 0
    for name in ("scene_000009.json", "scene_000010.json", "split.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_verify_leaf_free_scene_is_exact(tmp_path):
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps({"generation": {"leaves_per_stem_range": [0, 0]}}))
    out = tmp_path / "agree.json"
    assert main(["generate", "--config", str(cfg), "--count", "1", "--out", str(tmp_path)]) == 0
    assert main(["label", "--scenes", str(tmp_path), "--config", str(cfg)]) == 0
    assert main(["verify", "--scenes", str(tmp_path), "--out", str(out)]) == 0
    assert _json(out)["union_mae"] == 0.0

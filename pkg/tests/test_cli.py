import csv
import json
from pathlib import Path

import pytest

from mvke.cli import main


TINY_CONFIG = {
    "seed": 3,
    "precision": "f64",
    "data": {
        "n_users": 250,
        "n_tags": 16,
        "n_ads": 90,
        "n_impressions": 1600,
        "n_test_impressions": 500,
    },
    "model": {"embed_dim": 8},
    "train": {"epochs": 1, "batch_size": 128},
    "eval": {"sweep_counts": [4, 5]},
    "serve": {"topk": 3, "bench_sizes": [[8, 5]]},
}


def write_config(tmp_path, extra=None) -> str:
    cfg = json.loads(json.dumps(TINY_CONFIG))
    if extra:
        for key, value in extra.items():
            if isinstance(value, dict):
                cfg.setdefault(key, {}).update(value)
            else:
                cfg[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data + train once; several commands reuse the artifacts."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = write_config(root)
    data_dir = root / "data"
    train_dir = root / "run"
    assert main(["gen-data", "--config", cfg, "--out", str(data_dir)]) == 0
    assert main(["train", "--config", cfg, "--data", str(data_dir),
                 "--out", str(train_dir)]) == 0
    return root, cfg, data_dir, train_dir


def test_gen_data_is_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    out1, out2 = tmp_path / "d1", tmp_path / "d2"
    assert main(["gen-data", "--config", cfg, "--out", str(out1)]) == 0
    assert main(["gen-data", "--config", cfg, "--out", str(out2)]) == 0
    for name in ("train.jsonl", "test.jsonl", "truth.json", "resolved.json"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_gen_data_creates_missing_out_dir(tmp_path):
    cfg = write_config(tmp_path)
    nested = tmp_path / "does" / "not" / "exist"
    assert main(["gen-data", "--config", cfg, "--out", str(nested)]) == 0
    assert (nested / "train.jsonl").exists()


def test_gen_data_row_counts_match_config(pipeline):
    _, _, data_dir, _ = pipeline
    n_train = len((data_dir / "train.jsonl").read_text().splitlines())
    n_test = len((data_dir / "test.jsonl").read_text().splitlines())
    assert n_train == TINY_CONFIG["data"]["n_impressions"]
    assert n_test == TINY_CONFIG["data"]["n_test_impressions"]


def test_train_writes_checkpoint_and_history(pipeline):
    _, _, _, train_dir = pipeline
    assert (train_dir / "checkpoint" / "params.jsonl").exists()
    assert (train_dir / "checkpoint" / "model.json").exists()
    history = read_csv(train_dir / "history.csv")
    assert len(history) == TINY_CONFIG["train"]["epochs"]
    assert list(history[0].keys()) == ["epoch", "train_loss", "ctr_auc", "cvr_auc"]


def test_history_timestamps_confined_to_log(pipeline):
    _, _, _, train_dir = pipeline
    assert (train_dir / "run.log").exists()
    # outputs stay timestamp-free; rerunning under the same seed is tested below
    for name in ("history.csv", "resolved.json"):
        content = (train_dir / name).read_text()
        assert "202" not in content.split("\n")[0] or name == "resolved.json"


def test_train_run_reproducible_byte_identical(pipeline, tmp_path):
    root, cfg, data_dir, train_dir = pipeline
    again = tmp_path / "again"
    assert main(["train", "--config", cfg, "--data", str(data_dir),
                 "--out", str(again)]) == 0
    assert ((train_dir / "history.csv").read_bytes()
            == (again / "history.csv").read_bytes())
    assert ((train_dir / "checkpoint" / "params.jsonl").read_bytes()
            == (again / "checkpoint" / "params.jsonl").read_bytes())


def test_resolved_config_refeeds_identically(pipeline, tmp_path):
    _, _, data_dir, train_dir = pipeline
    refed = tmp_path / "refed"
    assert main(["train", "--config", str(train_dir / "resolved.json"),
                 "--data", str(data_dir), "--out", str(refed)]) == 0
    assert ((train_dir / "history.csv").read_bytes()
            == (refed / "history.csv").read_bytes())
    assert ((train_dir / "resolved.json").read_bytes()
            == (refed / "resolved.json").read_bytes())


def test_eval_writes_report_and_is_stable(pipeline, tmp_path):
    _, cfg, data_dir, train_dir = pipeline
    out1, out2 = tmp_path / "e1", tmp_path / "e2"
    for out in (out1, out2):
        assert main(["eval", "--config", cfg, "--data", str(data_dir),
                     "--ckpt", str(train_dir / "checkpoint"),
                     "--out", str(out)]) == 0
    rows = read_csv(out1 / "report.csv")
    assert {r["task"] for r in rows} == {"ctr", "cvr"}
    for r in rows:
        assert 0.0 <= float(r["auc"]) <= 1.0
    assert (out1 / "report.csv").read_bytes() == (out2 / "report.csv").read_bytes()


def test_export_attention_rows_sum_to_one(pipeline, tmp_path):
    _, cfg, _, train_dir = pipeline
    out = tmp_path / "weights"
    assert main(["export-attention", "--config", cfg,
                 "--ckpt", str(train_dir / "checkpoint"), "--out", str(out)]) == 0
    rows = read_csv(out / "weights.csv")
    assert len(rows) == 2 * TINY_CONFIG["data"]["n_tags"]
    for row in rows:
        weights = [float(row[k]) for k in row if k.startswith("expert_") and row[k]]
        assert sum(weights) == pytest.approx(1.0, abs=1e-6)
        assert len(weights) == (3 if row["task"] == "ctr" else 4)


def test_predict_idempotent_and_caches(pipeline, tmp_path):
    _, cfg, data_dir, train_dir = pipeline
    out1, out2 = tmp_path / "p1", tmp_path / "p2"
    for out in (out1, out2):
        assert main(["predict", "--config", cfg, "--data", str(data_dir),
                     "--ckpt", str(train_dir / "checkpoint"),
                     "--out", str(out)]) == 0
    assert ((out1 / "assignments.csv").read_bytes()
            == (out2 / "assignments.csv").read_bytes())
    assert (out1 / "caches" / "user_cache.bin").exists()
    rows = read_csv(out1 / "assignments.csv")
    per_user_task: dict = {}
    for r in rows:
        per_user_task.setdefault((r["user_id"], r["task"]), []).append(int(r["rank"]))
    for ranks in per_user_task.values():
        assert ranks == list(range(1, TINY_CONFIG["serve"]["topk"] + 1))


def test_predict_topk_zero_is_usage_error(pipeline, tmp_path):
    _, cfg, data_dir, train_dir = pipeline
    code = main(["predict", "--config", cfg, "--data", str(data_dir),
                 "--ckpt", str(train_dir / "checkpoint"),
                 "--out", str(tmp_path / "p0"), "--topk", "0"])
    assert code == 1


def test_bench_csv_has_count_columns(pipeline, tmp_path):
    _, cfg, data_dir, train_dir = pipeline
    out = tmp_path / "bench"
    assert main(["bench", "--config", cfg, "--data", str(data_dir),
                 "--ckpt", str(train_dir / "checkpoint"), "--out", str(out)]) == 0
    rows = read_csv(out / "bench.csv")
    row = rows[0]
    n_u, n_t = 8, 5
    assert int(row["naive_user_tower"]) == n_u * n_t * 2
    assert int(row["cached_user_tower"]) == n_u
    assert int(row["cached_tag_tower"]) == n_t * 2


def test_sweep_emits_requested_counts(pipeline, tmp_path):
    root, _, data_dir, _ = pipeline
    cfg = write_config(root, {"data": {"n_impressions": 400},
                              "train": {"epochs": 1}})
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", cfg, "--data", str(data_dir),
                 "--out", str(out)]) == 0
    rows = read_csv(out / "sweep.csv")
    assert [int(r["n_experts"]) for r in rows] == [4, 5]


def test_mode_flag_controls_model_kind(pipeline, tmp_path):
    _, cfg, data_dir, _ = pipeline
    out = tmp_path / "nomtl"
    assert main(["train", "--config", cfg, "--data", str(data_dir),
                 "--out", str(out), "--mode", "noMTL-ctr"]) == 0
    meta = json.loads((out / "checkpoint" / "model.json").read_text())
    assert meta["kind"] == "two_tower"
    assert meta["task"] == "ctr"
    history = read_csv(out / "history.csv")
    assert history[0]["cvr_auc"] == ""


def test_vke_count_flag_overrides_routing(pipeline, tmp_path):
    _, cfg, data_dir, _ = pipeline
    out = tmp_path / "k7"
    assert main(["train", "--config", cfg, "--data", str(data_dir),
                 "--out", str(out), "--vke-count", "7"]) == 0
    meta = json.loads((out / "checkpoint" / "model.json").read_text())
    assert meta["config"]["n_experts"] == 7


def test_missing_data_dir_is_data_error(pipeline, tmp_path):
    _, cfg, _, _ = pipeline
    code = main(["train", "--config", cfg, "--data", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "out")])
    assert code == 2


def test_bad_config_file_is_config_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == 1


def test_unknown_mode_is_config_error(tmp_path):
    cfg = write_config(tmp_path, {"mode": "warp-drive"})
    code = main(["gen-data", "--config", cfg, "--out", str(tmp_path / "o")])
    assert code == 1


def test_divergence_exits_3(tmp_path):
    cfg = write_config(tmp_path, {"train": {"learning_rate": 1e155, "epochs": 1}})
    data_dir = tmp_path / "data"
    assert main(["gen-data", "--config", cfg, "--out", str(data_dir)]) == 0
    code = main(["train", "--config", cfg, "--data", str(data_dir),
                 "--out", str(tmp_path / "boom")])
    assert code == 3


def test_usage_error_exits_nonzero():
    assert main(["no-such-command"]) == 1
    assert main([]) == 1

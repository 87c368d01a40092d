import csv
import json

import pytest

from searchrl.cli import main
from searchrl.trajectory import read_trajectories


@pytest.fixture(scope="module")
def task_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    dataset = root / "dataset.jsonl"
    corpus = root / "corpus.jsonl"
    code = main(
        [
            "tasks",
            "--count",
            "8",
            "--depths",
            "1,2",
            "--seed",
            "3",
            "--out-dataset",
            str(dataset),
            "--out-corpus",
            str(corpus),
        ]
    )
    assert code == 0
    return root, dataset, corpus


def test_tasks_writes_provenance(task_files):
    root, dataset, corpus = task_files
    sidecar = json.loads((root / "dataset.jsonl.config.json").read_text(encoding="utf-8"))
    assert sidecar["command"] == "tasks"
    assert sidecar["config"]["seed"] == 3


def test_ingest_prints_stats(task_files, capsys):
    _, _, corpus = task_files
    assert main(["ingest", "--corpus", str(corpus), "--check"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["documents"] > 0


def test_ingest_duplicate_id_exits_3(tmp_path, capsys):
    corpus = tmp_path / "bad.jsonl"
    line = json.dumps({"id": "a", "title": "t", "text": "x"})
    corpus.write_text(line + "\n" + line + "\n", encoding="utf-8")
    assert main(["ingest", "--corpus", str(corpus)]) == 3
    assert "duplicate id" in capsys.readouterr().err


def test_rollout_score_eval_report_pipeline(task_files, capsys):
    root, dataset, corpus = task_files
    traj = root / "traj.jsonl"
    scored = root / "scored.jsonl"

    assert (
        main(
            [
                "rollout",
                "--dataset",
                str(dataset),
                "--policy",
                "scripted",
                "--seed",
                "5",
                "--out",
                str(traj),
            ]
        )
        == 0
    )
    trajectories = list(read_trajectories(traj))
    assert len(trajectories) == 8
    assert all(t.t_c is None for t in trajectories)

    assert (
        main(["score", "--trajectories", str(traj), "--dataset", str(dataset), "--out", str(scored)])
        == 0
    )
    scored_trajs = list(read_trajectories(scored))
    assert all(t.t_c is not None for t in scored_trajs)
    assert all(s.rewards is not None for t in scored_trajs for s in t.steps)

    capsys.readouterr()
    json_out = root / "report.json"
    csv_out = root / "report.csv"
    assert (
        main(
            [
                "report",
                "--trajectories",
                str(scored),
                "--dataset",
                str(dataset),
                "--out-json",
                str(json_out),
                "--out-csv",
                str(csv_out),
            ]
        )
        == 0
    )
    payload = json.loads(json_out.read_text(encoding="utf-8"))
    assert payload["em"] == 1.0
    assert set(payload["steps"]) == {"under_search", "effective_search", "over_search"}
    with open(csv_out, encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 1
    assert float(rows[0]["em"]) == payload["em"]


def test_report_rejects_unscored(task_files, capsys):
    root, dataset, _ = task_files
    traj = root / "traj.jsonl"
    assert (
        main(
            [
                "report",
                "--trajectories",
                str(traj),
                "--dataset",
                str(dataset),
                "--out-json",
                str(root / "r.json"),
            ]
        )
        == 2
    )
    assert "score" in capsys.readouterr().err


def test_eval_subcommand(task_files, capsys):
    root, dataset, _ = task_files
    traj = root / "traj.jsonl"
    out_json = root / "eval.json"
    assert (
        main(
            [
                "eval",
                "--trajectories",
                str(traj),
                "--dataset",
                str(dataset),
                "--out-json",
                str(out_json),
            ]
        )
        == 0
    )
    payload = json.loads(out_json.read_text(encoding="utf-8"))
    assert payload["n"] == 8
    assert 0.0 <= payload["osr"] <= 1.0


def test_rollout_identical_for_same_seed(task_files):
    root, dataset, _ = task_files
    a = root / "a.jsonl"
    b = root / "b.jsonl"
    for out in (a, b):
        assert (
            main(
                [
                    "rollout",
                    "--dataset",
                    str(dataset),
                    "--seed",
                    "11",
                    "--out",
                    str(out),
                ]
            )
            == 0
        )
    assert a.read_bytes() == b.read_bytes()


def test_probe_csv(task_files):
    root, dataset, _ = task_files
    out = root / "probe.csv"
    assert (
        main(
            [
                "probe",
                "--dataset",
                str(dataset),
                "--depths",
                "0,1,2",
                "--seed",
                "2",
                "--out",
                str(out),
            ]
        )
        == 0
    )
    with open(out, encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert [row["depth"] for row in rows] == ["0", "1", "2"]
    assert float(rows[2]["em"]) == 1.0


def test_curve_argmax_per_column(tmp_path):
    out = tmp_path / "curve.csv"
    assert main(["curve", "--tc", "1,2,3", "--max-depth", "8", "--out", str(out)]) == 0
    with open(out, encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 8
    for tc in (1, 2, 3):
        column = [float(row[f"tc_{tc}"]) for row in rows]
        assert column.index(max(column)) + 1 == tc


def test_curve_single_cell_value(tmp_path):
    out = tmp_path / "one.csv"
    assert main(["curve", "--tc", "1", "--max-depth", "1", "--out", str(out)]) == 0
    with open(out, encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert float(rows[0]["tc_1"]) == pytest.approx(1.45, abs=1e-5)


def test_curve_usage_error(tmp_path, capsys):
    out = tmp_path / "curve.csv"
    assert main(["curve", "--tc", "5", "--max-depth", "3", "--out", str(out)]) == 2
    assert "outside" in capsys.readouterr().err


def test_train_smoke(tmp_path):
    log = tmp_path / "train.csv"
    policy = tmp_path / "policy.json"
    env_cfg = tmp_path / "env.json"
    env_cfg.write_text(json.dumps({"num_tasks": 6, "depths": [1, 2]}), encoding="utf-8")
    trainer_cfg = tmp_path / "trainer.json"
    trainer_cfg.write_text(
        json.dumps({"total_iterations": 3, "batch_episodes": 8, "minibatch_episodes": 4}),
        encoding="utf-8",
    )
    assert (
        main(
            [
                "train",
                "--env-config",
                str(env_cfg),
                "--trainer-config",
                str(trainer_cfg),
                "--seed",
                "1",
                "--out-log",
                str(log),
                "--out-policy",
                str(policy),
            ]
        )
        == 0
    )
    with open(log, encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 3
    checkpoint = json.loads(policy.read_text(encoding="utf-8"))
    assert checkpoint["actions"] == ["search_next_bridge", "repeat_last_search", "answer"]
    sidecar = json.loads((tmp_path / "policy.json.config.json").read_text(encoding="utf-8"))
    assert sidecar["config"]["trainer"]["total_iterations"] == 3

    # The trained checkpoint drives rollouts through the text interface.
    dataset = tmp_path / "ds.jsonl"
    corpus = tmp_path / "corpus.jsonl"
    assert (
        main(
            [
                "tasks",
                "--count",
                "4",
                "--depths",
                "1",
                "--seed",
                "8",
                "--out-dataset",
                str(dataset),
                "--out-corpus",
                str(corpus),
            ]
        )
        == 0
    )
    out = tmp_path / "ptraj.jsonl"
    assert (
        main(
            [
                "rollout",
                "--dataset",
                str(dataset),
                "--policy",
                "parametric",
                "--policy-file",
                str(policy),
                "--seed",
                "2",
                "--out",
                str(out),
            ]
        )
        == 0
    )
    assert len(list(read_trajectories(out))) == 4


def test_config_file_merge(task_files, tmp_path):
    root, dataset, _ = task_files
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"episode": {"max_turns": 2}}), encoding="utf-8")
    out = tmp_path / "short.jsonl"
    assert (
        main(
            [
                "--config",
                str(config),
                "rollout",
                "--dataset",
                str(dataset),
                "--policy",
                "scripted",
                "--hop-success-prob",
                "0.0",
                "--seed",
                "4",
                "--out",
                str(out),
            ]
        )
        == 0
    )
    trajs = list(read_trajectories(out))
    assert all(len(t.steps) <= 2 for t in trajs)
    sidecar = json.loads((tmp_path / "short.jsonl.config.json").read_text(encoding="utf-8"))
    assert sidecar["config"]["episode"]["max_turns"] == 2


def test_missing_dataset_exits_3(tmp_path, capsys):
    assert (
        main(
            [
                "rollout",
                "--dataset",
                str(tmp_path / "nope.jsonl"),
                "--out",
                str(tmp_path / "t.jsonl"),
            ]
        )
        == 3
    )


def test_remote_policy_requires_base_url(task_files, capsys):
    root, dataset, _ = task_files
    assert (
        main(
            [
                "rollout",
                "--dataset",
                str(dataset),
                "--policy",
                "remote",
                "--out",
                str(root / "x.jsonl"),
            ]
        )
        == 2
    )
    assert "--base-url" in capsys.readouterr().err


def test_remote_transport_error_exits_4(task_files, capsys):
    root, dataset, _ = task_files
    config = {"episode": {"max_turns": 1}}
    cfg = root / "remote.json"
    cfg.write_text(json.dumps(config), encoding="utf-8")
    code = main(
        [
            "--config",
            str(cfg),
            "rollout",
            "--dataset",
            str(dataset),
            "--policy",
            "remote",
            "--base-url",
            "http://127.0.0.1:9",
            "--retriever",
            "oracle",
            "--out",
            str(root / "x.jsonl"),
        ]
    )
    assert code == 4

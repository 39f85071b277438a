import json

import pytest

from marlin.cli import main
from marlin.gridworld import builtin_map_text


def test_train_eval_replay(tmp_path, capsys):
    out = tmp_path / "run"
    cache = tmp_path / "cache.json"
    assert main(["train", "--scenario", "single_slot", "--episodes", "24", "--seed", "1", "--out", str(out),
                 "--plan-cache", str(cache)]) == 0
    assert (out / "episodes.csv").exists() and cache.exists()
    assert json.loads(cache.read_text())["entries"]
    assert main(["eval", "--scenario", "single_slot", "--checkpoint", str(out / "model_final.npz"),
                 "--episodes", "2"]) == 0
    assert "greedy performance" in capsys.readouterr().out
    assert main(["replay", "--transcript", str(out / "transcripts.jsonl")]) == 0
    assert "performance 1.0000" in capsys.readouterr().out
    assert main(["replay", "--transcript", str(out / "transcripts.jsonl"), "--session", "nope"]) == 1


def test_train_from_map_file_in_mappo_mode(tmp_path):
    path = tmp_path / "m.map"
    path.write_text(builtin_map_text("two_path"))
    assert main(["train", "--map", str(path), "--mode", "mappo", "--episodes", "20", "--out", str(tmp_path / "o"),
                 "--no-trajectories"]) == 0
    assert not (tmp_path / "o" / "trajectories.jsonl").exists()


def test_remote_backend_without_configuration_exits_cleanly(tmp_path, monkeypatch):
    monkeypatch.delenv("MARLIN_CHAT_URL", raising=False)
    assert main(["train", "--backend", "remote", "--episodes", "20", "--out", str(tmp_path)]) == 3


def test_swarm(tmp_path, capsys):
    out = tmp_path / "swarm.csv"
    assert main(["swarm", "--seed", "0", "--out", str(out)]) == 0
    assert "6/6 agents exited" in capsys.readouterr().out
    assert out.read_text().startswith("tick,agent,x,y,status")
    assert main(["swarm", "--seed", "0", "--ticks-max", "1"]) == 2


def test_experiment_and_aggregate(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"scenarios": ["single_slot"], "seeds": [0, 1], "episode_max": 20,
                                "checkpoints": [10, 20], "report_window": 5}))
    out = tmp_path / "exp"
    assert main(["experiment", "--spec", str(spec), "--out", str(out)]) == 0
    (out / "report.md").unlink()
    assert main(["experiment", "--spec", str(spec), "--out", str(out), "--aggregate-only"]) == 0
    assert (out / "report.md").exists()


def test_unknown_subcommand():
    with pytest.raises(SystemExit):
        main(["fly"])

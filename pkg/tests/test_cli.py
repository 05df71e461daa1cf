import json

import pytest

from conftest import FIXTURES
from mdprec.cli import main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def pipeline(tmp_path, events_csv, capsys):
    sessions = tmp_path / "sessions.json"
    model = tmp_path / "model.json"
    policy = tmp_path / "policy.json"
    code, out, _ = run(
        capsys, "ingest", "--events", events_csv, "--min-item-count", 5, "--out", sessions, "--seed", 4
    )
    assert code == 0 and "train_users" in out
    code, out, _ = run(capsys, "train", "--sessions", sessions, "--k", 2, "--skip", "--out", model)
    assert code == 0 and "MC12SK" in out
    code, out, _ = run(capsys, "solve", "--model", model, "--out", policy)
    assert code == 0 and "iterations" in out
    return sessions, model, policy


def test_full_pipeline(pipeline, tmp_path, capsys):
    sessions, model, policy = pipeline
    report = tmp_path / "report.json"
    code, out, _ = run(
        capsys, "evaluate", "--model", model, "--sessions", sessions, "--policy", policy,
        "--ranker", "mdp", "--out", report,
    )
    assert code == 0 and "RC@1" in out
    doc = json.loads(report.read_text())
    assert set(doc["rc"]) == {"1", "3", "5", "10"} and 0 <= doc["ed"] <= 100
    code, out, _ = run(capsys, "evaluate", "--model", model, "--sessions", sessions)
    assert code == 0


def test_recommend(pipeline, capsys):
    _, model, policy = pipeline
    code, out, _ = run(capsys, "recommend", "--model", model, "--m", 3)
    assert code == 0 and len(out.splitlines()) == 3
    code, out, _ = run(
        capsys, "recommend", "--model", model, "--policy", policy, "--ranker", "mdp",
        "--history", "vcr", "--m", 3,
    )
    assert code == 0 and len(out.splitlines()) == 3
    policy_doc = json.loads(policy.read_text())
    items = json.loads(model.read_text())["items"]
    vcr_state = next(r for r in policy_doc["states"] if r["slots"] == [-1, items.index("vcr")])
    assert out.split()[0] == items[vcr_state["action"]]
    code, out, err = run(capsys, "recommend", "--model", model, "--history", "unicorn", "--m", 2)
    assert code == 0 and "unknown item" in err and len(out.splitlines()) == 2
    code, out, _ = run(
        capsys, "recommend", "--model", model, "--policy", policy, "--ranker", "mdp",
        "--epsilon", 100, "--temperature", 1e6, "--m", 2, "--seed", 3,
    )
    assert code == 0 and len(out.splitlines()) == 2


def test_train_variants(pipeline, tmp_path, capsys):
    sessions, _, _ = pipeline
    out_path = tmp_path / "m.json"
    code, out, _ = run(
        capsys, "train", "--sessions", sessions, "--k", 3, "--skip", "--cluster",
        "--mixture", "1,2,3", "--out", out_path,
    )
    assert code == 0 and "MC123SKSM" in out
    code, out, _ = run(capsys, "train", "--sessions", sessions, "--k", 2, "--unordered", "--out", out_path)
    assert code == 0 and "UMC12" in out


def test_train_from_events(events_csv, tmp_path, capsys):
    code, out, _ = run(
        capsys, "train", "--events", events_csv, "--min-item-count", 5, "--k", 1,
        "--out", tmp_path / "m.json",
    )
    assert code == 0 and "test_cases" in out


def test_solve_uniform_alpha_one(pipeline, tmp_path, capsys):
    _, model, _ = pipeline
    profits = tmp_path / "profits.csv"
    keys = json.loads(model.read_text())["items"]
    profits.write_text("item,reward\n" + "".join(f"{k},1\n" for k in keys))
    out_path = tmp_path / "p.json"
    code, _, _ = run(
        capsys, "solve", "--model", model, "--profits", profits, "--alpha", 1, "--gamma", 0.5,
        "--out", out_path,
    )
    assert code == 0
    doc = json.loads(out_path.read_text())
    # recommendations are inert, so ties resolve to the first item everywhere
    assert all(row["action"] == 0 for row in doc["states"])
    for row in doc["states"]:
        qs = [q for _, q in row["top"]]
        assert max(qs) - min(qs) < 1e-9


def test_solve_end_state(pipeline, tmp_path, capsys):
    sessions, model, _ = pipeline
    out_path = tmp_path / "p.json"
    code, _, _ = run(capsys, "solve", "--model", model, "--sessions", sessions, "--end-state", "--out", out_path)
    assert code == 0 and json.loads(out_path.read_text())["metadata"]["end_state"]
    code, _, err = run(capsys, "solve", "--model", model, "--end-state", "--out", out_path)
    assert code == 1


def test_strict_nonconvergence(pipeline, tmp_path, capsys):
    _, model, _ = pipeline
    out_path = tmp_path / "p.json"
    code, _, err = run(
        capsys, "solve", "--model", model, "--max-iterations", 1, "--gamma", 0.99, "--strict",
        "--out", out_path,
    )
    if "not stable" in err:
        assert code == 3
    else:
        assert code == 0


def test_simulate(tmp_path, capsys):
    out_path = tmp_path / "sim.json"
    argv = [
        "simulate", "--ground-truth", FIXTURES / "vcr_camera.json", "--policies", "mdp,myopic,mc",
        "--episodes", 50, "--steps", 5, "--users", 200, "--seed", 1, "--out", out_path,
    ]
    code, out1, _ = run(capsys, *argv)
    assert code == 0 and "mdp" in out1
    code, out2, _ = run(capsys, *argv)
    assert out1 == out2
    code, out, _ = run(
        capsys, "simulate", "--ground-truth", FIXTURES / "vcr_camera.json", "--episodes", 1,
        "--steps", 1, "--users", 50,
    )
    assert code == 0
    code, _, err = run(capsys, "simulate", "--ground-truth", FIXTURES / "vcr_camera.json", "--policies", "best")
    assert code == 1


def test_error_exit_codes(tmp_path, capsys):
    assert run(capsys)[0] == 1
    assert run(capsys, "train")[0] == 1
    assert run(capsys, "train", "--k", "x", "--out", "m.json")[0] == 1
    code, _, err = run(capsys, "solve", "--model", tmp_path / "missing.json", "--out", tmp_path / "p.json")
    assert code == 2 and "missing.json" in err
    bad = tmp_path / "bad.csv"
    bad.write_text("user,ts,item\nu,1,\n")
    code, _, err = run(capsys, "ingest", "--events", bad)
    assert code == 2 and ":2:" in err
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    code, _, _ = run(capsys, "solve", "--model", broken, "--out", tmp_path / "p.json")
    assert code == 2


def test_evaluate_empty_test_set(pipeline, tmp_path, capsys):
    sessions, model, _ = pipeline
    doc = json.loads(sessions.read_text())
    doc["test"] = []
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps(doc))
    code, _, err = run(capsys, "evaluate", "--model", model, "--sessions", empty)
    assert code == 2 and "empty" in err


def test_mdp_ranker_needs_policy(pipeline, capsys):
    sessions, model, _ = pipeline
    code, _, _ = run(capsys, "evaluate", "--model", model, "--sessions", sessions, "--ranker", "mdp")
    assert code == 1


def test_timestamps(pipeline, tmp_path, capsys):
    sessions, _, _ = pipeline
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run(capsys, "train", "--sessions", sessions, "--k", 1, "--out", a)
    run(capsys, "train", "--sessions", sessions, "--k", 1, "--out", b, "--no-timestamp")
    da, db = json.loads(a.read_text()), json.loads(b.read_text())
    assert "created" in da and "created" not in db
    da.pop("created")
    assert da == db

import json
import pathlib

import numpy as np
import pytest

from mdprec.domain import ItemCatalog
from mdprec.ingestion import SessionSet
from mdprec.mc_model import build
from mdprec.mdp import MdpModel
from oracles import explicit_mdp, value_iteration

FIXTURES = pathlib.Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def vcr_doc():
    return json.loads((FIXTURES / "vcr_camera.json").read_text())


def make_sessions(seqs, n_items=None, tag="train"):
    n = n_items if n_items is not None else max(x for s in seqs for x in s) + 1
    cat = ItemCatalog([f"i{j}" for j in range(n)])
    return SessionSet([(f"u{i}", list(s)) for i, s in enumerate(seqs)], cat, tag)


def write_events(path, n_users=300, seed=0, fixture="vcr_camera.json", max_len=8):
    """Event log sampled from a fixture ground truth, one row per selection."""
    from mdprec.simulator import generate_corpus, load_ground_truth

    gt = load_ground_truth(str(FIXTURES / fixture))
    corpus = generate_corpus(gt, n_users, max_len, seed)
    lines = ["user,ts,item"]
    for user, seq in corpus.sequences:
        for t, x in enumerate(seq):
            lines.append(f"{user},{1000 + 60 * t},{gt.catalog.key_of(x)}")
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def events_csv(tmp_path):
    return write_events(tmp_path / "events.csv")


def random_mdp(seed, n_items=None, k=None, alpha=None, gamma=None, unencountered="reward"):
    rng = np.random.default_rng(seed)
    n = n_items or int(rng.integers(2, 5))
    k = k or int(rng.integers(1, 3))
    seqs = [list(rng.integers(0, n, size=rng.integers(2, 7))) for _ in range(rng.integers(2, 7))]
    model = build(make_sessions(seqs, n), k, skipping=bool(rng.integers(2)))
    return MdpModel(
        model,
        rewards=rng.uniform(0, 10, size=n),
        alpha=float(rng.uniform(1.0, 3.0)) if alpha is None else alpha,
        gamma=float(rng.uniform(0.0, 0.95)) if gamma is None else gamma,
        unencountered=unencountered,
    )


def oracle_for(m, gamma=None):
    base = {s: m.base_row(s) for s in m.states}
    T = explicit_mdp(m.states, base, m.alpha)
    g = m.gamma if gamma is None else gamma
    return value_iteration(m.states, T, m.rewards, g, tail=m.unencountered)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

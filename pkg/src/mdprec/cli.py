"""Batch driver: ingest -> train -> solve -> evaluate, plus recommend and simulate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 non-convergence when
``--strict`` is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
import zlib

import numpy as np

from . import __version__
from .domain import DataError, ItemCatalog, state_from_history
from .eval import DEFAULT_HALF_LIFE, evaluate, expand_cases
from .ingestion import (
    DEFAULT_GAP_SECONDS,
    filter_sequences,
    group_sequences,
    load_events,
    sessionize,
    sessions_from_json,
    sessions_to_json,
    split,
)
from .mc_model import build, load_model, predict, rank, save_model
from .mdp import (
    UNENCOUNTERED_MODES,
    MdpModel,
    NonConvergenceWarning,
    estimate_end_probs,
    explore,
    load_policy,
    q_values,
    recommend,
    save_policy,
    solve,
)
from .simulator import POLICY_NAMES, format_table, load_ground_truth, train_and_compare

logger = logging.getLogger("mdprec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NONCONVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def substream(seed: int, name: str) -> int:
    """Deterministic child seed for a named stage."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _write_json(doc, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def _read_json(path: str):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc.msg})") from None


def _add_ingest_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("ingestion")
    g.add_argument("--format", choices=("csv", "jsonl"), help="event file format (default: by extension)")
    g.add_argument("--sessionize", action="store_true", help="cut browsing streams at idle gaps")
    g.add_argument("--session-gap-hours", type=float, default=DEFAULT_GAP_SECONDS / 3600)
    g.add_argument("--min-item-count", type=int, default=100)
    g.add_argument("--min-seq-len", type=int, default=2)
    g.add_argument("--train-fraction", type=float, default=0.9)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--k", type=int, default=3, help="Markov order (1..5)")
    g.add_argument("--skip", action="store_true", help="add skipping counts")
    g.add_argument("--cluster", action="store_true", help="blend rows of similar states")
    g.add_argument("--unordered", action="store_true", help="key states by item bags")
    g.add_argument("--mixture", type=_int_list, help="component orders, e.g. 1,2,3 (default 1..k)")


def _add_mdp_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("mdp")
    g.add_argument("--alpha", type=float, default=1.5)
    g.add_argument("--gamma", type=float, default=0.95)
    g.add_argument("--prior-strength", type=float, default=10.0)
    g.add_argument("--tolerance", type=float, default=1e-6)
    g.add_argument("--max-iterations", type=int, default=100)
    g.add_argument(
        "--unencountered",
        choices=UNENCOUNTERED_MODES,
        default="reward",
        help="future value of successors without a policy entry",
    )


def _ingest(args):
    events = load_events(args.events, args.format)
    if not events:
        raise DataError(f"{args.events}: no events")
    if args.sessionize:
        seqs = sessionize(events, int(round(args.session_gap_hours * 3600)))
    else:
        seqs = group_sequences(events)
    sessions = filter_sequences(seqs, args.min_item_count, args.min_seq_len)
    train, test = split(sessions, args.train_fraction, substream(args.seed, "split"))
    return train, test


def _corpus_stats(train, test, k: int) -> dict:
    return {
        "items": len(train.catalog),
        "train_users": len(train.users),
        "test_users": len(test.users),
        "train_sequences": len(train),
        "test_sequences": len(test),
        "test_cases": len(expand_cases(test, k)),
    }


def _print_stats(stats: dict) -> None:
    for key, val in stats.items():
        print(f"{key:<16} {val}")


def _load_sessions(args):
    if getattr(args, "sessions", None):
        return sessions_from_json(_read_json(args.sessions))
    if getattr(args, "events", None):
        return _ingest(args)
    raise UsageError("give --sessions or --events")


def cmd_ingest(args) -> int:
    train, test = _ingest(args)
    stats = _corpus_stats(train, test, 1)
    stats.pop("test_cases")
    _print_stats(stats)
    if args.out:
        _write_json(sessions_to_json(train, test, {"seed": args.seed}), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    train, test = _load_sessions(args)
    model = build(
        train,
        args.k,
        skipping=args.skip,
        clustering=args.cluster,
        unordered=args.unordered,
        orders=args.mixture,
    )
    _print_stats({"model": model.name, **_corpus_stats(train, test, args.k)})
    for comp in model.components:
        print(f"order {comp.order:<10} {len(comp)} states")
    save_model(model, args.out, timestamp=not args.no_timestamp)
    return EXIT_OK


def _mdp_from_args(args, model, catalog: ItemCatalog) -> MdpModel:
    if args.profits:
        catalog.load_profits(args.profits)
    end_probs = None
    if args.end_state:
        if not args.sessions:
            raise UsageError("--end-state needs --sessions to estimate session ends")
        train, _ = sessions_from_json(_read_json(args.sessions))
        end_probs = estimate_end_probs(train, model.k)
    return MdpModel(
        model,
        rewards=np.asarray(catalog.rewards, dtype=np.float64),
        alpha=args.alpha,
        gamma=args.gamma,
        prior_strength=args.prior_strength,
        end_probs=end_probs,
        unencountered=args.unencountered,
    )


def cmd_solve(args) -> int:
    model = load_model(args.model)
    m = _mdp_from_args(args, model, model.catalog)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        policy = solve(m, tolerance=args.tolerance, max_iterations=args.max_iterations)
    print(f"states           {m.n_states}")
    print(f"iterations       {policy.rounds}")
    for i, (sw, res) in enumerate(zip(policy.sweeps, policy.residuals), start=1):
        print(f"  round {i:<3} sweeps {sw:<6} residual {res:.3e}")
    save_policy(policy, m, args.out, top_m=args.top_m, timestamp=not args.no_timestamp)
    if not policy.converged:
        print(f"warning: policy not stable after {policy.rounds} iterations", file=sys.stderr)
        if args.strict:
            return EXIT_NONCONVERGED
    return EXIT_OK


def _ranker(args, model):
    if args.ranker == "mc":
        return lambda ctx: rank(model, list(ctx)), model.k, None, None
    if not args.policy:
        raise UsageError("--ranker mdp needs --policy")
    policy, m = load_policy(args.policy, model)

    def ranker(ctx):
        return recommend(policy, m, state_from_history(list(ctx), m.k), m.n_items)

    return ranker, m.k, policy, m


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    _, test = sessions_from_json(_read_json(args.sessions))
    if len(test) == 0:
        raise DataError("empty test set")
    if list(test.catalog.keys) != list(model.catalog.keys):
        raise DataError("sessions and model were built over different item tables")
    ranker, k, _, _ = _ranker(args, model)
    metrics = [x.strip() for x in args.metrics.split(",") if x.strip()]
    bad = set(metrics) - {"rc", "ed"}
    if bad:
        raise UsageError(f"unknown metrics {sorted(bad)}")
    report = evaluate(
        ranker,
        test,
        k,
        m_values=args.m,
        half_life=args.half_life,
        metrics=metrics,
        model_name=f"{model.name} ({args.ranker})",
    )
    print(report.to_table())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
    return EXIT_OK


def cmd_recommend(args) -> int:
    model = load_model(args.model)
    history = []
    for key in [x.strip() for x in (args.history or "").split(",") if x.strip()]:
        idx = model.catalog.lookup(key)
        if idx is None:
            print(f"warning: unknown item {key!r} skipped", file=sys.stderr)
            continue
        history.append(idx)
    if args.ranker == "mc":
        p = predict(model, history)
        for item in rank(model, history)[: args.m]:
            print(f"{model.catalog.key_of(item)}\t{p[item]:.6f}")
        return EXIT_OK
    _, _, policy, m = _ranker(args, model)
    s = state_from_history(history, m.k)
    items = recommend(policy, m, s, args.m)
    if args.epsilon > 0 and s in policy.index:
        rng = np.random.default_rng(substream(args.seed, "explore"))
        pick = explore(policy, m, s, args.epsilon, args.temperature, rng)
        items = [pick] + [i for i in items if i != pick][: args.m - 1]
    if s in policy.index:
        q = q_values(policy, m, s)
        scores = [q[i] for i in items]
    else:
        p = predict(model, history)
        scores = [p[i] for i in items]
    for item, score in zip(items, scores):
        print(f"{model.catalog.key_of(item)}\t{score:.6f}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    gt = load_ground_truth(args.ground_truth)
    names = [x.strip() for x in args.policies.split(",") if x.strip()]
    bad = set(names) - set(POLICY_NAMES)
    if bad:
        raise UsageError(f"unknown policies {sorted(bad)}; choose from {', '.join(POLICY_NAMES)}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        results, info = train_and_compare(
            gt,
            names,
            n_users=args.users,
            max_len=args.max_len,
            episodes=args.episodes,
            steps=args.steps,
            seed=args.seed,
            k=args.k,
            alpha=args.alpha,
            gamma=args.gamma,
            skipping=args.skip,
            clustering=args.cluster,
            tolerance=args.tolerance,
            max_iterations=args.max_iterations,
            unencountered=args.unencountered,
            end_state=args.end_state,
        )
    print(format_table(results))
    if args.out:
        _write_json({"info": info, "results": [r.as_row() for r in results]}, args.out)
    if args.strict and info.get("converged") is False:
        return EXIT_NONCONVERGED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mdprec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--strict", action="store_true", help="non-convergence exits with 3")
        p.add_argument("--no-timestamp", action="store_true", help="omit 'created' fields")

    p = sub.add_parser("ingest", help="parse, filter and split an event log")
    p.add_argument("--events", required=True)
    p.add_argument("--out", help="sessions JSON to write")
    _add_ingest_flags(p)
    common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="fit the Markov-chain predictor")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--sessions", help="sessions JSON from 'ingest'")
    src.add_argument("--events", help="raw event log (ingested on the fly)")
    p.add_argument("--out", required=True, help="model JSON to write")
    _add_ingest_flags(p)
    _add_model_flags(p)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("solve", help="solve the recommendation MDP")
    p.add_argument("--model", required=True)
    p.add_argument("--profits", help="CSV with header item,reward")
    p.add_argument("--sessions", help="sessions JSON (needed for --end-state)")
    p.add_argument("--end-state", action="store_true", help="model session ends as absorbing")
    p.add_argument("--top-m", type=int, default=5, help="Q entries stored per state")
    p.add_argument("--out", required=True, help="policy JSON to write")
    _add_mdp_flags(p)
    common(p)
    p.set_defaults(func=cmd_solve)

    def ranker_flags(p):
        p.add_argument("--model", required=True)
        p.add_argument("--policy", help="policy JSON (for --ranker mdp)")
        p.add_argument("--ranker", choices=("mc", "mdp"), default="mc")

    p = sub.add_parser("evaluate", help="score a ranker on the test split")
    ranker_flags(p)
    p.add_argument("--sessions", required=True)
    p.add_argument("--metrics", default="rc,ed")
    p.add_argument("--m", type=_int_list, default=[1, 3, 5, 10])
    p.add_argument("--half-life", type=float, default=DEFAULT_HALF_LIFE)
    p.add_argument("--out", help="report JSON to write")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="top-m items after a history")
    ranker_flags(p)
    p.add_argument("--history", default="", help="comma-separated item keys")
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--epsilon", type=float, default=0.0, help="explore among near-best actions")
    p.add_argument("--temperature", type=float, default=1.0)
    common(p)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("simulate", help="compare policies on a synthetic ground truth")
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--policies", default="mdp,myopic")
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--users", type=int, default=2000, help="size of the training corpus")
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--k", type=int, help="predictor order (default: ground-truth order)")
    p.add_argument("--skip", action="store_true")
    p.add_argument("--cluster", action="store_true")
    p.add_argument("--end-state", action="store_true", help="let the MDP learn session ends")
    p.add_argument("--out", help="comparison JSON to write")
    _add_mdp_flags(p)
    common(p)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mdprec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, KeyError, ValueError) as exc:
        print(f"mdprec: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

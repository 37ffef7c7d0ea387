"""Command-line frontend.

Verbs:
  run     execute a scenario and write its trace
  check   verify a trace against the safety properties (and the scenario's
          embedded expectations)
  replay  re-run a trace's embedded config+seed and demand byte equality
  suite   run a named batch of scenarios across seeds and aggregate results

Exit status 0 means every expectation was met. The default output directory
is $GISKARD_OUT_DIR (falling back to ./traces).
"""

from __future__ import annotations

import argparse
import os
import sys
from multiprocessing import Pool

from . import netsim, scenarios, traceio
from .adversary import StrategyKind
from .checker import quorum_intersection_oracle, run_all_checks


def _out_dir() -> str:
    return os.environ.get("GISKARD_OUT_DIR", "traces")


def cmd_run(args) -> int:
    try:
        cfg = scenarios.load_scenario(args.config, seed=args.seed)
    except (scenarios.ScenarioError, OSError, ValueError) as e:
        print(f"error: invalid config: {e}", file=sys.stderr)
        return 2
    world = netsim.run(cfg)
    out_path = args.out
    if out_path is None:
        os.makedirs(_out_dir(), exist_ok=True)
        out_path = os.path.join(_out_dir(), f"{cfg.name}-{cfg.seed}.trace")
    traceio.write_trace(out_path, scenarios.config_to_dict(cfg), world.trace)
    summary = world.summary()
    print(f"scenario {cfg.name} seed {cfg.seed}: {summary['events']} events, "
          f"{summary['records']} trace records -> {out_path}")
    for nid, info in summary["nodes"].items():
        heights = info["committed_heights"]
        compact = f"{len(heights)} blocks" + (
            f" (up to h{heights[-1]})" if heights else "")
        print(f"  node {nid}: view {info['view']}, committed {compact}")
    print("  messages: " + ", ".join(
        f"{k}={v}" for k, v in sorted(summary["messages"].items())))
    return 0


def cmd_check(args) -> int:
    try:
        config_dict, records = traceio.read_trace(args.trace)
    except (OSError, traceio.TraceParseError) as e:
        print(f"error: cannot read trace: {e}", file=sys.stderr)
        return 2
    cfg = scenarios.config_from_dict(config_dict)
    if args.scenario:
        want = scenarios.load_scenario(args.scenario)
        want_digest = traceio.config_digest(scenarios.config_to_dict(want))
        have_digest = traceio.config_digest(config_dict)
        if want_digest != have_digest:
            print("error: trace was not produced by this scenario "
                  f"(digest {have_digest:016x} != {want_digest:016x})",
                  file=sys.stderr)
            return 2
    report = run_all_checks(records, cfg)
    failures = scenarios.evaluate_assertions(cfg, records, report)
    unexpected = report.unexpected(cfg.expected_violations)
    missing = report.missing_expected(cfg.expected_violations)

    machine = []
    human = []
    for v in report.violations:
        expected = v.property in cfg.expected_violations
        tag = "expected" if expected else "VIOLATION"
        machine.append(f"violation property={v.property} status={tag} "
                       f"witness_steps={traceio.encode_value(list(v.witness_steps))} "
                       f"explanation={traceio.encode_value(v.explanation)}")
        human.append(f"[{tag}] {v.property} @ steps {list(v.witness_steps)}: "
                     f"{v.explanation}")
    for m in report.cross_mismatches:
        machine.append(f"cross-mismatch detail={traceio.encode_value(m)}")
        human.append(f"[cross-mismatch] {m}")
    for f in failures:
        machine.append(f"assertion-failure detail={traceio.encode_value(f)}")
        human.append(f"[assertion] {f}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(machine) + ("\n" if machine else ""))
    for line in human:
        print(line)

    ok = not unexpected and not missing and not failures and not report.cross_mismatches
    n_expected = len(report.violations) - len(unexpected)
    print(f"checked {len(records)} records: {len(report.facts)} stage facts, "
          f"{len(unexpected)} unexpected violations, {n_expected} expected, "
          f"{len(failures)} assertion failures")
    if missing:
        print(f"missing expected violations: {missing}")
    return 0 if ok else 1


def cmd_replay(args) -> int:
    try:
        with open(args.trace, "r", encoding="ascii") as fh:
            original = fh.read()
        config_dict, _records = traceio.parse_trace_text(original)
    except (OSError, traceio.TraceParseError) as e:
        print(f"error: cannot read trace: {e}", file=sys.stderr)
        return 2
    cfg = scenarios.config_from_dict(config_dict)
    world = netsim.run(cfg)
    regenerated = traceio.encode_trace(scenarios.config_to_dict(cfg), world.trace)
    if regenerated == original:
        print(f"replay of {cfg.name} seed {cfg.seed}: identical "
              f"({len(world.trace)} records)")
        return 0
    old_lines = original.splitlines()
    new_lines = regenerated.splitlines()
    for i, (a, b) in enumerate(zip(old_lines, new_lines)):
        if a != b:
            print(f"replay diverged at line {i + 1}:")
            print(f"  trace : {a[:160]}")
            print(f"  replay: {b[:160]}")
            return 1
    print(f"replay diverged in length: trace {len(old_lines)} lines, "
          f"replay {len(new_lines)} lines")
    return 1


def _suite_jobs(name: str, seeds: int) -> list[netsim.ScenarioConfig]:
    jobs = []
    if name == "safety":
        for k in (4, 7):
            for strat in StrategyKind:
                for seed in range(seeds):
                    jobs.append(scenarios.build_safety_config(k, strat, seed))
    elif name == "lemmas":
        for seed in range(seeds):
            jobs.append(scenarios.build_lemma_config(4, seed))
            jobs.append(scenarios.build_lemma_config(7, seed))
    elif name == "papers-examples":
        for lib in scenarios.library_scenarios():
            if lib != "neg-theorem1":
                jobs.append(scenarios.load_scenario(lib))
    elif name == "negative-controls":
        jobs.append(scenarios.load_scenario("neg-theorem1"))
    else:
        raise ValueError(f"unknown suite {name!r} "
                         "(suites: safety, lemmas, papers-examples, negative-controls)")
    return jobs


def run_one(cfg: netsim.ScenarioConfig) -> tuple[str, int, list[str]]:
    """Run one scenario and return (name, seed, problems)."""
    world = netsim.run(cfg)
    report = run_all_checks(world.trace, cfg)
    problems = [
        f"{v.property}: {v.explanation}"
        for v in report.unexpected(cfg.expected_violations)
    ]
    problems += [f"missing expected violation {p}"
                 for p in report.missing_expected(cfg.expected_violations)]
    problems += report.cross_mismatches
    problems += scenarios.evaluate_assertions(cfg, world.trace, report)
    return cfg.name, cfg.seed, problems


def cmd_suite(args) -> int:
    try:
        jobs = _suite_jobs(args.suite, args.seeds)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if args.jobs > 1:
        with Pool(args.jobs) as pool:
            results = pool.map(run_one, jobs, chunksize=8)
    else:
        results = [run_one(cfg) for cfg in jobs]
    by_scenario: dict[str, list[tuple[int, list[str]]]] = {}
    for name, seed, problems in results:
        by_scenario.setdefault(name, []).append((seed, problems))
    failed = 0
    for name in sorted(by_scenario):
        rows = sorted(by_scenario[name])
        bad = [(seed, p) for seed, p in rows if p]
        status = "PASS" if not bad else "FAIL"
        print(f"{status} {name}: {len(rows) - len(bad)}/{len(rows)} runs clean")
        for seed, problems in bad[:5]:
            for p in problems[:3]:
                print(f"    seed {seed}: {p}")
        failed += len(bad)
    print(f"suite {args.suite}: {len(results) - failed}/{len(results)} runs passed")
    return 0 if failed == 0 else 1


def cmd_oracle(args) -> int:
    ok = quorum_intersection_oracle(args.k, args.threshold)
    f = (args.k - 1) // 3
    t = args.threshold if args.threshold is not None else args.k - f
    print(f"k={args.k} threshold={t}: quorum pairs "
          f"{'always' if ok else 'DO NOT always'} intersect in >= f+1 = {f + 1}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="giskard",
                                description="Giskard consensus simulator and "
                                            "safety checker")
    sub = p.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="run a scenario, write its trace")
    runp.add_argument("--config", required=True,
                      help="scenario file path or library name")
    runp.add_argument("--seed", type=int, default=None, help="seed override")
    runp.add_argument("--out", default=None, help="trace output path")
    runp.set_defaults(fn=cmd_run)

    checkp = sub.add_parser("check", help="check a trace for safety violations")
    checkp.add_argument("--trace", required=True)
    checkp.add_argument("--scenario", default=None,
                        help="scenario to match against the embedded config")
    checkp.add_argument("--out", default=None, help="report output path")
    checkp.set_defaults(fn=cmd_check)

    replayp = sub.add_parser("replay", help="re-run a trace, assert byte equality")
    replayp.add_argument("--trace", required=True)
    replayp.set_defaults(fn=cmd_replay)

    suitep = sub.add_parser("suite", help="run a scenario suite across seeds")
    suitep.add_argument("--suite", required=True,
                        choices=["safety", "lemmas", "papers-examples",
                                 "negative-controls"])
    suitep.add_argument("--seeds", type=int, default=500)
    suitep.add_argument("--jobs", type=int, default=max(1, os.cpu_count() or 1))
    suitep.set_defaults(fn=cmd_suite)

    oraclep = sub.add_parser("oracle", help="brute-force quorum intersection check")
    oraclep.add_argument("--k", type=int, required=True)
    oraclep.add_argument("--threshold", type=int, default=None)
    oraclep.set_defaults(fn=cmd_oracle)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

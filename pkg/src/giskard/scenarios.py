"""Scenario configuration, the scripted scenario library, and run assertions.

Scenario files are TOML with a flat documented schema (see FORMATS.md).
The same configuration round-trips through the canonical token encoding so
every trace embeds its full config; ``from_dict`` accepts both native TOML
values and the all-string form that comes back out of a parsed trace.
"""

from __future__ import annotations

import sys
from importlib import resources
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - version shim
    import tomli as tomllib

from .adversary import AdversaryStrategy, StrategyKind
from .checker import CheckReport, StageFact
from .core import MsgKind
from .netsim import NetworkModel, Partition, ScenarioConfig, ScriptRule, TraceRecord
from .state import StageName

LIBRARY_NAMES = (
    "happy-path",
    "example1",
    "example2-normal",
    "example2-timeout",
    "fig1-case1",
    "fig1-case2",
    "fig1-case3",
    "fig2-empty-view",
    "neg-theorem1",
)


class ScenarioError(ValueError):
    pass


# --- coercion helpers (trace-embedded configs carry strings) -------------------


def _int(v) -> int:
    return int(v)


def _float(v) -> float:
    return float(v)


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    return str(v).lower() == "true"


def _ints(v) -> tuple[int, ...]:
    return tuple(int(x) for x in v)


def _norm_scalar(v):
    """Assertion values normalize to strings so configs round-trip through
    the trace encoding byte-for-byte."""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return v


# --- config <-> dict -------------------------------------------------------------


def config_to_dict(cfg: ScenarioConfig) -> dict:
    net = cfg.network
    d = {
        "name": cfg.name,
        "k": cfg.k,
        "blocks_per_view": cfg.blocks_per_view,
        "views_to_run": cfg.views_to_run,
        "timeout_per_view": cfg.timeout_per_view,
        "max_steps": cfg.max_steps,
        "seed": cfg.seed,
        "epoch": cfg.epoch,
        "stop_quorum": cfg.stop_quorum,
        "negative_control": cfg.negative_control,
        "expected_violations": list(cfg.expected_violations),
        "network": {
            "profile": net.profile,
            "base_delay": net.base_delay,
            "jitter": net.jitter,
            "drop_probability": net.drop_probability,
            "duplicate_probability": net.duplicate_probability,
            "partitions": [
                {"start": p.start, "end": p.end, "side_a": sorted(p.side_a)}
                for p in net.partitions
            ],
            "script": [_rule_to_dict(r) for r in net.script],
        },
        "byzantine": {
            str(nid): {"strategy": s.kind.value,
                       "target_views": sorted(s.target_views)}
            for nid, s in sorted(cfg.byzantine.items())
        },
        "assertions": [{k: _norm_scalar(v) for k, v in a.items()}
                       for a in cfg.assertions],
    }
    return d


def _rule_to_dict(r: ScriptRule) -> dict:
    d: dict = {"action": r.action}
    if r.sender is not None:
        d["sender"] = r.sender
    if r.to is not None:
        d["to"] = list(r.to)
    if r.kind is not None:
        d["kind"] = r.kind.value
    if r.view is not None:
        d["view"] = r.view
    if r.block_index is not None:
        d["block_index"] = r.block_index
    if r.block_height is not None:
        d["block_height"] = r.block_height
    if r.payload is not None:
        d["payload"] = r.payload
    if r.delay:
        d["delay"] = r.delay
    return d


def _rule_from_dict(d: dict) -> ScriptRule:
    return ScriptRule(
        action=d.get("action", "drop"),
        sender=None if d.get("sender") is None else _int(d["sender"]),
        to=None if d.get("to") is None else _ints(d["to"]),
        kind=None if d.get("kind") is None else MsgKind(d["kind"]),
        view=None if d.get("view") is None else _int(d["view"]),
        block_index=None if d.get("block_index") is None else _int(d["block_index"]),
        block_height=None if d.get("block_height") is None else _int(d["block_height"]),
        payload=d.get("payload"),
        delay=_int(d.get("delay", 0)),
    )


def config_from_dict(d: dict) -> ScenarioConfig:
    known = {"name", "k", "blocks_per_view", "views_to_run", "timeout_per_view",
             "max_steps", "seed", "epoch", "stop_quorum", "negative_control",
             "expected_violations", "network", "byzantine", "assertions"}
    unknown = set(d) - known
    if unknown:
        raise ScenarioError(f"unknown config keys: {sorted(unknown)}")
    nd = d.get("network", {}) or {}
    unknown = set(nd) - {"profile", "base_delay", "jitter", "drop_probability",
                         "duplicate_probability", "partitions", "script"}
    if unknown:
        raise ScenarioError(f"unknown network keys: {sorted(unknown)}")
    net = NetworkModel(
        profile=nd.get("profile", "reliable"),
        base_delay=_int(nd.get("base_delay", 10)),
        jitter=_int(nd.get("jitter", 0)),
        drop_probability=_float(nd.get("drop_probability", 0.0)),
        duplicate_probability=_float(nd.get("duplicate_probability", 0.0)),
        partitions=tuple(
            Partition(_int(p["start"]), _int(p["end"]), frozenset(_ints(p["side_a"])))
            for p in nd.get("partitions", []) or []
        ),
        script=tuple(_rule_from_dict(r) for r in nd.get("script", []) or []),
    )
    byz = {}
    for nid, sd in (d.get("byzantine", {}) or {}).items():
        byz[_int(nid)] = AdversaryStrategy(
            kind=StrategyKind(sd["strategy"]),
            target_views=frozenset(_ints(sd.get("target_views", []))),
        )
    try:
        cfg = ScenarioConfig(
            name=d.get("name", "unnamed"),
            k=_int(d.get("k", 4)),
            blocks_per_view=_int(d.get("blocks_per_view", 3)),
            views_to_run=_int(d.get("views_to_run", 3)),
            timeout_per_view=_int(d.get("timeout_per_view", 400)),
            max_steps=_int(d.get("max_steps", 20000)),
            seed=_int(d.get("seed", 0)),
            epoch=_int(d.get("epoch", 0)),
            stop_quorum=d.get("stop_quorum", "all"),
            network=net,
            byzantine=byz,
            negative_control=_bool(d.get("negative_control", False)),
            expected_violations=tuple(d.get("expected_violations", []) or []),
            assertions=tuple(
                {k: _norm_scalar(v) for k, v in a.items()}
                for a in d.get("assertions", []) or []),
        )
        cfg.validate()
    except ValueError as e:
        raise ScenarioError(str(e)) from e
    return cfg


# --- loading ----------------------------------------------------------------------


def load_scenario(path_or_name: str, seed: Optional[int] = None) -> ScenarioConfig:
    """Load a scenario from a TOML file path or a library name."""
    import os

    if os.path.exists(path_or_name):
        with open(path_or_name, "rb") as fh:
            data = tomllib.load(fh)
    else:
        data = _load_library_toml(path_or_name)
    cfg = config_from_dict(data)
    if seed is not None:
        cfg.seed = seed
    return cfg


def _load_library_toml(name: str) -> dict:
    pkg = resources.files("giskard").joinpath("scenarios")
    candidate = pkg.joinpath(f"{name}.toml")
    if not candidate.is_file():
        raise ScenarioError(
            f"no scenario file and no library entry named {name!r} "
            f"(library: {', '.join(LIBRARY_NAMES)})")
    return tomllib.loads(candidate.read_text())


def library_scenarios() -> list[str]:
    return list(LIBRARY_NAMES)


# --- assertions --------------------------------------------------------------------


def _fact_matches(f: StageFact, sel: dict) -> bool:
    if f.stage != StageName(sel["stage"]):
        return False
    if sel.get("view") is not None and f.view != _int(sel["view"]):
        return False
    if sel.get("height") is not None and f.block.height != _int(sel["height"]):
        return False
    if sel.get("block_view") is not None and f.block.view_produced != _int(sel["block_view"]):
        return False
    if sel.get("block_index") is not None and f.block.index_in_view != _int(sel["block_index"]):
        return False
    if sel.get("payload") is not None and f.block.payload != sel["payload"]:
        return False
    return True


def _send_matches(r: TraceRecord, sel: dict) -> bool:
    if r.kind != "Send":
        return False
    m = r.message
    if m.kind != MsgKind(sel["kind"]):
        return False
    if sel.get("sender") is not None and r.node != _int(sel["sender"]):
        return False
    if sel.get("view") is not None and m.view != _int(sel["view"]):
        return False
    if sel.get("height") is not None and m.block.height != _int(sel["height"]):
        return False
    if sel.get("payload") is not None and m.block.payload != sel["payload"]:
        return False
    return True


def evaluate_assertions(config: ScenarioConfig, records: list[TraceRecord],
                        report: CheckReport) -> list[str]:
    """Evaluate the scenario's embedded expectations; returns failures."""
    failures = []
    roster = range(config.k)
    for i, a in enumerate(config.assertions):
        atype = a.get("type")
        label = f"assert[{i}] {atype}"
        if atype == "fact_present":
            nodes = list(roster) if _bool(a.get("all_nodes", False)) else (
                [_int(a["node"])] if a.get("node") is not None else None)
            matches = [f for f in report.facts if _fact_matches(f, a)]
            if nodes is None:
                if not matches:
                    failures.append(f"{label}: no matching fact")
            else:
                have = {f.node for f in matches}
                missing = [n for n in nodes if n not in have]
                if missing:
                    failures.append(f"{label}: missing at nodes {missing}")
        elif atype == "fact_absent":
            matches = [f for f in report.facts if _fact_matches(f, a)]
            if a.get("node") is not None:
                matches = [f for f in matches if f.node == _int(a["node"])]
            if matches:
                failures.append(
                    f"{label}: unexpectedly present at steps "
                    f"{sorted(f.first_step for f in matches)[:4]}")
        elif atype == "no_messages":
            hits = [r.step for r in records if _send_matches(r, a)]
            if hits:
                failures.append(f"{label}: {len(hits)} sends matched (first at "
                                f"step {hits[0]})")
        elif atype == "message_present":
            if not any(_send_matches(r, a) for r in records):
                failures.append(f"{label}: no send matched")
        elif atype == "view_reached":
            target = _int(a["view"])
            nodes = list(roster) if _bool(a.get("all_nodes", False)) else [_int(a["node"])]
            reached: dict[int, int] = {}
            for r in records:
                if r.kind == "ViewEntry":
                    reached[r.node] = max(reached.get(r.node, 0), _int(r.detail["view"]))
            lagging = [n for n in nodes if reached.get(n, 0) < target]
            if lagging:
                failures.append(f"{label}: nodes {lagging} never reached view {target}")
        elif atype == "violations_at_least":
            prop = a["property"]
            want = _int(a.get("count", 1))
            got = len(report.by_property().get(prop, []))
            if got < want:
                failures.append(f"{label}: wanted >={want} {prop} violations, got {got}")
        else:
            failures.append(f"{label}: unknown assertion type")
    return failures


# --- programmatic suite configs -------------------------------------------------------


def build_safety_config(k: int, strategy: StrategyKind, seed: int,
                        views: int = 3) -> ScenarioConfig:
    """One lossy run with a single Byzantine node driving the strategy in
    every view (strategies self-gate on the proposer role)."""
    return ScenarioConfig(
        name=f"safety-k{k}-{strategy.value}",
        k=k,
        blocks_per_view=3,
        views_to_run=views,
        timeout_per_view=250,
        max_steps=30000,
        seed=seed,
        stop_quorum="quorum",
        network=NetworkModel(profile="lossy", base_delay=10, jitter=4,
                             drop_probability=0.15),
        byzantine={1: AdversaryStrategy(strategy, frozenset(range(views + 2)))},
    )


def build_lemma_config(k: int, seed: int) -> ScenarioConfig:
    """Timeout-heavy lossy run: a tight view deadline plus a silent node
    forces frequent abnormal view changes."""
    return ScenarioConfig(
        name=f"lemmas-k{k}",
        k=k,
        blocks_per_view=3,
        views_to_run=4,
        timeout_per_view=120,
        max_steps=30000,
        seed=seed,
        stop_quorum="quorum",
        network=NetworkModel(profile="lossy", base_delay=10, jitter=4,
                             drop_probability=0.2),
        byzantine={2: AdversaryStrategy(StrategyKind.SILENT, frozenset(range(6)))},
    )


def build_random_config(rng) -> ScenarioConfig:
    """A randomized well-formed config, for determinism audits."""
    k = rng.choice([4, 7])
    strategies = list(StrategyKind)
    byz = {}
    if rng.random() < 0.7:
        byz[rng.randrange(k)] = AdversaryStrategy(
            rng.choice(strategies), frozenset({0, 1, rng.randrange(3)}))
    profile = rng.choice(["reliable", "lossy"])
    net = NetworkModel(
        profile=profile,
        base_delay=rng.choice([5, 10]),
        jitter=rng.choice([0, 3]) if profile == "lossy" else 0,
        drop_probability=rng.choice([0.0, 0.1, 0.2]) if profile == "lossy" else 0.0,
    )
    return ScenarioConfig(
        name="determinism-audit",
        k=k,
        blocks_per_view=rng.choice([1, 3]),
        views_to_run=rng.choice([2, 3]),
        timeout_per_view=rng.choice([150, 300]),
        max_steps=20000,
        seed=rng.randrange(10**6),
        stop_quorum="quorum",
        network=net,
        byzantine=byz,
    )

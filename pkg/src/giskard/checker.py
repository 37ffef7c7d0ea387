"""Offline safety checker.

Re-derives every node's stage facts from raw trace deliveries with an
independent implementation of the stage predicates (quorum counting, QC
evidence, child links), then checks the protocol's safety properties over
those facts:

  Theorem 1  per-view prepare-stage height injectivity
  Theorem 2  precommit-stage height injectivity
  Theorem 3  commit-stage height injectivity
  Lemma 1    every ViewChangeQC block is at MaxHeight or MaxHeight-1
  Lemma 3/4  prepare-in-view heights never regress across views, and
             equal-height cross-view pairs sit at the old view's top and the
             new view's bottom

plus honest-node discipline (no equivocation, no out-of-turn or over-sized
proposals, vote justification, liminal silence) and certificate forgery
(every aggregate's signers really sent the underlying messages). Violations
carry replayable witness steps. Node-claimed stage records are cross-checked
against the derived facts.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Optional

from .core import (
    GENESIS,
    Block,
    CertKind,
    ConsensusMessage,
    MsgKind,
    block_proposer_for_view,
    hex_digest,
    quorum_threshold,
)
from .netsim import ScenarioConfig, TraceRecord
from .state import StageName
from .transitions import NORMAL_KINDS, TIMEOUT_KINDS


@dataclass(frozen=True, slots=True)
class StageFact:
    node: int
    block: Block
    stage: StageName
    view: Optional[int]  # set for PrepareInView only
    first_step: int
    first_time: int


@dataclass(frozen=True, slots=True)
class Violation:
    property: str  # Theorem1|Theorem2|Theorem3|Lemma1|Lemma3|HonestEquivocation|CertificateForgery
    witness_steps: tuple[int, ...]
    explanation: str


@dataclass
class CheckReport:
    facts: list[StageFact]
    violations: list[Violation]
    cross_mismatches: list[str]

    def by_property(self) -> dict[str, list[Violation]]:
        out: dict[str, list[Violation]] = {}
        for v in self.violations:
            out.setdefault(v.property, []).append(v)
        return out

    def unexpected(self, expected: Iterable[str]) -> list[Violation]:
        allowed = set(expected)
        return [v for v in self.violations if v.property not in allowed]

    def missing_expected(self, expected: Iterable[str]) -> list[str]:
        have = {v.property for v in self.violations}
        return [p for p in expected if p not in have]


class _ReplayNode:
    __slots__ = ("view", "timed_out", "parked", "counted", "votes", "qc_pairs",
                 "prepared_min", "vc_senders", "pqc_last", "known", "children")

    def __init__(self):
        self.view = 0
        self.timed_out = False
        self.parked: list[ConsensusMessage] = []
        self.counted: set[tuple] = set()
        self.votes: dict[tuple[int, int], set[int]] = {}
        self.qc_pairs: set[tuple[int, int]] = set()
        self.prepared_min: dict[int, int] = {}
        self.vc_senders: dict[int, set[int]] = {}
        self.pqc_last: dict[int, set[int]] = {}
        self.known: set[int] = {GENESIS.hash}
        self.children: dict[int, set[int]] = {}


class StageFactExtractor:
    """Replays l_counting evolution per node from the trace alone.

    View tracking for honest nodes is advanced by the same quorum rules the
    protocol uses and cross-checked against the trace's ViewEntry records;
    Byzantine nodes' views are taken from the trace (their internals are
    arbitrary), but their facts are still derived with the honest counting
    rules, so every fact is grounded in authentic deliveries.
    """

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.params = config.params()
        self.quorum = quorum_threshold(self.params)
        self.bpv = self.params.blocks_per_view
        self.byzantine = set(config.byzantine)
        self.registry: dict[int, Block] = {GENESIS.hash: GENESIS}
        self.nodes = {nid: _ReplayNode() for nid in self.params.roster}
        self.facts: dict[tuple, StageFact] = {}
        self.audit: list[Violation] = []
        self.view_mismatches: list[str] = []
        for nid in self.params.roster:
            key = (nid, GENESIS.hash, StageName.PREPARE, None)
            self.facts[key] = StageFact(nid, GENESIS, StageName.PREPARE, None, 0, 0)

    # -- record handling ------------------------------------------------------

    def run(self, records: Iterable[TraceRecord]) -> None:
        for r in records:
            if r.message is not None:
                self._register_block(r.message.block)
            if r.kind == "Deliver":
                self._on_deliver(r)
            elif r.kind == "Send":
                self._on_send(r)
            elif r.kind == "Timeout":
                self._on_timeout(r)
            elif r.kind == "ViewEntry":
                self._on_view_entry(r)

    def _register_block(self, block: Block) -> None:
        self.registry.setdefault(block.hash, block)

    def _node_learn(self, n: _ReplayNode, block: Block) -> None:
        if block.hash not in n.known:
            n.known.add(block.hash)
            n.children.setdefault(block.parent_hash, set()).add(block.hash)

    def _on_deliver(self, r: TraceRecord) -> None:
        n = self.nodes[r.node]
        m = r.message
        if m.view < n.view:
            return
        self._node_learn(n, m.block)
        n.parked.append(m)
        self._drain(n, r.node, r.step, r.time)

    def _on_timeout(self, r: TraceRecord) -> None:
        n = self.nodes[r.node]
        n.timed_out = True
        self._drain(n, r.node, r.step, r.time)

    def _on_view_entry(self, r: TraceRecord) -> None:
        n = self.nodes[r.node]
        v = int(r.detail["view"])
        if r.node not in self.byzantine and n.view != v:
            self.view_mismatches.append(
                f"step {r.step}: node {r.node} entered view {v} but derived view is {n.view}"
            )
        n.view = v
        n.timed_out = False
        n.parked = [m for m in n.parked if m.view >= n.view]
        self._drain(n, r.node, r.step, r.time)

    def _on_send(self, r: TraceRecord) -> None:
        n = self.nodes[r.node]
        m = r.message
        self._node_learn(n, m.block)
        if r.node in self.byzantine:
            return
        if n.timed_out and m.kind in (MsgKind.PREPARE_BLOCK, MsgKind.PREPARE_VOTE):
            self.audit.append(Violation(
                "HonestEquivocation", (r.step,),
                f"honest node {r.node} sent {m.kind.value} during its timeout period"))
        if m.kind == MsgKind.PREPARE_VOTE:
            b = m.block
            justified = (
                b.parent_hash == GENESIS.hash
                or self._prepared(n, b.parent_hash)
                or (m.parent_qc is not None
                    and m.parent_qc.block_hash == b.parent_hash)
            )
            if not justified:
                self.audit.append(Violation(
                    "HonestEquivocation", (r.step,),
                    f"honest node {r.node} voted for {hex_digest(b.hash)} in view "
                    f"{m.view} without parent prepare evidence"))

    # -- processing -----------------------------------------------------------

    def _drain(self, n: _ReplayNode, nid: int, step: int, time: int) -> None:
        while True:
            progressed = False
            for m in n.parked:
                if m.view > n.view:
                    continue
                if m.view < n.view:
                    n.parked.remove(m)
                    progressed = True
                    break
                allowed = TIMEOUT_KINDS if n.timed_out else NORMAL_KINDS
                if m.kind not in allowed:
                    continue
                n.parked.remove(m)
                advance = self._process(n, nid, m, step, time)
                progressed = True
                if advance and nid not in self.byzantine:
                    n.view += 1
                    n.timed_out = False
                    return
                break
            if not progressed:
                return

    def _process(self, n: _ReplayNode, nid: int, m: ConsensusMessage,
                 step: int, time: int) -> bool:
        key = m.dedup_key
        if key in n.counted:
            return False
        n.counted.add(key)
        self._node_learn(n, m.block)
        b = m.block
        touched = [(b.hash, m.view)]
        advance = False

        if m.kind == MsgKind.PREPARE_VOTE:
            tally = n.votes.setdefault((b.hash, m.view), set())
            tally.add(m.sender)
            if len(tally) >= self.quorum:
                self._mark_prepared(n, b.hash, m.view)
                if len(tally) == self.quorum and b.index_in_view == self.bpv:
                    advance = True
        elif m.kind == MsgKind.PREPARE_QC:
            n.qc_pairs.add((b.hash, m.view))
            self._mark_prepared(n, b.hash, m.view)
            if n.timed_out:
                if b.index_in_view == self.bpv:
                    n.pqc_last.setdefault(m.view, set()).add(m.sender)
                    if self._vc_count(n, m.view) == self.quorum:
                        advance = True
            elif b.index_in_view == self.bpv:
                advance = True
        elif m.kind == MsgKind.VIEW_CHANGE:
            n.vc_senders.setdefault(m.view, set()).add(m.sender)
            if self._vc_count(n, m.view) == self.quorum:
                advance = True
        elif m.kind == MsgKind.VIEW_CHANGE_QC:
            advance = True

        if m.parent_qc is not None and m.parent_qc.kind == CertKind.PREPARE:
            qc = m.parent_qc
            unfold_key = (MsgKind.PREPARE_QC, m.sender, qc.block_hash, qc.view)
            if unfold_key not in n.counted:
                n.counted.add(unfold_key)
                n.qc_pairs.add((qc.block_hash, qc.view))
                self._mark_prepared(n, qc.block_hash, qc.view)
                touched.append((qc.block_hash, qc.view))

        self._emit_facts(nid, n, touched, step, time)
        return advance

    def _vc_count(self, n: _ReplayNode, view: int) -> int:
        return len(n.vc_senders.get(view, set()) | n.pqc_last.get(view, set()))

    def _mark_prepared(self, n: _ReplayNode, bh: int, view: int) -> None:
        prev = n.prepared_min.get(bh)
        if prev is None or view < prev:
            n.prepared_min[bh] = view

    # -- predicates (independent of the node-state implementation) -------------

    def _prepared(self, n: _ReplayNode, bh: int) -> bool:
        if bh == GENESIS.hash:
            return True
        v = n.prepared_min.get(bh)
        return v is not None and v <= n.view

    def _piv(self, n: _ReplayNode, bh: int, view: int) -> bool:
        if (bh, view) in n.qc_pairs:
            return True
        tally = n.votes.get((bh, view))
        return tally is not None and len(tally) >= self.quorum

    def _precommit(self, n: _ReplayNode, bh: int) -> bool:
        return self._prepared(n, bh) and any(
            self._prepared(n, c) for c in n.children.get(bh, ()))

    def _commit(self, n: _ReplayNode, bh: int) -> bool:
        return self._precommit(n, bh) and any(
            self._precommit(n, c) for c in n.children.get(bh, ()))

    def _emit_facts(self, nid: int, n: _ReplayNode, touched, step, time) -> None:
        # Facts are only stated about blocks the node itself knows in full;
        # evidence against hash-only blocks stays recorded and surfaces as
        # facts at whatever step the node learns the block.
        for bh, view in touched:
            if bh not in n.known:
                continue
            blk = self.registry.get(bh)
            if blk is None:
                continue
            key = (nid, bh, StageName.PREPARE_IN_VIEW, view)
            if key not in self.facts and self._piv(n, bh, view):
                self.facts[key] = StageFact(nid, blk, StageName.PREPARE_IN_VIEW,
                                            view, step, time)
            cur = blk
            for _ in range(3):
                if cur is None or cur.hash not in n.known:
                    break
                for stage, pred in ((StageName.PREPARE, self._prepared),
                                    (StageName.PRECOMMIT, self._precommit),
                                    (StageName.COMMIT, self._commit)):
                    k = (nid, cur.hash, stage, None)
                    if k not in self.facts and pred(n, cur.hash):
                        self.facts[k] = StageFact(nid, cur, stage, None, step, time)
                cur = self.registry.get(cur.parent_hash)


def extract_stage_facts(records: Iterable[TraceRecord],
                        config: ScenarioConfig) -> list[StageFact]:
    ex = StageFactExtractor(config)
    ex.run(records)
    return sorted(ex.facts.values(), key=lambda f: (f.first_step, f.node))


# --- property checks -----------------------------------------------------------


def check_theorem1(facts: list[StageFact]) -> list[Violation]:
    """Same view + same height + prepare-in-view somewhere => same block."""
    groups: dict[tuple[int, int], dict[int, StageFact]] = {}
    for f in facts:
        if f.stage != StageName.PREPARE_IN_VIEW:
            continue
        groups.setdefault((f.view, f.block.height), {}).setdefault(f.block.hash, f)
    out = []
    for (view, height), blocks in sorted(groups.items()):
        if len(blocks) > 1:
            wits = tuple(sorted(f.first_step for f in blocks.values()))
            names = ", ".join(hex_digest(h) for h in sorted(blocks))
            out.append(Violation(
                "Theorem1", wits,
                f"blocks {names} both at prepare stage in view {view} at height {height}"))
    return out


def _height_forks(facts, stage: StageName) -> dict[int, dict[int, StageFact]]:
    """Heights where two or more distinct blocks hold the stage."""
    groups: dict[int, dict[int, StageFact]] = {}
    for f in facts:
        if f.stage != stage or f.block.hash == GENESIS.hash:
            continue
        groups.setdefault(f.block.height, {}).setdefault(f.block.hash, f)
    return {h: blocks for h, blocks in groups.items() if len(blocks) > 1}


def _fork_violations(forks, stage: StageName, prop: str) -> list[Violation]:
    out = []
    for height, blocks in sorted(forks.items()):
        wits = tuple(sorted(f.first_step for f in blocks.values()))
        names = ", ".join(hex_digest(h) for h in sorted(blocks))
        out.append(Violation(
            prop, wits,
            f"blocks {names} both at {stage.value} stage at height {height}"))
    return out


def check_theorem2(facts: list[StageFact]) -> list[Violation]:
    return _fork_violations(_height_forks(facts, StageName.PRECOMMIT),
                            StageName.PRECOMMIT, "Theorem2")


def check_theorem3(facts: list[StageFact]) -> list[Violation]:
    """Commit forks; the proof reduces each one to a precommit fork, so a
    commit fork at a height with no precommit fork is flagged separately."""
    commit_forks = _height_forks(facts, StageName.COMMIT)
    out = _fork_violations(commit_forks, StageName.COMMIT, "Theorem3")
    precommit_heights = set(_height_forks(facts, StageName.PRECOMMIT))
    for height in sorted(set(commit_forks) - precommit_heights):
        wits = tuple(sorted(f.first_step for f in commit_forks[height].values()))
        out.append(Violation(
            "Theorem3", wits,
            f"commit fork at height {height} without a matching precommit fork "
            "(proof-structure breach)"))
    return out


def check_lemma1(records: Iterable[TraceRecord],
                 facts: list[StageFact]) -> list[Violation]:
    """Every emitted ViewChangeQC aggregates the globally highest prepared
    block as of that step, or the one right below it."""
    prepare_steps = sorted(
        (f.first_step, f.block.height)
        for f in facts if f.stage == StageName.PREPARE
    )
    out = []
    idx, max_h = 0, 0
    for r in records:
        if r.kind != "Send" or r.message.kind != MsgKind.VIEW_CHANGE_QC:
            continue
        while idx < len(prepare_steps) and prepare_steps[idx][0] <= r.step:
            max_h = max(max_h, prepare_steps[idx][1])
            idx += 1
        h = r.message.block.height
        if h not in (max_h, max_h - 1):
            out.append(Violation(
                "Lemma1", (r.step,),
                f"ViewChangeQC for view {r.message.view} aggregated height {h} "
                f"but MaxHeight was {max_h}"))
    return out


def check_lemma3_monotonicity(facts: list[StageFact]) -> list[Violation]:
    """Prepare-in-view heights never decrease across views (Lemma 3), and any
    equal-height pair across views matches the top-of-old/bottom-of-new
    refinement (Lemma 4)."""
    by_view: dict[int, dict[int, dict[int, StageFact]]] = {}
    for f in facts:
        if f.stage != StageName.PREPARE_IN_VIEW:
            continue
        by_view.setdefault(f.view, {}).setdefault(f.block.height, {})[f.block.hash] = f
    out = []
    views = sorted(by_view)
    best_step, best_view, best_h = None, None, -1
    for v in views:
        heights = by_view[v]
        lo = min(heights)
        if best_h > lo:
            wit = heights[lo]
            steps = tuple(sorted({best_step, *(f.first_step for f in wit.values())}))
            out.append(Violation(
                "Lemma3", steps,
                f"height regressed: view {best_view} prepared height {best_h} "
                f"but view {v} prepared height {lo}"))
        hi = max(heights)
        if hi > best_h:
            best_h, best_view = hi, v
            best_step = min(f.first_step for f in heights[hi].values())
    for v1, v2 in combinations(views, 2):
        shared = set(by_view[v1]) & set(by_view[v2])
        for h in sorted(shared):
            ok = h == max(by_view[v1]) and h == min(by_view[v2])
            if not ok:
                steps = tuple(sorted(
                    f.first_step
                    for f in (*by_view[v1][h].values(), *by_view[v2][h].values())))
                out.append(Violation(
                    "Lemma3", steps,
                    f"equal-height pair at {h} across views {v1}<{v2} breaks the "
                    f"highest-in-old/lowest-in-new refinement"))
    return out


def check_honest_discipline(records: Iterable[TraceRecord],
                            config: ScenarioConfig,
                            audit: Optional[list[Violation]] = None) -> list[Violation]:
    """No honest same-height double votes, out-of-turn or oversized
    proposals; plus the replay-time audits (vote justification, liminal
    silence) when provided."""
    params = config.params()
    byz = set(config.byzantine)
    votes: dict[tuple[int, int, int], dict[int, int]] = {}
    proposals: dict[tuple[int, int, int], dict[int, int]] = {}
    out = list(audit or ())
    for r in records:
        if r.kind != "Send" or r.node in byz:
            continue
        m = r.message
        if m.kind == MsgKind.PREPARE_VOTE:
            seen = votes.setdefault((r.node, m.view, m.block.height), {})
            seen.setdefault(m.block.hash, r.step)
            if len(seen) > 1:
                out.append(Violation(
                    "HonestEquivocation", tuple(sorted(seen.values())),
                    f"honest node {r.node} voted for two height-{m.block.height} "
                    f"blocks in view {m.view}"))
        elif m.kind == MsgKind.PREPARE_BLOCK:
            if r.node != block_proposer_for_view(params.roster, m.view):
                out.append(Violation(
                    "HonestEquivocation", (r.step,),
                    f"honest node {r.node} proposed out of turn in view {m.view}"))
            if m.block.index_in_view > params.blocks_per_view:
                out.append(Violation(
                    "HonestEquivocation", (r.step,),
                    f"honest node {r.node} over-proposed index "
                    f"{m.block.index_in_view} in view {m.view}"))
            seen = proposals.setdefault((r.node, m.view, m.block.height), {})
            seen.setdefault(m.block.hash, r.step)
            if len(seen) > 1:
                out.append(Violation(
                    "HonestEquivocation", tuple(sorted(seen.values())),
                    f"honest node {r.node} proposed two height-{m.block.height} "
                    f"blocks in view {m.view}"))
    return out


def check_certificates(records: Iterable[TraceRecord],
                       config: ScenarioConfig) -> list[Violation]:
    """Forgery detection: every aggregate's signers must have actually sent
    the underlying votes (prepare aggregates) or view-change contributions
    (view-change aggregates) earlier in the trace."""
    params = config.params()
    votes_sent: set[tuple[int, int, int]] = set()
    vc_sent: set[tuple[int, int]] = set()
    out = []
    for r in records:
        if r.kind != "Send":
            continue
        m = r.message
        for qc in (m.parent_qc, m.view_change_qc, m.certificate):
            if qc is None:
                continue
            if qc.block_hash == GENESIS.hash and qc.view == 0:
                continue  # pre-agreed genesis certificate
            if qc.kind == CertKind.PREPARE:
                bad = sorted(s for s in qc.signers
                             if (s, qc.block_hash, qc.view) not in votes_sent)
            else:
                bad = sorted(s for s in qc.signers if (s, qc.view) not in vc_sent)
            if bad:
                out.append(Violation(
                    "CertificateForgery", (r.step,),
                    f"aggregate for {hex_digest(qc.block_hash)} view {qc.view} "
                    f"names signers {bad} with no matching sends"))
        if m.kind == MsgKind.PREPARE_VOTE:
            votes_sent.add((m.sender, m.block.hash, m.view))
        elif m.kind == MsgKind.VIEW_CHANGE:
            vc_sent.add((m.sender, m.view))
        elif (m.kind == MsgKind.PREPARE_QC
              and m.block.index_in_view == params.blocks_per_view):
            vc_sent.add((m.sender, m.view))
    return out


def quorum_intersection_oracle(k: int, threshold: Optional[int] = None) -> bool:
    """Exhaustively confirm every pair of quorum-sized signer sets from a
    k-roster overlaps in at least f+1 nodes (brute force, k <= 12)."""
    if k > 12:
        raise ValueError("brute-force bound is k <= 12")
    f = (k - 1) // 3
    t = threshold if threshold is not None else k - f
    if t < f + 1:
        return False
    subsets = [frozenset(c) for c in combinations(range(k), t)]
    return all(len(a & b) >= f + 1 for a, b in combinations(subsets, 2))


def cross_validate(records: Iterable[TraceRecord], facts: list[StageFact],
                   config: ScenarioConfig) -> list[str]:
    """Node-claimed StageTransition records must agree with the derived facts
    (honest nodes; compared by fact identity and simulation time)."""
    byz = set(config.byzantine)
    claims: dict[tuple, int] = {}
    for r in records:
        if r.kind != "StageTransition" or r.node in byz:
            continue
        view = r.detail.get("view")
        view = None if view in (None, "-") else int(view)
        key = (r.node, int(r.detail["block"], 16), StageName(r.detail["stage"]), view)
        claims.setdefault(key, r.time)
    derived = {
        (f.node, f.block.hash, f.stage, f.view): f.first_time
        for f in facts if f.node not in byz
    }
    out = []
    for key in sorted(claims.keys() - derived.keys()):
        out.append(f"node claimed {key} but checker never derived it")
    for key in sorted(derived.keys() - claims.keys()):
        out.append(f"checker derived {key} but node never claimed it")
    for key in sorted(claims.keys() & derived.keys()):
        if claims[key] != derived[key]:
            out.append(
                f"fact {key} claimed at t={claims[key]} but derived at t={derived[key]}")
    return out


def run_all_checks(records: list[TraceRecord],
                   config: ScenarioConfig) -> CheckReport:
    ex = StageFactExtractor(config)
    ex.run(records)
    facts = sorted(ex.facts.values(), key=lambda f: (f.first_step, f.node))
    violations = []
    violations += check_theorem1(facts)
    violations += check_theorem2(facts)
    violations += check_theorem3(facts)
    violations += check_lemma1(records, facts)
    violations += check_lemma3_monotonicity(facts)
    violations += check_honest_discipline(records, config, ex.audit)
    violations += check_certificates(records, config)
    mismatches = list(ex.view_mismatches)
    mismatches += cross_validate(records, facts, config)
    return CheckReport(facts=facts, violations=violations,
                       cross_mismatches=mismatches)

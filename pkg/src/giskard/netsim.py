"""Deterministic discrete-event network simulator.

Broadcast delivery with seeded jitter/drops, a synchronized global clock,
simultaneous per-view timeouts, and an append-only trace. Identical
(config, seed) pairs produce byte-identical traces: events execute in strict
(time, kind-priority, sequence) order with timeouts winning ties, and the
only randomness is the run's own seeded generator, consulted in a pinned
order (per message, per recipient in roster order).
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Optional, Union

from .adversary import AdversaryStrategy, ByzantineNode
from .core import (
    GENESIS,
    ConsensusMessage,
    MsgKind,
    NodeId,
    ProtocolParams,
    hex_digest,
    message_invalid_reason,
    message_token,
    quorum_threshold,
)
from .state import NodeState, StageName
from .transitions import (
    Deliver,
    TimeoutFired,
    TransitionOutput,
    ViewEntered,
    apply_event,
)

PRIO_TIMEOUT = 0
PRIO_NORMAL = 1

NETWORK_DROP_REASONS = ("network", "partition", "scripted")


@dataclass(frozen=True, slots=True)
class Partition:
    start: int
    end: int
    side_a: frozenset[int]

    def separates(self, a: NodeId, b: NodeId, now: int) -> bool:
        return self.start <= now < self.end and ((a in self.side_a) != (b in self.side_a))


@dataclass(frozen=True, slots=True)
class ScriptRule:
    """One scripted-delivery rule; None fields match anything."""

    action: str = "drop"  # drop | delay
    sender: Optional[int] = None
    to: Optional[tuple[int, ...]] = None
    kind: Optional[MsgKind] = None
    view: Optional[int] = None
    block_index: Optional[int] = None
    block_height: Optional[int] = None
    payload: Optional[str] = None
    delay: int = 0

    def matches(self, msg: ConsensusMessage, sender: NodeId, recipient: NodeId) -> bool:
        if self.sender is not None and sender != self.sender:
            return False
        if self.to is not None and recipient not in self.to:
            return False
        if self.kind is not None and msg.kind != self.kind:
            return False
        if self.view is not None and msg.view != self.view:
            return False
        if self.block_index is not None and msg.block.index_in_view != self.block_index:
            return False
        if self.block_height is not None and msg.block.height != self.block_height:
            return False
        if self.payload is not None and msg.block.payload != self.payload:
            return False
        return True


@dataclass(frozen=True, slots=True)
class NetworkModel:
    profile: str = "reliable"  # reliable | lossy | scripted
    base_delay: int = 10
    jitter: int = 0
    drop_probability: float = 0.0
    duplicate_probability: float = 0.0
    partitions: tuple[Partition, ...] = ()
    script: tuple[ScriptRule, ...] = ()


@dataclass
class ScenarioConfig:
    """Everything one run needs; embedded verbatim in its trace."""

    name: str = "unnamed"
    k: int = 4
    blocks_per_view: int = 3
    views_to_run: int = 3
    timeout_per_view: int = 400
    max_steps: int = 20000
    seed: int = 0
    epoch: int = 0
    stop_quorum: str = "all"  # all | quorum
    network: NetworkModel = field(default_factory=NetworkModel)
    byzantine: dict[NodeId, AdversaryStrategy] = field(default_factory=dict)
    negative_control: bool = False
    expected_violations: tuple[str, ...] = ()
    assertions: tuple[dict, ...] = ()

    def params(self) -> ProtocolParams:
        return ProtocolParams(node_count=self.k,
                              blocks_per_view=self.blocks_per_view,
                              timeout_per_view=self.timeout_per_view)

    def validate(self) -> None:
        p = self.params()
        for nid in self.byzantine:
            if nid not in p.roster:
                raise ValueError(f"byzantine node {nid} not in roster")
        if len(self.byzantine) > p.fault_bound and not self.negative_control:
            raise ValueError(
                f"{len(self.byzantine)} byzantine nodes exceed f={p.fault_bound}; "
                "mark the scenario negative_control and declare expected_violations"
            )
        if self.negative_control and not self.expected_violations:
            raise ValueError("negative_control scenarios must declare expected_violations")
        if self.stop_quorum not in ("all", "quorum"):
            raise ValueError(f"bad stop_quorum {self.stop_quorum!r}")
        if self.network.profile not in ("reliable", "lossy", "scripted"):
            raise ValueError(f"bad network profile {self.network.profile!r}")

    @property
    def honest_nodes(self) -> tuple[NodeId, ...]:
        return tuple(n for n in range(self.k) if n not in self.byzantine)


@dataclass(slots=True)
class TraceRecord:
    step: int
    time: int
    kind: str  # Send | Deliver | Drop | Timeout | ViewEntry | StageTransition
    node: NodeId
    message: Optional[ConsensusMessage] = None
    msg_token: Optional[str] = None
    detail: dict = field(default_factory=dict)


class World:
    """Mutable simulation universe: node boxes, event queue, clock, trace."""

    def __init__(self, config: ScenarioConfig):
        config.validate()
        self.config = config
        self.params = config.params()
        self.net = config.network
        self.rng = random.Random(config.seed)
        self.clock = 0
        self.trace: list[TraceRecord] = []
        self.events_processed = 0
        self._heap: list = []
        self._seq = 0
        self._deadlines: dict[int, int] = {}
        self._entered: dict[NodeId, int] = {}
        self._entry_reasons: dict[NodeId, str] = {}
        self._emitted_facts: set[tuple] = set()
        self.boxes: dict[NodeId, Union[NodeState, ByzantineNode]] = {}
        for nid in self.params.roster:
            st = NodeState(nid, self.params, epoch=config.epoch)
            strat = config.byzantine.get(nid)
            self.boxes[nid] = ByzantineNode(st, strat) if strat else st
        for nid in self.params.roster:
            self._emit("StageTransition", nid,
                       detail={"block": hex_digest(GENESIS.hash),
                               "stage": StageName.PREPARE.value,
                               "view": None, "height": 0})
            self._emitted_facts.add((nid, GENESIS.hash, StageName.PREPARE))
            self._push(0, PRIO_NORMAL, ("view_entry", nid, 0))

    # -- plumbing -------------------------------------------------------------

    def node_state(self, nid: NodeId) -> NodeState:
        box = self.boxes[nid]
        return box.state if isinstance(box, ByzantineNode) else box

    def _apply(self, nid: NodeId, event) -> TransitionOutput:
        box = self.boxes[nid]
        if isinstance(box, ByzantineNode):
            return box.apply(event)
        return apply_event(box, event)

    def _push(self, time: int, prio: int, payload: tuple) -> None:
        heapq.heappush(self._heap, (time, prio, self._seq, payload))
        self._seq += 1

    def _emit(self, kind: str, node: NodeId, message=None, token=None,
              detail=None) -> None:
        self.trace.append(TraceRecord(len(self.trace), self.clock, kind, node,
                                      message, token, detail or {}))

    # -- network --------------------------------------------------------------

    def broadcast(self, sender: NodeId, msg: ConsensusMessage) -> None:
        """One Send record plus, per roster member, a Deliver or Drop."""
        token = message_token(msg)
        invalid = message_invalid_reason(msg, self.params)
        self._emit("Send", sender, msg, token)
        lossy = self.net.profile == "lossy"
        for recipient in self.params.roster:
            delay = self.net.base_delay
            verdict = None
            if self.net.profile == "scripted":
                for rule in self.net.script:
                    if rule.matches(msg, sender, recipient):
                        if rule.action == "drop":
                            verdict = "scripted"
                        else:
                            delay += rule.delay
                        break
            if verdict is None and any(
                    p.separates(sender, recipient, self.clock)
                    for p in self.net.partitions):
                verdict = "partition"
            duplicate = False
            if lossy:
                # Pinned draw order: drop (skipping loopback), jitter, dup.
                if (recipient != sender and verdict is None
                        and self.rng.random() < self.net.drop_probability):
                    verdict = "network"
                if self.net.jitter:
                    delay += self.rng.randint(0, self.net.jitter)
                if (self.net.duplicate_probability
                        and self.rng.random() < self.net.duplicate_probability):
                    duplicate = True
            if verdict is not None:
                self._emit("Drop", recipient, msg, token,
                           {"from": sender, "reason": verdict})
                continue
            if invalid is not None:
                # Structurally bad messages never reach a node's buffers.
                self._emit_later(self.clock + delay, "drop", recipient, msg,
                                 token, sender, f"invalid:{invalid}")
                continue
            self._push(self.clock + delay, PRIO_NORMAL,
                       ("deliver", recipient, msg, token, sender))
            if duplicate:
                self._push(self.clock + delay + self.net.base_delay, PRIO_NORMAL,
                           ("deliver", recipient, msg, token, sender))

    def _emit_later(self, time, kind, node, msg, token, sender, reason) -> None:
        self._push(time, PRIO_NORMAL, ("drop", node, msg, token, sender, reason))

    # -- event loop -------------------------------------------------------------

    def step(self) -> None:
        time, _prio, _seq, payload = heapq.heappop(self._heap)
        self.clock = time
        self.events_processed += 1
        kind = payload[0]
        if kind == "deliver":
            _, nid, msg, token, sender = payload
            self._emit("Deliver", nid, msg, token, {"from": sender})
            out = self._apply(nid, Deliver(msg, invalid_reason=None))
            self._post(nid, out)
        elif kind == "drop":
            _, nid, msg, token, sender, reason = payload
            self._emit("Drop", nid, msg, token, {"from": sender, "reason": reason})
        elif kind == "timeout":
            _, nid, view = payload
            st = self.node_state(nid)
            if st.view != view or st.timed_out:
                return
            self._emit("Timeout", nid,
                       detail={"view": view, "digest": hex_digest(st.state_digest())})
            out = self._apply(nid, TimeoutFired(view))
            self._post(nid, out)
        elif kind == "view_entry":
            _, nid, view = payload
            st = self.node_state(nid)
            if st.view != view:
                return
            self._pin_deadline(view)
            if self._deadlines[view] <= self.clock and not st.timed_out:
                self._push(self.clock, PRIO_TIMEOUT, ("timeout", nid, view))
            self._entered[nid] = view
            reason = self._entry_reasons.pop(nid, "initial")
            self._emit("ViewEntry", nid,
                       detail={"view": view, "reason": reason,
                               "digest": hex_digest(st.state_digest())})
            out = self._apply(nid, ViewEntered(view))
            if view == 0:
                out.touch(GENESIS.hash, 0)
            self._post(nid, out)
        else:  # pragma: no cover - queue only ever holds the kinds above
            raise AssertionError(kind)

    def _pin_deadline(self, view: int) -> None:
        """The first entry into a view fixes its global timeout instant."""
        if view in self._deadlines:
            return
        self._deadlines[view] = self.clock + self.params.timeout_per_view
        for nid in self.params.roster:
            self._push(self._deadlines[view], PRIO_TIMEOUT, ("timeout", nid, view))

    def _post(self, nid: NodeId, out: TransitionOutput) -> None:
        for msg, reason in out.dropped:
            self._emit("Drop", nid, msg, message_token(msg),
                       {"from": msg.sender, "reason": f"local:{reason}"})
        for msg in out.broadcasts:
            self.broadcast(nid, msg)
        self._record_stage_facts(nid, out.touched)
        if out.entered_view is not None:
            self._entry_reasons[nid] = out.advance_reason or "unknown"
            self._push(self.clock, PRIO_NORMAL, ("view_entry", nid, out.entered_view))

    def _record_stage_facts(self, nid: NodeId, touched: set[tuple[int, int]]) -> None:
        """Emit StageTransition records for facts that just became true.

        Stage predicates are monotone, so it suffices to evaluate the touched
        blocks and two generations of their ancestors.
        """
        st = self.node_state(nid)
        for bh, view in touched:
            block = st.known_blocks.get(bh)
            if block is None:
                continue
            key = (nid, bh, StageName.PREPARE_IN_VIEW, view)
            if key not in self._emitted_facts and st.prepare_in_view(block, view):
                self._emitted_facts.add(key)
                self._emit("StageTransition", nid,
                           detail={"block": hex_digest(bh),
                                   "stage": StageName.PREPARE_IN_VIEW.value,
                                   "view": view, "height": block.height})
            cur = block
            for _ in range(3):
                if cur is None:
                    break
                for stage, pred in ((StageName.PREPARE, st.prepare_stage),
                                    (StageName.PRECOMMIT, st.precommit_stage),
                                    (StageName.COMMIT, st.commit_stage)):
                    key = (nid, cur.hash, stage)
                    if key not in self._emitted_facts and pred(cur):
                        self._emitted_facts.add(key)
                        self._emit("StageTransition", nid,
                                   detail={"block": hex_digest(cur.hash),
                                           "stage": stage.value, "view": None,
                                           "height": cur.height})
                cur = st.known_blocks.get(cur.parent_hash)

    # -- termination --------------------------------------------------------------

    def done(self) -> bool:
        honest = self.config.honest_nodes
        reached = sum(
            1 for n in honest
            if self._entered.get(n, 0) >= self.config.views_to_run
        )
        if self.config.stop_quorum == "quorum":
            return reached >= min(len(honest), quorum_threshold(self.params))
        return reached == len(honest)

    def summary(self) -> dict:
        msg_counts: dict[str, int] = {}
        for r in self.trace:
            if r.kind == "Send":
                msg_counts[r.message.kind.value] = msg_counts.get(r.message.kind.value, 0) + 1
        per_node = {}
        for nid in self.params.roster:
            st = self.node_state(nid)
            committed = sorted(
                b.height for b in st.known_blocks.values()
                if b.height > 0 and st.commit_stage(b)
            )
            per_node[nid] = {"view": st.view, "committed_heights": committed}
        return {"nodes": per_node, "messages": msg_counts,
                "events": self.events_processed, "records": len(self.trace)}


def run(config: ScenarioConfig) -> World:
    """Run a scenario to quiescence, its view target, or its step budget."""
    world = World(config)
    while (world._heap and world.events_processed < config.max_steps
           and not world.done()):
        world.step()
    return world

"""Honest-node protocol transitions.

Each transition takes the node's state plus one input event (a delivered
message, a timeout, or a view entry) and returns a ``TransitionOutput``
listing the broadcasts it produced. Transitions mutate the state they are
given; the state is owned by exactly one caller, and identical state/event
pairs always produce identical outputs.

A transition processes messages from ``l_in`` until nothing is eligible or
the view advances. A view advance never runs the new view's duties inline:
the driver is expected to feed a ``ViewEntered`` event immediately after any
transition reporting ``view_changed``, which keeps every single transition
to at most one view increment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

from .core import (
    GENESIS,
    Block,
    CertKind,
    ConsensusMessage,
    MsgKind,
    QuorumCertificate,
    block_proposer_for_view,
    is_last_block,
    make_block,
    message_invalid_reason,
    quorum_threshold,
)
from .state import NodeState


class ProtocolError(Exception):
    """A scenario put a node into a state the protocol cannot handle."""


@dataclass(frozen=True, slots=True)
class Deliver:
    message: ConsensusMessage
    invalid_reason: Optional[str] = None


@dataclass(frozen=True, slots=True)
class TimeoutFired:
    view: int


@dataclass(frozen=True, slots=True)
class ViewEntered:
    view: int


InputEvent = Union[Deliver, TimeoutFired, ViewEntered]

NORMAL_KINDS = (MsgKind.PREPARE_BLOCK, MsgKind.PREPARE_VOTE, MsgKind.PREPARE_QC)
TIMEOUT_KINDS = (MsgKind.VIEW_CHANGE, MsgKind.VIEW_CHANGE_QC, MsgKind.PREPARE_QC)


@dataclass
class TransitionOutput:
    broadcasts: list[ConsensusMessage] = field(default_factory=list)
    dropped: list[tuple[ConsensusMessage, str]] = field(default_factory=list)
    touched: set[tuple[int, int]] = field(default_factory=set)
    view_changed: bool = False
    entered_view: Optional[int] = None
    advance_reason: Optional[str] = None

    def touch(self, block_hash: int, view: int) -> None:
        self.touched.add((block_hash, view))


def apply_event(state: NodeState, event: InputEvent) -> TransitionOutput:
    if isinstance(event, Deliver):
        return deliver(state, event.message, event.invalid_reason)
    if isinstance(event, TimeoutFired):
        return timeout_fired(state, event.view)
    if isinstance(event, ViewEntered):
        return view_entered(state, event.view)
    raise TypeError(f"unknown event {event!r}")


def deliver(state: NodeState, msg: ConsensusMessage,
            invalid_reason: Optional[str] = "unchecked") -> TransitionOutput:
    """Accept one delivered message and process whatever becomes eligible."""
    out = TransitionOutput()
    if invalid_reason == "unchecked":
        invalid_reason = message_invalid_reason(msg, state.params)
    if invalid_reason is not None:
        out.dropped.append((msg, f"invalid:{invalid_reason}"))
        return out
    if msg.view < state.view:
        out.dropped.append((msg, "stale-view"))
        return out
    state.buffer_in(msg)
    _drain(state, out)
    return out


def timeout_fired(state: NodeState, view: int) -> TransitionOutput:
    """Enter the liminal period: announce the local highest prepared block.

    Broadcasts ViewChange carrying the block's prepare certificate, plus the
    certificate as a standalone PrepareQC stamped with the view in which the
    block prepared.
    """
    out = TransitionOutput()
    if state.view != view or state.timed_out:
        return out
    state.timed_out = True
    b = state.highest_local_prepare_block()
    cert = state.prepare_certificate_for_hash(b.hash)
    if cert is None:
        raise ProtocolError(f"node {state.node_id}: prepared block {b.hash:x} "
                            "has no mintable certificate")
    vc = ConsensusMessage(MsgKind.VIEW_CHANGE, state.epoch, view,
                          state.node_id, b, parent_qc=cert)
    _broadcast(state, vc, out)
    if cert.view == b.view_produced and not state.has_sent(
            MsgKind.PREPARE_QC, b.hash, cert.view):
        pqc = ConsensusMessage(MsgKind.PREPARE_QC, state.epoch, cert.view,
                               state.node_id, b, certificate=cert)
        _broadcast(state, pqc, out)
    _drain(state, out)
    return out


def view_entered(state: NodeState, target_view: int) -> TransitionOutput:
    """Start duties for a freshly entered view.

    Prunes stale buffered input and pending votes, runs the proposer's block
    pipeline when this node is the view's proposer, then processes anything
    eligible (messages parked from the future may have become current).
    """
    out = TransitionOutput()
    if state.view != target_view:
        return out
    _prune_stale(state, out)
    if block_proposer_for_view(state.params.roster, state.view) == state.node_id:
        propose_view_blocks(state, out)
    _drain(state, out)
    return out


def _prune_stale(state: NodeState, out: TransitionOutput) -> None:
    for msg in [m for m in state.l_in if m.view < state.view]:
        state.l_in.remove(msg)
        out.dropped.append((msg, "stale-view"))
    state.l_pending = [p for p in state.l_pending if p.view >= state.view]


def propose_view_blocks(state: NodeState, out: TransitionOutput) -> None:
    """Emit the view's block pipeline plus a vote for its first block.

    The chain is rooted at the carryover block; only the first PrepareBlock
    carries the carryover's prepare certificate, and after an abnormal view
    change every PrepareBlock carries the ViewChangeQC aggregate.
    """
    view = state.view
    carry, vc_cert = _carryover(state)
    parent_cert = state.prepare_certificate_for_hash(carry.hash)
    parent = carry
    first = None
    for i in range(1, state.params.blocks_per_view + 1):
        blk = make_block(parent.height + 1, i, state.node_id, view, parent.hash)
        state.note_block(blk)
        pb = ConsensusMessage(
            MsgKind.PREPARE_BLOCK, state.epoch, view, state.node_id, blk,
            parent_qc=parent_cert if i == 1 else None,
            view_change_qc=vc_cert,
        )
        _broadcast(state, pb, out)
        if first is None:
            first = blk
        parent = blk
    if parent_cert is not None:
        _emit_vote(state, first, view, parent_cert, out)
    else:
        # Entered via a ViewChangeQC without ever collecting the carryover's
        # prepare evidence: the vote waits for it like any other.
        pending = ConsensusMessage(MsgKind.PREPARE_VOTE, state.epoch, view,
                                   state.node_id, first)
        state.buffer_pending(pending)


def carryover_block(state: NodeState) -> Block:
    """The block the current view's pipeline must extend."""
    return _carryover(state)[0]


def _carryover(state: NodeState) -> tuple[Block, Optional[QuorumCertificate]]:
    view = state.view
    if view == 0:
        return GENESIS, None
    vcqc = state.view_change_qc_for(view - 1)
    if vcqc is not None:
        return vcqc.block, vcqc.certificate
    last = [
        b for b in state.known_blocks.values()
        if b.view_produced == view - 1
        and b.index_in_view == state.params.blocks_per_view
        and state.prepare_stage(b)
    ]
    if not last:
        raise ProtocolError(
            f"node {state.node_id} entering view {view}: no carryover block"
        )
    return min(last, key=lambda b: b.hash), None


# --- message processing ------------------------------------------------------


def _drain(state: NodeState, out: TransitionOutput) -> None:
    progressed = True
    while progressed and out.entered_view is None:
        progressed = False
        for i, msg in enumerate(state.l_in):
            if msg.view > state.view:
                continue
            if msg.view < state.view:
                state.l_in.pop(i)
                out.dropped.append((msg, "stale-view"))
                progressed = True
                break
            allowed = TIMEOUT_KINDS if state.timed_out else NORMAL_KINDS
            if msg.kind not in allowed:
                continue
            state.l_in.pop(i)
            _dispatch(state, msg, out)
            progressed = True
            break


def _dispatch(state: NodeState, msg: ConsensusMessage, out: TransitionOutput) -> None:
    if state.was_counted(msg):
        return
    if msg.kind == MsgKind.PREPARE_BLOCK:
        _handle_prepare_block(state, msg, out)
    elif msg.kind == MsgKind.PREPARE_VOTE:
        _handle_prepare_vote(state, msg, out)
    elif msg.kind == MsgKind.PREPARE_QC:
        if state.timed_out:
            _handle_prepare_qc_timeout(state, msg, out)
        else:
            _handle_prepare_qc(state, msg, out)
    elif msg.kind == MsgKind.VIEW_CHANGE:
        _handle_view_change(state, msg, out)
    elif msg.kind == MsgKind.VIEW_CHANGE_QC:
        _handle_view_change_qc(state, msg, out)


def _handle_prepare_block(state, msg, out) -> None:
    """Vote for a fresh proposal when its parent's prepare evidence is at
    hand; park the vote otherwise. A proposal at an already-seen height is
    counted but never voted for."""
    b = msg.block
    conflict = state.seen_conflicting_block(b)
    _ingest(state, msg, out)
    if conflict:
        return
    if b.parent_hash == GENESIS.hash or state.prepare_stage_hash(b.parent_hash):
        cert = msg.parent_qc or state.prepare_certificate_for_hash(b.parent_hash)
        _emit_vote(state, b, msg.view, cert, out)
    elif not state.has_sent(MsgKind.PREPARE_VOTE, b.hash, msg.view):
        pending = ConsensusMessage(MsgKind.PREPARE_VOTE, state.epoch, msg.view,
                                   state.node_id, b)
        state.buffer_pending(pending)


def _handle_prepare_vote(state, msg, out) -> None:
    b, view = msg.block, msg.view
    # Reciprocate first: the carried certificate (or local evidence) already
    # proves the parent prepared.
    if (b.parent_hash == GENESIS.hash
            or state.prepare_stage_hash(b.parent_hash)
            or (msg.parent_qc is not None and msg.parent_qc.block_hash == b.parent_hash)):
        cert = msg.parent_qc or state.prepare_certificate_for_hash(b.parent_hash)
        _emit_vote(state, b, view, cert, out)
    _ingest(state, msg, out)
    if state.count_votes(b, view) == quorum_threshold(state.params):
        cert = state.mint_prepare_certificate(b, view)
        qc = ConsensusMessage(MsgKind.PREPARE_QC, state.epoch, view,
                              state.node_id, b, certificate=cert)
        _broadcast(state, qc, out)
        if is_last_block(b, state.params):
            _advance_view(state, out, "normal")
        else:
            _release_pending_children(state, b, cert, out)


def _handle_prepare_qc(state, msg, out) -> None:
    b = msg.block
    _ingest(state, msg, out)
    if is_last_block(b, state.params):
        _advance_view(state, out, "normal")
    else:
        _release_pending_children(state, b, msg.certificate, out)


def _handle_prepare_qc_timeout(state, msg, out) -> None:
    """Timeout-period PrepareQC: record it (no votes); one for the view's
    last block counts toward the view-change quorum."""
    _ingest(state, msg, out, timeout_period=True)
    if (is_last_block(msg.block, state.params)
            and state.count_view_changes(msg.view) == quorum_threshold(state.params)):
        _complete_view_change(state, msg.view, out)


def _handle_view_change(state, msg, out) -> None:
    _ingest(state, msg, out)
    if state.count_view_changes(msg.view) == quorum_threshold(state.params):
        _complete_view_change(state, msg.view, out)


def _handle_view_change_qc(state, msg, out) -> None:
    _ingest(state, msg, out)
    _advance_view(state, out, "abnormal")


def _complete_view_change(state, view, out) -> None:
    """A view-change quorum is in: aggregate the max-height block, broadcast
    the ViewChangeQC (counting it locally at once, so the carryover rule sees
    it) and advance."""
    blocks = state.view_change_blocks(view)
    b_max = min(blocks, key=lambda b: (-b.height, b.hash))
    # The max-height block's prepare evidence accompanies the ViewChangeQC
    # (and is sent first, so receivers advancing on the QC already hold it).
    pcert = state.prepare_certificate_for_hash(b_max.hash)
    if (pcert is not None and pcert.view == b_max.view_produced
            and not state.has_sent(MsgKind.PREPARE_QC, b_max.hash, pcert.view)):
        pqc = ConsensusMessage(MsgKind.PREPARE_QC, state.epoch, pcert.view,
                               state.node_id, b_max, certificate=pcert)
        _broadcast(state, pqc, out)
    cert = QuorumCertificate(CertKind.VIEW_CHANGE, b_max.hash, view,
                             state.view_change_contributors(view))
    vcqc = ConsensusMessage(MsgKind.VIEW_CHANGE_QC, state.epoch, view,
                            state.node_id, b_max, certificate=cert)
    _broadcast(state, vcqc, out)
    _ingest(state, vcqc, out)
    _advance_view(state, out, "abnormal")


# --- helpers ------------------------------------------------------------------


def _ingest(state, msg, out, timeout_period=False) -> bool:
    fresh = state.ingest_counting(msg, timeout_period=timeout_period)
    if fresh:
        out.touch(msg.block.hash, msg.view)
        if msg.parent_qc is not None:
            out.touch(msg.parent_qc.block_hash, msg.parent_qc.view)
    return fresh


def _broadcast(state, msg, out) -> None:
    state.buffer_out(msg)
    out.broadcasts.append(msg)


def _emit_vote(state, block: Block, view: int,
               cert: Optional[QuorumCertificate], out) -> bool:
    """Single choke point for casting votes: refuses duplicates, refuses any
    vote at a height where a conflicting block has been seen, and never votes
    in the liminal period."""
    if state.timed_out:
        return False
    if state.has_sent(MsgKind.PREPARE_VOTE, block.hash, view):
        return False
    if state.seen_conflicting_block(block):
        return False
    state.l_pending = [
        p for p in state.l_pending
        if not (p.block.hash == block.hash and p.view == view)
    ]
    vote = ConsensusMessage(MsgKind.PREPARE_VOTE, state.epoch, view,
                            state.node_id, block, parent_qc=cert)
    _broadcast(state, vote, out)
    return True


def _release_pending_children(state, parent: Block,
                              cert: Optional[QuorumCertificate], out) -> None:
    ready = [
        p for p in state.l_pending
        if p.view == state.view and p.block.parent_hash == parent.hash
    ]
    for p in ready:
        if p in state.l_pending:
            state.l_pending.remove(p)
        _emit_vote(state, p.block, p.view, cert, out)


def _advance_view(state, out, reason: str) -> None:
    state.view += 1
    state.timed_out = False
    out.view_changed = True
    out.entered_view = state.view
    out.advance_reason = reason

"""Byzantine node strategies.

Each strategy wraps the honest state machine: the node keeps tracking the
protocol (so its misbehavior stays coherent with the current view and block
tree) but its emissions are replaced or augmented. Strategies are pure
functions of the node state and view, so runs stay deterministic.

Byzantine nodes cannot forge other nodes' message signatures: everything
they emit is sent under their own identity, and any certificate they attach
must have been legitimately collected. Their extra power is limited to the
behaviors below plus silence.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .core import (
    ConsensusMessage,
    MsgKind,
    block_proposer_for_view,
    make_block,
)
from .state import NodeState
from .transitions import (
    InputEvent,
    TransitionOutput,
    ViewEntered,
    _broadcast,
    _carryover,
    _drain,
    _prune_stale,
    apply_event,
    propose_view_blocks,
)


class StrategyKind(str, Enum):
    DOUBLE_PROPOSE = "DoublePropose"
    SAME_HEIGHT_DOUBLE_VOTE = "SameHeightDoubleVote"
    VOTE_WITHOUT_PROPOSAL = "VoteWithoutProposal"
    OUT_OF_TURN_PROPOSE = "OutOfTurnPropose"
    OVER_PROPOSE = "OverPropose"
    SILENT = "Silent"


@dataclass(frozen=True)
class AdversaryStrategy:
    kind: StrategyKind
    target_views: frozenset[int] = frozenset()

    def active(self, view: int) -> bool:
        return view in self.target_views


def byz_double_propose(state: NodeState, out: TransitionOutput) -> None:
    """Two full pipelines over the same heights, diverging by payload, plus
    a vote for each first block."""
    view = state.view
    carry, vc_cert = _carryover(state)
    parent_cert = state.prepare_certificate_for_hash(carry.hash)
    for tag in ("fork-a", "fork-b"):
        parent = carry
        first = None
        for i in range(1, state.params.blocks_per_view + 1):
            blk = make_block(parent.height + 1, i, state.node_id, view,
                             parent.hash, payload=tag)
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
        # Vote for both first blocks: a same-height double vote by design.
        vote = ConsensusMessage(MsgKind.PREPARE_VOTE, state.epoch, view,
                                state.node_id, first, parent_qc=parent_cert)
        _broadcast(state, vote, out)


def byz_over_propose(state: NodeState, out: TransitionOutput, extra: int = 5) -> None:
    """The honest pipeline followed by blocks at out-of-range indices."""
    propose_view_blocks(state, out)
    parent = next(
        m.block for m in reversed(state.l_out) if m.kind == MsgKind.PREPARE_BLOCK
    )
    for j in range(1, extra + 1):
        blk = make_block(parent.height + 1, state.params.blocks_per_view + j,
                         state.node_id, state.view, parent.hash, payload="over")
        state.note_block(blk)
        pb = ConsensusMessage(MsgKind.PREPARE_BLOCK, state.epoch, state.view,
                              state.node_id, blk)
        _broadcast(state, pb, out)
        parent = blk


def byz_out_of_turn_propose(state: NodeState, out: TransitionOutput) -> None:
    """A pipeline proposed by a node that is not the view's proposer; the
    proposer-identity check makes every honest receiver discard it."""
    parent = state.highest_local_prepare_block()
    for i in range(1, state.params.blocks_per_view + 1):
        blk = make_block(parent.height + 1, i, state.node_id, state.view,
                         parent.hash, payload="rogue")
        state.note_block(blk)
        pb = ConsensusMessage(MsgKind.PREPARE_BLOCK, state.epoch, state.view,
                              state.node_id, blk)
        _broadcast(state, pb, out)
        parent = blk


def byz_vote_without_proposal(state: NodeState, out: TransitionOutput) -> None:
    """Vote for a block whose PrepareBlock nobody ever sent: a fabricated
    child of the local highest prepared block, attributed to the view's
    legitimate proposer."""
    root = state.highest_local_prepare_block()
    blk = make_block(
        root.height + 1, 1,
        block_proposer_for_view(state.params.roster, state.view),
        state.view, root.hash, payload=f"phantom-{state.node_id}",
    )
    state.note_block(blk)
    vote = ConsensusMessage(MsgKind.PREPARE_VOTE, state.epoch, state.view,
                            state.node_id, blk,
                            parent_qc=state.prepare_certificate_for_hash(root.hash))
    _broadcast(state, vote, out)


def byz_equivocate_vote(state: NodeState, block, conflict, view,
                        cert=None) -> list[ConsensusMessage]:
    """Votes for two same-height blocks in one view (the catalog double
    vote). Returns both votes, already recorded in l_out."""
    if block.height != conflict.height or block.hash == conflict.hash:
        raise ValueError("equivocation needs two distinct same-height blocks")
    out = TransitionOutput()
    for b in (block, conflict):
        vote = ConsensusMessage(MsgKind.PREPARE_VOTE, state.epoch, view,
                                state.node_id, b, parent_qc=cert)
        _broadcast(state, vote, out)
    return out.broadcasts


def _conflicting_sibling(state: NodeState, block):
    """A same-height same-view rival for ``block``: a known distinct block if
    one exists, otherwise a deterministic fabricated twin (coordinated across
    equivocators: the payload depends only on the view)."""
    known = [
        b for b in state.known_blocks.values()
        if b.height == block.height and b.view_produced == block.view_produced
        and b.hash != block.hash
    ]
    if known:
        return min(known, key=lambda b: b.hash)
    twin = make_block(block.height, block.index_in_view, block.proposer,
                      block.view_produced, block.parent_hash,
                      payload=f"equiv-{block.view_produced}")
    state.note_block(twin)
    return twin


class ByzantineNode:
    """Drives a node with an adversarial strategy in its target views and
    honestly everywhere else."""

    def __init__(self, state: NodeState, strategy: AdversaryStrategy):
        self.state = state
        self.strategy = strategy

    def apply(self, event: InputEvent) -> TransitionOutput:
        kind = self.strategy.kind
        if kind == StrategyKind.SILENT and self.strategy.active(self.state.view):
            return TransitionOutput()  # state frozen, nothing emitted

        if (isinstance(event, ViewEntered) and self.state.view == event.view
                and self.strategy.active(event.view)):
            special = self._view_entry_takeover(event.view)
            if special is not None:
                return special

        out = apply_event(self.state, event)

        if kind == StrategyKind.SAME_HEIGHT_DOUBLE_VOTE:
            for vote in list(out.broadcasts):
                if (vote.kind == MsgKind.PREPARE_VOTE
                        and vote.sender == self.state.node_id
                        and self.strategy.active(vote.view)):
                    rival = _conflicting_sibling(self.state, vote.block)
                    extra = ConsensusMessage(
                        MsgKind.PREPARE_VOTE, vote.epoch, vote.view,
                        vote.sender, rival, parent_qc=vote.parent_qc,
                    )
                    if not self.state.has_sent(MsgKind.PREPARE_VOTE,
                                               rival.hash, vote.view):
                        _broadcast(self.state, extra, out)
        return out

    def _view_entry_takeover(self, view: int):
        state, kind = self.state, self.strategy.kind
        proposer = block_proposer_for_view(state.params.roster, view) == state.node_id
        if kind == StrategyKind.DOUBLE_PROPOSE and proposer:
            emit = byz_double_propose
        elif kind == StrategyKind.OVER_PROPOSE and proposer:
            emit = byz_over_propose
        elif kind == StrategyKind.OUT_OF_TURN_PROPOSE and not proposer:
            emit = byz_out_of_turn_propose
        elif kind == StrategyKind.VOTE_WITHOUT_PROPOSAL:
            def emit(st, out):
                if proposer:
                    propose_view_blocks(st, out)
                byz_vote_without_proposal(st, out)
        else:
            return None
        out = TransitionOutput()
        _prune_stale(state, out)
        emit(state, out)
        _drain(state, out)
        return out

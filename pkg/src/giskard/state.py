"""One node's view state and the block-stage predicates over it.

The counting buffer is the source of truth for every stage predicate. For
speed the state also maintains derived indexes (vote tallies, processed
certificates, view-change tallies); they are pure caches and must always
equal a recount over ``l_counting`` — ``recount_from_counting`` recomputes
them from scratch so tests can assert the equivalence.
"""

from __future__ import annotations

from enum import Enum
from typing import Optional

from .core import (
    GENESIS,
    Block,
    CertKind,
    ConsensusMessage,
    MsgKind,
    NodeId,
    ProtocolParams,
    QuorumCertificate,
    digest_of,
    genesis_certificate,
    hex_digest,
    is_genesis,
    quorum_threshold,
)


class StageName(str, Enum):
    PREPARE_IN_VIEW = "PrepareInView"
    PREPARE = "Prepare"
    PRECOMMIT = "Precommit"
    COMMIT = "Commit"


class NodeState:
    """ViewState of a single participating node.

    Buffers:
      l_in        delivered but not yet processed messages
      l_pending   locally constructed votes waiting for parent evidence
      l_counting  processed messages (deduplicated by kind/sender/block/view)
      l_out       every message this node has broadcast
    """

    def __init__(self, node_id: NodeId, params: ProtocolParams, epoch: int = 0):
        self.node_id = node_id
        self.params = params
        self.epoch = epoch
        self.view = 0
        self.clock = 0
        self.timed_out = False
        self.l_in: list[ConsensusMessage] = []
        self.l_pending: list[ConsensusMessage] = []
        self.l_counting: list[ConsensusMessage] = []
        self.l_out: list[ConsensusMessage] = []
        self.known_blocks: dict[int, Block] = {GENESIS.hash: GENESIS}

        # Derived indexes over l_counting (plus unfolded carried evidence).
        self._counting_keys: set[tuple] = set()
        self._votes: dict[tuple[int, int], set[NodeId]] = {}
        self._qcs: dict[tuple[int, int], QuorumCertificate] = {}
        self._prepared_min_view: dict[int, int] = {}
        self._vc_senders: dict[int, set[NodeId]] = {}
        self._vc_blocks: dict[int, dict[int, Block]] = {}
        self._vcqc_msgs: dict[int, ConsensusMessage] = {}
        self._pqc_last_senders: dict[int, set[NodeId]] = {}
        self._pqc_last_blocks: dict[int, dict[int, Block]] = {}

        # Indexes over l_out and over every buffered block, used by the
        # duplicate-height guards.
        self._out_keys: set[tuple] = set()
        self._out_votes_hv: dict[tuple[int, int], set[int]] = {}
        self._seen_blocks_hv: dict[tuple[int, int], set[int]] = {}
        self._children: dict[int, set[int]] = {}

    # -- block bookkeeping ---------------------------------------------------

    def note_block(self, block: Block) -> None:
        if block.hash not in self.known_blocks:
            self.known_blocks[block.hash] = block
            self._children.setdefault(block.parent_hash, set()).add(block.hash)

    def _note_message_block(self, msg: ConsensusMessage) -> None:
        self.note_block(msg.block)
        b = msg.block
        self._seen_blocks_hv.setdefault((b.view_produced, b.height), set()).add(b.hash)

    def seen_conflicting_block(self, block: Block) -> bool:
        """A different block with the same height and production view appears
        in any message this node has buffered (counting, pending or out)."""
        seen = self._seen_blocks_hv.get((block.view_produced, block.height))
        return bool(seen) and any(h != block.hash for h in seen)

    # -- buffer transitions ----------------------------------------------------

    def buffer_in(self, msg: ConsensusMessage) -> None:
        # Parked input still makes its block known, but only counting,
        # pending and out messages feed the duplicate-height guard.
        self.l_in.append(msg)
        self.note_block(msg.block)

    def buffer_pending(self, msg: ConsensusMessage) -> None:
        self.l_pending.append(msg)
        self._note_message_block(msg)

    def buffer_out(self, msg: ConsensusMessage) -> None:
        self.l_out.append(msg)
        self._out_keys.add(msg.dedup_key)
        if msg.kind == MsgKind.PREPARE_VOTE:
            key = (msg.view, msg.block.height)
            self._out_votes_hv.setdefault(key, set()).add(msg.block.hash)
        self._note_message_block(msg)

    def ingest_counting(self, msg: ConsensusMessage, timeout_period: bool = False) -> bool:
        """Move a message into l_counting; False if it was already counted.

        Also unfolds carried certificates: a message carrying a PrepareQC
        aggregate transmits that evidence too, so it is recorded as if the
        corresponding PrepareQC message had been processed.
        """
        key = msg.dedup_key
        if key in self._counting_keys:
            return False
        self._counting_keys.add(key)
        self.l_counting.append(msg)
        self._note_message_block(msg)
        b = msg.block

        if msg.kind == MsgKind.PREPARE_VOTE:
            tally = self._votes.setdefault((b.hash, msg.view), set())
            tally.add(msg.sender)
            if len(tally) >= quorum_threshold(self.params):
                self._mark_prepared(b.hash, msg.view)
        elif msg.kind == MsgKind.PREPARE_QC:
            self._qcs.setdefault((b.hash, msg.view), msg.certificate)
            self._mark_prepared(b.hash, msg.view)
            if timeout_period and b.index_in_view == self.params.blocks_per_view:
                self._pqc_last_senders.setdefault(msg.view, set()).add(msg.sender)
                self._pqc_last_blocks.setdefault(msg.view, {})[b.hash] = b
        elif msg.kind == MsgKind.VIEW_CHANGE:
            self._vc_senders.setdefault(msg.view, set()).add(msg.sender)
            self._vc_blocks.setdefault(msg.view, {})[b.hash] = b
        elif msg.kind == MsgKind.VIEW_CHANGE_QC:
            self._vcqc_msgs.setdefault(msg.view, msg)

        if msg.parent_qc is not None and msg.parent_qc.kind == CertKind.PREPARE:
            self.note_carried_prepare_qc(msg.parent_qc, msg.sender)
        return True

    def note_carried_prepare_qc(self, qc: QuorumCertificate, sender: NodeId) -> None:
        """Record a carried PrepareQC aggregate as processed evidence."""
        key = (MsgKind.PREPARE_QC, sender, qc.block_hash, qc.view)
        if key in self._counting_keys:
            return
        self._counting_keys.add(key)
        self._qcs.setdefault((qc.block_hash, qc.view), qc)
        self._mark_prepared(qc.block_hash, qc.view)

    def _mark_prepared(self, block_hash: int, view: int) -> None:
        prev = self._prepared_min_view.get(block_hash)
        if prev is None or view < prev:
            self._prepared_min_view[block_hash] = view

    def was_counted(self, msg: ConsensusMessage) -> bool:
        return msg.dedup_key in self._counting_keys

    def has_sent(self, kind: MsgKind, block_hash: int, view: int) -> bool:
        return (kind, self.node_id, block_hash, view) in self._out_keys

    def sent_conflicting_vote(self, block: Block, view: int) -> bool:
        sent = self._out_votes_hv.get((view, block.height))
        return bool(sent) and any(h != block.hash for h in sent)

    # -- stage predicates ------------------------------------------------------

    def prepare_in_view(self, block: Block, view: int) -> bool:
        """Quorum of distinct PrepareVote senders for (block, view) counted,
        or a PrepareQC for (block, view) counted."""
        if (block.hash, view) in self._qcs:
            return True
        tally = self._votes.get((block.hash, view))
        return tally is not None and len(tally) >= quorum_threshold(self.params)

    def prepare_stage(self, block: Block) -> bool:
        """Prepared in some view not beyond the current one. Genesis is
        prepared by convention."""
        if is_genesis(block):
            return True
        v = self._prepared_min_view.get(block.hash)
        return v is not None and v <= self.view

    def prepare_stage_hash(self, block_hash: int) -> bool:
        if block_hash == GENESIS.hash:
            return True
        v = self._prepared_min_view.get(block_hash)
        return v is not None and v <= self.view

    def precommit_stage(self, block: Block) -> bool:
        if not self.prepare_stage(block):
            return False
        return any(
            self.prepare_stage_hash(child)
            for child in self._children.get(block.hash, ())
        )

    def commit_stage(self, block: Block) -> bool:
        if not self.precommit_stage(block):
            return False
        return any(
            self.precommit_stage(self.known_blocks[child])
            for child in self._children.get(block.hash, ())
            if child in self.known_blocks
        )

    def count_votes(self, block: Block, view: int) -> int:
        """Distinct senders of PrepareVote(block, view) in l_counting."""
        return len(self._votes.get((block.hash, view), ()))

    def count_view_changes(self, view: int) -> int:
        """Distinct senders of ViewChange messages for the view, plus senders
        of last-block PrepareQC messages processed during the timeout."""
        senders = self._vc_senders.get(view, set()) | self._pqc_last_senders.get(view, set())
        return len(senders)

    def view_change_contributors(self, view: int) -> frozenset[NodeId]:
        return frozenset(
            self._vc_senders.get(view, set()) | self._pqc_last_senders.get(view, set())
        )

    def view_change_blocks(self, view: int) -> list[Block]:
        blocks: dict[int, Block] = {}
        blocks.update(self._vc_blocks.get(view, {}))
        blocks.update(self._pqc_last_blocks.get(view, {}))
        return list(blocks.values())

    def view_change_qc_for(self, view: int) -> Optional[ConsensusMessage]:
        return self._vcqc_msgs.get(view)

    def highest_local_prepare_block(self) -> Block:
        """The max-height prepared block; ties broken by lowest production
        view then lowest hash. Falls back to genesis."""
        best = GENESIS
        for h, v in self._prepared_min_view.items():
            if v > self.view:
                continue
            b = self.known_blocks.get(h)
            if b is None:
                continue
            if b.height > best.height or (
                b.height == best.height
                and (b.view_produced, b.hash) < (best.view_produced, best.hash)
            ):
                best = b
        return best

    def prepared_view_of(self, block: Block) -> Optional[int]:
        """Lowest view in which the block reached prepare stage locally."""
        if is_genesis(block):
            return 0
        v = self._prepared_min_view.get(block.hash)
        return v if v is not None and v <= self.view else None

    # -- certificates ----------------------------------------------------------

    def prepare_certificate_for_hash(self, block_hash: int) -> Optional[QuorumCertificate]:
        """The certificate witnessing the block's (earliest) local prepare,
        minted from counted votes when no processed aggregate exists."""
        if block_hash == GENESIS.hash:
            return genesis_certificate(self.params)
        pv = self._prepared_min_view.get(block_hash)
        if pv is None or pv > self.view:
            return None
        qc = self._qcs.get((block_hash, pv))
        if qc is not None:
            return qc
        tally = self._votes.get((block_hash, pv))
        if tally and len(tally) >= quorum_threshold(self.params):
            return QuorumCertificate(CertKind.PREPARE, block_hash, pv, frozenset(tally))
        return None

    def mint_prepare_certificate(self, block: Block, view: int) -> Optional[QuorumCertificate]:
        """Build (or reuse) the PrepareQC aggregate for a locally prepared
        block: an already-processed aggregate wins, otherwise the counted
        quorum votes are aggregated."""
        if is_genesis(block):
            return genesis_certificate(self.params)
        qc = self._qcs.get((block.hash, view))
        if qc is not None:
            return qc
        tally = self._votes.get((block.hash, view))
        if tally and len(tally) >= quorum_threshold(self.params):
            return QuorumCertificate(CertKind.PREPARE, block.hash, view, frozenset(tally))
        return None

    # -- digests and consistency ------------------------------------------------

    def state_digest(self) -> int:
        """Stable hash of (epoch, view, counted keys, sent keys)."""
        counted = ",".join(sorted(self._key_text(k) for k in self._counting_keys))
        sent = ",".join(sorted(self._key_text(k) for k in self._out_keys))
        return digest_of(f"{self.epoch};{self.view};[{counted}];[{sent}]")

    @staticmethod
    def _key_text(key: tuple) -> str:
        kind, sender, bh, view = key
        return f"{kind.value}:{sender}:{hex_digest(bh)}:{view}"

    def recount_from_counting(self) -> dict:
        """Recompute the derived tallies directly from l_counting; used by
        tests to prove the incremental indexes never desynchronize."""
        votes: dict[tuple[int, int], set[NodeId]] = {}
        vcs: dict[int, set[NodeId]] = {}
        qcs: set[tuple[int, int]] = set()
        for m in self.l_counting:
            if m.kind == MsgKind.PREPARE_VOTE:
                votes.setdefault((m.block.hash, m.view), set()).add(m.sender)
            elif m.kind == MsgKind.PREPARE_QC:
                qcs.add((m.block.hash, m.view))
            elif m.kind == MsgKind.VIEW_CHANGE:
                vcs.setdefault(m.view, set()).add(m.sender)
            if m.parent_qc is not None and m.parent_qc.kind == CertKind.PREPARE:
                qcs.add((m.parent_qc.block_hash, m.parent_qc.view))
        return {"votes": votes, "view_changes": vcs, "qcs": qcs}

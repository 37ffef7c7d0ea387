"""Core protocol data: blocks, consensus messages, certificates, quorum math.

Everything here is an immutable value. Node identities are plain integers
(positions in the epoch roster), digests are 64-bit integers produced by a
stable non-cryptographic hash, and BLS aggregates are modeled as explicit
signer sets.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

NodeId = int

DIGEST_BITS = 64
GENESIS_PARENT_HASH = 0

# Characters reserved by the canonical token encoding.
_ESCAPE = {"%": "%25", "{": "%7B", "}": "%7D", ";": "%3B", "=": "%3D",
           "|": "%7C", " ": "%20", "\n": "%0A", '"': "%22", "'": "%27",
           "[": "%5B", "]": "%5D"}


def escape_text(s: str) -> str:
    if not any(c in _ESCAPE for c in s):
        return s
    return "".join(_ESCAPE.get(c, c) for c in s)


def unescape_text(s: str) -> str:
    if "%" not in s:
        return s
    out, i = [], 0
    rev = {v: k for k, v in _ESCAPE.items()}
    while i < len(s):
        if s[i] == "%" and s[i : i + 3] in rev:
            out.append(rev[s[i : i + 3]])
            i += 3
        else:
            out.append(s[i])
            i += 1
    return "".join(out)


def digest_of(text: str) -> int:
    """Stable 64-bit digest of a canonical string."""
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "big")


def hex_digest(h: int) -> str:
    return f"{h:016x}"


class MsgKind(str, Enum):
    PREPARE_BLOCK = "PrepareBlock"
    PREPARE_VOTE = "PrepareVote"
    VIEW_CHANGE = "ViewChange"
    PREPARE_QC = "PrepareQC"
    VIEW_CHANGE_QC = "ViewChangeQC"


class CertKind(str, Enum):
    PREPARE = "prepare"
    VIEW_CHANGE = "viewchange"


@dataclass(frozen=True, slots=True)
class ProtocolParams:
    """Static parameters of one protocol instance.

    ``fault_bound`` defaults to floor((k-1)/3), the largest value still
    satisfying k >= 3f+1.
    """

    node_count: int
    fault_bound: int = -1
    blocks_per_view: int = 10
    timeout_per_view: int = 1000

    def __post_init__(self):
        if self.node_count < 1:
            raise ValueError("node_count must be >= 1")
        if self.fault_bound < 0:
            object.__setattr__(self, "fault_bound", (self.node_count - 1) // 3)
        if self.node_count < 3 * self.fault_bound + 1:
            raise ValueError(
                f"k={self.node_count} violates k >= 3f+1 for f={self.fault_bound}"
            )
        if self.blocks_per_view < 1:
            raise ValueError("blocks_per_view must be >= 1")

    @property
    def roster(self) -> tuple[NodeId, ...]:
        return tuple(range(self.node_count))


def quorum_threshold(params: ProtocolParams) -> int:
    """Votes needed for a quorum: k - f.

    For k = 3f+1 this coincides with the ceiling of 2k/3, and any two
    quorums overlap in at least f+1 nodes.
    """
    return params.node_count - params.fault_bound


def block_proposer_for_view(roster: Sequence[NodeId], view: int) -> NodeId:
    """The designated proposer rotates round-robin: roster[view mod k]."""
    if not roster:
        raise ValueError("empty roster")
    return roster[view % len(roster)]


@dataclass(frozen=True, slots=True)
class Block:
    """A hash-linked unit of consensus.

    ``index_in_view`` is the block's position in its view's pipeline
    (1-based); the genesis block uses the reserved index 0. ``payload``
    stands in for transaction content and is what lets two blocks of equal
    height differ. ``payload_valid`` is the configurable stand-in for block
    execution.
    """

    hash: int
    height: int
    index_in_view: int
    proposer: NodeId
    view_produced: int
    parent_hash: int
    payload_valid: bool
    payload: str = ""


def _block_hash_input(height, index_in_view, proposer, view_produced,
                      parent_hash, payload_valid, payload) -> str:
    return (
        f"{height};{index_in_view};{proposer};{view_produced};"
        f"{hex_digest(parent_hash)};{int(payload_valid)};{escape_text(payload)}"
    )


def compute_block_hash(height: int, index_in_view: int, proposer: NodeId,
                       view_produced: int, parent_hash: int,
                       payload_valid: bool, payload: str = "") -> int:
    """Deterministic digest over the canonical block fields."""
    return digest_of(_block_hash_input(height, index_in_view, proposer,
                                       view_produced, parent_hash,
                                       payload_valid, payload))


def make_block(height, index_in_view, proposer, view_produced, parent_hash,
               payload_valid=True, payload="") -> Block:
    return Block(
        hash=compute_block_hash(height, index_in_view, proposer, view_produced,
                                parent_hash, payload_valid, payload),
        height=height,
        index_in_view=index_in_view,
        proposer=proposer,
        view_produced=view_produced,
        parent_hash=parent_hash,
        payload_valid=payload_valid,
        payload=payload,
    )


GENESIS = make_block(height=0, index_in_view=0, proposer=0, view_produced=0,
                     parent_hash=GENESIS_PARENT_HASH, payload_valid=True,
                     payload="genesis")


def is_genesis(block: Block) -> bool:
    return block.hash == GENESIS.hash


def is_last_block(block: Block, params: ProtocolParams) -> bool:
    """A block closes its view iff its in-view index equals blocks_per_view."""
    return block.index_in_view == params.blocks_per_view


@dataclass(frozen=True, slots=True)
class QuorumCertificate:
    """A quorum's worth of distinct signers standing in for a BLS aggregate."""

    kind: CertKind
    block_hash: int
    view: int
    signers: frozenset[NodeId]


def validate_certificate(qc: QuorumCertificate, roster: Sequence[NodeId],
                         params: ProtocolParams) -> bool:
    """True iff the signers are distinct roster members forming a quorum."""
    members = set(roster)
    return (
        len(qc.signers) >= quorum_threshold(params)
        and all(s in members for s in qc.signers)
    )


def genesis_certificate(params: ProtocolParams) -> QuorumCertificate:
    """The pre-agreed certificate for genesis: the whole roster at view 0."""
    return QuorumCertificate(CertKind.PREPARE, GENESIS.hash, 0,
                             frozenset(params.roster))


@dataclass(frozen=True, slots=True)
class ConsensusMessage:
    """One of the five consensus message kinds.

    ``parent_qc`` and ``view_change_qc`` are carried evidence (PrepareBlock
    may carry both, PrepareVote and ViewChange at most ``parent_qc``).
    ``certificate`` is the message's own aggregate and is present exactly on
    PrepareQC and ViewChangeQC messages, standing in for the signature field
    that makes those messages quorum evidence in their own right.
    """

    kind: MsgKind
    epoch: int
    view: int
    sender: NodeId
    block: Block
    parent_qc: Optional[QuorumCertificate] = None
    view_change_qc: Optional[QuorumCertificate] = None
    certificate: Optional[QuorumCertificate] = None

    @property
    def dedup_key(self) -> tuple:
        return (self.kind, self.sender, self.block.hash, self.view)


# --- canonical tokens -------------------------------------------------------
#
# Field order follows the type definitions: blocks as
# (hash, height, index, proposer, view_produced, parent_hash, payload_valid,
# payload), certificates as (kind, block_hash, view, signers), messages as
# (kind, e, v, n, block, parent_qc, view_change_qc, certificate). Tokens are
# nested in braces, fields ;-separated, absent optionals written as "-".


def block_token(b: Block) -> str:
    return (
        "{" + f"hash={hex_digest(b.hash)};h={b.height};i={b.index_in_view};"
        f"p={b.proposer};vp={b.view_produced};parent={hex_digest(b.parent_hash)};"
        f"valid={int(b.payload_valid)};payload={escape_text(b.payload)}" + "}"
    )


def cert_token(qc: Optional[QuorumCertificate]) -> str:
    if qc is None:
        return "-"
    signers = "[" + "|".join(str(s) for s in sorted(qc.signers)) + "]"
    return ("{" + f"kind={qc.kind.value};block={hex_digest(qc.block_hash)};"
            f"view={qc.view};signers={signers}" + "}")


def message_token(m: ConsensusMessage) -> str:
    return (
        "{" + f"kind={m.kind.value};e={m.epoch};v={m.view};n={m.sender};"
        f"block={block_token(m.block)};parent_qc={cert_token(m.parent_qc)};"
        f"view_change_qc={cert_token(m.view_change_qc)};"
        f"cert={cert_token(m.certificate)}" + "}"
    )


# --- message well-formedness ------------------------------------------------


def block_invalid_reason(b: Block, params: ProtocolParams) -> Optional[str]:
    """Structural and validity checks every carried block must pass."""
    if is_genesis(b):
        return None
    if b.hash != compute_block_hash(b.height, b.index_in_view, b.proposer,
                                    b.view_produced, b.parent_hash,
                                    b.payload_valid, b.payload):
        return "block-hash-mismatch"
    if b.height < 1:
        return "non-genesis-height-zero"
    if not 1 <= b.index_in_view <= params.blocks_per_view:
        return "block-index-out-of-range"
    if not b.payload_valid:
        return "invalid-payload"
    if b.proposer != block_proposer_for_view(params.roster, b.view_produced):
        return "wrong-proposer"
    return None


def message_invalid_reason(m: ConsensusMessage,
                           params: ProtocolParams) -> Optional[str]:
    """Why a message must be discarded regardless of receiver state.

    Returns None for well-formed messages. View validity against the
    receiver's current view is a separate, state-dependent check; carried
    certificates are exempt from it and may reference past views.
    """
    roster = params.roster
    if m.sender not in roster:
        return "unknown-sender"
    reason = block_invalid_reason(m.block, params)
    if reason:
        return reason
    b, kind = m.block, m.kind

    if kind in (MsgKind.PREPARE_BLOCK, MsgKind.PREPARE_VOTE, MsgKind.PREPARE_QC):
        if b.view_produced != m.view:
            return "block-view-mismatch"
    else:
        if b.view_produced > m.view:
            return "block-from-future-view"

    if kind == MsgKind.PREPARE_BLOCK:
        if m.sender != block_proposer_for_view(roster, m.view):
            return "not-view-proposer"
        if b.proposer != m.sender:
            return "proposer-field-mismatch"
        if m.certificate is not None:
            return "unexpected-certificate"
        if b.index_in_view > 1 and m.parent_qc is not None:
            return "non-first-block-carries-parent-qc"
        if m.parent_qc is not None and not _good_parent_qc(m.parent_qc, b, m.view, params):
            return "bad-parent-qc"
        if m.view_change_qc is not None:
            vq = m.view_change_qc
            if (vq.kind != CertKind.VIEW_CHANGE or vq.view != m.view - 1
                    or not validate_certificate(vq, roster, params)):
                return "bad-view-change-qc"
    elif kind == MsgKind.PREPARE_VOTE:
        if is_genesis(b):
            return "vote-for-genesis"
        if m.view_change_qc is not None or m.certificate is not None:
            return "unexpected-certificate"
        if m.parent_qc is not None and not _good_parent_qc(m.parent_qc, b, m.view, params):
            return "bad-parent-qc"
    elif kind == MsgKind.PREPARE_QC:
        if m.parent_qc is not None or m.view_change_qc is not None:
            return "unexpected-carried-evidence"
        c = m.certificate
        if (c is None or c.kind != CertKind.PREPARE or c.block_hash != b.hash
                or c.view != m.view or not validate_certificate(c, roster, params)):
            return "bad-certificate"
    elif kind == MsgKind.VIEW_CHANGE:
        if m.view_change_qc is not None or m.certificate is not None:
            return "unexpected-certificate"
        c = m.parent_qc
        if (c is None or c.kind != CertKind.PREPARE or c.block_hash != b.hash
                or c.view > m.view or not validate_certificate(c, roster, params)):
            return "bad-parent-qc"
    elif kind == MsgKind.VIEW_CHANGE_QC:
        if m.parent_qc is not None or m.view_change_qc is not None:
            return "unexpected-carried-evidence"
        c = m.certificate
        if (c is None or c.kind != CertKind.VIEW_CHANGE or c.block_hash != b.hash
                or c.view != m.view or not validate_certificate(c, roster, params)):
            return "bad-certificate"
    return None


def _good_parent_qc(qc: QuorumCertificate, b: Block, view: int,
                    params: ProtocolParams) -> bool:
    return (qc.kind == CertKind.PREPARE and qc.block_hash == b.parent_hash
            and qc.view <= view and validate_certificate(qc, params.roster, params))

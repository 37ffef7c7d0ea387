import pytest

from giskard.core import (
    GENESIS,
    ConsensusMessage,
    MsgKind,
    ProtocolParams,
    QuorumCertificate,
    CertKind,
    genesis_certificate,
    make_block,
)
from giskard.state import NodeState


@pytest.fixture
def params4():
    return ProtocolParams(node_count=4, blocks_per_view=3, timeout_per_view=300)


@pytest.fixture
def state4(params4):
    return NodeState(node_id=3, params=params4)


def chain(params, view, count, parent=None, proposer=None, payload=""):
    """A well-formed pipeline of `count` blocks for the given view."""
    parent = parent if parent is not None else GENESIS
    proposer = proposer if proposer is not None else view % params.node_count
    blocks = []
    for i in range(1, count + 1):
        parent = make_block(parent.height + 1, i, proposer, view, parent.hash,
                            payload=payload)
        blocks.append(parent)
    return blocks


def vote(block, view, sender, parent_qc=None, epoch=0):
    return ConsensusMessage(MsgKind.PREPARE_VOTE, epoch, view, sender, block,
                            parent_qc=parent_qc)


def prepare_qc(block, view, sender, signers, epoch=0):
    cert = QuorumCertificate(CertKind.PREPARE, block.hash, view, frozenset(signers))
    return ConsensusMessage(MsgKind.PREPARE_QC, epoch, view, sender, block,
                            certificate=cert)


def prepare_block(block, view, sender, parent_qc=None, view_change_qc=None, epoch=0):
    return ConsensusMessage(MsgKind.PREPARE_BLOCK, epoch, view, sender, block,
                            parent_qc=parent_qc, view_change_qc=view_change_qc)


def view_change(block, view, sender, parent_qc, epoch=0):
    return ConsensusMessage(MsgKind.VIEW_CHANGE, epoch, view, sender, block,
                            parent_qc=parent_qc)


def view_change_qc(block, view, sender, signers, epoch=0):
    cert = QuorumCertificate(CertKind.VIEW_CHANGE, block.hash, view,
                             frozenset(signers))
    return ConsensusMessage(MsgKind.VIEW_CHANGE_QC, epoch, view, sender, block,
                            certificate=cert)


def genesis_qc(params):
    return genesis_certificate(params)

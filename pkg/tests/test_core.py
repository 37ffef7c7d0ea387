import math

import pytest
from hypothesis import given, strategies as st

from giskard.core import (
    GENESIS,
    Block,
    CertKind,
    ConsensusMessage,
    MsgKind,
    ProtocolParams,
    QuorumCertificate,
    block_proposer_for_view,
    block_token,
    cert_token,
    compute_block_hash,
    genesis_certificate,
    is_last_block,
    make_block,
    message_invalid_reason,
    message_token,
    quorum_threshold,
    validate_certificate,
)

from conftest import chain, prepare_block, prepare_qc, vote


def test_block_hash_deterministic():
    a = compute_block_hash(3, 1, 2, 4, 0xDEAD, True, "x")
    b = compute_block_hash(3, 1, 2, 4, 0xDEAD, True, "x")
    assert a == b


def test_block_hash_sensitive_to_proposer():
    a = compute_block_hash(3, 1, 2, 4, 0xDEAD, True)
    b = compute_block_hash(3, 1, 3, 4, 0xDEAD, True)
    assert a != b


def test_genesis_digest_pinned():
    # The documented genesis digest; anything touching the hash input or the
    # genesis fields must bump the trace format.
    assert GENESIS.hash == 0x29BBE43D6A4E33FA
    assert GENESIS.height == 0 and GENESIS.parent_hash == 0


@given(st.integers(1, 50), st.integers(1, 10), st.integers(0, 49),
       st.integers(0, 20), st.booleans(), st.text(max_size=8))
def test_block_hash_injective_sample(height, index, proposer, view, valid, payload):
    base = compute_block_hash(height, index, proposer, view, 7, valid, payload)
    assert base == compute_block_hash(height, index, proposer, view, 7, valid, payload)
    assert base != compute_block_hash(height + 1, index, proposer, view, 7, valid, payload)


@pytest.mark.parametrize("k,expected", [(4, 3), (7, 5), (1, 1), (10, 7), (13, 9)])
def test_quorum_threshold(k, expected):
    assert quorum_threshold(ProtocolParams(node_count=k)) == expected


def test_quorum_threshold_matches_two_thirds_for_3f1():
    # For k = 3f+1 the k-f rule and the 2/3*k rule coincide.
    for f in range(0, 33):
        k = 3 * f + 1
        t = quorum_threshold(ProtocolParams(node_count=k))
        assert t == k - f
        assert t >= math.ceil(2 * k / 3)


def test_params_validation():
    with pytest.raises(ValueError):
        ProtocolParams(node_count=4, fault_bound=2)  # 4 < 3*2+1
    with pytest.raises(ValueError):
        ProtocolParams(node_count=0)
    with pytest.raises(ValueError):
        ProtocolParams(node_count=4, blocks_per_view=0)


def test_block_proposer_rotation():
    roster = (0, 1, 2, 3)
    assert block_proposer_for_view(roster, 5) == 1
    assert block_proposer_for_view(roster, 0) == 0
    assert block_proposer_for_view((7,), 123) == 7


@pytest.mark.parametrize("index,bpv,expected", [
    (10, 10, True),
    (3, 10, False),
    (3, 3, True),
    (1, 1, True),
])
def test_is_last_block(index, bpv, expected):
    params = ProtocolParams(node_count=4, blocks_per_view=bpv)
    b = make_block(1, index, 0, 0, GENESIS.hash)
    assert is_last_block(b, params) is expected


def test_validate_certificate(params4):
    qc = QuorumCertificate(CertKind.PREPARE, 1, 0, frozenset({0, 1, 2}))
    assert validate_certificate(qc, params4.roster, params4)
    small = QuorumCertificate(CertKind.PREPARE, 1, 0, frozenset({0, 1}))
    assert not validate_certificate(small, params4.roster, params4)
    alien = QuorumCertificate(CertKind.PREPARE, 1, 0, frozenset({0, 1, 9}))
    assert not validate_certificate(alien, params4.roster, params4)


def test_duplicate_signers_collapse(params4):
    # Sets dedup by construction: three "signatures" from two nodes are two.
    signers = frozenset([0, 0, 1])
    assert len(signers) == 2
    qc = QuorumCertificate(CertKind.PREPARE, 1, 0, signers)
    assert not validate_certificate(qc, params4.roster, params4)


def test_chain_heights_link(params4):
    blocks = chain(params4, 0, 3)
    parent = GENESIS
    for b in blocks:
        assert b.height == parent.height + 1
        assert b.parent_hash == parent.hash
        parent = b


def test_block_hash_collision_scan_500_runs():
    # Every block minted across a 500-run suite, plus a systematic grid of
    # field tuples: distinct tuples must never share a digest.
    import random

    from giskard import netsim, scenarios

    by_hash = {}

    def note(fields):
        h = compute_block_hash(*fields)
        prev = by_hash.setdefault(h, fields)
        assert prev == fields, f"digest collision: {prev} vs {fields}"

    rng = random.Random(99)
    for i in range(500):
        cfg = scenarios.build_random_config(rng)
        cfg.max_steps = 4000
        world = netsim.run(cfg)
        for nid in range(cfg.k):
            for b in world.node_state(nid).known_blocks.values():
                note((b.height, b.index_in_view, b.proposer, b.view_produced,
                      b.parent_hash, b.payload_valid, b.payload))
    for height in range(1, 12):
        for index in range(1, 6):
            for proposer in range(7):
                for parent in (0, 7, 0xDEAD):
                    for payload in ("", "fork-a", "fork-b"):
                        note((height, index, proposer, height // 3, parent,
                              True, payload))
    assert len(by_hash) > 3000


def test_quorum_intersection_small():
    # Any two quorums out of k=3f+1 overlap in at least f+1 members.
    from itertools import combinations
    for k in (4, 7, 10):
        f = (k - 1) // 3
        t = k - f
        subsets = [frozenset(c) for c in combinations(range(k), t)]
        assert all(len(a & b) >= f + 1 for a, b in combinations(subsets, 2))


# --- message well-formedness -----------------------------------------------


def test_prepare_block_wellformed(params4):
    blocks = chain(params4, 0, 3)
    first = prepare_block(blocks[0], 0, 0, parent_qc=genesis_certificate(params4))
    assert message_invalid_reason(first, params4) is None
    rest = prepare_block(blocks[1], 0, 0)
    assert message_invalid_reason(rest, params4) is None


def test_prepare_block_from_wrong_sender(params4):
    blocks = chain(params4, 0, 1)
    msg = prepare_block(blocks[0], 0, 2)
    assert message_invalid_reason(msg, params4) == "not-view-proposer"


def test_prepare_block_index_out_of_range(params4):
    bad = make_block(1, 9, 0, 0, GENESIS.hash)
    msg = prepare_block(bad, 0, 0)
    assert message_invalid_reason(msg, params4) == "block-index-out-of-range"


def test_non_first_block_must_not_carry_parent_qc(params4):
    blocks = chain(params4, 0, 2)
    msg = prepare_block(blocks[1], 0, 0, parent_qc=genesis_certificate(params4))
    assert message_invalid_reason(msg, params4) == "non-first-block-carries-parent-qc"


def test_tampered_block_hash_rejected(params4):
    b = make_block(1, 1, 0, 0, GENESIS.hash)
    forged = Block(b.hash, 2, b.index_in_view, b.proposer, b.view_produced,
                   b.parent_hash, b.payload_valid, b.payload)
    msg = vote(forged, 0, 1)
    assert message_invalid_reason(msg, params4) == "block-hash-mismatch"


def test_invalid_payload_rejected(params4):
    b = make_block(1, 1, 0, 0, GENESIS.hash, payload_valid=False)
    msg = prepare_block(b, 0, 0)
    assert message_invalid_reason(msg, params4) == "invalid-payload"


def test_vote_view_must_match_block_view(params4):
    b = make_block(1, 1, 0, 0, GENESIS.hash)
    msg = vote(b, 1, 1)
    assert message_invalid_reason(msg, params4) == "block-view-mismatch"


def test_prepare_qc_needs_quorum_certificate(params4):
    b = make_block(1, 1, 0, 0, GENESIS.hash)
    msg = prepare_qc(b, 0, 1, signers={0, 1})
    assert message_invalid_reason(msg, params4) == "bad-certificate"
    ok = prepare_qc(b, 0, 1, signers={0, 1, 2})
    assert message_invalid_reason(ok, params4) is None


def test_view_change_requires_prepare_evidence(params4):
    b = make_block(1, 1, 0, 0, GENESIS.hash)
    bare = ConsensusMessage(MsgKind.VIEW_CHANGE, 0, 2, 1, b)
    assert message_invalid_reason(bare, params4) == "bad-parent-qc"


def test_tokens_cover_field_order(params4):
    b = make_block(2, 1, 1, 1, GENESIS.hash, payload="p x")
    tok = block_token(b)
    assert tok.startswith("{hash=")
    assert "payload=p%20x" in tok
    qc = genesis_certificate(params4)
    assert cert_token(qc).startswith("{kind=prepare;block=")
    msg = vote(b, 1, 2, parent_qc=qc)
    mt = message_token(msg)
    assert mt.startswith("{kind=PrepareVote;e=0;v=1;n=2;block={")
    assert mt.endswith("cert=-}")

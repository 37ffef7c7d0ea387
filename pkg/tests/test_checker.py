import pytest

from giskard import netsim, scenarios
from giskard.checker import (
    StageFact,
    check_honest_discipline,
    check_lemma1,
    check_lemma3_monotonicity,
    check_theorem1,
    check_theorem2,
    check_theorem3,
    cross_validate,
    extract_stage_facts,
    quorum_intersection_oracle,
    run_all_checks,
)
from giskard.core import GENESIS, make_block, message_token
from giskard.netsim import ScenarioConfig, TraceRecord
from giskard.state import StageName

from conftest import chain, genesis_qc, prepare_qc, view_change_qc, vote


def mk_records(events):
    """events: list of (kind, node, message_or_None, detail)."""
    records = []
    for step, (kind, node, msg, detail) in enumerate(events):
        token = message_token(msg) if msg is not None else None
        records.append(TraceRecord(step=step, time=step * 10, kind=kind,
                                   node=node, message=msg, msg_token=token,
                                   detail=detail or {}))
    return records


def fact(node, block, stage, view=None, step=0):
    return StageFact(node, block, stage, view, step, step * 10)


def test_extract_facts_from_vote_quorum(params4):
    cfg = ScenarioConfig(k=4)
    b = chain(cfg.params(), 0, 1)[0]
    events = [("Deliver", 0, vote(b, 0, s), {"from": s}) for s in (1, 2, 3)]
    facts = extract_stage_facts(mk_records(events), cfg)
    piv = [f for f in facts if f.stage == StageName.PREPARE_IN_VIEW]
    assert len(piv) == 1 and piv[0].node == 0 and piv[0].block == b
    assert piv[0].view == 0 and piv[0].first_step == 2


def test_extract_facts_empty_trace_only_genesis():
    cfg = ScenarioConfig(k=4)
    facts = extract_stage_facts([], cfg)
    assert all(f.block == GENESIS and f.stage == StageName.PREPARE for f in facts)
    assert {f.node for f in facts} == {0, 1, 2, 3}


def test_extract_facts_example1_asymmetry(params4):
    cfg = ScenarioConfig(k=4)
    b1, b2 = chain(cfg.params(), 0, 2)
    qc = prepare_qc(b2, 0, 0, signers={0, 1, 2})
    facts = extract_stage_facts(mk_records([("Deliver", 3, qc, {"from": 0})]), cfg)
    mine = {(f.block, f.stage) for f in facts if f.node == 3}
    assert (b2, StageName.PREPARE) in mine
    assert (b1, StageName.PREPARE) not in mine


def test_theorem1_flags_same_view_same_height_fork(params4):
    a = make_block(1, 1, 0, 0, GENESIS.hash, payload="a")
    b = make_block(1, 1, 0, 0, GENESIS.hash, payload="b")
    facts = [fact(0, a, StageName.PREPARE_IN_VIEW, view=0, step=1),
             fact(1, b, StageName.PREPARE_IN_VIEW, view=0, step=2)]
    out = check_theorem1(facts)
    assert len(out) == 1 and out[0].property == "Theorem1"
    assert out[0].witness_steps == (1, 2)


def test_theorem1_ignores_cross_view_pairs(params4):
    a = make_block(1, 1, 0, 0, GENESIS.hash, payload="a")
    b = make_block(1, 1, 1, 1, GENESIS.hash, payload="b")
    facts = [fact(0, a, StageName.PREPARE_IN_VIEW, view=0),
             fact(1, b, StageName.PREPARE_IN_VIEW, view=1)]
    assert check_theorem1(facts) == []


def test_theorem1_single_fact_no_pair():
    a = make_block(1, 1, 0, 0, GENESIS.hash)
    assert check_theorem1([fact(0, a, StageName.PREPARE_IN_VIEW, view=0)]) == []


def test_theorem2_flags_injected_precommit_fork():
    a = make_block(1, 1, 0, 0, GENESIS.hash, payload="a")
    b = make_block(1, 1, 1, 1, GENESIS.hash, payload="b")
    facts = [fact(0, a, StageName.PRECOMMIT), fact(1, b, StageName.PRECOMMIT)]
    out = check_theorem2(facts)
    assert len(out) == 1 and out[0].property == "Theorem2"


def test_theorem3_flags_and_reduces_to_theorem2():
    a = make_block(1, 1, 0, 0, GENESIS.hash, payload="a")
    b = make_block(1, 1, 1, 1, GENESIS.hash, payload="b")
    facts = [fact(0, a, StageName.COMMIT), fact(1, b, StageName.COMMIT)]
    out = check_theorem3(facts)
    props = [v.property for v in out]
    assert "Theorem3" in props
    assert any("without a matching precommit fork" in v.explanation for v in out)
    both = facts + [fact(0, a, StageName.PRECOMMIT), fact(1, b, StageName.PRECOMMIT)]
    out2 = check_theorem3(both)
    assert len(out2) == 1  # commit fork present, structure intact


def test_theorem3_empty_when_no_commits():
    assert check_theorem3([]) == []


def test_lemma1_accepts_boundary_and_flags_below(params4):
    cfg = ScenarioConfig(k=4)
    b1, b2, b3 = chain(cfg.params(), 0, 3)
    prepare_facts = [fact(0, b3, StageName.PREPARE, step=1)]
    ok_qc = view_change_qc(b2, 0, 1, signers={0, 1, 2})
    bad_qc = view_change_qc(b1, 0, 1, signers={0, 1, 2})
    recs = mk_records([("Send", 1, ok_qc, {})])
    recs[0] = TraceRecord(5, 50, "Send", 1, ok_qc, message_token(ok_qc), {})
    assert check_lemma1(recs, prepare_facts) == []
    recs_bad = [TraceRecord(5, 50, "Send", 1, bad_qc, message_token(bad_qc), {})]
    out = check_lemma1(recs_bad, prepare_facts)
    assert len(out) == 1 and out[0].property == "Lemma1"


def test_lemma1_uses_facts_as_of_step(params4):
    cfg = ScenarioConfig(k=4)
    b1, b2, b3 = chain(cfg.params(), 0, 3)
    # the height-3 prepare only happens after the QC is sent
    prepare_facts = [fact(0, b1, StageName.PREPARE, step=1),
                     fact(0, b3, StageName.PREPARE, step=9)]
    qc = view_change_qc(b1, 0, 1, signers={0, 1, 2})
    recs = [TraceRecord(5, 50, "Send", 1, qc, message_token(qc), {})]
    assert check_lemma1(recs, prepare_facts) == []


def test_lemma3_flags_height_regression(params4):
    cfg = ScenarioConfig(k=4)
    b1, b2 = chain(cfg.params(), 0, 2)
    later_low = make_block(1, 1, 1, 1, GENESIS.hash, payload="low")
    facts = [fact(0, b2, StageName.PREPARE_IN_VIEW, view=0, step=1),
             fact(1, later_low, StageName.PREPARE_IN_VIEW, view=1, step=2)]
    out = check_lemma3_monotonicity(facts)
    assert out and all(v.property == "Lemma3" for v in out)


def test_lemma4_refinement_passes_on_boundary_pair(params4):
    cfg = ScenarioConfig(k=4)
    b1, b2 = chain(cfg.params(), 0, 2)
    c2 = make_block(2, 1, 1, 1, b1.hash, payload="c")
    c3 = make_block(3, 2, 1, 1, c2.hash, payload="c")
    facts = [fact(0, b1, StageName.PREPARE_IN_VIEW, view=0),
             fact(0, b2, StageName.PREPARE_IN_VIEW, view=0),
             fact(1, c2, StageName.PREPARE_IN_VIEW, view=1),
             fact(1, c3, StageName.PREPARE_IN_VIEW, view=1)]
    assert check_lemma3_monotonicity(facts) == []


def test_lemma4_refinement_flags_non_boundary_pair(params4):
    cfg = ScenarioConfig(k=4)
    b1, b2 = chain(cfg.params(), 0, 2)
    c2 = make_block(2, 1, 1, 1, b1.hash, payload="c")
    c3 = make_block(3, 2, 1, 1, c2.hash, payload="c")
    b3 = chain(cfg.params(), 0, 3)[-1]
    facts = [fact(0, b1, StageName.PREPARE_IN_VIEW, view=0),
             fact(0, b2, StageName.PREPARE_IN_VIEW, view=0),
             fact(0, b3, StageName.PREPARE_IN_VIEW, view=0),  # max of view 0 is 3
             fact(1, c2, StageName.PREPARE_IN_VIEW, view=1),
             fact(1, c3, StageName.PREPARE_IN_VIEW, view=1)]
    out = check_lemma3_monotonicity(facts)
    assert any("refinement" in v.explanation for v in out)


def test_lemma2_is_special_case_of_lemma3(params4):
    # Consecutive views are just v' = v+1 in the same check.
    cfg = ScenarioConfig(k=4)
    b2 = chain(cfg.params(), 0, 2)[-1]
    low = make_block(1, 1, 1, 1, GENESIS.hash, payload="low")
    facts = [fact(0, b2, StageName.PREPARE_IN_VIEW, view=3, step=1),
             fact(1, low, StageName.PREPARE_IN_VIEW, view=4, step=2)]
    assert check_lemma3_monotonicity(facts)


def test_honest_discipline_flags_double_vote(params4):
    cfg = ScenarioConfig(k=4)
    a = make_block(1, 1, 0, 0, GENESIS.hash, payload="a")
    b = make_block(1, 1, 0, 0, GENESIS.hash, payload="b")
    gq = genesis_qc(cfg.params())
    recs = mk_records([
        ("Send", 2, vote(a, 0, 2, parent_qc=gq), {}),
        ("Send", 2, vote(b, 0, 2, parent_qc=gq), {}),
    ])
    out = check_honest_discipline(recs, cfg)
    assert out and out[0].property == "HonestEquivocation"


def test_honest_discipline_exempts_declared_byzantine(params4):
    from giskard.adversary import AdversaryStrategy, StrategyKind

    cfg = ScenarioConfig(k=4, byzantine={
        2: AdversaryStrategy(StrategyKind.SAME_HEIGHT_DOUBLE_VOTE, frozenset({0}))})
    a = make_block(1, 1, 0, 0, GENESIS.hash, payload="a")
    b = make_block(1, 1, 0, 0, GENESIS.hash, payload="b")
    gq = genesis_qc(cfg.params())
    recs = mk_records([
        ("Send", 2, vote(a, 0, 2, parent_qc=gq), {}),
        ("Send", 2, vote(b, 0, 2, parent_qc=gq), {}),
    ])
    assert check_honest_discipline(recs, cfg) == []


def test_honest_discipline_flags_out_of_turn(params4):
    from conftest import prepare_block

    cfg = ScenarioConfig(k=4)
    b = make_block(1, 1, 2, 0, GENESIS.hash)
    recs = mk_records([("Send", 2, prepare_block(b, 0, 2), {})])
    out = check_honest_discipline(recs, cfg)
    assert any("out of turn" in v.explanation for v in out)


@pytest.mark.parametrize("k", [4, 7, 10])
def test_quorum_intersection_oracle(k):
    assert quorum_intersection_oracle(k)


def test_quorum_intersection_tightness():
    # Lowering the threshold to 2 for k=4 breaks the f+1 overlap.
    assert not quorum_intersection_oracle(4, threshold=2)
    assert quorum_intersection_oracle(4, threshold=3)


def test_quorum_intersection_bound():
    with pytest.raises(ValueError):
        quorum_intersection_oracle(13)


def test_cross_validation_catches_planted_claim(params4):
    cfg = ScenarioConfig(k=4)
    b = chain(cfg.params(), 0, 1)[0]
    bogus = TraceRecord(7, 70, "StageTransition", 0, None, None,
                        {"block": f"{b.hash:016x}", "stage": "Prepare",
                         "view": None, "height": 1})
    facts = extract_stage_facts([], cfg)
    out = cross_validate([bogus], facts, cfg)
    assert any("never derived" in m for m in out)


def test_run_all_checks_clean_on_honest_run():
    cfg = scenarios.load_scenario("example2-normal")
    world = netsim.run(cfg)
    report = run_all_checks(world.trace, cfg)
    assert report.violations == []
    assert report.cross_mismatches == []
    assert len(report.facts) > 20


def test_checker_counts_only_current_view_messages():
    # Votes arriving during the liminal period never count (the node can
    # miss a quorum it would otherwise have seen).
    cfg = ScenarioConfig(k=4)
    b = chain(cfg.params(), 0, 1)[0]
    events = [("Deliver", 0, vote(b, 0, 1), {"from": 1}),
              ("Timeout", 0, None, {"view": 0}),
              ("Deliver", 0, vote(b, 0, 2), {"from": 2}),
              ("Deliver", 0, vote(b, 0, 3), {"from": 3})]
    facts = extract_stage_facts(mk_records(events), cfg)
    assert not any(f.stage == StageName.PREPARE_IN_VIEW for f in facts)

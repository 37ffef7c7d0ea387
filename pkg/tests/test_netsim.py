import pytest

from giskard.adversary import AdversaryStrategy, StrategyKind
from giskard.core import GENESIS, MsgKind
from giskard.netsim import (
    NetworkModel,
    Partition,
    ScenarioConfig,
    ScriptRule,
    World,
    run,
)
from giskard.traceio import encode_trace
from giskard.scenarios import config_to_dict


def reliable_config(**kw):
    defaults = dict(name="t", k=4, blocks_per_view=3, views_to_run=2,
                    timeout_per_view=300, seed=1,
                    network=NetworkModel(profile="reliable", base_delay=10))
    defaults.update(kw)
    return ScenarioConfig(**defaults)


def test_broadcast_fanout_includes_loopback():
    world = run(reliable_config(views_to_run=1))
    sends = [r for r in world.trace if r.kind == "Send"]
    first = sends[0]
    delivered = [r for r in world.trace
                 if r.kind in ("Deliver", "Drop") and r.msg_token == first.msg_token]
    assert len(delivered) == 4
    assert any(r.node == first.node for r in delivered)


def test_trace_completeness_one_send_k_deliveries():
    # Every broadcast fans out to exactly one Deliver-or-Drop per roster
    # member; messages still in flight when the run stops are exempt.
    world = run(reliable_config())
    horizon = world.clock - 10
    per_token: dict[str, list] = {}
    sends: dict[str, int] = {}
    for r in world.trace:
        if r.kind == "Send":
            if r.time <= horizon:
                sends[r.msg_token] = sends.get(r.msg_token, 0) + 1
        elif r.kind in ("Deliver", "Drop"):
            reason = r.detail.get("reason", "")
            if isinstance(reason, str) and reason.startswith("local:"):
                continue
            per_token.setdefault(r.msg_token, []).append(r)
    assert sends
    for token, n_sends in sends.items():
        assert len(per_token[token]) == 4 * n_sends


def test_causality_delivery_after_send():
    world = run(reliable_config())
    send_time: dict[str, int] = {}
    for r in world.trace:
        if r.kind == "Send" and r.msg_token not in send_time:
            send_time[r.msg_token] = r.time
        elif r.kind == "Deliver":
            assert r.time >= send_time[r.msg_token] + 10


def test_same_seed_identical_traces():
    cfg = reliable_config(network=NetworkModel(profile="lossy", base_delay=10,
                                               jitter=4, drop_probability=0.2),
                          seed=42)
    t1 = encode_trace(config_to_dict(cfg), run(cfg).trace)
    t2 = encode_trace(config_to_dict(cfg), run(cfg).trace)
    assert t1 == t2


def test_different_seed_diverges():
    mk = lambda s: reliable_config(
        network=NetworkModel(profile="lossy", base_delay=10, jitter=4,
                             drop_probability=0.2), seed=s)
    t1 = encode_trace(config_to_dict(mk(1)), run(mk(1)).trace)
    t2 = encode_trace(config_to_dict(mk(2)), run(mk(2)).trace)
    assert t1 != t2


def test_lossy_drops_recorded():
    cfg = reliable_config(network=NetworkModel(profile="lossy", base_delay=10,
                                               drop_probability=0.5), seed=3)
    world = run(cfg)
    drops = [r for r in world.trace if r.kind == "Drop"
             and r.detail.get("reason") == "network"]
    assert drops


def test_loopback_never_randomly_dropped():
    cfg = reliable_config(network=NetworkModel(profile="lossy", base_delay=10,
                                               drop_probability=1.0), seed=3,
                          max_steps=2000)
    world = run(cfg)
    for r in world.trace:
        if r.kind == "Drop" and r.detail.get("reason") == "network":
            assert r.node != r.detail["from"]


def test_partition_blocks_cross_traffic():
    net = NetworkModel(profile="lossy", base_delay=10,
                       partitions=(Partition(0, 10_000, frozenset({0, 1})),))
    world = run(reliable_config(network=net, max_steps=3000))
    for r in world.trace:
        if r.kind == "Deliver":
            src = int(r.detail["from"])
            sides = (src in (0, 1)), (r.node in (0, 1))
            assert sides[0] == sides[1]
    assert any(r.kind == "Drop" and r.detail.get("reason") == "partition"
               for r in world.trace)


def test_scripted_drop_rule():
    rule = ScriptRule(action="drop", kind=MsgKind.PREPARE_VOTE, to=(2,))
    net = NetworkModel(profile="scripted", base_delay=10, script=(rule,))
    world = run(reliable_config(network=net, max_steps=3000))
    for r in world.trace:
        if r.kind == "Deliver" and r.message.kind == MsgKind.PREPARE_VOTE:
            assert r.node != 2
    assert any(r.kind == "Drop" and r.detail.get("reason") == "scripted"
               for r in world.trace)


def test_simultaneous_timeouts_share_timestamp():
    # Drop every vote for the last block so the view must expire.
    rule = ScriptRule(action="drop", kind=MsgKind.PREPARE_VOTE, block_index=3)
    rule2 = ScriptRule(action="drop", kind=MsgKind.PREPARE_QC, block_index=3)
    net = NetworkModel(profile="scripted", base_delay=10, script=(rule, rule2))
    world = run(reliable_config(network=net, views_to_run=1))
    timeouts = [r for r in world.trace if r.kind == "Timeout"]
    assert len(timeouts) == 4
    assert len({r.time for r in timeouts}) == 1
    assert {r.node for r in timeouts} == {0, 1, 2, 3}


def test_node_already_advanced_skips_timeout():
    world = run(reliable_config(views_to_run=2))
    views_at_timeout = [r for r in world.trace if r.kind == "Timeout"]
    assert views_at_timeout == []  # happy path outruns every deadline


def test_timeout_ordered_before_same_time_delivery():
    # Kind priority: at an equal timestamp the timeout event wins.
    world = World(reliable_config())
    world._heap.clear()
    world._push(50, 1, ("deliver", 0, None, None, 1))
    world._push(50, 0, ("timeout", 0, 0))
    first = world._heap[0]
    assert first[1] == 0 and first[3][0] == "timeout"


def test_run_terminates_on_empty_queue_with_stuck_node():
    # Every vote to node 3 dropped: it can never finish view 0, but the run
    # still drains and stops.
    rules = (ScriptRule(action="drop", to=(3,), kind=MsgKind.PREPARE_VOTE),
             ScriptRule(action="drop", to=(3,), kind=MsgKind.PREPARE_QC),
             ScriptRule(action="drop", to=(3,), kind=MsgKind.VIEW_CHANGE),
             ScriptRule(action="drop", to=(3,), kind=MsgKind.VIEW_CHANGE_QC))
    net = NetworkModel(profile="scripted", base_delay=10, script=rules)
    cfg = reliable_config(network=net, views_to_run=1, max_steps=5000)
    world = run(cfg)
    assert world.node_state(3).view == 0
    assert world.node_state(0).view >= 1


def test_max_steps_bounds_run():
    cfg = reliable_config(views_to_run=50, max_steps=100)
    world = run(cfg)
    assert world.events_processed <= 100


def test_silent_node_deliveries_still_recorded():
    cfg = reliable_config(
        byzantine={2: AdversaryStrategy(StrategyKind.SILENT, frozenset({0, 1}))},
        views_to_run=1)
    world = run(cfg)
    assert any(r.kind == "Deliver" and r.node == 2 for r in world.trace)
    assert not any(r.kind == "Send" and r.node == 2 for r in world.trace)


def test_duplicates_off_by_default():
    cfg = reliable_config()
    assert cfg.network.duplicate_probability == 0.0
    world = run(cfg)
    seen = {}
    for r in world.trace:
        if r.kind == "Deliver":
            key = (r.node, r.msg_token)
            seen[key] = seen.get(key, 0) + 1
    assert all(v == 1 for v in seen.values())


def test_config_validation_errors():
    with pytest.raises(ValueError):
        ScenarioConfig(k=4, byzantine={
            1: AdversaryStrategy(StrategyKind.SILENT, frozenset()),
            2: AdversaryStrategy(StrategyKind.SILENT, frozenset()),
        }).validate()
    with pytest.raises(ValueError):
        ScenarioConfig(k=4, stop_quorum="most").validate()
    with pytest.raises(ValueError):
        ScenarioConfig(k=4, negative_control=True).validate()


def test_state_digest_in_view_entry_records():
    world = run(reliable_config(views_to_run=1))
    entries = [r for r in world.trace if r.kind == "ViewEntry"]
    assert entries and all("digest" in r.detail for r in entries)


def test_chain_heights_walkable_after_run():
    # Walking parent links from any known block reaches genesis with the
    # height dropping by exactly one per hop.
    world = run(reliable_config())
    for nid in range(4):
        st = world.node_state(nid)
        for b in st.known_blocks.values():
            cur = b
            while cur.hash != GENESIS.hash:
                parent = st.known_blocks.get(cur.parent_hash)
                if parent is None:
                    break
                assert cur.height == parent.height + 1
                cur = parent

"""Giskard BFT consensus: protocol state machine, simulator, safety checker."""

from .adversary import AdversaryStrategy, ByzantineNode, StrategyKind
from .checker import (
    CheckReport,
    StageFact,
    Violation,
    check_honest_discipline,
    check_lemma1,
    check_lemma3_monotonicity,
    check_theorem1,
    check_theorem2,
    check_theorem3,
    extract_stage_facts,
    quorum_intersection_oracle,
    run_all_checks,
)
from .core import (
    GENESIS,
    Block,
    ConsensusMessage,
    MsgKind,
    ProtocolParams,
    QuorumCertificate,
    block_proposer_for_view,
    compute_block_hash,
    genesis_certificate,
    is_last_block,
    make_block,
    quorum_threshold,
    validate_certificate,
)
from .netsim import NetworkModel, Partition, ScenarioConfig, ScriptRule, World, run
from .scenarios import (
    build_lemma_config,
    build_safety_config,
    config_from_dict,
    config_to_dict,
    evaluate_assertions,
    library_scenarios,
    load_scenario,
)
from .state import NodeState, StageName
from .transitions import (
    Deliver,
    TimeoutFired,
    TransitionOutput,
    ViewEntered,
    apply_event,
    carryover_block,
)

__version__ = "0.1.0"

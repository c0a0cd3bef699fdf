from __future__ import annotations

import copy
import hashlib
import json

import pytest

from chainlm.chain import EMPTY_SHA256, canonical_json
from chainlm.consensus import (
    Behavior,
    ConsensusError,
    EmptyVoteSet,
    ExactQuorum,
    Majority,
    NoHonestValidator,
    PerturbingFacade,
    ScenarioError,
    StakeWeighted,
    ValidatorSpec,
    Vote,
    consensus_report,
    parse_policy,
    parse_scenario,
    policy_to_json,
    run_scenario,
    select_result,
    verify_replication,
)
from chainlm.engine import generate_model, model_to_bytes

D1 = hashlib.sha256(b"result-1").digest()
D2 = hashlib.sha256(b"result-2").digest()
D3 = hashlib.sha256(b"result-3").digest()


def votes_for(assignment: dict[str, bytes]) -> list[Vote]:
    return [Vote(validator=v, digest=d, app_hash=b"\x00" * 32)
            for v, d in sorted(assignment.items())]


# ---------------------------------------------------------------------------
# select_result
# ---------------------------------------------------------------------------


def test_majority_picks_mode():
    votes = votes_for({"a": D1, "b": D1, "c": D2, "d": D1})
    stakes = {"a": 1, "b": 1, "c": 1, "d": 1}
    out = select_result(votes, Majority(), stakes)
    assert out.agreed_digest == D1
    assert out.decided
    assert out.divergence_detected
    assert out.vote_tally[D1] == (3, 3)
    assert out.vote_tally[D2] == (1, 1)


def test_majority_tie_breaks_to_smallest_digest():
    votes = votes_for({"a": D1, "b": D2})
    out = select_result(votes, Majority(), {"a": 1, "b": 1})
    assert out.decided
    assert out.agreed_digest == min(D1, D2)


def test_stake_weighted_overrides_count():
    # One 10-stake validator outvotes two 1-stake validators.
    votes = votes_for({"a": D1, "b": D2, "c": D2})
    out = select_result(votes, StakeWeighted(), {"a": 10, "b": 1, "c": 1})
    assert out.agreed_digest == D1
    assert out.decided


def test_stake_weighted_tie_breaks_to_smallest_digest():
    votes = votes_for({"a": D1, "b": D2})
    out = select_result(votes, StakeWeighted(), {"a": 5, "b": 5})
    assert out.agreed_digest == min(D1, D2)


def test_exact_quorum_reaches_and_misses():
    stakes = {v: 1 for v in "abcdefg"}
    # 5 of 7 equal-stake validators: ceil(2/3 * 7) = 5, decided.
    votes = votes_for({"a": D1, "b": D1, "c": D1, "d": D1, "e": D1, "f": D2, "g": D2})
    out = select_result(votes, ExactQuorum(), stakes)
    assert out.decided and out.agreed_digest == D1 and out.divergence_detected
    # 4 of 7 falls short.
    votes = votes_for({"a": D1, "b": D1, "c": D1, "d": D1, "e": D2, "f": D2, "g": D3})
    out = select_result(votes, ExactQuorum(), stakes)
    assert not out.decided and out.agreed_digest is None


def test_exact_quorum_counts_non_voting_stake():
    # Total stake includes the silent validator d, so 2 of 4 voting
    # with 2/4 stake misses ceil(2/3 * 4) = 3.
    votes = votes_for({"a": D1, "b": D1})
    out = select_result(votes, ExactQuorum(), {"a": 1, "b": 1, "c": 1, "d": 1})
    assert not out.decided
    votes = votes_for({"a": D1, "b": D1, "c": D1})
    out = select_result(votes, ExactQuorum(), {"a": 1, "b": 1, "c": 1, "d": 1})
    assert out.decided


def test_exact_quorum_fraction_validation():
    with pytest.raises(ValueError):
        ExactQuorum(numerator=1, denominator=2)
    with pytest.raises(ValueError):
        ExactQuorum(numerator=4, denominator=3)
    ExactQuorum(numerator=3, denominator=4)


def test_empty_vote_set():
    with pytest.raises(EmptyVoteSet):
        select_result([], Majority(), {})


def test_no_divergence_flag_for_unanimous():
    votes = votes_for({"a": D1, "b": D1})
    out = select_result(votes, Majority(), {"a": 1, "b": 1})
    assert not out.divergence_detected


def test_policy_json_roundtrip():
    for p in (Majority(), StakeWeighted(), ExactQuorum(),
              ExactQuorum(numerator=3, denominator=4)):
        parsed = parse_policy(policy_to_json(p))
        assert parsed == p
    assert parse_policy("exact-quorum") == ExactQuorum()
    with pytest.raises(ScenarioError):
        parse_policy("plurality")


# ---------------------------------------------------------------------------
# validator specs
# ---------------------------------------------------------------------------


def test_validator_spec_validation():
    ValidatorSpec(id="v", stake=1, behavior=Behavior.HONEST)
    ValidatorSpec(id="v", stake=1, behavior=Behavior.DIVERGENT, xor_mask=255)
    with pytest.raises(ValueError):
        ValidatorSpec(id="", stake=1, behavior=Behavior.HONEST)
    with pytest.raises(ValueError):
        ValidatorSpec(id="v", stake=0, behavior=Behavior.HONEST)
    with pytest.raises(ValueError):
        ValidatorSpec(id="v", stake=1, behavior=Behavior.DIVERGENT)
    with pytest.raises(ValueError):
        ValidatorSpec(id="v", stake=1, behavior=Behavior.HONEST, xor_mask=1)


# ---------------------------------------------------------------------------
# scenario parsing
# ---------------------------------------------------------------------------


def scenario_doc(**overrides) -> dict:
    doc = {
        "chain_id": "sim-1",
        "validators": [
            {"id": "v0", "stake": 10, "behavior": "honest"},
            {"id": "v1", "stake": 10, "behavior": "honest"},
            {"id": "v2", "stake": 10, "behavior": "honest"},
            {"id": "v3", "stake": 10, "behavior": "honest"},
        ],
        "policy": "exact-quorum",
        "model_id": "toy",
        "txs": [
            {"register": {"name": "alice", "value": "wonderland"}},
            {"infer_from_name": {"max_tokens": 6, "mode": "sampled",
                                 "model_id": "toy", "name": "alice"}},
        ],
        "scenario_seed": 7,
    }
    doc.update(overrides)
    return doc


def test_parse_valid_scenario():
    s = parse_scenario(scenario_doc())
    assert s.chain_id == "sim-1"
    assert len(s.validators) == 4
    assert s.policy == ExactQuorum()
    assert s.gas_schedule.g_base == 1000
    assert len(s.txs) == 2
    assert s.scenario_seed == 7


def test_parse_scenario_gas_override():
    s = parse_scenario(scenario_doc(gas_schedule={"g_base": 500, "tx_gas_limit": 2000}))
    assert s.gas_schedule.g_base == 500
    assert s.gas_schedule.tx_gas_limit == 2000
    assert s.gas_schedule.g_per_token == 100


@pytest.mark.parametrize("mutate,needle", [
    (lambda d: d.pop("chain_id"), "missing"),
    (lambda d: d.update(chain_id=""), "chain_id"),
    (lambda d: d.update(extra=1), "unknown"),
    (lambda d: d.update(validators=[]), "validators"),
    (lambda d: d["validators"][0].pop("stake"), "validators[0].stake"),
    (lambda d: d["validators"][1].update(stake=0), "validators[1].stake"),
    (lambda d: d["validators"][2].update(behavior="sleepy"), "validators[2].behavior"),
    (lambda d: d["validators"][0].update(id=""), "validators[0].id"),
    (lambda d: d["validators"][1].update(id="v0"), "validators[1].id"),
    (lambda d: d["validators"][0].update(mask=3), "validators[0].mask"),
    (lambda d: d["validators"][0].update(behavior="divergent"), "validators[0].mask"),
    (lambda d: d["validators"][0].update(behavior="divergent", mask=0),
     "validators[0].mask"),
    (lambda d: d.update(policy="plurality"), "policy"),
    (lambda d: d.update(gas_schedule={"bogus": 1}), "gas_schedule"),
    (lambda d: d.update(model_id="9/11"), "model_id"),
    (lambda d: d.update(txs="nope"), "txs"),
    (lambda d: d["txs"].append({"register": {"name": "NO", "value": "x"}}), "txs[2]"),
    (lambda d: d.update(scenario_seed=-1), "scenario_seed"),
    (lambda d: d.update(scenario_seed=2**64), "scenario_seed"),
])
def test_parse_scenario_field_errors(mutate, needle):
    doc = scenario_doc()
    mutate(doc)
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(doc)
    assert needle in str(exc.value)


# ---------------------------------------------------------------------------
# run_scenario
# ---------------------------------------------------------------------------


@pytest.fixture
def cache(tmp_path):
    model = generate_model(hidden_dim=4, max_context=96, seed=9)
    (tmp_path / "toy.wicm").write_bytes(model_to_bytes(model))
    return tmp_path


def test_all_honest_agree(cache):
    result = run_scenario(parse_scenario(scenario_doc()), cache)
    assert len(result.outcomes) == 2
    for outcome, votes in zip(result.outcomes, result.votes):
        assert outcome.decided
        assert not outcome.divergence_detected
        assert len({v.digest for v in votes}) == 1
        assert len({v.app_hash for v in votes}) == 1
    # Register tx votes carry the empty digest, inference a real one.
    assert result.votes[0][0].digest == EMPTY_SHA256
    assert result.votes[1][0].digest != EMPTY_SHA256


def test_divergent_minority_outvoted(cache):
    doc = scenario_doc(policy="majority")
    doc["validators"][3] = {"id": "v3", "stake": 10, "behavior": "divergent", "mask": 1}
    result = run_scenario(parse_scenario(doc), cache)
    infer_outcome = result.outcomes[1]
    assert infer_outcome.divergence_detected
    assert infer_outcome.decided
    honest_digest = next(v.digest for v in result.votes[1] if v.validator == "v0")
    assert infer_outcome.agreed_digest == honest_digest
    assert infer_outcome.vote_tally[honest_digest] == (3, 30)


def test_seven_validators_two_divergent_quorum(cache):
    validators = [{"id": f"v{i}", "stake": 1, "behavior": "honest"} for i in range(5)]
    validators += [{"id": "v5", "stake": 1, "behavior": "divergent", "mask": 1},
                   {"id": "v6", "stake": 1, "behavior": "divergent", "mask": 2}]
    doc = scenario_doc(validators=validators)
    result = run_scenario(parse_scenario(doc), cache)
    outcome = result.outcomes[1]
    # Distinct masks give distinct wrong digests: 5-1-1 split, and the
    # honest 5 of 7 reach exactly ceil(2/3 * 7) = 5.
    assert len(outcome.vote_tally) == 3
    assert outcome.decided
    assert outcome.divergence_detected
    honest_digest = next(v.digest for v in result.votes[1] if v.validator == "v0")
    assert outcome.agreed_digest == honest_digest


def test_divergence_only_on_nonempty_output(cache):
    # Registers produce no inference bytes, so a divergent validator
    # votes the same empty digest as everyone else.
    doc = scenario_doc(txs=[{"register": {"name": "a", "value": "b"}}])
    doc["validators"][0] = {"id": "v0", "stake": 10, "behavior": "divergent", "mask": 9}
    result = run_scenario(parse_scenario(doc), cache)
    assert not result.outcomes[0].divergence_detected


def test_offline_validators_dont_vote_but_count(cache):
    doc = scenario_doc()
    doc["validators"].append({"id": "v4", "stake": 41, "behavior": "offline"})
    result = run_scenario(parse_scenario(doc), cache)
    # 4 honest voters hold 40 of 81 total stake: below the 54 quorum.
    for outcome in result.outcomes:
        assert len(result.votes[0]) == 4
        assert not outcome.decided
    assert "v4" not in result.logs


def test_no_honest_validator_rejected(cache):
    doc = scenario_doc(validators=[
        {"id": "v0", "stake": 1, "behavior": "divergent", "mask": 1},
        {"id": "v1", "stake": 1, "behavior": "offline"},
    ])
    with pytest.raises(NoHonestValidator):
        run_scenario(parse_scenario(doc), cache)


def test_failing_tx_is_deterministic_across_nodes(cache):
    # Inference against an unregistered name fails on every node the
    # same way; consensus lands on the empty digest.
    doc = scenario_doc(txs=[{"infer_from_name": {
        "max_tokens": 4, "mode": "greedy", "model_id": "toy", "name": "ghost"}}])
    result = run_scenario(parse_scenario(doc), cache)
    assert result.outcomes[0].decided
    assert result.outcomes[0].agreed_digest == EMPTY_SHA256
    # The failed tx must not have touched state beyond genesis.
    logs = result.logs
    assert len({logs[v][0]["app_hash"] for v in logs}) == 1


def test_run_is_reproducible(cache):
    doc = scenario_doc()
    a = run_scenario(parse_scenario(doc), cache)
    b = run_scenario(parse_scenario(copy.deepcopy(doc)), cache)
    assert canonical_json({k: v for k, v in a.logs.items()}) == \
        canonical_json({k: v for k, v in b.logs.items()})
    assert [o.to_dict() for o in a.outcomes] == [o.to_dict() for o in b.outcomes]


def test_block_records_shape(cache):
    result = run_scenario(parse_scenario(scenario_doc()), cache)
    rec = result.logs["v0"][1]
    assert rec["height"] == 2
    assert len(rec["txs"]) == 1
    assert "infer_from_name" in rec["txs"][0]["msg"]
    assert len(bytes.fromhex(rec["app_hash"])) == 32
    assert rec["agreed_digests"] == [result.outcomes[1].agreed_digest.hex()]


def test_scenario_seed_changes_genesis_hash(cache):
    a = run_scenario(parse_scenario(scenario_doc()), cache)
    b = run_scenario(parse_scenario(scenario_doc(scenario_seed=8)), cache)
    assert a.logs["v0"][0]["app_hash"] != b.logs["v0"][0]["app_hash"]


# ---------------------------------------------------------------------------
# verify_replication
# ---------------------------------------------------------------------------


def honest_ids(doc) -> set[str]:
    return {v["id"] for v in doc["validators"] if v["behavior"] == "honest"}


def test_replicated_verdict(cache):
    doc = scenario_doc()
    result = run_scenario(parse_scenario(doc), cache)
    report = verify_replication(result.logs, honest_ids(doc))
    assert report.status == "replicated"
    assert report.flagged == {}
    assert report.first_divergence is None


def test_divergent_node_is_flagged(cache):
    doc = scenario_doc(policy="majority")
    doc["validators"][3] = {"id": "v3", "stake": 10, "behavior": "divergent", "mask": 1}
    result = run_scenario(parse_scenario(doc), cache)
    report = verify_replication(result.logs, honest_ids(doc))
    # Honest logs replicate; only the divergent node is flagged, at the
    # inference block where its state first differs.
    assert report.status == "replicated"
    assert report.flagged == {"v3": (2, 0)}


def test_honest_divergence_reported(cache):
    result = run_scenario(parse_scenario(scenario_doc()), cache)
    logs = copy.deepcopy(result.logs)
    logs["v1"][1]["app_hash"] = "00" * 32
    report = verify_replication(logs, {"v0", "v1", "v2", "v3"})
    assert report.status == "diverged"
    assert report.first_divergence == (2, 0)


def test_unequal_length_logs(cache):
    result = run_scenario(parse_scenario(scenario_doc()), cache)
    logs = copy.deepcopy(result.logs)
    logs["v2"] = logs["v2"][:1]
    report = verify_replication(logs, {"v0", "v1", "v2", "v3"})
    assert report.status == "missing-heights"
    assert "v2" in report.detail or "lengths" in report.detail


def test_bad_heights_rejected(cache):
    result = run_scenario(parse_scenario(scenario_doc()), cache)
    logs = copy.deepcopy(result.logs)
    logs["v0"][1]["height"] = 9
    report = verify_replication(logs, {"v0", "v1", "v2", "v3"})
    assert report.status == "missing-heights"


def test_verify_needs_honest_logs(cache):
    result = run_scenario(parse_scenario(scenario_doc()), cache)
    with pytest.raises(NoHonestValidator):
        verify_replication(result.logs, {"someone-else"})
    with pytest.raises(ConsensusError):
        verify_replication({}, {"v0"})


def test_consensus_report_shape(cache):
    doc = scenario_doc()
    result = run_scenario(parse_scenario(doc), cache)
    report = consensus_report(result, verify_replication(result.logs, honest_ids(doc)))
    assert report["chain_id"] == "sim-1"
    assert report["policy"] == {"exact-quorum": {"numerator": 2, "denominator": 3}}
    assert len(report["txs"]) == 2
    assert report["txs"][1]["decided"] is True
    assert report["replication"]["status"] == "replicated"
    json.dumps(report)  # must be JSON-serializable as-is


# ---------------------------------------------------------------------------
# perturbing facade
# ---------------------------------------------------------------------------


def test_perturbing_facade_flips_bytes(cache):
    from chainlm.engine import DecodeMode, DecodeParams
    from chainlm.nn_facade import InferenceFacade, Tensor, TensorType

    params = DecodeParams(mode=DecodeMode.GREEDY, max_tokens=8)

    def run(facade):
        graph = facade.build_from_cache("toy")
        ctx = facade.init_execution_context(graph, 3, params)
        facade.set_input(ctx, 0, Tensor((1,), TensorType.U8, b"name:a value:b"))
        facade.compute(ctx)
        return facade.get_output(ctx, 0, 1000)

    plain, n1 = run(InferenceFacade(cache))
    flipped, n2 = run(PerturbingFacade(cache, 0x5A))
    assert n1 == n2
    assert flipped == bytes(b ^ 0x5A for b in plain)

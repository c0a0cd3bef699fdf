"""Multi-validator simulation and replication checking.

Every validator runs the full node stack (own state, own facade, own
runtime) over the same transaction stream and votes with the digest of
its inference output. Divergent validators model nondeterministic
hardware by XORing every output byte with a fixed mask; offline
validators neither execute nor vote but still count toward total
stake. Scenarios execute event-ordered by (height, tx index,
validator id), one transaction per block.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from chainlm.chain import (
    EMPTY_SHA256,
    ChainState,
    GasSchedule,
    OutOfGas,
    app_hash,
    make_block_record,
)
from chainlm.contracts import (
    BUILTIN_NAME_SERVICE_ID,
    ContractError,
    ContractRuntime,
    MsgError,
    msg_to_dict,
    parse_execute_msg,
    transaction_hash,
)
from chainlm.nn_facade import MODEL_ID_RE, FacadeError, InferenceFacade

_U64 = struct.Struct("<Q")

SCENARIO_SEED_KEY = b"genesis/scenario_seed"


class ConsensusError(Exception):
    pass


class EmptyVoteSet(ConsensusError):
    pass


class NoHonestValidator(ConsensusError):
    pass


class ScenarioError(ValueError):
    """Scenario file violates the schema; message names the field path."""


class Behavior(Enum):
    HONEST = "honest"
    DIVERGENT = "divergent"
    OFFLINE = "offline"


@dataclass(frozen=True)
class ValidatorSpec:
    id: str
    stake: int
    behavior: Behavior
    xor_mask: int = 0

    def __post_init__(self):
        if not self.id:
            raise ValueError("validator id must be non-empty")
        if self.stake < 1:
            raise ValueError(f"stake must be >= 1, got {self.stake}")
        if self.behavior is Behavior.DIVERGENT:
            if not 1 <= self.xor_mask <= 255:
                raise ValueError(f"divergent mask must be in [1, 255], got {self.xor_mask}")
        elif self.xor_mask != 0:
            raise ValueError("xor_mask only applies to divergent validators")


@dataclass(frozen=True)
class Vote:
    validator: str
    digest: bytes
    app_hash: bytes


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExactQuorum:
    """Decide only when one digest holds >= ceil(num/den of total stake),
    counting all validators (offline included) in the total."""

    numerator: int = 2
    denominator: int = 3

    def __post_init__(self):
        if self.denominator < 1 or not (2 * self.numerator > self.denominator
                                        and self.numerator <= self.denominator):
            raise ValueError("quorum fraction must satisfy 1/2 < num/den <= 1")


@dataclass(frozen=True)
class Majority:
    """Most votes wins; ties break to the lexicographically smallest digest."""


@dataclass(frozen=True)
class StakeWeighted:
    """Largest summed stake wins; ties break to the smallest digest."""


Policy = ExactQuorum | Majority | StakeWeighted


def policy_to_json(policy: Policy):
    if isinstance(policy, Majority):
        return "majority"
    if isinstance(policy, StakeWeighted):
        return "stake-weighted"
    return {"exact-quorum": {"numerator": policy.numerator,
                             "denominator": policy.denominator}}


def parse_policy(obj) -> Policy:
    if obj == "majority":
        return Majority()
    if obj == "stake-weighted":
        return StakeWeighted()
    if obj == "exact-quorum":
        return ExactQuorum()
    if isinstance(obj, dict) and set(obj) == {"exact-quorum"}:
        body = obj["exact-quorum"]
        if not isinstance(body, dict) or set(body) != {"numerator", "denominator"}:
            raise ScenarioError("policy.exact-quorum: needs numerator and denominator")
        try:
            return ExactQuorum(numerator=body["numerator"], denominator=body["denominator"])
        except (ValueError, TypeError) as exc:
            raise ScenarioError(f"policy.exact-quorum: {exc}") from exc
    raise ScenarioError(f"policy: unknown policy {obj!r}")


@dataclass
class ConsensusOutcome:
    agreed_digest: bytes | None
    vote_tally: dict[bytes, tuple[int, int]]  # digest -> (votes, stake)
    decided: bool
    divergence_detected: bool

    def to_dict(self) -> dict:
        return {
            "agreed_digest": None if self.agreed_digest is None else self.agreed_digest.hex(),
            "tally": {d.hex(): {"count": c, "stake": s}
                      for d, (c, s) in sorted(self.vote_tally.items())},
            "decided": self.decided,
            "divergence_detected": self.divergence_detected,
        }


def select_result(votes: list[Vote], policy: Policy,
                  stakes: dict[str, int]) -> ConsensusOutcome:
    """Tally votes under a policy. stakes covers every validator in the
    validator set, voting or not; ExactQuorum measures against that
    total so silent validators weigh against reaching quorum."""
    if not votes:
        raise EmptyVoteSet("no votes to tally")
    tally: dict[bytes, tuple[int, int]] = {}
    for vote in votes:
        count, stake = tally.get(vote.digest, (0, 0))
        tally[vote.digest] = (count + 1, stake + stakes[vote.validator])
    divergence = len(tally) >= 2

    if isinstance(policy, Majority):
        best = max(c for c, _ in tally.values())
        agreed = min(d for d, (c, _) in tally.items() if c == best)
        return ConsensusOutcome(agreed, tally, True, divergence)

    if isinstance(policy, StakeWeighted):
        best = max(s for _, s in tally.values())
        agreed = min(d for d, (_, s) in tally.items() if s == best)
        return ConsensusOutcome(agreed, tally, True, divergence)

    total = sum(stakes.values())
    threshold = -(-(policy.numerator * total) // policy.denominator)
    reaching = [d for d, (_, s) in tally.items() if s >= threshold]
    assert len(reaching) <= 1, "quorum fraction above 1/2 admits one winner"
    if reaching:
        return ConsensusOutcome(reaching[0], tally, True, divergence)
    return ConsensusOutcome(None, tally, False, divergence)


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    chain_id: str
    validators: list[ValidatorSpec]
    policy: Policy
    gas_schedule: GasSchedule
    model_id: str
    txs: list[dict]
    scenario_seed: int


_SCENARIO_FIELDS = {"chain_id", "validators", "policy", "gas_schedule",
                    "model_id", "txs", "scenario_seed"}
_BEHAVIORS = {b.value for b in Behavior}


def parse_scenario(obj) -> Scenario:
    """Validate a scenario document; errors name the offending field."""
    if not isinstance(obj, dict):
        raise ScenarioError("scenario: must be an object")
    unknown = set(obj) - _SCENARIO_FIELDS
    if unknown:
        raise ScenarioError(f"scenario: unknown fields {sorted(unknown)}")
    missing = (_SCENARIO_FIELDS - {"gas_schedule"}) - set(obj)
    if missing:
        raise ScenarioError(f"scenario: missing fields {sorted(missing)}")

    chain_id = obj["chain_id"]
    if not isinstance(chain_id, str) or not chain_id:
        raise ScenarioError("chain_id: must be a non-empty string")

    raw_validators = obj["validators"]
    if not isinstance(raw_validators, list) or not raw_validators:
        raise ScenarioError("validators: must be a non-empty list")
    validators = []
    seen_ids = set()
    for i, v in enumerate(raw_validators):
        path = f"validators[{i}]"
        if not isinstance(v, dict):
            raise ScenarioError(f"{path}: must be an object")
        allowed = {"id", "stake", "behavior", "mask"}
        extra = set(v) - allowed
        if extra:
            raise ScenarioError(f"{path}: unknown fields {sorted(extra)}")
        vid = v.get("id")
        if not isinstance(vid, str) or not vid:
            raise ScenarioError(f"{path}.id: must be a non-empty string")
        if vid in seen_ids:
            raise ScenarioError(f"{path}.id: duplicate validator id {vid!r}")
        seen_ids.add(vid)
        stake = v.get("stake")
        if not isinstance(stake, int) or isinstance(stake, bool) or stake < 1:
            raise ScenarioError(f"{path}.stake: must be an integer >= 1")
        behavior = v.get("behavior")
        if behavior not in _BEHAVIORS:
            raise ScenarioError(f"{path}.behavior: must be one of {sorted(_BEHAVIORS)}")
        mask = v.get("mask", 0)
        if behavior == "divergent":
            if not isinstance(mask, int) or isinstance(mask, bool) or not 1 <= mask <= 255:
                raise ScenarioError(f"{path}.mask: divergent validators need a mask "
                                    "in [1, 255]")
        elif "mask" in v:
            raise ScenarioError(f"{path}.mask: only divergent validators take a mask")
        validators.append(ValidatorSpec(id=vid, stake=stake,
                                        behavior=Behavior(behavior), xor_mask=mask))

    policy = parse_policy(obj["policy"])

    schedule = GasSchedule()
    if "gas_schedule" in obj:
        if not isinstance(obj["gas_schedule"], dict):
            raise ScenarioError("gas_schedule: must be an object")
        try:
            schedule = GasSchedule.from_dict(obj["gas_schedule"])
        except (ValueError, TypeError) as exc:
            raise ScenarioError(f"gas_schedule: {exc}") from exc

    model_id = obj["model_id"]
    if not isinstance(model_id, str) or not MODEL_ID_RE.match(model_id):
        raise ScenarioError(f"model_id: invalid id {model_id!r}")

    raw_txs = obj["txs"]
    if not isinstance(raw_txs, list):
        raise ScenarioError("txs: must be a list")
    txs = []
    for i, tx in enumerate(raw_txs):
        try:
            txs.append(msg_to_dict(parse_execute_msg(tx)))
        except MsgError as exc:
            raise ScenarioError(f"txs[{i}]: {exc}") from exc

    seed = obj["scenario_seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ScenarioError("scenario_seed: must be an integer in [0, 2**64)")

    return Scenario(chain_id=chain_id, validators=validators, policy=policy,
                    gas_schedule=schedule, model_id=model_id, txs=txs,
                    scenario_seed=seed)


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


class PerturbingFacade(InferenceFacade):
    """Facade of a divergent validator: flips output bytes with a mask,
    modeling hardware whose inference bytes disagree with the quorum."""

    def __init__(self, cache_root, xor_mask: int):
        super().__init__(cache_root)
        self.xor_mask = xor_mask

    def get_output(self, ctx, index: int, capacity: int) -> tuple[bytes, int]:
        data, written = super().get_output(ctx, index, capacity)
        return bytes(b ^ self.xor_mask for b in data), written


@dataclass
class _Node:
    spec: ValidatorSpec
    state: ChainState
    runtime: ContractRuntime
    contract: bytes
    records: list[dict] = field(default_factory=list)


@dataclass
class ScenarioResult:
    scenario: Scenario
    contract_address: bytes
    outcomes: list[ConsensusOutcome]
    votes: list[list[Vote]]
    logs: dict[str, list[dict]]  # active validator id -> block records


def run_scenario(scenario: Scenario, cache_root: str | Path) -> ScenarioResult:
    """Execute every transaction on every active validator and tally
    votes per transaction. Models load from cache_root."""
    if not any(v.behavior is Behavior.HONEST for v in scenario.validators):
        raise NoHonestValidator("scenario needs at least one honest validator")

    stakes = {v.id: v.stake for v in scenario.validators}
    active = sorted((v for v in scenario.validators
                     if v.behavior is not Behavior.OFFLINE), key=lambda v: v.id)

    nodes = []
    for spec in active:
        if spec.behavior is Behavior.DIVERGENT:
            facade = PerturbingFacade(cache_root, spec.xor_mask)
        else:
            facade = InferenceFacade(cache_root)
        state = ChainState()
        state.set(SCENARIO_SEED_KEY, _U64.pack(scenario.scenario_seed))
        runtime = ContractRuntime(state, facade, schedule=scenario.gas_schedule,
                                  chain_id=scenario.chain_id)
        contract = runtime.instantiate(BUILTIN_NAME_SERVICE_ID)
        nodes.append(_Node(spec=spec, state=state, runtime=runtime, contract=contract))

    contract_address = nodes[0].contract
    outcomes: list[ConsensusOutcome] = []
    votes_per_tx: list[list[Vote]] = []

    for index, msg_dict in enumerate(scenario.txs):
        height = index + 1
        tx_hash = transaction_hash(scenario.chain_id, height, 0, msg_dict)
        votes = []
        for node in nodes:
            try:
                res = node.runtime.execute(node.contract, dict(msg_dict),
                                           height=height, tx_hash=tx_hash)
                digest = res.inference.digest if res.inference else EMPTY_SHA256
            except (ContractError, FacadeError, OutOfGas):
                # Deterministic failure: every conforming node fails the
                # same way; the vote carries the empty digest.
                digest = EMPTY_SHA256
            node.state.height = height
            votes.append(Vote(validator=node.spec.id, digest=digest,
                              app_hash=app_hash(node.state)))
        outcome = select_result(votes, scenario.policy, stakes)
        outcomes.append(outcome)
        votes_per_tx.append(votes)
        agreed = outcome.agreed_digest.hex() if outcome.decided else None
        for node, vote in zip(nodes, votes):
            node.records.append(make_block_record(
                height, [{"msg": msg_dict, "tx_hash": tx_hash.hex()}],
                vote.app_hash, [agreed]))

    return ScenarioResult(
        scenario=scenario, contract_address=contract_address,
        outcomes=outcomes, votes=votes_per_tx,
        logs={node.spec.id: node.records for node in nodes},
    )


# ---------------------------------------------------------------------------
# replication checking
# ---------------------------------------------------------------------------


@dataclass
class ReplicationReport:
    status: str  # "replicated" | "diverged" | "missing-heights"
    first_divergence: tuple[int, int] | None = None
    flagged: dict[str, tuple[int, int]] = field(default_factory=dict)
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "first_divergence": list(self.first_divergence) if self.first_divergence else None,
            "flagged": {vid: list(at) for vid, at in sorted(self.flagged.items())},
            "detail": self.detail,
        }


def verify_replication(logs: dict[str, list[dict]],
                       honest: set[str]) -> ReplicationReport:
    """Compare per-validator chain logs block by block.

    Honest logs must agree on every app_hash; the first disagreement is
    reported as (height, tx index). Validators outside the honest set
    are flagged at the first block where they differ from the honest
    reference. Logs of unequal length or inconsistent heights yield a
    missing-heights report.
    """
    if not logs:
        raise ConsensusError("no logs to verify")
    honest_present = sorted(set(logs) & honest)
    if not honest_present:
        raise NoHonestValidator("no honest validator logs to verify against")

    lengths = {vid: len(records) for vid, records in logs.items()}
    if len(set(lengths.values())) > 1:
        return ReplicationReport(
            status="missing-heights",
            detail=f"log lengths differ: { {k: lengths[k] for k in sorted(lengths)} }",
        )
    n = next(iter(lengths.values()))
    for vid, records in logs.items():
        got = [r.get("height") for r in records]
        if got != list(range(1, n + 1)):
            return ReplicationReport(status="missing-heights",
                                     detail=f"{vid}: heights {got} are not 1..{n}")

    first_divergence = None
    flagged: dict[str, tuple[int, int]] = {}
    for i in range(n):
        height = i + 1
        honest_hashes = {logs[vid][i]["app_hash"] for vid in honest_present}
        if len(honest_hashes) > 1:
            first_divergence = (height, 0)
            break
        reference = next(iter(honest_hashes))
        for vid in sorted(logs):
            if vid in honest or vid in flagged:
                continue
            if logs[vid][i]["app_hash"] != reference:
                flagged[vid] = (height, 0)

    if first_divergence is not None:
        return ReplicationReport(status="diverged", first_divergence=first_divergence,
                                 flagged=flagged,
                                 detail="honest validators disagree on app_hash")
    return ReplicationReport(status="replicated", flagged=flagged)


def consensus_report(result: ScenarioResult,
                     replication: ReplicationReport) -> dict:
    """JSON document written by the simulate command."""
    scenario = result.scenario
    return {
        "chain_id": scenario.chain_id,
        "policy": policy_to_json(scenario.policy),
        "model_id": scenario.model_id,
        "contract_address": result.contract_address.hex(),
        "validators": [
            {"id": v.id, "stake": v.stake, "behavior": v.behavior.value,
             **({"mask": v.xor_mask} if v.behavior is Behavior.DIVERGENT else {})}
            for v in scenario.validators
        ],
        "txs": [
            {"height": i + 1, "msg": msg, **outcome.to_dict()}
            for i, (msg, outcome) in enumerate(zip(scenario.txs, result.outcomes))
        ],
        "replication": replication.to_dict(),
    }

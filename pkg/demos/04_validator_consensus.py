"""Validators voting on inference digests.

Five validators run the same transactions; one of them XORs its
inference output bytes, modeling a node whose floating point disagrees
with the quorum. Under an exact 2/3 quorum the honest majority still
decides every block and the divergent digest is visible in the tally.
A second run weights votes by stake instead.

Run from the repository root:

    python3 demos/04_validator_consensus.py
"""

import tempfile
from pathlib import Path

from chainlm.consensus import (
    Behavior,
    ExactQuorum,
    Scenario,
    StakeWeighted,
    ValidatorSpec,
    run_scenario,
    verify_replication,
)
from chainlm.chain import GasSchedule
from chainlm.contracts import msg_to_dict, parse_execute_msg
from chainlm.engine import generate_model, model_to_bytes

TXS = [
    {"register": {"name": "oracle", "value": "forty two"}},
    {"infer_from_name": {"name": "oracle", "max_tokens": 16,
                         "mode": "sampled", "model_id": "demo-8"}},
    {"infer_from_name": {"name": "oracle", "max_tokens": 16,
                         "mode": "greedy", "model_id": "demo-8"}},
]


def show(result):
    for height, (votes, outcome) in enumerate(
            zip(result.votes, result.outcomes), start=1):
        print(f"height {height}:")
        for digest, (count, stake) in sorted(outcome.vote_tally.items()):
            who = [v.validator for v in votes if v.digest == digest]
            print(f"  {digest.hex()[:16]}...  votes={count} stake={stake}  "
                  f"[{', '.join(who)}]")
        agreed = outcome.agreed_digest.hex()[:16] + "..." if outcome.decided else "none"
        print(f"  decided={outcome.decided} divergence="
              f"{outcome.divergence_detected} agreed={agreed}")


def main():
    scratch = tempfile.TemporaryDirectory(prefix="chainlm-demo-")
    cache = Path(scratch.name)
    model = generate_model(hidden_dim=8, max_context=256, seed=8)
    (cache / "demo-8.wicm").write_bytes(model_to_bytes(model))

    validators = [
        ValidatorSpec("val-a", 10, Behavior.HONEST),
        ValidatorSpec("val-b", 10, Behavior.HONEST),
        ValidatorSpec("val-c", 10, Behavior.HONEST),
        ValidatorSpec("val-d", 10, Behavior.DIVERGENT, xor_mask=0x5A),
        ValidatorSpec("val-e", 10, Behavior.OFFLINE),
    ]
    txs = [msg_to_dict(parse_execute_msg(t)) for t in TXS]

    print("=== exact 2/3 quorum, equal stake, one divergent, one offline ===")
    scenario = Scenario(chain_id="consensus-demo", validators=validators,
                        policy=ExactQuorum(), gas_schedule=GasSchedule(),
                        model_id="demo-8", txs=txs, scenario_seed=77)
    result = run_scenario(scenario, cache)
    show(result)

    honest = {v.id for v in validators if v.behavior is Behavior.HONEST}
    report = verify_replication(result.logs, honest)
    print(f"replication: {report.status}", end="")
    if report.flagged:
        flags = ", ".join(f"{vid} at height {at[0]}"
                          for vid, at in sorted(report.flagged.items()))
        print(f"  (flagged: {flags})")
    else:
        print()
    print()

    # Same validators, but give the divergent node a dominant stake.
    # Stake-weighted selection then picks the wrong digest on inference
    # blocks, which is exactly why the quorum policy exists.
    print("=== stake-weighted, divergent validator holds 60% ===")
    heavy = [
        ValidatorSpec("val-a", 10, Behavior.HONEST),
        ValidatorSpec("val-b", 10, Behavior.HONEST),
        ValidatorSpec("val-d", 30, Behavior.DIVERGENT, xor_mask=0x5A),
    ]
    scenario = Scenario(chain_id="consensus-demo-2", validators=heavy,
                        policy=StakeWeighted(), gas_schedule=GasSchedule(),
                        model_id="demo-8", txs=txs, scenario_seed=77)
    show(run_scenario(scenario, cache))
    scratch.cleanup()


if __name__ == "__main__":
    main()

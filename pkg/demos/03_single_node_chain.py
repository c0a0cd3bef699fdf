"""A single node executing contract messages.

Drives the contract runtime directly: instantiate the name-service,
register a name, resolve it, then run an inference whose digest lands
in contract storage. Prints events, gas receipts, and the app hash
after each message. If the compiled WASM guest is present, the same
message stream runs against it and the results are compared field by
field.

Run from the repository root:

    python3 demos/03_single_node_chain.py
"""

import tempfile
from pathlib import Path

from chainlm.chain import ChainState, app_hash
from chainlm.contracts import (
    BUILTIN_NAME_SERVICE_ID,
    ContractRuntime,
    msg_to_dict,
    parse_execute_msg,
    transaction_hash,
)
from chainlm.engine import generate_model, model_to_bytes
from chainlm.nn_facade import InferenceFacade

GUEST = Path(__file__).resolve().parent.parent / "guests" / "name_service.wasm"

MESSAGES = [
    {"register": {"name": "alice", "value": "the first entry"}},
    {"resolve": {"name": "alice"}},
    {"infer_from_name": {"name": "alice", "max_tokens": 24,
                         "mode": "sampled", "model_id": "demo-8"}},
    {"resolve": {"name": "alice"}},
]


def run_stream(runtime, address, chain_id):
    """Execute MESSAGES in order, one per block. Returns a list of
    (ExecResult, app hash after the block)."""
    results = []
    for height, raw in enumerate(MESSAGES, start=1):
        msg = parse_execute_msg(raw)
        tx = transaction_hash(chain_id, height, 0, msg_to_dict(msg))
        res = runtime.execute(address, msg, height=height, tx_hash=tx)
        results.append((res, app_hash(runtime.state)))
    return results


def main():
    scratch = tempfile.TemporaryDirectory(prefix="chainlm-demo-")
    cache = Path(scratch.name)
    model = generate_model(hidden_dim=8, max_context=256, seed=8)
    (cache / "demo-8.wicm").write_bytes(model_to_bytes(model))

    state = ChainState()
    runtime = ContractRuntime(state, InferenceFacade(cache), chain_id="demo-1")
    address = runtime.instantiate(BUILTIN_NAME_SERVICE_ID)
    print(f"contract address: {address.hex()}")
    print()

    results = run_stream(runtime, address, "demo-1")
    for height, (raw, (res, state_hash)) in enumerate(
            zip(MESSAGES, results), start=1):
        action = next(iter(raw))
        print(f"height {height}: {action}")
        for key, value in res.events:
            shown = value if len(value) <= 48 else value[:45] + "..."
            print(f"  event {key} = {shown!r}")
        g = res.gas
        print(f"  gas: base={g.base} model={g.model_component} "
              f"token={g.token_component} storage={g.storage_component} "
              f"total={g.total}")
        if res.inference:
            print(f"  inference: {res.inference.tokens_generated} tokens, "
                  f"digest {res.inference.digest.hex()[:16]}...")
        print(f"  app_hash: {state_hash.hex()[:16]}...")
    print()

    if not GUEST.exists():
        print(f"no compiled guest at {GUEST}, skipping the WASM comparison")
        scratch.cleanup()
        return

    wasm_runtime = ContractRuntime(ChainState(), InferenceFacade(cache),
                                   chain_id="demo-1")
    code_id = wasm_runtime.store_code(GUEST.read_bytes())
    wasm_address = wasm_runtime.instantiate(code_id)
    wasm_results = run_stream(wasm_runtime, wasm_address, "demo-1")

    print(f"WASM guest code id {code_id.hex()[:16]}..., "
          f"address {wasm_address.hex()[:16]}...")
    clean = True
    for height, ((a, _), (b, _)) in enumerate(
            zip(results, wasm_results), start=1):
        same = (a.events == b.events
                and a.gas.to_dict() == b.gas.to_dict()
                and (a.inference is None) == (b.inference is None)
                and (a.inference is None
                     or (a.inference.output == b.inference.output
                         and a.inference.digest == b.inference.digest)))
        print(f"height {height}: builtin == wasm: {same}")
        clean = clean and same
    print("verdict:", "byte-identical execution" if clean else "DIVERGED")
    scratch.cleanup()


if __name__ == "__main__":
    main()

"""chainlm command line tool.

Commands: store, instantiate, execute (single-node chain with
persistent state under a data directory), simulate (multi-validator
scenarios), bench (decode throughput), model pack / model inspect
(WICM files).

Configuration comes from defaults, then an optional --config JSON
file, then environment variables (CHAINLM_CACHE_ROOT, CHAINLM_DATA_DIR,
CHAINLM_CHAIN_ID).

Exit codes: 0 success, 1 domain error, 2 usage or parse error,
3 out of gas.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import statistics
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from chainlm import engine
from chainlm.chain import (
    EMPTY_SHA256,
    ChainState,
    GasSchedule,
    OutOfGas,
    app_hash,
    canonical_json,
    make_block_record,
)
from chainlm.consensus import (
    Behavior,
    ConsensusError,
    ScenarioError,
    consensus_report,
    parse_scenario,
    run_scenario,
    verify_replication,
)
from chainlm.contracts import (
    BUILTIN_ALIAS,
    BUILTIN_NAME_SERVICE_ID,
    ContractError,
    ContractRuntime,
    MsgError,
    msg_to_dict,
    parse_execute_msg,
    transaction_hash,
)
from chainlm.engine import DecodeMode, DecodeParams, WicmError
from chainlm.nn_facade import FacadeError, InferenceFacade

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2
EXIT_OUT_OF_GAS = 3

CONFIG_KEYS = {"cache_root", "data_dir", "chain_id", "gas"}


class UsageError(Exception):
    pass


@dataclass
class Config:
    cache_root: Path
    data_dir: Path
    chain_id: str
    gas: GasSchedule


def load_config(path: str | None) -> Config:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path}: invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"config {path}: must be a JSON object")
        unknown = set(raw) - CONFIG_KEYS
        if unknown:
            raise UsageError(f"config {path}: unknown keys {sorted(unknown)}")
    cache_root = os.environ.get("CHAINLM_CACHE_ROOT", raw.get("cache_root", "./models"))
    data_dir = os.environ.get("CHAINLM_DATA_DIR", raw.get("data_dir", "./chain-data"))
    chain_id = os.environ.get("CHAINLM_CHAIN_ID", raw.get("chain_id", "local-1"))
    gas_raw = raw.get("gas", {})
    if not isinstance(gas_raw, dict):
        raise UsageError("config: gas must be an object")
    try:
        gas = GasSchedule.from_dict({**GasSchedule().to_dict(), **gas_raw})
    except (ValueError, TypeError) as exc:
        raise UsageError(f"config: gas: {exc}") from exc
    if not isinstance(chain_id, str) or not chain_id:
        raise UsageError("config: chain_id must be a non-empty string")
    return Config(cache_root=Path(cache_root), data_dir=Path(data_dir),
                  chain_id=chain_id, gas=gas)


# ---------------------------------------------------------------------------
# persistent single-node chain
# ---------------------------------------------------------------------------


def _chain_file(config: Config) -> Path:
    return config.data_dir / "chain.json"


def _log_file(config: Config) -> Path:
    return config.data_dir / "chain_log.jsonl"


def _load_chain(config: Config) -> tuple[ChainState, str]:
    path = _chain_file(config)
    if path.exists():
        doc = json.loads(path.read_text())
        # The persisted chain id wins: it is the chain's identity, set
        # when the data dir was created.
        return ChainState.from_dict(doc["state"]), doc["chain_id"]
    return ChainState(), config.chain_id


def _save_chain(config: Config, state: ChainState, chain_id: str) -> None:
    config.data_dir.mkdir(parents=True, exist_ok=True)
    doc = {"chain_id": chain_id, "state": state.to_dict()}
    _chain_file(config).write_text(canonical_json(doc) + "\n")


def _append_block(config: Config, record: dict) -> None:
    config.data_dir.mkdir(parents=True, exist_ok=True)
    with _log_file(config).open("a") as f:
        f.write(canonical_json(record) + "\n")


def _runtime(config: Config, state: ChainState, chain_id: str) -> ContractRuntime:
    return ContractRuntime(state, InferenceFacade(config.cache_root),
                           schedule=config.gas, chain_id=chain_id)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_store(config: Config, args) -> int:
    try:
        code = Path(args.code_file).read_bytes()
    except OSError as exc:
        print(f"error: cannot read {args.code_file}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    state, chain_id = _load_chain(config)
    runtime = _runtime(config, state, chain_id)
    code_id = runtime.store_code(code)
    _save_chain(config, state, chain_id)
    print(code_id.hex())
    return EXIT_OK


def cmd_instantiate(config: Config, args) -> int:
    if args.code_id == BUILTIN_ALIAS:
        code_id = BUILTIN_NAME_SERVICE_ID
    else:
        try:
            code_id = bytes.fromhex(args.code_id)
        except ValueError:
            raise UsageError(f"code id must be hex or {BUILTIN_ALIAS!r}") from None
        if len(code_id) != 32:
            raise UsageError("code id must be 32 bytes of hex")
    state, chain_id = _load_chain(config)
    runtime = _runtime(config, state, chain_id)
    address = runtime.instantiate(code_id)
    _save_chain(config, state, chain_id)
    print(address.hex())
    return EXIT_OK


def _read_msg(arg: str) -> dict:
    """Message argument: a JSON file path, or inline JSON starting with '{'."""
    if arg.lstrip().startswith("{"):
        text = arg
    else:
        try:
            text = Path(arg).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read message file {arg}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"message is not valid JSON: {exc}") from exc
    return obj


def cmd_execute(config: Config, args) -> int:
    try:
        address = bytes.fromhex(args.address)
    except ValueError:
        raise UsageError("contract address must be hex") from None
    if len(address) != 20:
        raise UsageError("contract address must be 20 bytes of hex")
    msg = parse_execute_msg(_read_msg(args.msg))
    msg_dict = msg_to_dict(msg)

    state, chain_id = _load_chain(config)
    runtime = _runtime(config, state, chain_id)
    height = state.height + 1
    tx_hash = transaction_hash(chain_id, height, 0, msg_dict)
    result = runtime.execute(address, msg, height=height, tx_hash=tx_hash)
    state.height = height
    digest = result.inference.digest if result.inference else EMPTY_SHA256
    _append_block(config, make_block_record(
        height, [{"msg": msg_dict, "tx_hash": tx_hash.hex()}],
        app_hash(state), [digest.hex()]))
    _save_chain(config, state, chain_id)
    print(canonical_json({
        "height": height,
        "tx_hash": tx_hash.hex(),
        "app_hash": app_hash(state).hex(),
        "result": result.to_dict(),
    }))
    return EXIT_OK


def _tx_label(msg_dict: dict) -> str:
    tag, body = next(iter(msg_dict.items()))
    return f"{tag}:{body.get('name', '?')}"


def cmd_simulate(config: Config, args) -> int:
    try:
        doc = json.loads(Path(args.scenario).read_text())
    except OSError as exc:
        print(f"error: cannot read {args.scenario}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except json.JSONDecodeError as exc:
        raise UsageError(f"scenario is not valid JSON: {exc}") from exc
    scenario = parse_scenario(doc)

    result = run_scenario(scenario, config.cache_root)
    honest = {v.id for v in scenario.validators if v.behavior is Behavior.HONEST}
    replication = verify_replication(result.logs, honest)
    report = consensus_report(result, replication)

    out_dir = Path(args.out_dir)
    logs_dir = out_dir / "logs"
    logs_dir.mkdir(parents=True, exist_ok=True)
    for vid, records in sorted(result.logs.items()):
        text = "".join(canonical_json(r) + "\n" for r in records)
        (logs_dir / f"{vid}.jsonl").write_text(text)
    (out_dir / "consensus_report.json").write_text(canonical_json(report) + "\n")

    for i, (msg_dict, outcome) in enumerate(zip(scenario.txs, result.outcomes)):
        agreed = outcome.agreed_digest.hex()[:16] if outcome.decided else "-"
        print(f"height={i + 1} tx={_tx_label(msg_dict)} "
              f"decided={'yes' if outcome.decided else 'no'} "
              f"divergence={'yes' if outcome.divergence_detected else 'no'} "
              f"agreed={agreed}")
    print(f"replication: {replication.status}")
    if replication.flagged:
        flags = ", ".join(f"{vid}@{at[0]}" for vid, at in sorted(replication.flagged.items()))
        print(f"flagged: {flags}")
    undecided = sum(1 for o in result.outcomes if not o.decided)
    if undecided:
        print(f"undecided txs: {undecided}")
    return EXIT_OK


def cmd_bench(config: Config, args) -> int:
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    if args.max_tokens < 1:
        raise UsageError("--max-tokens must be >= 1")
    prompt = args.prompt.encode("utf-8")
    if not prompt:
        raise UsageError("--prompt must be non-empty")

    facade = InferenceFacade(config.cache_root)
    graph = facade.build_from_cache(args.model)
    model = facade._models[args.model]
    params = DecodeParams(mode=DecodeMode.GREEDY, max_tokens=args.max_tokens)

    # One warmup decode, then timed repeats. Greedy with seed 0: the
    # byte stream must be identical on every repeat.
    results = [engine.decode(model, prompt, params, seed=0)]
    rates = []
    for _ in range(args.repeats):
        start = time.perf_counter()
        res = engine.decode(model, prompt, params, seed=0)
        elapsed = time.perf_counter() - start
        rates.append(res.tokens_generated / elapsed)
        results.append(res)
    digests = {r.digest for r in results}
    if len(digests) != 1:
        print("error: digest varied across repeats; determinism violated",
              file=sys.stderr)
        return EXIT_DOMAIN

    res = results[-1]
    print(f"model: {args.model}")
    print(f"model_size_bytes: {graph.model_size_bytes}")
    print(f"hidden_dim: {model.hidden_dim}")
    print(f"prompt_bytes: {len(prompt)}")
    print(f"tokens_generated: {res.tokens_generated}")
    print(f"digest: {res.digest.hex()}")
    print(f"repeats: {args.repeats}")
    print(f"tokens_per_sec: {' '.join(f'{r:.1f}' for r in rates)}")
    print(f"tokens_per_sec_median: {statistics.median(rates):.1f}")
    return EXIT_OK


def _pack_from_spec(doc: dict) -> engine.Model:
    if not isinstance(doc, dict):
        raise UsageError("model spec: must be a JSON object")
    allowed = {"hidden_dim", "max_context", "seed", "weights"}
    unknown = set(doc) - allowed
    if unknown:
        raise UsageError(f"model spec: unknown keys {sorted(unknown)}")
    for key in ("hidden_dim", "max_context"):
        if not isinstance(doc.get(key), int) or doc[key] < 1:
            raise UsageError(f"model spec: {key} must be an integer >= 1")
    has_seed, has_weights = "seed" in doc, "weights" in doc
    if has_seed == has_weights:
        raise UsageError("model spec: provide exactly one of seed or weights")

    d = doc["hidden_dim"]
    if has_seed:
        seed = doc["seed"]
        if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
            raise UsageError("model spec: seed must be an integer in [0, 2**64)")
        return engine.generate_model(d, doc["max_context"], seed)

    weights = doc["weights"]
    shapes = {"embedding": (engine.VOCAB_SIZE, d), "recurrence": (d, d),
              "projection": (engine.VOCAB_SIZE, d), "bias": (engine.VOCAB_SIZE,)}
    if not isinstance(weights, dict) or set(weights) != set(shapes):
        raise UsageError(f"model spec: weights must have keys {sorted(shapes)}")
    arrays = {}
    for key, shape in shapes.items():
        try:
            arr = np.asarray(weights[key], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"model spec: weights.{key}: not numeric: {exc}") from exc
        if arr.shape != shape:
            raise UsageError(f"model spec: weights.{key}: shape {arr.shape}, "
                             f"expected {shape}")
        if not np.isfinite(arr).all():
            raise UsageError(f"model spec: weights.{key}: non-finite values")
        arrays[key] = arr
    return engine.Model(
        vocab_size=engine.VOCAB_SIZE, hidden_dim=d, max_context=doc["max_context"],
        E=arrays["embedding"], A=arrays["recurrence"],
        W=arrays["projection"], b=arrays["bias"],
        size_bytes=engine.expected_file_size(d),
    )


def cmd_model_pack(config: Config, args) -> int:
    try:
        doc = json.loads(Path(args.spec).read_text())
    except OSError as exc:
        print(f"error: cannot read {args.spec}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except json.JSONDecodeError as exc:
        raise UsageError(f"model spec is not valid JSON: {exc}") from exc
    model = _pack_from_spec(doc)
    data = engine.model_to_bytes(model)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    print(canonical_json({
        "path": str(out),
        "size_bytes": len(data),
        "hidden_dim": model.hidden_dim,
        "max_context": model.max_context,
        "sha256": hashlib.sha256(data).hexdigest(),
    }))
    return EXIT_OK


def cmd_model_inspect(config: Config, args) -> int:
    try:
        data = Path(args.model_file).read_bytes()
    except OSError as exc:
        print(f"error: cannot read {args.model_file}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    model = engine.load_model(data)
    print(canonical_json({
        "magic": "WICM",
        "version": engine.WICM_VERSION,
        "vocab_size": model.vocab_size,
        "hidden_dim": model.hidden_dim,
        "max_context": model.max_context,
        "size_bytes": model.size_bytes,
        "sha256": hashlib.sha256(data).hexdigest(),
    }))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chainlm",
        description="Deterministic on-chain inference: single-node chain, "
                    "consensus simulation, and WICM model tooling.")
    parser.add_argument("--config", help="path to a JSON config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("store", help="store a WASM code blob, print its code id")
    p.add_argument("code_file")
    p.set_defaults(func=cmd_store)

    p = sub.add_parser("instantiate",
                       help=f"instantiate stored code (or {BUILTIN_ALIAS!r})")
    p.add_argument("code_id")
    p.set_defaults(func=cmd_instantiate)

    p = sub.add_parser("execute", help="execute a message against a contract")
    p.add_argument("address")
    p.add_argument("msg", help="path to a JSON message file, or inline JSON")
    p.set_defaults(func=cmd_execute)

    p = sub.add_parser("simulate", help="run a multi-validator scenario")
    p.add_argument("scenario")
    p.add_argument("--out-dir", default="sim-out",
                   help="directory for logs/ and consensus_report.json")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="measure decode throughput")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", default="name:bench value:throughput")
    p.add_argument("--max-tokens", type=int, default=256)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("model", help="WICM model tooling")
    model_sub = p.add_subparsers(dest="model_command", required=True)
    q = model_sub.add_parser("pack", help="build a .wicm file from a JSON spec")
    q.add_argument("spec")
    q.add_argument("-o", "--output", required=True)
    q.set_defaults(func=cmd_model_pack)
    q = model_sub.add_parser("inspect", help="print header fields of a .wicm file")
    q.add_argument("model_file")
    q.set_defaults(func=cmd_model_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = load_config(args.config)
        return args.func(config, args)
    except (UsageError, MsgError, ScenarioError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OutOfGas as exc:
        print(canonical_json({"error": "out-of-gas", "gas": exc.receipt.to_dict()}))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OUT_OF_GAS
    except (ContractError, FacadeError, WicmError, ConsensusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

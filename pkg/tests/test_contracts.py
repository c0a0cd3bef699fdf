from __future__ import annotations

import hashlib
import struct

import pytest

from chainlm.chain import ChainState, GasSchedule, OutOfGas, app_hash, derive_seed
from chainlm.contracts import (
    BUILTIN_NAME_SERVICE_CODE,
    BUILTIN_NAME_SERVICE_ID,
    OUTPUT_CAPACITY,
    ContractRuntime,
    InferMsg,
    InvalidWasmMagic,
    MsgError,
    NameNotFound,
    RegisterMsg,
    ResolveMsg,
    UnknownCodeId,
    UnknownContract,
    msg_to_dict,
    parse_execute_msg,
    transaction_hash,
)
from chainlm.engine import DecodeMode, DecodeParams, decode, generate_model, model_to_bytes
from chainlm.nn_facade import InferenceFacade, ModelNotFound

CHAIN_ID = "test-1"
MODEL_SEED = 40


@pytest.fixture
def model():
    return generate_model(hidden_dim=4, max_context=96, seed=MODEL_SEED)


@pytest.fixture
def setup(tmp_path, model):
    (tmp_path / "toy.wicm").write_bytes(model_to_bytes(model))
    state = ChainState()
    runtime = ContractRuntime(state, InferenceFacade(tmp_path), chain_id=CHAIN_ID)
    addr = runtime.instantiate(BUILTIN_NAME_SERVICE_ID)
    return state, runtime, addr


def tx(i: int, msg_dict: dict, height: int = 1) -> bytes:
    return transaction_hash(CHAIN_ID, height, i, msg_dict)


# ---------------------------------------------------------------------------
# code store and instantiation
# ---------------------------------------------------------------------------


def test_store_code_is_content_addressed(setup):
    _, runtime, _ = setup
    code = b"\x00asm\x01\x00\x00\x00junk"
    code_id = runtime.store_code(code)
    assert code_id == hashlib.sha256(code).digest()
    assert runtime.store_code(code) == code_id


def test_store_code_rejects_bad_magic(setup):
    _, runtime, _ = setup
    with pytest.raises(InvalidWasmMagic):
        runtime.store_code(b"hello")
    with pytest.raises(InvalidWasmMagic):
        runtime.store_code(b"")


def test_builtin_registered_at_genesis(setup):
    state, _, _ = setup
    stored = state.get(b"code/" + BUILTIN_NAME_SERVICE_ID.hex().encode())
    assert stored == BUILTIN_NAME_SERVICE_CODE


def test_instantiate_address_derivation(tmp_path):
    state = ChainState()
    runtime = ContractRuntime(state, InferenceFacade(tmp_path), chain_id=CHAIN_ID)
    addr = runtime.instantiate(BUILTIN_NAME_SERVICE_ID)
    want = hashlib.sha256(BUILTIN_NAME_SERVICE_ID + struct.pack("<Q", 0)).digest()[:20]
    assert addr == want
    assert state.get(b"contract/" + addr.hex().encode()) == BUILTIN_NAME_SERVICE_ID


def test_instantiate_unknown_code(setup):
    _, runtime, _ = setup
    with pytest.raises(UnknownCodeId):
        runtime.instantiate(b"\x01" * 32)


def test_instantiate_twice_distinct_addresses(setup):
    _, runtime, addr1 = setup
    addr2 = runtime.instantiate(BUILTIN_NAME_SERVICE_ID)
    assert addr1 != addr2
    assert len(addr2) == 20


def test_addresses_replay_identically(tmp_path):
    def play():
        runtime = ContractRuntime(ChainState(), InferenceFacade(tmp_path),
                                  chain_id=CHAIN_ID)
        return [runtime.instantiate(BUILTIN_NAME_SERVICE_ID) for _ in range(3)]
    assert play() == play()


# ---------------------------------------------------------------------------
# register / resolve
# ---------------------------------------------------------------------------


def test_register_then_resolve(setup):
    state, runtime, addr = setup
    msg = {"register": {"name": "alice", "value": "wonderland"}}
    res = runtime.execute(addr, msg, height=1, tx_hash=tx(0, msg))
    assert res.events == [("action", "register"), ("name", "alice")]
    assert res.inference is None
    assert res.gas.to_dict() == {"base": 0, "model_component": 0,
                                 "token_component": 0, "storage_component": 50,
                                 "total": 50}
    key = b"c/" + addr.hex().encode() + b"/alice"
    assert res.state_writes == [(key, b"wonderland")]
    assert state.get(key) == b"wonderland"

    msg2 = {"resolve": {"name": "alice"}}
    res2 = runtime.execute(addr, msg2, height=2, tx_hash=tx(0, msg2, height=2))
    assert res2.events == [("action", "resolve"), ("name", "alice"),
                           ("value", "wonderland")]
    assert res2.gas.total == 0
    assert res2.state_writes == []


def test_resolve_missing_name(setup):
    state, runtime, addr = setup
    before = app_hash(state)
    with pytest.raises(NameNotFound):
        runtime.execute(addr, {"resolve": {"name": "ghost"}}, height=1,
                        tx_hash=tx(0, {"resolve": {"name": "ghost"}}))
    assert app_hash(state) == before


def test_register_overwrites(setup):
    state, runtime, addr = setup
    for i, value in enumerate(("one", "two")):
        msg = {"register": {"name": "k", "value": value}}
        runtime.execute(addr, msg, height=i + 1, tx_hash=tx(0, msg, height=i + 1))
    assert state.get(b"c/" + addr.hex().encode() + b"/k") == b"two"


def test_execute_unknown_contract(setup):
    _, runtime, _ = setup
    with pytest.raises(UnknownContract):
        runtime.execute(b"\x99" * 20, {"resolve": {"name": "a"}},
                        height=1, tx_hash=bytes(32))


# ---------------------------------------------------------------------------
# infer_from_name
# ---------------------------------------------------------------------------


def infer_msg(name="alice", max_tokens=6, mode="sampled", model_id="toy"):
    return {"infer_from_name": {"max_tokens": max_tokens, "mode": mode,
                                "model_id": model_id, "name": name}}


def seeded_register(runtime, addr, name="alice", value="wonderland", height=1):
    msg = {"register": {"name": name, "value": value}}
    runtime.execute(addr, msg, height=height, tx_hash=tx(0, msg, height=height))


def test_infer_matches_direct_engine_call(setup, model):
    state, runtime, addr = setup
    seeded_register(runtime, addr)
    msg = infer_msg()
    tx_hash = tx(0, msg, height=2)
    res = runtime.execute(addr, msg, height=2, tx_hash=tx_hash)

    # Same prompt template, beacon seed and params, straight through
    # the engine: the runtime must reproduce this byte for byte.
    want = decode(model, b"name:alice value:wonderland",
                  DecodeParams(mode=DecodeMode.SAMPLED, max_tokens=6),
                  derive_seed(CHAIN_ID, 2, tx_hash))
    assert res.inference is not None
    assert res.inference.output == want.output
    assert res.inference.digest == want.digest
    assert res.inference.digest == hashlib.sha256(want.output).digest()
    assert res.inference.tokens_generated == want.tokens_generated


def test_infer_writes_digest_key(setup):
    state, runtime, addr = setup
    seeded_register(runtime, addr)
    msg = infer_msg()
    res = runtime.execute(addr, msg, height=2, tx_hash=tx(0, msg, height=2))
    key = b"c/" + addr.hex().encode() + b"/infer/alice"
    assert state.get(key) == res.inference.digest.hex().encode()
    assert (key, res.inference.digest.hex().encode()) in res.state_writes


def test_infer_events(setup):
    _, runtime, addr = setup
    seeded_register(runtime, addr)
    msg = infer_msg(mode="greedy")
    res = runtime.execute(addr, msg, height=2, tx_hash=tx(0, msg, height=2))
    assert res.events[0] == ("action", "infer")
    assert ("name", "alice") in res.events
    assert ("model_id", "toy") in res.events
    assert ("digest", res.inference.digest.hex()) in res.events


def test_infer_gas_receipt_closed_form(setup, model):
    _, runtime, addr = setup
    seeded_register(runtime, addr)
    msg = infer_msg()
    res = runtime.execute(addr, msg, height=2, tx_hash=tx(0, msg, height=2))
    s = GasSchedule()
    kib = (model.size_bytes + 1023) // 1024
    assert res.gas.base == s.g_base
    assert res.gas.model_component == s.g_per_kib_model * kib
    assert res.gas.token_component == s.g_per_token * res.inference.tokens_generated
    assert res.gas.storage_component == s.g_per_storage_op
    assert res.gas.total == (s.g_base + s.g_per_kib_model * kib
                             + s.g_per_token * res.inference.tokens_generated
                             + s.g_per_storage_op)


def test_infer_gas_uses_actual_tokens_on_early_eos(tmp_path):
    # All-zero model emits EOS on the first step: one token generated,
    # charged, and excluded from the output.
    from conftest import build_model
    (tmp_path / "zero.wicm").write_bytes(model_to_bytes(build_model(max_context=96)))
    state = ChainState()
    runtime = ContractRuntime(state, InferenceFacade(tmp_path), chain_id=CHAIN_ID)
    addr = runtime.instantiate(BUILTIN_NAME_SERVICE_ID)
    seeded_register(runtime, addr)
    msg = infer_msg(max_tokens=200, mode="greedy", model_id="zero")
    res = runtime.execute(addr, msg, height=2, tx_hash=tx(0, msg, height=2))
    assert res.inference.tokens_generated == 1
    assert res.inference.output == b""
    assert res.gas.token_component == GasSchedule().g_per_token


def test_infer_missing_name_rolls_back(setup):
    state, runtime, addr = setup
    before = app_hash(state)
    with pytest.raises(NameNotFound):
        runtime.execute(addr, infer_msg(name="ghost"), height=1, tx_hash=bytes(32))
    assert app_hash(state) == before


def test_infer_missing_model_rolls_back(setup):
    state, runtime, addr = setup
    seeded_register(runtime, addr)
    before = app_hash(state)
    with pytest.raises(ModelNotFound):
        runtime.execute(addr, infer_msg(model_id="absent"), height=2, tx_hash=bytes(32))
    assert app_hash(state) == before


def test_out_of_gas_aborts_and_reports(setup):
    state, runtime, addr = setup
    seeded_register(runtime, addr)
    before = app_hash(state)
    with pytest.raises(OutOfGas) as exc:
        runtime.execute(addr, infer_msg(), height=2, tx_hash=tx(0, infer_msg(), height=2),
                        gas_limit=10)
    assert app_hash(state) == before
    assert exc.value.receipt.total == 10


def test_gas_limit_exactly_sufficient(setup, model):
    _, runtime, addr = setup
    seeded_register(runtime, addr)
    msg = infer_msg()
    tx_hash = tx(0, msg, height=2)
    probe = runtime.execute(addr, msg, height=2, tx_hash=tx_hash)
    exact = probe.gas.total
    # Fresh chain, same tx: exactly enough gas succeeds...
    state2, runtime2, addr2 = _fresh(runtime.facade.cache_root)
    seeded_register(runtime2, addr2)
    res = runtime2.execute(addr2, msg, height=2, tx_hash=tx_hash, gas_limit=exact)
    assert res.gas.total == exact
    # ... and one unit less aborts.
    state3, runtime3, addr3 = _fresh(runtime.facade.cache_root)
    seeded_register(runtime3, addr3)
    with pytest.raises(OutOfGas):
        runtime3.execute(addr3, msg, height=2, tx_hash=tx_hash, gas_limit=exact - 1)


def _fresh(cache_root):
    state = ChainState()
    runtime = ContractRuntime(state, InferenceFacade(cache_root), chain_id=CHAIN_ID)
    return state, runtime, runtime.instantiate(BUILTIN_NAME_SERVICE_ID)


def test_replay_reproduces_app_hashes(setup, tmp_path):
    state, runtime, addr = setup
    msgs = [
        {"register": {"name": "alice", "value": "wonderland"}},
        {"register": {"name": "bob", "value": "builder"}},
        infer_msg(),
        {"resolve": {"name": "bob"}},
        infer_msg(name="bob", mode="greedy"),
    ]
    hashes = []
    for h, msg in enumerate(msgs, start=1):
        runtime.execute(addr, msg, height=h, tx_hash=tx(0, msg, height=h))
        hashes.append(app_hash(state))

    state2, runtime2, addr2 = _fresh(runtime.facade.cache_root)
    assert addr2 == addr
    hashes2 = []
    for h, msg in enumerate(msgs, start=1):
        runtime2.execute(addr2, msg, height=h, tx_hash=tx(0, msg, height=h))
        hashes2.append(app_hash(state2))
    assert hashes == hashes2


# ---------------------------------------------------------------------------
# message validation
# ---------------------------------------------------------------------------


def test_parse_valid_msgs():
    assert parse_execute_msg({"register": {"name": "a-1", "value": "x"}}) == \
        RegisterMsg(name="a-1", value="x")
    assert parse_execute_msg({"resolve": {"name": "a"}}) == ResolveMsg(name="a")
    msg = parse_execute_msg(infer_msg())
    assert msg == InferMsg(name="alice", max_tokens=6,
                           mode=DecodeMode.SAMPLED, model_id="toy")


def test_msg_roundtrip():
    for d in ({"register": {"name": "n", "value": "v"}},
              {"resolve": {"name": "n"}},
              infer_msg(mode="greedy")):
        assert msg_to_dict(parse_execute_msg(d)) == d


@pytest.mark.parametrize("bad", [
    "not a dict",
    {},
    {"register": {"name": "a", "value": "x"}, "resolve": {"name": "a"}},
    {"bogus": {}},
    {"register": {"name": "a"}},
    {"register": {"name": "a", "value": "x", "extra": 1}},
    {"register": {"name": "UPPER", "value": "x"}},
    {"register": {"name": "", "value": "x"}},
    {"register": {"name": "x" * 65, "value": "x"}},
    {"register": {"name": "a b", "value": "x"}},
    {"register": {"name": "a", "value": 7}},
    {"register": {"name": "a", "value": "v" * 1025}},
    {"resolve": {}},
    {"resolve": {"name": 3}},
    {"infer_from_name": {"name": "a", "max_tokens": 0, "mode": "greedy",
                         "model_id": "m"}},
    {"infer_from_name": {"name": "a", "max_tokens": 257, "mode": "greedy",
                         "model_id": "m"}},
    {"infer_from_name": {"name": "a", "max_tokens": True, "mode": "greedy",
                         "model_id": "m"}},
    {"infer_from_name": {"name": "a", "max_tokens": 5, "mode": "beam",
                         "model_id": "m"}},
    {"infer_from_name": {"name": "a", "max_tokens": 5, "mode": "greedy",
                         "model_id": "bad/id"}},
    {"infer_from_name": {"name": "a", "max_tokens": 5, "mode": "greedy"}},
])
def test_parse_rejects_malformed(bad):
    with pytest.raises(MsgError):
        parse_execute_msg(bad)


def test_max_tokens_boundary_values():
    parse_execute_msg(infer_msg(max_tokens=1))
    parse_execute_msg(infer_msg(max_tokens=256))


def test_transaction_hash_is_canonical():
    a = transaction_hash("c", 1, 0, {"resolve": {"name": "a"}})
    b = transaction_hash("c", 1, 0, {"resolve": {"name": "a"}})
    assert a == b and len(a) == 32
    assert transaction_hash("c", 2, 0, {"resolve": {"name": "a"}}) != a
    assert transaction_hash("c", 1, 1, {"resolve": {"name": "a"}}) != a
    assert transaction_hash("d", 1, 0, {"resolve": {"name": "a"}}) != a

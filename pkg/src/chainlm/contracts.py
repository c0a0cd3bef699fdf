"""Contract runtime: code store, instantiation, gas-metered execution.

Execution is transactional. All writes land in a staging overlay and
commit only if the message handler returns; any error (domain error,
engine failure, out of gas) leaves the chain state untouched while the
gas receipt still reports consumption up to the abort.

Two kinds of code run here: the built-in name-service (a host-native
reference contract registered under a reserved code id at genesis) and
WebAssembly guests stored via store_code, which reach the same storage
and inference services through the host ABI in chainlm.wasm. Both must
produce identical results for identical messages; the test suite
checks that differentially.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass

from chainlm.chain import (
    ChainState,
    GasMeter,
    GasReceipt,
    GasSchedule,
    canonical_json,
    derive_seed,
)
from chainlm.engine import DecodeMode, DecodeParams
from chainlm.nn_facade import MODEL_ID_RE, InferenceFacade, Tensor, TensorType

NAME_RE = re.compile(r"[a-z0-9-]{1,64}\Z")
MAX_INFER_TOKENS = 256
MAX_VALUE_BYTES = 1024

# The built-in name-service is ordinary state: a sentinel code blob
# under its (reserved) content hash, so every validator commits to the
# same bytes and the app hash covers contract code like anything else.
BUILTIN_NAME_SERVICE_CODE = b"builtin:name-service:v1"
BUILTIN_NAME_SERVICE_ID = hashlib.sha256(BUILTIN_NAME_SERVICE_CODE).digest()
BUILTIN_ALIAS = "builtin:name-service"

WASM_MAGIC = b"\x00asm"

# Fixed host-side read buffer for inference output, matching the
# reference client's 1000-byte buffer. Messages cap max_tokens at 256,
# so output never truncates in practice.
OUTPUT_CAPACITY = 1000

ADDRESS_LEN = 20

_U64 = struct.Struct("<Q")


class ContractError(Exception):
    """Domain error during contract lifecycle or execution."""


class InvalidWasmMagic(ContractError):
    pass


class UnknownCodeId(ContractError):
    pass


class UnknownContract(ContractError):
    pass


class NameNotFound(ContractError):
    pass


class MsgError(ValueError):
    """Malformed or out-of-range execute message (a usage error)."""


# ---------------------------------------------------------------------------
# messages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegisterMsg:
    name: str
    value: str


@dataclass(frozen=True)
class ResolveMsg:
    name: str


@dataclass(frozen=True)
class InferMsg:
    name: str
    max_tokens: int
    mode: DecodeMode
    model_id: str


ExecuteMsg = RegisterMsg | ResolveMsg | InferMsg


def _require_name(obj: dict, tag: str) -> str:
    name = obj.get("name")
    if not isinstance(name, str) or not NAME_RE.match(name):
        raise MsgError(f"{tag}.name: must match [a-z0-9-]{{1,64}}, got {name!r}")
    return name


def parse_execute_msg(obj) -> ExecuteMsg:
    """Validate the JSON form of an execute message.

    Shapes: {"register": {"name", "value"}}, {"resolve": {"name"}},
    {"infer_from_name": {"name", "max_tokens", "mode", "model_id"}}.
    """
    if not isinstance(obj, dict) or len(obj) != 1:
        raise MsgError("message must be an object with exactly one action key")
    tag, body = next(iter(obj.items()))
    if not isinstance(body, dict):
        raise MsgError(f"{tag}: body must be an object")
    if tag == "register":
        if set(body) != {"name", "value"}:
            raise MsgError(f"register: fields must be name, value, got {sorted(body)}")
        name = _require_name(body, "register")
        value = body["value"]
        if not isinstance(value, str):
            raise MsgError("register.value: must be a string")
        if len(value.encode("utf-8")) > MAX_VALUE_BYTES:
            raise MsgError(f"register.value: exceeds {MAX_VALUE_BYTES} UTF-8 bytes")
        return RegisterMsg(name=name, value=value)
    if tag == "resolve":
        if set(body) != {"name"}:
            raise MsgError(f"resolve: fields must be name, got {sorted(body)}")
        return ResolveMsg(name=_require_name(body, "resolve"))
    if tag == "infer_from_name":
        if set(body) != {"name", "max_tokens", "mode", "model_id"}:
            raise MsgError("infer_from_name: fields must be name, max_tokens, mode, "
                           f"model_id, got {sorted(body)}")
        name = _require_name(body, "infer_from_name")
        max_tokens = body["max_tokens"]
        if not isinstance(max_tokens, int) or isinstance(max_tokens, bool) \
                or not 1 <= max_tokens <= MAX_INFER_TOKENS:
            raise MsgError(f"infer_from_name.max_tokens: must be an int in "
                           f"[1, {MAX_INFER_TOKENS}], got {max_tokens!r}")
        mode = body["mode"]
        if mode not in ("greedy", "sampled"):
            raise MsgError(f"infer_from_name.mode: must be greedy or sampled, got {mode!r}")
        model_id = body["model_id"]
        if not isinstance(model_id, str) or not MODEL_ID_RE.match(model_id):
            raise MsgError(f"infer_from_name.model_id: invalid id {model_id!r}")
        return InferMsg(name=name, max_tokens=max_tokens,
                        mode=DecodeMode(mode), model_id=model_id)
    raise MsgError(f"unknown action {tag!r}")


def msg_to_dict(msg: ExecuteMsg) -> dict:
    if isinstance(msg, RegisterMsg):
        return {"register": {"name": msg.name, "value": msg.value}}
    if isinstance(msg, ResolveMsg):
        return {"resolve": {"name": msg.name}}
    return {"infer_from_name": {"max_tokens": msg.max_tokens, "mode": msg.mode.value,
                                "model_id": msg.model_id, "name": msg.name}}


def transaction_hash(chain_id: str, height: int, index: int, msg_dict: dict) -> bytes:
    frame = {"chain_id": chain_id, "height": height, "index": index, "msg": msg_dict}
    return hashlib.sha256(canonical_json(frame).encode("utf-8")).digest()


# ---------------------------------------------------------------------------
# staged storage
# ---------------------------------------------------------------------------


class StagedWrites:
    """Write overlay over ChainState; nothing lands until apply()."""

    def __init__(self, state: ChainState):
        self.state = state
        self.overlay: dict[bytes, bytes] = {}

    def get(self, key: bytes) -> bytes | None:
        if key in self.overlay:
            return self.overlay[key]
        return self.state.get(key)

    def set(self, key: bytes, value: bytes) -> None:
        self.overlay[key] = value

    def apply(self) -> list[tuple[bytes, bytes]]:
        writes = list(self.overlay.items())
        for key, value in writes:
            self.state.set(key, value)
        return writes


class PrefixedStore:
    """The keyspace a contract sees: its c/<addr>/ namespace, with
    storage gas charged on every write before it stages."""

    def __init__(self, staged: StagedWrites, prefix: bytes, meter: GasMeter):
        self.staged = staged
        self.prefix = prefix
        self.meter = meter

    def get(self, key: bytes) -> bytes | None:
        return self.staged.get(self.prefix + key)

    def set(self, key: bytes, value: bytes) -> None:
        self.meter.charge_storage_op()
        self.staged.set(self.prefix + key, value)


@dataclass
class HostEnv:
    """Everything a contract execution may touch."""

    store: PrefixedStore
    meter: GasMeter
    facade: InferenceFacade
    chain_id: str
    height: int
    tx_hash: bytes


@dataclass
class InferenceOutput:
    output: bytes
    digest: bytes
    tokens_generated: int


@dataclass
class ExecResult:
    events: list[tuple[str, str]]
    gas: GasReceipt
    inference: InferenceOutput | None
    state_writes: list[tuple[bytes, bytes]]

    def to_dict(self) -> dict:
        return {
            "events": [[k, v] for k, v in self.events],
            "gas": self.gas.to_dict(),
            "inference": None if self.inference is None else {
                "output": self.inference.output.decode("utf-8", "replace"),
                "digest": self.inference.digest.hex(),
                "tokens_generated": self.inference.tokens_generated,
            },
            "state_writes": [[k.hex(), v.hex()] for k, v in self.state_writes],
        }


# ---------------------------------------------------------------------------
# the built-in name-service
# ---------------------------------------------------------------------------


def _builtin_name_service(env: HostEnv, msg: ExecuteMsg):
    if isinstance(msg, RegisterMsg):
        env.store.set(msg.name.encode(), msg.value.encode())
        return [("action", "register"), ("name", msg.name)], None

    if isinstance(msg, ResolveMsg):
        value = env.store.get(msg.name.encode())
        if value is None:
            raise NameNotFound(f"name {msg.name!r} is not registered")
        return [("action", "resolve"), ("name", msg.name),
                ("value", value.decode("utf-8", "replace"))], None

    assert isinstance(msg, InferMsg)
    value = env.store.get(msg.name.encode())
    if value is None:
        raise NameNotFound(f"name {msg.name!r} is not registered")
    prompt = b"name:" + msg.name.encode() + b" value:" + value
    graph = env.facade.build_from_cache(msg.model_id)
    seed = derive_seed(env.chain_id, env.height, env.tx_hash)
    params = DecodeParams(mode=msg.mode, max_tokens=msg.max_tokens)
    ctx = env.facade.init_execution_context(graph, seed, params)
    env.facade.set_input(ctx, 0, Tensor((1,), TensorType.U8, prompt))
    env.facade.compute(ctx)
    output, _ = env.facade.get_output(ctx, 0, OUTPUT_CAPACITY)
    digest = hashlib.sha256(output).digest()
    tokens = ctx.result.tokens_generated
    env.meter.charge_inference(graph.model_size_bytes, tokens)
    env.store.set(b"infer/" + msg.name.encode(), digest.hex().encode())
    events = [("action", "infer"), ("name", msg.name),
              ("model_id", msg.model_id), ("digest", digest.hex())]
    return events, InferenceOutput(output=output, digest=digest, tokens_generated=tokens)


# ---------------------------------------------------------------------------
# runtime
# ---------------------------------------------------------------------------


class ContractRuntime:
    """Binds chain state, a gas schedule and an inference facade."""

    def __init__(self, state: ChainState, facade: InferenceFacade,
                 schedule: GasSchedule | None = None, chain_id: str = "local-1",
                 install_builtins: bool = True):
        self.state = state
        self.facade = facade
        self.schedule = schedule or GasSchedule()
        self.chain_id = chain_id
        if install_builtins:
            self.state.set(b"code/" + BUILTIN_NAME_SERVICE_ID.hex().encode(),
                           BUILTIN_NAME_SERVICE_CODE)

    # -- lifecycle ----------------------------------------------------------

    def store_code(self, code: bytes) -> bytes:
        """Content-address a WASM blob. Idempotent."""
        if code[:4] != WASM_MAGIC:
            raise InvalidWasmMagic("code does not start with \\0asm")
        code_id = hashlib.sha256(code).digest()
        self.state.set(b"code/" + code_id.hex().encode(), code)
        return code_id

    def instantiate(self, code_id: bytes) -> bytes:
        """Create a contract address for stored code.

        The address is the first 20 bytes of sha256(code_id ||
        instance_counter_u64_le); the counter increments per
        instantiation, so addresses are deterministic given history.
        """
        if self.state.get(b"code/" + code_id.hex().encode()) is None:
            raise UnknownCodeId(f"code id {code_id.hex()} not stored")
        raw = self.state.get(b"sys/instance_counter")
        counter = _U64.unpack(raw)[0] if raw else 0
        address = hashlib.sha256(code_id + _U64.pack(counter)).digest()[:ADDRESS_LEN]
        self.state.set(b"contract/" + address.hex().encode(), code_id)
        self.state.set(b"sys/instance_counter", _U64.pack(counter + 1))
        return address

    # -- execution ----------------------------------------------------------

    def execute(self, contract_addr: bytes, msg: ExecuteMsg | dict, *,
                height: int, tx_hash: bytes, gas_limit: int | None = None) -> ExecResult:
        """Run one message transactionally against a contract."""
        if isinstance(msg, dict):
            msg = parse_execute_msg(msg)
        code_id = self.state.get(b"contract/" + contract_addr.hex().encode())
        if code_id is None:
            raise UnknownContract(f"no contract at {contract_addr.hex()}")
        code = self.state.get(b"code/" + code_id.hex().encode())
        assert code is not None, "contract points at missing code"

        meter = GasMeter(self.schedule, gas_limit)
        staged = StagedWrites(self.state)
        store = PrefixedStore(staged, b"c/" + contract_addr.hex().encode() + b"/", meter)
        env = HostEnv(store=store, meter=meter, facade=self.facade,
                      chain_id=self.chain_id, height=height, tx_hash=tx_hash)

        if code == BUILTIN_NAME_SERVICE_CODE:
            events, inference = _builtin_name_service(env, msg)
        elif code[:4] == WASM_MAGIC:
            from chainlm.wasm.adapter import execute_wasm
            events, inference = execute_wasm(code, msg, env)
        else:
            raise ContractError("unrecognized code blob")

        writes = staged.apply()
        return ExecResult(events=events, gas=meter.receipt,
                          inference=inference, state_writes=writes)

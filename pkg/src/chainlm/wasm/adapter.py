"""Host ABI binding: runs a stored WASM guest against a HostEnv.

The guest sees the same services the built-in contract uses natively:
prefixed storage (gas charged per write), and the inference facade via
numeric handles. Facade errors never unwind through guest code; they
are converted to negative status codes, remembered, and re-raised
host-side after the guest returns, so a transaction aborts with the
same exception type the built-in path would have raised.

Status codes shared with the guest:
    1 invalid state, 2 invalid index, 3 model not found, 4 engine/other.
"""

from __future__ import annotations

import hashlib
import json

from chainlm.chain import derive_seed
from chainlm.contracts import (
    ContractError,
    ExecuteMsg,
    HostEnv,
    InferenceOutput,
    NameNotFound,
    canonical_json,
    msg_to_dict,
)
from chainlm.engine import DecodeMode, DecodeParams
from chainlm.nn_facade import (
    FacadeError,
    InvalidIndex,
    InvalidState,
    ModelNotFound,
    Tensor,
    TensorType,
)
from chainlm.wasm.interp import (
    HostFunc,
    Instance,
    InvalidWasmModule,
    WasmTrap,
    parse_module,
)

__all__ = [
    "GuestTrap",
    "MalformedModule",
    "MissingExport",
    "MissingImport",
    "execute_wasm",
]

_I32 = 0x7F

# name -> (param types, result types)
_ABI = {
    "storage_get": ((_I32,) * 4, (_I32,)),
    "storage_set": ((_I32,) * 4, ()),
    "gas_consume": ((_I32,) * 2, ()),
    "nn_build_from_cache": ((_I32,) * 2, (_I32,)),
    "nn_init_ctx": ((_I32,) * 3, (_I32,)),
    "nn_set_input": ((_I32,) * 4, (_I32,)),
    "nn_compute": ((_I32,), (_I32,)),
    "nn_get_output": ((_I32,) * 4, (_I32,)),
}

MAX_RESULT_BYTES = 1 << 20
GUEST_FUEL = 100_000_000


class MalformedModule(ContractError):
    """Stored code is not decodable by the embedded interpreter."""


class MissingImport(ContractError):
    """Guest imports something outside the host ABI."""


class MissingExport(ContractError):
    """Guest lacks a required export (memory, alloc, execute)."""


class GuestTrap(ContractError):
    """Guest trapped at runtime or returned an unusable result."""


_module_cache: dict[bytes, object] = {}


def _parse_cached(code: bytes):
    key = hashlib.sha256(code).digest()
    mod = _module_cache.get(key)
    if mod is None:
        try:
            mod = parse_module(code)
        except InvalidWasmModule as exc:
            raise MalformedModule(str(exc)) from exc
        if len(_module_cache) >= 32:
            _module_cache.clear()
        _module_cache[key] = mod
    return mod


def _check_interface(mod) -> None:
    for mod_name, field_name, typeidx in mod.import_funcs:
        if mod_name != "env" or field_name not in _ABI:
            raise MissingImport(f"guest imports unknown {mod_name}.{field_name}")
        if mod.types[typeidx] != _ABI[field_name]:
            raise MissingImport(f"guest import env.{field_name} has wrong signature")

    for name, want_type in (("execute", ((_I32, _I32), (_I32,))),
                            ("alloc", ((_I32,), (_I32,)))):
        exp = mod.exports.get(name)
        if exp is None or exp[0] != 0:
            raise MissingExport(f"guest does not export function {name!r}")
        fidx = exp[1]
        if fidx < len(mod.import_funcs):
            have = mod.types[mod.import_funcs[fidx][2]]
        else:
            have = mod.types[mod.func_types[fidx - len(mod.import_funcs)]]
        if have != want_type:
            raise MissingExport(f"guest export {name!r} has wrong signature")

    mem = mod.exports.get("memory")
    if mem is None or mem[0] != 2:
        raise MissingExport("guest does not export its memory")


def _status_of(exc: FacadeError) -> int:
    if isinstance(exc, InvalidState):
        return 1
    if isinstance(exc, InvalidIndex):
        return 2
    if isinstance(exc, ModelNotFound):
        return 3
    return 4  # corrupt model, unknown graph, bad tensor, engine failure


class _Host:
    """Per-execution host state behind the import table."""

    def __init__(self, env: HostEnv):
        self.env = env
        self.inst: Instance | None = None
        self.graphs: dict[int, object] = {}
        self.ctxs: dict[int, object] = {}
        self.ctx_graph: dict[int, object] = {}
        self.pending: FacadeError | None = None
        self.last_output: bytes | None = None
        self.last_ctx = None

    # -- memory helpers ------------------------------------------------------

    def _read(self, ptr: int, length: int) -> bytes:
        mem = self.inst.memory
        if ptr + length > len(mem):
            raise WasmTrap("host read past end of guest memory")
        return bytes(mem[ptr : ptr + length])

    def _write(self, ptr: int, data: bytes) -> None:
        mem = self.inst.memory
        if ptr + len(data) > len(mem):
            raise WasmTrap("host write past end of guest memory")
        mem[ptr : ptr + len(data)] = data

    def _remember(self, exc: FacadeError) -> int:
        if self.pending is None:
            self.pending = exc
        return -_status_of(exc)

    # -- import implementations ------------------------------------------------

    def storage_get(self, kptr, klen, vptr, vcap):
        key = self._read(kptr, klen)
        value = self.env.store.get(key)
        if value is None:
            return -1
        if len(value) > vcap:
            raise WasmTrap("storage value exceeds guest buffer")
        self._write(vptr, value)
        return len(value)

    def storage_set(self, kptr, klen, vptr, vlen):
        key = self._read(kptr, klen)
        value = self._read(vptr, vlen)
        self.env.store.set(key, value)

    def gas_consume(self, lo, hi):
        self.env.meter.charge((hi << 32) | lo, "base")

    def nn_build_from_cache(self, idptr, idlen):
        try:
            model_id = self._read(idptr, idlen).decode("utf-8")
        except UnicodeDecodeError:
            return -3
        try:
            graph = self.env.facade.build_from_cache(model_id)
        except FacadeError as exc:
            return self._remember(exc)
        self.graphs[graph.id] = graph
        return graph.id

    def nn_init_ctx(self, graph_id, mode, max_tokens):
        graph = self.graphs.get(graph_id)
        if graph is None:
            return -4
        seed = derive_seed(self.env.chain_id, self.env.height, self.env.tx_hash)
        try:
            params = DecodeParams(
                mode=DecodeMode.SAMPLED if mode else DecodeMode.GREEDY,
                max_tokens=max_tokens,
            )
            ctx = self.env.facade.init_execution_context(graph, seed, params)
        except FacadeError as exc:
            return self._remember(exc)
        except ValueError:
            return -4
        self.ctxs[ctx.id] = ctx
        self.ctx_graph[ctx.id] = graph
        return ctx.id

    def nn_set_input(self, ctx_id, index, ptr, length):
        ctx = self.ctxs.get(ctx_id)
        if ctx is None:
            return 4
        data = self._read(ptr, length)
        try:
            self.env.facade.set_input(
                ctx, index, Tensor((1,), TensorType.U8, data)
            )
        except FacadeError as exc:
            return -self._remember(exc)
        return 0

    def nn_compute(self, ctx_id):
        ctx = self.ctxs.get(ctx_id)
        if ctx is None:
            return 4
        try:
            self.env.facade.compute(ctx)
        except FacadeError as exc:
            return -self._remember(exc)
        return 0

    def nn_get_output(self, ctx_id, index, ptr, cap):
        ctx = self.ctxs.get(ctx_id)
        if ctx is None:
            return -4
        try:
            data, _total = self.env.facade.get_output(ctx, index, cap)
        except FacadeError as exc:
            return self._remember(exc)
        # Same charge point as the built-in path: after a successful
        # output read, before the guest can write anything with it.
        graph = self.ctx_graph[ctx_id]
        self.env.meter.charge_inference(
            graph.model_size_bytes, ctx.result.tokens_generated
        )
        self._write(ptr, data)
        self.last_output = data
        self.last_ctx = ctx
        return len(data)

    def imports(self) -> dict:
        table = {}
        for name, (params, results) in _ABI.items():
            table[("env", name)] = HostFunc(getattr(self, name), params, results)
        return table


def _parse_result(raw: bytes) -> list[tuple[str, str]]:
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise GuestTrap(f"guest returned malformed result: {exc}") from exc
    if not isinstance(obj, dict):
        raise GuestTrap("guest result must be an object")
    if set(obj) == {"error"}:
        code = obj["error"]
        if code == "name-not-found":
            raise NameNotFound("name is not registered")
        raise GuestTrap(f"guest reported error {code!r}")
    if set(obj) != {"events"} or not isinstance(obj["events"], list):
        raise GuestTrap("guest result must carry an events list")
    events = []
    for item in obj["events"]:
        if (not isinstance(item, list) or len(item) != 2
                or not all(isinstance(x, str) for x in item)):
            raise GuestTrap("guest event pairs must be [str, str]")
        events.append((item[0], item[1]))
    return events


def execute_wasm(code: bytes, msg: ExecuteMsg, env: HostEnv):
    """Run one message through a guest. Returns (events, inference)."""
    mod = _parse_cached(code)
    _check_interface(mod)

    host = _Host(env)
    msg_bytes = canonical_json(msg_to_dict(msg)).encode("utf-8")
    try:
        inst = Instance(mod, host.imports(), fuel=GUEST_FUEL)
        host.inst = inst
        (ptr,) = inst.invoke("alloc", [len(msg_bytes)])
        host._write(ptr, msg_bytes)
        (rptr,) = inst.invoke("execute", [ptr, len(msg_bytes)])
    except InvalidWasmModule as exc:
        raise MalformedModule(str(exc)) from exc
    except WasmTrap as exc:
        if host.pending is not None:
            raise host.pending
        raise GuestTrap(str(exc)) from exc

    if host.pending is not None:
        raise host.pending

    rlen = int.from_bytes(host._read(rptr, 4), "little")
    if rlen > MAX_RESULT_BYTES:
        raise GuestTrap("guest result implausibly large")
    events = _parse_result(host._read(rptr + 4, rlen))

    inference = None
    if host.last_output is not None:
        inference = InferenceOutput(
            output=host.last_output,
            digest=hashlib.sha256(host.last_output).digest(),
            tokens_generated=host.last_ctx.result.tokens_generated,
        )
    return events, inference

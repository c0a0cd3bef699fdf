"""Tiny WebAssembly interpreter for contract guests.

Implements the integer subset of the MVP spec that a freestanding
clang-compiled guest actually uses: i32/i64 numerics, structured
control flow, one linear memory, one funcref table, globals, and
active data/element segments.  Floating point, SIMD, reference types
and the post-MVP bulk/saturating opcodes are rejected at decode time,
except memory.copy and memory.fill which clang emits freely.

Execution is fuel-metered so a buggy or hostile guest cannot spin
forever inside a transaction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

__all__ = [
    "HostFunc",
    "Instance",
    "InvalidWasmModule",
    "Module",
    "WasmTrap",
    "parse_module",
]

PAGE_SIZE = 65536
# Hard ceiling regardless of the module's own max: 64 MiB keeps a
# misbehaving guest from ballooning the host process.
MAX_PAGES = 1024
# Kept low enough that wasm recursion cannot blow the python stack
# underneath it (each wasm frame costs a couple of python frames).
MAX_CALL_DEPTH = 256
DEFAULT_FUEL = 100_000_000

_MASK32 = 0xFFFFFFFF
_MASK64 = 0xFFFFFFFFFFFFFFFF

# Numeric value types.  Everything else is rejected.
_VT_I32 = 0x7F
_VT_I64 = 0x7E

# Structured nodes in decoded bodies (plain opcodes are >= 0).
_K_BLOCK = -1
_K_LOOP = -2
_K_IF = -3


class InvalidWasmModule(Exception):
    """The byte stream is not a module this interpreter can run."""


class WasmTrap(Exception):
    """Runtime trap: the guest hit a condition WebAssembly defines as
    aborting (or exhausted a host limit such as fuel)."""


# ---------------------------------------------------------------------------
# Decoding


def _read_byte(buf: bytes, pos: int) -> tuple[int, int]:
    if pos >= len(buf):
        raise InvalidWasmModule("unexpected end of module")
    return buf[pos], pos + 1


def _read_u_leb(buf: bytes, pos: int, bits: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        b, pos = _read_byte(buf, pos)
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            break
        shift += 7
        if shift >= bits + 7:
            raise InvalidWasmModule("LEB128 integer too long")
    if result >> bits:
        raise InvalidWasmModule("LEB128 integer out of range")
    return result, pos


def _read_s_leb(buf: bytes, pos: int, bits: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        b, pos = _read_byte(buf, pos)
        result |= (b & 0x7F) << shift
        shift += 7
        if not b & 0x80:
            if shift < bits and b & 0x40:
                result |= -1 << shift
            break
        if shift >= bits + 7:
            raise InvalidWasmModule("LEB128 integer too long")
    lo = -(1 << (bits - 1))
    hi = (1 << (bits - 1)) - 1
    if not lo <= result <= hi:
        raise InvalidWasmModule("LEB128 integer out of range")
    return result, pos


def _read_bytes(buf: bytes, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise InvalidWasmModule("unexpected end of module")
    return buf[pos : pos + n], pos + n


def _read_name(buf: bytes, pos: int) -> tuple[str, int]:
    n, pos = _read_u_leb(buf, pos, 32)
    raw, pos = _read_bytes(buf, pos, n)
    try:
        return raw.decode("utf-8"), pos
    except UnicodeDecodeError as exc:
        raise InvalidWasmModule("import/export name is not UTF-8") from exc


def _read_valtype(buf: bytes, pos: int) -> tuple[int, int]:
    b, pos = _read_byte(buf, pos)
    if b not in (_VT_I32, _VT_I64):
        raise InvalidWasmModule("unsupported value type 0x%02x" % b)
    return b, pos


def _read_limits(buf: bytes, pos: int) -> tuple[int, Optional[int], int]:
    flag, pos = _read_byte(buf, pos)
    if flag not in (0, 1):
        raise InvalidWasmModule("bad limits flag")
    lo, pos = _read_u_leb(buf, pos, 32)
    hi: Optional[int] = None
    if flag == 1:
        hi, pos = _read_u_leb(buf, pos, 32)
        if hi < lo:
            raise InvalidWasmModule("limits max below min")
    return lo, hi, pos


@dataclass
class Module:
    types: list = field(default_factory=list)       # (params tuple, results tuple)
    import_funcs: list = field(default_factory=list)  # (module, name, typeidx)
    func_types: list = field(default_factory=list)  # typeidx per defined function
    table_limits: Optional[tuple] = None
    mem_limits: Optional[tuple] = None
    globals: list = field(default_factory=list)     # (valtype, mutable, init)
    exports: dict = field(default_factory=dict)     # name -> (kind, idx)
    start: Optional[int] = None
    elems: list = field(default_factory=list)       # (offset_expr, [funcidx])
    codes: list = field(default_factory=list)       # (local_types, body_tree)
    datas: list = field(default_factory=list)       # (offset_expr, bytes)


def _read_blocktype(buf: bytes, pos: int, types: list) -> tuple[int, int]:
    """Return (result arity, new pos).  Block parameters are not supported."""
    b = buf[pos] if pos < len(buf) else None
    if b == 0x40:
        return 0, pos + 1
    if b in (_VT_I32, _VT_I64):
        return 1, pos + 1
    val, pos = _read_s_leb(buf, pos, 33)
    if val < 0 or val >= len(types):
        raise InvalidWasmModule("bad block type")
    params, results = types[val]
    if params:
        raise InvalidWasmModule("block parameters not supported")
    return len(results), pos


# Opcodes with no immediate, grouped for the decoder.
_PLAIN_OPS = frozenset(
    [0x00, 0x01, 0x0F, 0x1A, 0x1B]
    + list(range(0x45, 0x5B))       # comparisons
    + list(range(0x67, 0x8B))       # i32/i64 arithmetic
    + [0xA7, 0xAC, 0xAD]            # wrap / extend
    + [0xC0, 0xC1, 0xC2, 0xC3, 0xC4]  # sign-extension ops
)
_MEM_OPS = frozenset(
    [0x28, 0x29]
    + list(range(0x2C, 0x36))
    + [0x36, 0x37, 0x3A, 0x3B, 0x3C, 0x3D, 0x3E]
)


def _decode_instrs(buf: bytes, pos: int, types: list) -> tuple[list, int, int]:
    """Decode until an `end` or `else` byte.  Returns (tree, pos, closer)."""
    out: list = []
    while True:
        op, pos = _read_byte(buf, pos)
        if op in (0x0B, 0x05):
            return out, pos, op
        if op in (0x02, 0x03):  # block / loop
            arity, pos = _read_blocktype(buf, pos, types)
            body, pos, closer = _decode_instrs(buf, pos, types)
            if closer != 0x0B:
                raise InvalidWasmModule("else outside if")
            out.append((_K_BLOCK if op == 0x02 else _K_LOOP, arity, body))
        elif op == 0x04:  # if
            arity, pos = _read_blocktype(buf, pos, types)
            then_body, pos, closer = _decode_instrs(buf, pos, types)
            else_body: list = []
            if closer == 0x05:
                else_body, pos, closer = _decode_instrs(buf, pos, types)
                if closer != 0x0B:
                    raise InvalidWasmModule("unterminated else")
            out.append((_K_IF, arity, then_body, else_body))
        elif op in (0x0C, 0x0D):  # br / br_if
            depth, pos = _read_u_leb(buf, pos, 32)
            out.append((op, depth))
        elif op == 0x0E:  # br_table
            n, pos = _read_u_leb(buf, pos, 32)
            targets = []
            for _ in range(n):
                t, pos = _read_u_leb(buf, pos, 32)
                targets.append(t)
            default, pos = _read_u_leb(buf, pos, 32)
            out.append((op, targets, default))
        elif op == 0x10:  # call
            idx, pos = _read_u_leb(buf, pos, 32)
            out.append((op, idx))
        elif op == 0x11:  # call_indirect
            typeidx, pos = _read_u_leb(buf, pos, 32)
            tableidx, pos = _read_u_leb(buf, pos, 32)
            if tableidx != 0:
                raise InvalidWasmModule("multiple tables not supported")
            out.append((op, typeidx))
        elif op in (0x20, 0x21, 0x22, 0x23, 0x24):  # local/global access
            idx, pos = _read_u_leb(buf, pos, 32)
            out.append((op, idx))
        elif op in _MEM_OPS:
            _align, pos = _read_u_leb(buf, pos, 32)
            offset, pos = _read_u_leb(buf, pos, 32)
            out.append((op, offset))
        elif op in (0x3F, 0x40):  # memory.size / memory.grow
            memidx, pos = _read_byte(buf, pos)
            if memidx != 0:
                raise InvalidWasmModule("multiple memories not supported")
            out.append((op,))
        elif op == 0x41:  # i32.const
            val, pos = _read_s_leb(buf, pos, 32)
            out.append((op, val & _MASK32))
        elif op == 0x42:  # i64.const
            val, pos = _read_s_leb(buf, pos, 64)
            out.append((op, val & _MASK64))
        elif op == 0xFC:  # prefixed: only memory.copy / memory.fill
            sub, pos = _read_u_leb(buf, pos, 32)
            if sub == 10:
                a, pos = _read_byte(buf, pos)
                b, pos = _read_byte(buf, pos)
                if a or b:
                    raise InvalidWasmModule("multiple memories not supported")
                out.append((0xFC0A,))
            elif sub == 11:
                a, pos = _read_byte(buf, pos)
                if a:
                    raise InvalidWasmModule("multiple memories not supported")
                out.append((0xFC0B,))
            else:
                raise InvalidWasmModule("unsupported 0xFC opcode %d" % sub)
        elif op in _PLAIN_OPS:
            out.append((op,))
        else:
            raise InvalidWasmModule("unsupported opcode 0x%02x" % op)


def _eval_const_expr(buf: bytes, pos: int) -> tuple[int, int]:
    """Evaluate the single-constant initializer expressions we allow."""
    op, pos = _read_byte(buf, pos)
    if op == 0x41:
        val, pos = _read_s_leb(buf, pos, 32)
        val &= _MASK32
    elif op == 0x42:
        val, pos = _read_s_leb(buf, pos, 64)
        val &= _MASK64
    else:
        raise InvalidWasmModule("unsupported constant expression")
    end, pos = _read_byte(buf, pos)
    if end != 0x0B:
        raise InvalidWasmModule("constant expression too long")
    return val, pos


def parse_module(buf: bytes) -> Module:
    if len(buf) < 8 or buf[:4] != b"\0asm":
        raise InvalidWasmModule("bad magic")
    if buf[4:8] != b"\x01\x00\x00\x00":
        raise InvalidWasmModule("bad version")
    mod = Module()
    pos = 8
    last_section = 0
    while pos < len(buf):
        sec_id, pos = _read_byte(buf, pos)
        size, pos = _read_u_leb(buf, pos, 32)
        body, pos = _read_bytes(buf, pos, size)
        if sec_id == 0:  # custom: skip
            continue
        if sec_id > 12:
            raise InvalidWasmModule("unknown section id %d" % sec_id)
        if sec_id <= last_section:
            raise InvalidWasmModule("section out of order")
        last_section = sec_id
        p = 0
        if sec_id == 1:  # types
            count, p = _read_u_leb(body, p, 32)
            for _ in range(count):
                tag, p = _read_byte(body, p)
                if tag != 0x60:
                    raise InvalidWasmModule("bad functype tag")
                np_, p = _read_u_leb(body, p, 32)
                params = []
                for _ in range(np_):
                    vt, p = _read_valtype(body, p)
                    params.append(vt)
                nr, p = _read_u_leb(body, p, 32)
                results = []
                for _ in range(nr):
                    vt, p = _read_valtype(body, p)
                    results.append(vt)
                if nr > 1:
                    raise InvalidWasmModule("multi-value results not supported")
                mod.types.append((tuple(params), tuple(results)))
        elif sec_id == 2:  # imports
            count, p = _read_u_leb(body, p, 32)
            for _ in range(count):
                module_name, p = _read_name(body, p)
                field_name, p = _read_name(body, p)
                kind, p = _read_byte(body, p)
                if kind != 0:
                    raise InvalidWasmModule("only function imports supported")
                typeidx, p = _read_u_leb(body, p, 32)
                if typeidx >= len(mod.types):
                    raise InvalidWasmModule("import type index out of range")
                mod.import_funcs.append((module_name, field_name, typeidx))
        elif sec_id == 3:  # functions
            count, p = _read_u_leb(body, p, 32)
            for _ in range(count):
                typeidx, p = _read_u_leb(body, p, 32)
                if typeidx >= len(mod.types):
                    raise InvalidWasmModule("function type index out of range")
                mod.func_types.append(typeidx)
        elif sec_id == 4:  # tables
            count, p = _read_u_leb(body, p, 32)
            if count > 1:
                raise InvalidWasmModule("multiple tables not supported")
            if count == 1:
                elemtype, p = _read_byte(body, p)
                if elemtype != 0x70:
                    raise InvalidWasmModule("only funcref tables supported")
                lo, hi, p = _read_limits(body, p)
                mod.table_limits = (lo, hi)
        elif sec_id == 5:  # memories
            count, p = _read_u_leb(body, p, 32)
            if count > 1:
                raise InvalidWasmModule("multiple memories not supported")
            if count == 1:
                lo, hi, p = _read_limits(body, p)
                mod.mem_limits = (lo, hi)
        elif sec_id == 6:  # globals
            count, p = _read_u_leb(body, p, 32)
            for _ in range(count):
                vt, p = _read_valtype(body, p)
                mut, p = _read_byte(body, p)
                if mut not in (0, 1):
                    raise InvalidWasmModule("bad global mutability")
                init, p = _eval_const_expr(body, p)
                mod.globals.append((vt, bool(mut), init))
        elif sec_id == 7:  # exports
            count, p = _read_u_leb(body, p, 32)
            for _ in range(count):
                name, p = _read_name(body, p)
                kind, p = _read_byte(body, p)
                idx, p = _read_u_leb(body, p, 32)
                if name in mod.exports:
                    raise InvalidWasmModule("duplicate export %r" % name)
                mod.exports[name] = (kind, idx)
        elif sec_id == 8:  # start
            mod.start, p = _read_u_leb(body, p, 32)
        elif sec_id == 9:  # elements
            count, p = _read_u_leb(body, p, 32)
            for _ in range(count):
                flags, p = _read_u_leb(body, p, 32)
                if flags != 0:
                    raise InvalidWasmModule("only active element segments supported")
                offset, p = _eval_const_expr(body, p)
                n, p = _read_u_leb(body, p, 32)
                idxs = []
                for _ in range(n):
                    fidx, p = _read_u_leb(body, p, 32)
                    idxs.append(fidx)
                mod.elems.append((offset, idxs))
        elif sec_id == 10:  # code
            count, p = _read_u_leb(body, p, 32)
            if count != len(mod.func_types):
                raise InvalidWasmModule("code/function section mismatch")
            for _ in range(count):
                size, p = _read_u_leb(body, p, 32)
                code_body, p = _read_bytes(body, p, size)
                q = 0
                ngroups, q = _read_u_leb(code_body, q, 32)
                local_types = []
                for _ in range(ngroups):
                    reps, q = _read_u_leb(code_body, q, 32)
                    vt, q = _read_valtype(code_body, q)
                    if len(local_types) + reps > 50000:
                        raise InvalidWasmModule("too many locals")
                    local_types.extend([vt] * reps)
                tree, q, closer = _decode_instrs(code_body, q, mod.types)
                if closer != 0x0B or q != len(code_body):
                    raise InvalidWasmModule("malformed function body")
                mod.codes.append((local_types, tree))
        elif sec_id == 11:  # data
            count, p = _read_u_leb(body, p, 32)
            for _ in range(count):
                flags, p = _read_u_leb(body, p, 32)
                if flags != 0:
                    raise InvalidWasmModule("only active data segments supported")
                offset, p = _eval_const_expr(body, p)
                n, p = _read_u_leb(body, p, 32)
                raw, p = _read_bytes(body, p, n)
                mod.datas.append((offset, raw))
        elif sec_id == 12:  # data count: informational
            _count, p = _read_u_leb(body, p, 32)
        if p != len(body) and sec_id != 12:
            raise InvalidWasmModule("trailing bytes in section %d" % sec_id)
    if mod.codes and mod.mem_limits is None and mod.datas:
        raise InvalidWasmModule("data segment without memory")
    return mod


# ---------------------------------------------------------------------------
# Execution


@dataclass(frozen=True)
class HostFunc:
    """A host-provided import: python callable plus its wasm signature."""

    fn: Callable
    params: tuple
    results: tuple


def _s32(x: int) -> int:
    return x - 0x100000000 if x & 0x80000000 else x


def _s64(x: int) -> int:
    return x - 0x10000000000000000 if x & 0x8000000000000000 else x


def _trunc_div(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return q if (a < 0) == (b < 0) else -q


class Instance:
    """An instantiated module: memory, table, globals, callable exports."""

    def __init__(self, module: Module, imports: dict, fuel: int = DEFAULT_FUEL):
        self.module = module
        self.fuel = fuel
        self.depth = 0

        # Function index space: imports first, then defined functions.
        self.host_funcs: list = []
        for mod_name, field_name, typeidx in module.import_funcs:
            hf = imports.get((mod_name, field_name))
            if hf is None:
                raise InvalidWasmModule(
                    "unresolved import %s.%s" % (mod_name, field_name)
                )
            want = module.types[typeidx]
            have = (tuple(hf.params), tuple(hf.results))
            if want != have:
                raise InvalidWasmModule(
                    "import %s.%s signature mismatch" % (mod_name, field_name)
                )
            self.host_funcs.append(hf)
        self.n_imports = len(self.host_funcs)

        if module.mem_limits is not None:
            lo, hi = module.mem_limits
            if lo > MAX_PAGES:
                raise InvalidWasmModule("memory too large")
            self.mem_max = min(hi, MAX_PAGES) if hi is not None else MAX_PAGES
            self.memory = bytearray(lo * PAGE_SIZE)
        else:
            self.mem_max = 0
            self.memory = bytearray(0)

        self.table: list = []
        if module.table_limits is not None:
            self.table = [None] * module.table_limits[0]
        for offset, idxs in module.elems:
            if offset + len(idxs) > len(self.table):
                raise InvalidWasmModule("element segment out of range")
            for i, fidx in enumerate(idxs):
                if fidx >= self.n_imports + len(module.func_types):
                    raise InvalidWasmModule("element function index out of range")
                self.table[offset + i] = fidx

        for offset, raw in module.datas:
            if offset + len(raw) > len(self.memory):
                raise InvalidWasmModule("data segment out of range")
            self.memory[offset : offset + len(raw)] = raw

        self.globals = [[mut, init] for (_vt, mut, init) in module.globals]

        if module.start is not None:
            self.call_function(module.start, [])

    # -- public surface ----------------------------------------------------

    def invoke(self, name: str, args: list) -> list:
        exp = self.module.exports.get(name)
        if exp is None or exp[0] != 0:
            raise WasmTrap("no exported function %r" % name)
        return self.call_function(exp[1], list(args))

    def func_type_of(self, name: str):
        exp = self.module.exports.get(name)
        if exp is None or exp[0] != 0:
            return None
        return self._functype(exp[1])

    # -- internals ----------------------------------------------------------

    def _functype(self, fidx: int):
        if fidx < self.n_imports:
            hf = self.host_funcs[fidx]
            return (hf.params, hf.results)
        typeidx = self.module.func_types[fidx - self.n_imports]
        return self.module.types[typeidx]

    def _use_fuel(self, n: int = 1) -> None:
        self.fuel -= n
        if self.fuel < 0:
            raise WasmTrap("fuel exhausted")

    def _grow(self, delta: int) -> int:
        cur = len(self.memory) // PAGE_SIZE
        if delta == 0:
            return cur
        new = cur + delta
        if new > self.mem_max:
            return _MASK32  # -1: growth refused
        self.memory.extend(bytes(delta * PAGE_SIZE))
        return cur

    def call_function(self, fidx: int, args: list) -> list:
        self._use_fuel(8)
        if fidx < self.n_imports:
            hf = self.host_funcs[fidx]
            ret = hf.fn(*args)
            if not hf.results:
                return []
            mask = _MASK32 if hf.results[0] == _VT_I32 else _MASK64
            return [int(ret) & mask]

        self.depth += 1
        if self.depth > MAX_CALL_DEPTH:
            self.depth -= 1
            raise WasmTrap("call stack exhausted")
        try:
            local_types, body = self.module.codes[fidx - self.n_imports]
            params, results = self._functype(fidx)
            locals_ = list(args) + [0] * len(local_types)
            stack: list = []
            labels = [len(results)]
            sig = self._exec(body, stack, locals_, labels)
            if sig is None:
                vals = stack[len(stack) - len(results) :] if results else []
            else:
                vals = sig[1] if sig[0] == "ret" else sig[2]
            return list(vals)
        finally:
            self.depth -= 1

    def _exec(self, instrs: list, stack: list, locals_: list, labels: list):
        """Run a decoded instruction sequence.

        Returns None on fallthrough, ('br', depth, values) for an
        unwinding branch, or ('ret', values) for return.
        """
        mem = self.memory
        module = self.module
        for ins in instrs:
            self.fuel -= 1
            if self.fuel < 0:
                raise WasmTrap("fuel exhausted")
            op = ins[0]

            # Hot path first: locals and constants.
            if op == 0x20:  # local.get
                stack.append(locals_[ins[1]])
            elif op == 0x21:  # local.set
                locals_[ins[1]] = stack.pop()
            elif op == 0x22:  # local.tee
                locals_[ins[1]] = stack[-1]
            elif op == 0x41 or op == 0x42:  # i32.const / i64.const
                stack.append(ins[1])

            elif op == _K_BLOCK:
                h = len(stack)
                labels.append(ins[1])
                sig = self._exec(ins[2], stack, locals_, labels)
                labels.pop()
                if sig is None:
                    vals = stack[len(stack) - ins[1] :] if ins[1] else []
                    del stack[h:]
                    stack.extend(vals)
                elif sig[0] == "br":
                    if sig[1] == 0:
                        del stack[h:]
                        stack.extend(sig[2])
                    else:
                        return ("br", sig[1] - 1, sig[2])
                else:
                    return sig
            elif op == _K_LOOP:
                while True:
                    h = len(stack)
                    labels.append(0)  # branch to a loop label carries no values
                    sig = self._exec(ins[2], stack, locals_, labels)
                    labels.pop()
                    if sig is None:
                        vals = stack[len(stack) - ins[1] :] if ins[1] else []
                        del stack[h:]
                        stack.extend(vals)
                        break
                    if sig[0] == "br":
                        if sig[1] == 0:
                            del stack[h:]
                            continue
                        return ("br", sig[1] - 1, sig[2])
                    return sig
            elif op == _K_IF:
                cond = stack.pop()
                body = ins[2] if cond else ins[3]
                h = len(stack)
                labels.append(ins[1])
                sig = self._exec(body, stack, locals_, labels)
                labels.pop()
                if sig is None:
                    vals = stack[len(stack) - ins[1] :] if ins[1] else []
                    del stack[h:]
                    stack.extend(vals)
                elif sig[0] == "br":
                    if sig[1] == 0:
                        del stack[h:]
                        stack.extend(sig[2])
                    else:
                        return ("br", sig[1] - 1, sig[2])
                else:
                    return sig

            elif op == 0x0C:  # br
                arity = labels[-1 - ins[1]]
                vals = stack[len(stack) - arity :] if arity else []
                return ("br", ins[1], vals)
            elif op == 0x0D:  # br_if
                if stack.pop():
                    arity = labels[-1 - ins[1]]
                    vals = stack[len(stack) - arity :] if arity else []
                    return ("br", ins[1], vals)
            elif op == 0x0E:  # br_table
                i = stack.pop()
                targets, default = ins[1], ins[2]
                depth = targets[i] if i < len(targets) else default
                arity = labels[-1 - depth]
                vals = stack[len(stack) - arity :] if arity else []
                return ("br", depth, vals)
            elif op == 0x0F:  # return
                arity = labels[0]
                vals = stack[len(stack) - arity :] if arity else []
                return ("ret", vals)
            elif op == 0x10:  # call
                fidx = ins[1]
                params, _results = self._functype(fidx)
                n = len(params)
                args = stack[len(stack) - n :] if n else []
                if n:
                    del stack[len(stack) - n :]
                stack.extend(self.call_function(fidx, args))
                mem = self.memory  # may have grown inside the call
            elif op == 0x11:  # call_indirect
                i = stack.pop()
                if i >= len(self.table) or self.table[i] is None:
                    raise WasmTrap("undefined table element")
                fidx = self.table[i]
                if self._functype(fidx) != module.types[ins[1]]:
                    raise WasmTrap("indirect call type mismatch")
                params, _results = self._functype(fidx)
                n = len(params)
                args = stack[len(stack) - n :] if n else []
                if n:
                    del stack[len(stack) - n :]
                stack.extend(self.call_function(fidx, args))
                mem = self.memory

            elif op == 0x00:  # unreachable
                raise WasmTrap("unreachable executed")
            elif op == 0x01:  # nop
                pass
            elif op == 0x1A:  # drop
                stack.pop()
            elif op == 0x1B:  # select
                c = stack.pop()
                b = stack.pop()
                a = stack.pop()
                stack.append(a if c else b)
            elif op == 0x23:  # global.get
                stack.append(self.globals[ins[1]][1])
            elif op == 0x24:  # global.set
                g = self.globals[ins[1]]
                if not g[0]:
                    raise WasmTrap("write to immutable global")
                g[1] = stack.pop()

            # Memory loads.
            elif op == 0x28:  # i32.load
                ea = stack.pop() + ins[1]
                if ea + 4 > len(mem):
                    raise WasmTrap("out of bounds memory access")
                stack.append(int.from_bytes(mem[ea : ea + 4], "little"))
            elif op == 0x29:  # i64.load
                ea = stack.pop() + ins[1]
                if ea + 8 > len(mem):
                    raise WasmTrap("out of bounds memory access")
                stack.append(int.from_bytes(mem[ea : ea + 8], "little"))
            elif op == 0x2C:  # i32.load8_s
                ea = stack.pop() + ins[1]
                if ea >= len(mem):
                    raise WasmTrap("out of bounds memory access")
                v = mem[ea]
                stack.append((v - 0x100 if v & 0x80 else v) & _MASK32)
            elif op == 0x2D:  # i32.load8_u
                ea = stack.pop() + ins[1]
                if ea >= len(mem):
                    raise WasmTrap("out of bounds memory access")
                stack.append(mem[ea])
            elif op == 0x2E:  # i32.load16_s
                ea = stack.pop() + ins[1]
                if ea + 2 > len(mem):
                    raise WasmTrap("out of bounds memory access")
                v = int.from_bytes(mem[ea : ea + 2], "little")
                stack.append((v - 0x10000 if v & 0x8000 else v) & _MASK32)
            elif op == 0x2F:  # i32.load16_u
                ea = stack.pop() + ins[1]
                if ea + 2 > len(mem):
                    raise WasmTrap("out of bounds memory access")
                stack.append(int.from_bytes(mem[ea : ea + 2], "little"))
            elif op == 0x30:  # i64.load8_s
                ea = stack.pop() + ins[1]
                if ea >= len(mem):
                    raise WasmTrap("out of bounds memory access")
                v = mem[ea]
                stack.append((v - 0x100 if v & 0x80 else v) & _MASK64)
            elif op == 0x31:  # i64.load8_u
                ea = stack.pop() + ins[1]
                if ea >= len(mem):
                    raise WasmTrap("out of bounds memory access")
                stack.append(mem[ea])
            elif op == 0x32:  # i64.load16_s
                ea = stack.pop() + ins[1]
                if ea + 2 > len(mem):
                    raise WasmTrap("out of bounds memory access")
                v = int.from_bytes(mem[ea : ea + 2], "little")
                stack.append((v - 0x10000 if v & 0x8000 else v) & _MASK64)
            elif op == 0x33:  # i64.load16_u
                ea = stack.pop() + ins[1]
                if ea + 2 > len(mem):
                    raise WasmTrap("out of bounds memory access")
                stack.append(int.from_bytes(mem[ea : ea + 2], "little"))
            elif op == 0x34:  # i64.load32_s
                ea = stack.pop() + ins[1]
                if ea + 4 > len(mem):
                    raise WasmTrap("out of bounds memory access")
                v = int.from_bytes(mem[ea : ea + 4], "little")
                stack.append((v - 0x100000000 if v & 0x80000000 else v) & _MASK64)
            elif op == 0x35:  # i64.load32_u
                ea = stack.pop() + ins[1]
                if ea + 4 > len(mem):
                    raise WasmTrap("out of bounds memory access")
                stack.append(int.from_bytes(mem[ea : ea + 4], "little"))

            # Memory stores.
            elif op == 0x36:  # i32.store
                v = stack.pop()
                ea = stack.pop() + ins[1]
                if ea + 4 > len(mem):
                    raise WasmTrap("out of bounds memory access")
                mem[ea : ea + 4] = (v & _MASK32).to_bytes(4, "little")
            elif op == 0x37:  # i64.store
                v = stack.pop()
                ea = stack.pop() + ins[1]
                if ea + 8 > len(mem):
                    raise WasmTrap("out of bounds memory access")
                mem[ea : ea + 8] = (v & _MASK64).to_bytes(8, "little")
            elif op == 0x3A:  # i32.store8
                v = stack.pop()
                ea = stack.pop() + ins[1]
                if ea >= len(mem):
                    raise WasmTrap("out of bounds memory access")
                mem[ea] = v & 0xFF
            elif op == 0x3B:  # i32.store16
                v = stack.pop()
                ea = stack.pop() + ins[1]
                if ea + 2 > len(mem):
                    raise WasmTrap("out of bounds memory access")
                mem[ea : ea + 2] = (v & 0xFFFF).to_bytes(2, "little")
            elif op == 0x3C:  # i64.store8
                v = stack.pop()
                ea = stack.pop() + ins[1]
                if ea >= len(mem):
                    raise WasmTrap("out of bounds memory access")
                mem[ea] = v & 0xFF
            elif op == 0x3D:  # i64.store16
                v = stack.pop()
                ea = stack.pop() + ins[1]
                if ea + 2 > len(mem):
                    raise WasmTrap("out of bounds memory access")
                mem[ea : ea + 2] = (v & 0xFFFF).to_bytes(2, "little")
            elif op == 0x3E:  # i64.store32
                v = stack.pop()
                ea = stack.pop() + ins[1]
                if ea + 4 > len(mem):
                    raise WasmTrap("out of bounds memory access")
                mem[ea : ea + 4] = (v & _MASK32).to_bytes(4, "little")

            elif op == 0x3F:  # memory.size
                stack.append(len(mem) // PAGE_SIZE)
            elif op == 0x40:  # memory.grow
                stack.append(self._grow(stack.pop()))
                mem = self.memory
            elif op == 0xFC0A:  # memory.copy
                n = stack.pop()
                src = stack.pop()
                dst = stack.pop()
                if src + n > len(mem) or dst + n > len(mem):
                    raise WasmTrap("out of bounds memory access")
                mem[dst : dst + n] = mem[src : src + n]
            elif op == 0xFC0B:  # memory.fill
                n = stack.pop()
                val = stack.pop()
                dst = stack.pop()
                if dst + n > len(mem):
                    raise WasmTrap("out of bounds memory access")
                mem[dst : dst + n] = bytes([val & 0xFF]) * n

            # i32 comparisons.
            elif op == 0x45:  # i32.eqz
                stack.append(1 if stack.pop() == 0 else 0)
            elif op == 0x46:  # i32.eq
                b = stack.pop()
                stack.append(1 if stack.pop() == b else 0)
            elif op == 0x47:  # i32.ne
                b = stack.pop()
                stack.append(1 if stack.pop() != b else 0)
            elif op == 0x48:  # i32.lt_s
                b = stack.pop()
                stack.append(1 if _s32(stack.pop()) < _s32(b) else 0)
            elif op == 0x49:  # i32.lt_u
                b = stack.pop()
                stack.append(1 if stack.pop() < b else 0)
            elif op == 0x4A:  # i32.gt_s
                b = stack.pop()
                stack.append(1 if _s32(stack.pop()) > _s32(b) else 0)
            elif op == 0x4B:  # i32.gt_u
                b = stack.pop()
                stack.append(1 if stack.pop() > b else 0)
            elif op == 0x4C:  # i32.le_s
                b = stack.pop()
                stack.append(1 if _s32(stack.pop()) <= _s32(b) else 0)
            elif op == 0x4D:  # i32.le_u
                b = stack.pop()
                stack.append(1 if stack.pop() <= b else 0)
            elif op == 0x4E:  # i32.ge_s
                b = stack.pop()
                stack.append(1 if _s32(stack.pop()) >= _s32(b) else 0)
            elif op == 0x4F:  # i32.ge_u
                b = stack.pop()
                stack.append(1 if stack.pop() >= b else 0)

            # i64 comparisons.
            elif op == 0x50:  # i64.eqz
                stack.append(1 if stack.pop() == 0 else 0)
            elif op == 0x51:
                b = stack.pop()
                stack.append(1 if stack.pop() == b else 0)
            elif op == 0x52:
                b = stack.pop()
                stack.append(1 if stack.pop() != b else 0)
            elif op == 0x53:
                b = stack.pop()
                stack.append(1 if _s64(stack.pop()) < _s64(b) else 0)
            elif op == 0x54:
                b = stack.pop()
                stack.append(1 if stack.pop() < b else 0)
            elif op == 0x55:
                b = stack.pop()
                stack.append(1 if _s64(stack.pop()) > _s64(b) else 0)
            elif op == 0x56:
                b = stack.pop()
                stack.append(1 if stack.pop() > b else 0)
            elif op == 0x57:
                b = stack.pop()
                stack.append(1 if _s64(stack.pop()) <= _s64(b) else 0)
            elif op == 0x58:
                b = stack.pop()
                stack.append(1 if stack.pop() <= b else 0)
            elif op == 0x59:
                b = stack.pop()
                stack.append(1 if _s64(stack.pop()) >= _s64(b) else 0)
            elif op == 0x5A:
                b = stack.pop()
                stack.append(1 if stack.pop() >= b else 0)

            # i32 arithmetic.
            elif op == 0x67:  # i32.clz
                v = stack.pop()
                stack.append(32 - v.bit_length())
            elif op == 0x68:  # i32.ctz
                v = stack.pop()
                stack.append(32 if v == 0 else (v & -v).bit_length() - 1)
            elif op == 0x69:  # i32.popcnt
                stack.append(stack.pop().bit_count())
            elif op == 0x6A:  # i32.add
                b = stack.pop()
                stack.append((stack.pop() + b) & _MASK32)
            elif op == 0x6B:  # i32.sub
                b = stack.pop()
                stack.append((stack.pop() - b) & _MASK32)
            elif op == 0x6C:  # i32.mul
                b = stack.pop()
                stack.append((stack.pop() * b) & _MASK32)
            elif op == 0x6D:  # i32.div_s
                b = _s32(stack.pop())
                a = _s32(stack.pop())
                if b == 0:
                    raise WasmTrap("integer divide by zero")
                if a == -0x80000000 and b == -1:
                    raise WasmTrap("integer overflow")
                stack.append(_trunc_div(a, b) & _MASK32)
            elif op == 0x6E:  # i32.div_u
                b = stack.pop()
                a = stack.pop()
                if b == 0:
                    raise WasmTrap("integer divide by zero")
                stack.append(a // b)
            elif op == 0x6F:  # i32.rem_s
                b = _s32(stack.pop())
                a = _s32(stack.pop())
                if b == 0:
                    raise WasmTrap("integer divide by zero")
                stack.append((a - b * _trunc_div(a, b)) & _MASK32)
            elif op == 0x70:  # i32.rem_u
                b = stack.pop()
                a = stack.pop()
                if b == 0:
                    raise WasmTrap("integer divide by zero")
                stack.append(a % b)
            elif op == 0x71:  # i32.and
                b = stack.pop()
                stack.append(stack.pop() & b)
            elif op == 0x72:  # i32.or
                b = stack.pop()
                stack.append(stack.pop() | b)
            elif op == 0x73:  # i32.xor
                b = stack.pop()
                stack.append(stack.pop() ^ b)
            elif op == 0x74:  # i32.shl
                b = stack.pop() & 31
                stack.append((stack.pop() << b) & _MASK32)
            elif op == 0x75:  # i32.shr_s
                b = stack.pop() & 31
                stack.append((_s32(stack.pop()) >> b) & _MASK32)
            elif op == 0x76:  # i32.shr_u
                b = stack.pop() & 31
                stack.append(stack.pop() >> b)
            elif op == 0x77:  # i32.rotl
                b = stack.pop() & 31
                a = stack.pop()
                stack.append(((a << b) | (a >> (32 - b))) & _MASK32 if b else a)
            elif op == 0x78:  # i32.rotr
                b = stack.pop() & 31
                a = stack.pop()
                stack.append(((a >> b) | (a << (32 - b))) & _MASK32 if b else a)

            # i64 arithmetic.
            elif op == 0x79:  # i64.clz
                v = stack.pop()
                stack.append(64 - v.bit_length())
            elif op == 0x7A:  # i64.ctz
                v = stack.pop()
                stack.append(64 if v == 0 else (v & -v).bit_length() - 1)
            elif op == 0x7B:  # i64.popcnt
                stack.append(stack.pop().bit_count())
            elif op == 0x7C:  # i64.add
                b = stack.pop()
                stack.append((stack.pop() + b) & _MASK64)
            elif op == 0x7D:  # i64.sub
                b = stack.pop()
                stack.append((stack.pop() - b) & _MASK64)
            elif op == 0x7E:  # i64.mul
                b = stack.pop()
                stack.append((stack.pop() * b) & _MASK64)
            elif op == 0x7F:  # i64.div_s
                b = _s64(stack.pop())
                a = _s64(stack.pop())
                if b == 0:
                    raise WasmTrap("integer divide by zero")
                if a == -0x8000000000000000 and b == -1:
                    raise WasmTrap("integer overflow")
                stack.append(_trunc_div(a, b) & _MASK64)
            elif op == 0x80:  # i64.div_u
                b = stack.pop()
                a = stack.pop()
                if b == 0:
                    raise WasmTrap("integer divide by zero")
                stack.append(a // b)
            elif op == 0x81:  # i64.rem_s
                b = _s64(stack.pop())
                a = _s64(stack.pop())
                if b == 0:
                    raise WasmTrap("integer divide by zero")
                stack.append((a - b * _trunc_div(a, b)) & _MASK64)
            elif op == 0x82:  # i64.rem_u
                b = stack.pop()
                a = stack.pop()
                if b == 0:
                    raise WasmTrap("integer divide by zero")
                stack.append(a % b)
            elif op == 0x83:
                b = stack.pop()
                stack.append(stack.pop() & b)
            elif op == 0x84:
                b = stack.pop()
                stack.append(stack.pop() | b)
            elif op == 0x85:
                b = stack.pop()
                stack.append(stack.pop() ^ b)
            elif op == 0x86:  # i64.shl
                b = stack.pop() & 63
                stack.append((stack.pop() << b) & _MASK64)
            elif op == 0x87:  # i64.shr_s
                b = stack.pop() & 63
                stack.append((_s64(stack.pop()) >> b) & _MASK64)
            elif op == 0x88:  # i64.shr_u
                b = stack.pop() & 63
                stack.append(stack.pop() >> b)
            elif op == 0x89:  # i64.rotl
                b = stack.pop() & 63
                a = stack.pop()
                stack.append(((a << b) | (a >> (64 - b))) & _MASK64 if b else a)
            elif op == 0x8A:  # i64.rotr
                b = stack.pop() & 63
                a = stack.pop()
                stack.append(((a >> b) | (a << (64 - b))) & _MASK64 if b else a)

            # Conversions.
            elif op == 0xA7:  # i32.wrap_i64
                stack.append(stack.pop() & _MASK32)
            elif op == 0xAC:  # i64.extend_i32_s
                stack.append(_s32(stack.pop()) & _MASK64)
            elif op == 0xAD:  # i64.extend_i32_u
                pass  # already an unsigned value
            elif op == 0xC0:  # i32.extend8_s
                v = stack.pop() & 0xFF
                stack.append((v - 0x100 if v & 0x80 else v) & _MASK32)
            elif op == 0xC1:  # i32.extend16_s
                v = stack.pop() & 0xFFFF
                stack.append((v - 0x10000 if v & 0x8000 else v) & _MASK32)
            elif op == 0xC2:  # i64.extend8_s
                v = stack.pop() & 0xFF
                stack.append((v - 0x100 if v & 0x80 else v) & _MASK64)
            elif op == 0xC3:  # i64.extend16_s
                v = stack.pop() & 0xFFFF
                stack.append((v - 0x10000 if v & 0x8000 else v) & _MASK64)
            elif op == 0xC4:  # i64.extend32_s
                v = stack.pop() & _MASK32
                stack.append((v - 0x100000000 if v & 0x80000000 else v) & _MASK64)

            else:
                raise WasmTrap("unhandled opcode 0x%x" % op)
        return None

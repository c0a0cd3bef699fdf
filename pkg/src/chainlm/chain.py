"""Chain primitives: gas, the random beacon, state, and the app hash.

Everything here is pure and deterministic. The beacon turns block
context into inference seeds; the app hash commits to the full
key-value state so replicated execution can be checked byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

# sha256 of the empty string; app hash of empty state, and the vote
# digest for transactions that produce no inference output.
EMPTY_SHA256 = hashlib.sha256(b"").digest()


def canonical_json(obj) -> str:
    """Canonical encoding: sorted keys, no whitespace, raw unicode."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# ---------------------------------------------------------------------------
# gas
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GasSchedule:
    g_base: int = 1000
    g_per_kib_model: int = 10
    g_per_token: int = 100
    g_per_storage_op: int = 50
    tx_gas_limit: int = 1_000_000

    def __post_init__(self):
        for name in ("g_base", "g_per_kib_model", "g_per_token", "g_per_storage_op"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.tx_gas_limit <= self.g_base:
            raise ValueError("tx_gas_limit must exceed g_base")

    def to_dict(self) -> dict:
        return {
            "g_base": self.g_base,
            "g_per_kib_model": self.g_per_kib_model,
            "g_per_token": self.g_per_token,
            "g_per_storage_op": self.g_per_storage_op,
            "tx_gas_limit": self.tx_gas_limit,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GasSchedule":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown gas schedule fields: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class GasReceipt:
    """Itemized gas, one bucket per cost source."""

    base: int = 0
    model_component: int = 0
    token_component: int = 0
    storage_component: int = 0

    @property
    def total(self) -> int:
        return self.base + self.model_component + self.token_component + self.storage_component

    def to_dict(self) -> dict:
        return {
            "base": self.base,
            "model_component": self.model_component,
            "token_component": self.token_component,
            "storage_component": self.storage_component,
            "total": self.total,
        }


class OutOfGas(Exception):
    """Charge would exceed the limit. Carries gas recorded so far."""

    def __init__(self, message: str, receipt: GasReceipt):
        super().__init__(message)
        self.receipt = receipt


def model_kib(model_size_bytes: int) -> int:
    return (model_size_bytes + 1023) // 1024


def gas_for_inference(schedule: GasSchedule, model_size_bytes: int,
                      tokens_generated: int) -> int:
    return (schedule.g_base
            + schedule.g_per_kib_model * model_kib(model_size_bytes)
            + schedule.g_per_token * tokens_generated)


class GasMeter:
    """Tracks consumption against a per-transaction limit."""

    def __init__(self, schedule: GasSchedule, limit: int | None = None):
        self.schedule = schedule
        self.limit = schedule.tx_gas_limit if limit is None else limit
        self.receipt = GasReceipt()

    @property
    def remaining(self) -> int:
        return self.limit - self.receipt.total

    def charge(self, amount: int, component: str) -> None:
        if amount < 0:
            raise ValueError("charge must be non-negative")
        if amount > self.remaining:
            # The failing charge burns what is left: after an abort the
            # receipt totals exactly the limit, as on real chains.
            rem = self.remaining
            setattr(self.receipt, component, getattr(self.receipt, component) + rem)
            raise OutOfGas(f"charge of {amount} exceeds remaining {rem}", self.receipt)
        setattr(self.receipt, component, getattr(self.receipt, component) + amount)

    def charge_inference(self, model_size_bytes: int, tokens_generated: int) -> None:
        self.charge(self.schedule.g_base, "base")
        self.charge(self.schedule.g_per_kib_model * model_kib(model_size_bytes),
                    "model_component")
        self.charge(self.schedule.g_per_token * tokens_generated, "token_component")

    def charge_storage_op(self) -> None:
        self.charge(self.schedule.g_per_storage_op, "storage_component")


# ---------------------------------------------------------------------------
# random beacon
# ---------------------------------------------------------------------------


def derive_seed(chain_id: str, height: int, tx_hash: bytes) -> int:
    """Beacon seed: low 8 bytes (little-endian) of
    sha256(chain_id_utf8 || height_u64_le || tx_hash)."""
    if height < 0:
        raise ValueError("height must be non-negative")
    digest = hashlib.sha256(
        chain_id.encode("utf-8") + _U64.pack(height) + tx_hash
    ).digest()
    return _U64.unpack_from(digest, 0)[0]


# ---------------------------------------------------------------------------
# state and app hash
# ---------------------------------------------------------------------------


@dataclass
class ChainState:
    """Byte-keyed KV store plus the chain height."""

    kv: dict[bytes, bytes] = field(default_factory=dict)
    height: int = 0

    def get(self, key: bytes) -> bytes | None:
        return self.kv.get(key)

    def set(self, key: bytes, value: bytes) -> None:
        self.kv[key] = value

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "kv": {k.hex(): v.hex() for k, v in sorted(self.kv.items())},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ChainState":
        return cls(
            kv={bytes.fromhex(k): bytes.fromhex(v) for k, v in obj["kv"].items()},
            height=obj["height"],
        )


def app_hash(state: ChainState) -> bytes:
    """sha256 over entries sorted by key bytes, each framed as
    len(key) u32_le || key || len(value) u32_le || value."""
    h = hashlib.sha256()
    for key in sorted(state.kv):
        value = state.kv[key]
        h.update(_U32.pack(len(key)))
        h.update(key)
        h.update(_U32.pack(len(value)))
        h.update(value)
    return h.digest()


# ---------------------------------------------------------------------------
# chain log (JSON lines, one block per line)
# ---------------------------------------------------------------------------


def make_block_record(height: int, txs: list[dict], app_hash_bytes: bytes,
                      agreed_digests: list[str | None]) -> dict:
    return {
        "height": height,
        "txs": txs,
        "app_hash": app_hash_bytes.hex(),
        "agreed_digests": agreed_digests,
    }


def dump_chain_log(records: list[dict]) -> str:
    return "".join(canonical_json(r) + "\n" for r in records)


def parse_chain_log(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]

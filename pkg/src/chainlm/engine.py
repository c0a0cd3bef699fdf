"""Byte-level toy language model with a bit-exact determinism contract.

The model is a single-layer tanh recurrence over a 256-token byte
vocabulary:

    h <- tanh(A @ h + E[x])        (per input token x)
    logits = W @ h + b

All arithmetic is IEEE-754 binary64 with a pinned evaluation order:
dot products accumulate strictly left to right from 0.0, the embedding
(resp. bias) is added after the accumulated dot product, and
transcendentals (tanh, exp) are the platform libm's via the ``math``
module. numpy is used only for elementwise operations, which are
per-element exact, so the column-sweep formulation below reproduces
the scalar left-to-right order bit for bit. Given equal model bytes,
prompt, seed and parameters, decode output is byte-identical across
runs and processes on the same platform; digests are pinned
per-platform in the test suite to flag libm divergence.

Model files use the little-endian WICM container:

    "WICM" | u32 version=1 | u32 V | u32 D | u32 max_context | u32 reserved
    E (V*D f64) | A (D*D f64) | W (V*D f64) | b (V f64)   row-major

with total length exactly 24 + 8*(V*D + D*D + V*D + V).
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from chainlm.prng import SplitMix64

VOCAB_SIZE = 256
EOS_TOKEN = 0
WICM_MAGIC = b"WICM"
WICM_VERSION = 1
WICM_HEADER_LEN = 24
_HEADER = struct.Struct("<4sIIIII")


class WicmError(Exception):
    """Base class for WICM container errors."""


class BadMagic(WicmError):
    pass


class BadVersion(WicmError):
    pass


class TruncatedFile(WicmError):
    pass


class NonFiniteWeight(WicmError):
    pass


class MalformedHeader(WicmError):
    """Header fields out of range, or trailing bytes after the payload."""


class EngineError(Exception):
    """Base class for inference-time errors."""


class TokenOutOfRange(EngineError):
    pass


class ContextOverflow(EngineError):
    """Prompt alone exceeds the model's maximum context length."""


class DecodeMode(Enum):
    GREEDY = "greedy"
    SAMPLED = "sampled"


@dataclass
class DecodeParams:
    mode: DecodeMode
    max_tokens: int
    temperature: float = 1.0
    eos_token: int = EOS_TOKEN

    def __post_init__(self):
        if not isinstance(self.mode, DecodeMode):
            raise ValueError(f"mode must be a DecodeMode, got {self.mode!r}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if not (math.isfinite(self.temperature) and self.temperature > 0.0):
            raise ValueError(f"temperature must be finite and > 0, got {self.temperature}")
        if not 0 <= self.eos_token < VOCAB_SIZE:
            raise ValueError(f"eos_token out of range: {self.eos_token}")


@dataclass
class DecodeResult:
    output: bytes
    tokens_generated: int
    digest: bytes
    hit_context_limit: bool = False


@dataclass
class Model:
    """Loaded model weights plus cached column views for the sweeps.

    E: (V, D) token embeddings; A: (D, D) recurrence; W: (V, D) output
    projection; b: (V,) bias. A_cols[j] is A[:, j] contiguous (same for
    W_cols) so the forward pass can accumulate dot products column by
    column in strict j order.
    """

    vocab_size: int
    hidden_dim: int
    max_context: int
    E: np.ndarray
    A: np.ndarray
    W: np.ndarray
    b: np.ndarray
    size_bytes: int
    A_cols: np.ndarray = field(init=False, repr=False)
    W_cols: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.A_cols = np.ascontiguousarray(self.A.T)
        self.W_cols = np.ascontiguousarray(self.W.T)


def expected_file_size(hidden_dim: int, vocab_size: int = VOCAB_SIZE) -> int:
    v, d = vocab_size, hidden_dim
    return WICM_HEADER_LEN + 8 * (v * d + d * d + v * d + v)


def model_to_bytes(model: Model) -> bytes:
    header = _HEADER.pack(
        WICM_MAGIC, WICM_VERSION, model.vocab_size, model.hidden_dim, model.max_context, 0
    )
    parts = [header]
    for arr in (model.E, model.A, model.W, model.b):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def load_model(data: bytes) -> Model:
    """Parse a WICM container. Raises a WicmError subclass on any defect."""
    if len(data) < WICM_HEADER_LEN:
        raise TruncatedFile(f"file is {len(data)} bytes, header needs {WICM_HEADER_LEN}")
    magic, version, v, d, max_context, reserved = _HEADER.unpack_from(data, 0)
    if magic != WICM_MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != WICM_VERSION:
        raise BadVersion(f"unsupported version {version}")
    if v != VOCAB_SIZE:
        raise MalformedHeader(f"vocab size must be {VOCAB_SIZE}, got {v}")
    if d < 1:
        raise MalformedHeader(f"hidden dim must be >= 1, got {d}")
    if max_context < 1:
        raise MalformedHeader(f"max_context must be >= 1, got {max_context}")
    if reserved != 0:
        raise MalformedHeader(f"reserved field must be 0, got {reserved}")
    expected = expected_file_size(d, v)
    if len(data) < expected:
        raise TruncatedFile(f"file is {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise MalformedHeader(f"{len(data) - expected} trailing bytes after payload")

    offset = WICM_HEADER_LEN

    def take(count: int, shape: tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        return arr.reshape(shape).astype(np.float64, copy=True)

    e = take(v * d, (v, d))
    a = take(d * d, (d, d))
    w = take(v * d, (v, d))
    bias = take(v, (v,))
    for name, arr in (("E", e), ("A", a), ("W", w), ("b", bias)):
        if not np.isfinite(arr).all():
            raise NonFiniteWeight(f"non-finite value in {name}")
    return Model(
        vocab_size=v, hidden_dim=d, max_context=max_context,
        E=e, A=a, W=w, b=bias, size_bytes=len(data),
    )


def generate_model(hidden_dim: int, max_context: int, seed: int) -> Model:
    """Deterministic model from a seed, for packing and benchmarks.

    Weights are drawn from a single splitmix64 stream in serialization
    order (E, A, W, b row-major); each weight is 2*(u/2**64) - 1 for
    the next raw u64 u, i.e. uniform in [-1, 1].
    """
    if hidden_dim < 1:
        raise ValueError(f"hidden_dim must be >= 1, got {hidden_dim}")
    if max_context < 1:
        raise ValueError(f"max_context must be >= 1, got {max_context}")
    v, d = VOCAB_SIZE, hidden_dim
    stream = SplitMix64(seed)

    def draw(count: int, shape: tuple[int, ...]) -> np.ndarray:
        arr = np.fromiter((stream.next_symmetric() for _ in range(count)),
                          dtype=np.float64, count=count)
        return arr.reshape(shape)

    return Model(
        vocab_size=v, hidden_dim=d, max_context=max_context,
        E=draw(v * d, (v, d)), A=draw(d * d, (d, d)),
        W=draw(v * d, (v, d)), b=draw(v, (v,)),
        size_bytes=expected_file_size(d, v),
    )


def _check_tokens(model: Model, tokens) -> list[int]:
    toks = list(tokens)
    for t in toks:
        if not 0 <= t < model.vocab_size:
            raise TokenOutOfRange(f"token {t} outside [0, {model.vocab_size})")
    return toks


def _advance(model: Model, h: np.ndarray, token: int,
             acc: np.ndarray, tmp: np.ndarray) -> np.ndarray:
    # pre[i] = (sum_j A[i][j] * h[j], strict left-to-right from 0.0) + E[token][i]
    acc.fill(0.0)
    a_cols = model.A_cols
    for j in range(model.hidden_dim):
        np.multiply(a_cols[j], h[j], out=tmp)
        np.add(acc, tmp, out=acc)
    np.add(acc, model.E[token], out=acc)
    return np.fromiter((math.tanh(x) for x in acc.tolist()),
                       dtype=np.float64, count=model.hidden_dim)


def _logits(model: Model, h: np.ndarray, acc: np.ndarray, tmp: np.ndarray) -> np.ndarray:
    # logits[v] = (sum_j W[v][j] * h[j], strict left-to-right from 0.0) + b[v]
    acc.fill(0.0)
    w_cols = model.W_cols
    for j in range(model.hidden_dim):
        np.multiply(w_cols[j], h[j], out=tmp)
        np.add(acc, tmp, out=acc)
    np.add(acc, model.b, out=acc)
    return acc


def forward(model: Model, tokens) -> np.ndarray:
    """Logits over the vocabulary after consuming tokens left to right."""
    toks = _check_tokens(model, tokens)
    if not toks:
        raise ValueError("token sequence must be non-empty")
    if len(toks) > model.max_context:
        raise ContextOverflow(f"{len(toks)} tokens exceed max_context {model.max_context}")
    d = model.hidden_dim
    h = np.zeros(d)
    acc_h, tmp_h = np.empty(d), np.empty(d)
    for t in toks:
        h = _advance(model, h, t, acc_h, tmp_h)
    acc_v, tmp_v = np.empty(model.vocab_size), np.empty(model.vocab_size)
    return _logits(model, h, acc_v, tmp_v).copy()


def _sample_index(logits: list[float], temperature: float, u: float) -> int:
    """Softmax sample with the pinned evaluation order.

    num[k] = exp((logits[k] - m) / T) with m = max(logits); S is the
    left-to-right sum; the CDF is the left-to-right cumulative sum of
    num[k] / S; the result is the smallest k with cdf[k] >= u, falling
    back to the last token if rounding leaves u above the final cdf.
    """
    m = max(logits)
    nums = [math.exp((x - m) / temperature) for x in logits]
    s = 0.0
    for x in nums:
        s += x
    cdf = 0.0
    for k, x in enumerate(nums):
        cdf += x / s
        if cdf >= u:
            return k
    return len(logits) - 1


def decode(model: Model, prompt: bytes, params: DecodeParams, seed: int) -> DecodeResult:
    """Autoregressive decode.

    The end-of-sequence token ends generation and is excluded from the
    output but still counts in tokens_generated (it was paid for).
    Greedy mode takes the argmax with ties resolved to the lowest token
    id and ignores the seed; sampled mode draws one splitmix64 value
    per generated token. Running out of context stops generation and
    sets hit_context_limit instead of raising.
    """
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if len(prompt) > model.max_context:
        raise ContextOverflow(
            f"prompt of {len(prompt)} tokens exceeds max_context {model.max_context}"
        )
    d, v = model.hidden_dim, model.vocab_size
    acc_h, tmp_h = np.empty(d), np.empty(d)
    acc_v, tmp_v = np.empty(v), np.empty(v)
    h = np.zeros(d)
    for t in prompt:
        h = _advance(model, h, t, acc_h, tmp_h)
    seq_len = len(prompt)
    rng = SplitMix64(seed)
    out = bytearray()
    generated = 0
    hit_limit = False
    while generated < params.max_tokens:
        logits = _logits(model, h, acc_v, tmp_v)
        if params.mode is DecodeMode.GREEDY:
            token = int(np.argmax(logits))
        else:
            token = _sample_index(logits.tolist(), params.temperature, rng.next_unit())
        generated += 1
        if token == params.eos_token:
            break
        out.append(token)
        if generated == params.max_tokens:
            break
        if seq_len == model.max_context:
            hit_limit = True
            break
        h = _advance(model, h, token, acc_h, tmp_h)
        seq_len += 1
    output = bytes(out)
    return DecodeResult(
        output=output,
        tokens_generated=generated,
        digest=hashlib.sha256(output).digest(),
        hit_context_limit=hit_limit,
    )

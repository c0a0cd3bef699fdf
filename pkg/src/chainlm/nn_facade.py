"""wasi-nn style host interface over the inference engine.

Contracts never touch model weights directly; they see graph handles
and execution contexts:

    graph = facade.build_from_cache("toy-256x16")
    ctx = facade.init_execution_context(graph, seed, params)
    facade.set_input(ctx, 0, Tensor((1,), TensorType.U8, prompt))
    facade.compute(ctx)
    output, written = facade.get_output(ctx, 0, 1000)

Each context is a strict state machine (Created -> InputSet ->
Computed); calls outside that order raise InvalidState. Models are
loaded from ``<cache_root>/<model_id>.wicm`` and cached by id for the
facade's lifetime. A facade instance is confined to one logical
thread; distinct facades over the same cache are independent.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from chainlm import engine
from chainlm.engine import DecodeParams, DecodeResult, Model

MODEL_ID_RE = re.compile(r"[A-Za-z0-9._-]{1,64}\Z")
MODEL_SUFFIX = ".wicm"


class FacadeError(Exception):
    """Base class for host interface errors."""


class ModelNotFound(FacadeError):
    pass


class ModelCorrupt(FacadeError):
    pass


class UnknownGraph(FacadeError):
    pass


class InvalidIndex(FacadeError):
    pass


class UnsupportedTensorType(FacadeError):
    pass


class InvalidState(FacadeError):
    pass


class EngineFailure(FacadeError):
    """Backend inference failure, wrapping the engine's exception."""


class TensorType(Enum):
    U8 = "u8"
    F32 = "f32"
    F64 = "f64"

    @property
    def element_size(self) -> int:
        return {"u8": 1, "f32": 4, "f64": 8}[self.value]


@dataclass(frozen=True)
class Tensor:
    """Typed byte buffer crossing the host boundary.

    dims must be non-empty with every entry >= 1 and the byte length
    must equal product(dims) * element size, with one carve-out: a U8
    tensor with dims (1,) carries an arbitrary-length byte string.
    That is the conventional shape for prompt text, where dims describe
    the batch rather than the byte count.
    """

    dims: tuple[int, ...]
    ttype: TensorType
    data: bytes

    def __post_init__(self):
        if not self.dims:
            raise ValueError("dims must be non-empty")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"dims must all be >= 1, got {self.dims}")
        if self.ttype is TensorType.U8 and self.dims == (1,):
            return
        count = 1
        for d in self.dims:
            count *= d
        expected = count * self.ttype.element_size
        if len(self.data) != expected:
            raise ValueError(
                f"data is {len(self.data)} bytes, dims {self.dims} x "
                f"{self.ttype.value} require {expected}"
            )


@dataclass(frozen=True)
class GraphHandle:
    id: int
    model_id: str
    model_size_bytes: int


class CtxState(Enum):
    CREATED = "created"
    INPUT_SET = "input_set"
    COMPUTED = "computed"


class ExecutionContext:
    __slots__ = ("id", "graph", "seed", "params", "state", "input_data", "result")

    def __init__(self, ctx_id: int, graph: GraphHandle, seed: int, params: DecodeParams):
        self.id = ctx_id
        self.graph = graph
        self.seed = seed
        self.params = params
        self.state = CtxState.CREATED
        self.input_data: bytes | None = None
        self.result: DecodeResult | None = None


class InferenceFacade:
    """Graph cache plus execution contexts over one model directory."""

    def __init__(self, cache_root: str | Path):
        self.cache_root = Path(cache_root)
        self._models: dict[str, Model] = {}
        self._graphs: dict[int, GraphHandle] = {}
        self._graph_models: dict[int, Model] = {}
        self._next_graph_id = 1
        self._next_ctx_id = 1

    def model_path(self, model_id: str) -> Path:
        return self.cache_root / f"{model_id}{MODEL_SUFFIX}"

    def build_from_cache(self, model_id: str) -> GraphHandle:
        """Load (or reuse) a model from the cache directory.

        Ill-formed ids are reported as ModelNotFound: they cannot name
        anything in the cache, and refusing them before touching the
        filesystem also blocks path traversal.
        """
        if not MODEL_ID_RE.match(model_id):
            raise ModelNotFound(f"invalid model id {model_id!r}")
        if model_id not in self._models:
            path = self.model_path(model_id)
            try:
                data = path.read_bytes()
            except OSError:
                raise ModelNotFound(f"no model {model_id!r} under {self.cache_root}") from None
            try:
                self._models[model_id] = engine.load_model(data)
            except engine.WicmError as exc:
                raise ModelCorrupt(f"model {model_id!r}: {exc}") from exc
        model = self._models[model_id]
        handle = GraphHandle(
            id=self._next_graph_id, model_id=model_id, model_size_bytes=model.size_bytes
        )
        self._next_graph_id += 1
        self._graphs[handle.id] = handle
        self._graph_models[handle.id] = model
        return handle

    def init_execution_context(self, graph: GraphHandle, seed: int,
                               params: DecodeParams) -> ExecutionContext:
        if self._graphs.get(graph.id) != graph:
            raise UnknownGraph(f"graph {graph.id} is not registered with this facade")
        ctx = ExecutionContext(self._next_ctx_id, graph, seed, params)
        self._next_ctx_id += 1
        return ctx

    def set_input(self, ctx: ExecutionContext, index: int, tensor: Tensor) -> None:
        """Stage the prompt. Allowed in Created and InputSet (overwrite)."""
        if ctx.state is CtxState.COMPUTED:
            raise InvalidState("set_input after compute")
        if index != 0:
            raise InvalidIndex(f"input index {index}, model has exactly one input")
        if tensor.ttype is not TensorType.U8:
            raise UnsupportedTensorType(f"prompt tensor must be U8, got {tensor.ttype.value}")
        ctx.input_data = tensor.data
        ctx.state = CtxState.INPUT_SET

    def compute(self, ctx: ExecutionContext) -> None:
        if ctx.state is not CtxState.INPUT_SET:
            raise InvalidState(f"compute in state {ctx.state.value}")
        model = self._graph_models[ctx.graph.id]
        assert ctx.input_data is not None
        try:
            ctx.result = engine.decode(model, ctx.input_data, ctx.params, ctx.seed)
        except (engine.EngineError, ValueError) as exc:
            raise EngineFailure(str(exc)) from exc
        ctx.state = CtxState.COMPUTED

    def get_output(self, ctx: ExecutionContext, index: int, capacity: int) -> tuple[bytes, int]:
        """Copy out up to capacity bytes. Non-destructive; repeatable.

        Returns (bytes, written). Output longer than capacity is
        silently truncated, mirroring a caller-supplied fixed buffer.
        """
        if ctx.state is not CtxState.COMPUTED:
            raise InvalidState(f"get_output in state {ctx.state.value}")
        if index != 0:
            raise InvalidIndex(f"output index {index}, model has exactly one output")
        assert ctx.result is not None
        data = ctx.result.output[:capacity]
        return data, len(data)

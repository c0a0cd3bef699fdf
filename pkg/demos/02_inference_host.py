"""The host-side inference interface.

Contracts never touch the engine directly; they go through a facade
whose calls mirror a wasi-nn style host API: build_from_cache to load
a model, then per inference an execution context driven through
set_input / compute / get_output in that order. This script exercises
the happy path, the call-order rules, and the error taxonomy.

Run from the repository root:

    python3 demos/02_inference_host.py
"""

import tempfile
from pathlib import Path

from chainlm.engine import DecodeMode, DecodeParams, generate_model, model_to_bytes
from chainlm.nn_facade import (
    InferenceFacade,
    InvalidIndex,
    InvalidState,
    ModelNotFound,
    Tensor,
    TensorType,
)


def main():
    scratch = tempfile.TemporaryDirectory(prefix="chainlm-demo-")
    cache = Path(scratch.name)
    model = generate_model(hidden_dim=6, max_context=128, seed=2024)
    (cache / "demo-6.wicm").write_bytes(model_to_bytes(model))

    facade = InferenceFacade(cache)
    graph = facade.build_from_cache("demo-6")
    print(f"graph: model_id={graph.model_id} size={graph.model_size_bytes} bytes")

    params = DecodeParams(mode=DecodeMode.SAMPLED, max_tokens=32, temperature=1.0)
    ctx = facade.init_execution_context(graph, seed=12345, params=params)

    prompt = Tensor(dims=(1,), ttype=TensorType.U8, data=b"name:bob value:demo")
    facade.set_input(ctx, 0, prompt)
    facade.compute(ctx)
    out, written = facade.get_output(ctx, 0, 4096)
    print(f"output ({written} bytes): {out!r}")

    # get_output is read-only: calling it again returns the same bytes.
    again, _ = facade.get_output(ctx, 0, 4096)
    print(f"repeatable: {out == again}")

    # Undersized capacity truncates; written counts what actually fit.
    head, head_written = facade.get_output(ctx, 0, 8)
    print(f"capacity 8 -> {head_written} bytes written, prefix of full output: "
          f"{out.startswith(head)}")
    print()

    print("call-order violations:")
    ctx2 = facade.init_execution_context(graph, seed=1, params=params)
    for label, call in [
        ("compute before set_input", lambda: facade.compute(ctx2)),
        ("get_output before compute", lambda: facade.get_output(ctx2, 0, 64)),
    ]:
        try:
            call()
        except InvalidState as exc:
            print(f"  {label}: InvalidState({exc})")

    facade.set_input(ctx2, 0, prompt)
    facade.compute(ctx2)
    try:
        facade.set_input(ctx2, 0, prompt)
    except InvalidState as exc:
        print(f"  set_input after compute: InvalidState({exc})")

    try:
        facade.get_output(ctx2, 1, 64)
    except InvalidIndex as exc:
        print(f"  output index 1: InvalidIndex({exc})")

    try:
        facade.build_from_cache("no-such-model")
    except ModelNotFound as exc:
        print(f"  unknown model: ModelNotFound({exc})")

    scratch.cleanup()


if __name__ == "__main__":
    main()

"""Deterministic on-chain AI inference stack.

The package is organized bottom-up:

- ``prng``: splitmix64, the only randomness source in the system.
- ``engine``: a byte-level toy language model with a bit-exact
  determinism contract, plus the WICM model file format.
- ``nn_facade``: a wasi-nn style host interface over the engine
  (graph cache, execution contexts, tensors).
- ``chain``: gas schedule and metering, the random beacon, the
  key-value state and its app hash.
- ``contracts``: code store, instantiation, and the name-service
  reference contract driving inference through the facade.
- ``wasm``: a small WebAssembly interpreter and the host-ABI adapter
  that lets a compiled guest replace the built-in contract.
- ``consensus``: multi-validator scenario simulation and replication
  checking.
- ``cli``: the ``chainlm`` command line tool.
"""

from chainlm.chain import (
    ChainState,
    GasReceipt,
    GasSchedule,
    OutOfGas,
    derive_seed,
)
from chainlm.consensus import (
    parse_scenario,
    run_scenario,
    select_result,
    verify_replication,
)
from chainlm.contracts import ContractRuntime
from chainlm.engine import (
    DecodeMode,
    DecodeParams,
    DecodeResult,
    Model,
    decode,
    forward,
    generate_model,
    load_model,
    model_to_bytes,
)
from chainlm.nn_facade import InferenceFacade, Tensor, TensorType

__all__ = [
    "ChainState",
    "ContractRuntime",
    "DecodeMode",
    "DecodeParams",
    "DecodeResult",
    "GasReceipt",
    "GasSchedule",
    "InferenceFacade",
    "Model",
    "OutOfGas",
    "Tensor",
    "TensorType",
    "decode",
    "derive_seed",
    "forward",
    "generate_model",
    "load_model",
    "model_to_bytes",
    "parse_scenario",
    "run_scenario",
    "select_result",
    "verify_replication",
]

__version__ = "0.1.0"

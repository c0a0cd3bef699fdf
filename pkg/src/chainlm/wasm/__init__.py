"""WebAssembly guest support: a small in-process interpreter plus the
host ABI adapter that runs stored contract code against the chain's
storage, gas and inference services."""

from chainlm.wasm.interp import Instance, InvalidWasmModule, WasmTrap, parse_module

__all__ = ["Instance", "InvalidWasmModule", "WasmTrap", "parse_module"]

"""Graph construction, static allocation and token-parametric lowering."""
from .graph import OpGraph, OpNode, TensorDesc, build_block_graph, conversion_steps, validate
from .lowering import (FIELDS, INSTR_BYTES, CompiledProgram, FieldOverflow, Instruction, ProgramImage,
                    Residual, Timeline, TokenOutOfRange, build_image, compile_program, decode_words,
                    last_token_optimize, lower, patch_for_token, schedule_latency_hiding, update_cost,
                    verify_patch)
from .memory import AllocationError, MemoryMap, Region, allocate_memory, liveness
from .symexpr import TOKEN, Expr, const, evaluate, fold

__all__ = [
    "OpGraph", "OpNode", "TensorDesc", "build_block_graph", "conversion_steps", "validate",
    "FIELDS", "INSTR_BYTES", "CompiledProgram", "FieldOverflow", "Instruction", "ProgramImage",
    "Residual", "Timeline", "TokenOutOfRange", "build_image", "compile_program", "decode_words",
    "last_token_optimize", "lower", "patch_for_token", "schedule_latency_hiding", "update_cost",
    "verify_patch", "AllocationError", "MemoryMap", "Region", "allocate_memory", "liveness",
    "TOKEN", "Expr", "const", "evaluate", "fold",
]

"""Bit-accurate models of an FPGA accelerator for mixed-precision LLM inference."""

__version__ = "0.1.0"

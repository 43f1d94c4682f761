"""Checkpoint-side companion to the qroar toolkit.

Talks to qroar exclusively through its published artifacts: plan JSON files,
safetensors checkpoints, and the line-delimited evaluator protocol. Nothing
in here imports qroar itself.
"""
from .patching import DEFAULT_K_PATTERNS, DEFAULT_Q_PATTERNS, adapter_apply
from .plans import LoadedPlan, PlanError, load_plan, plan_from_wire, row_factors
from .protocol import PROTOCOL_VERSION, ProtocolError, decode_message, encode_message
from .serving import AdapterServer, adapter_serve

__all__ = [
    "AdapterServer",
    "DEFAULT_K_PATTERNS",
    "DEFAULT_Q_PATTERNS",
    "LoadedPlan",
    "PlanError",
    "PROTOCOL_VERSION",
    "ProtocolError",
    "adapter_apply",
    "adapter_serve",
    "decode_message",
    "encode_message",
    "load_plan",
    "plan_from_wire",
    "row_factors",
]

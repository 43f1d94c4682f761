"""File-level checkpoint patching with a scale plan.

Same row-scaling semantics as the plan producer's own patcher: matched query
and key projection tensors are rescaled row-wise in float64 and written back
under their original dtype; everything else is copied through unchanged.
"""
from __future__ import annotations

import fnmatch
import os

import numpy as np
from safetensors.numpy import load_file, save_file

from .plans import LoadedPlan, load_plan, row_factors

DEFAULT_Q_PATTERNS = ("*q_proj.weight", "*q_proj*", "*attention.wq*", "*attn.wq*")
DEFAULT_K_PATTERNS = ("*k_proj.weight", "*k_proj*", "*attention.wk*", "*attn.wk*")


def adapter_apply(
    checkpoint_path: str,
    plan: LoadedPlan | str,
    out_path: str,
    q_patterns: tuple[str, ...] = DEFAULT_Q_PATTERNS,
    k_patterns: tuple[str, ...] = DEFAULT_K_PATTERNS,
) -> list[tuple[str, str]]:
    """Patch a safetensors checkpoint, returning the (name, role) list."""
    if isinstance(plan, str):
        plan = load_plan(plan)
    if os.path.abspath(checkpoint_path) == os.path.abspath(out_path):
        raise ValueError("refusing to patch a checkpoint onto itself; pick a new output path")
    tensors = load_file(checkpoint_path)

    def role_of(name: str) -> str | None:
        is_q = any(fnmatch.fnmatch(name, pat) for pat in q_patterns)
        is_k = any(fnmatch.fnmatch(name, pat) for pat in k_patterns)
        if is_q and is_k:
            raise ValueError(f"tensor {name!r} matches both query and key patterns")
        return "q" if is_q else "k" if is_k else None

    patched: list[tuple[str, str]] = []
    out: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        role = role_of(name)
        if role is None:
            out[name] = arr
            continue
        if arr.ndim != 2:
            raise ValueError(
                f"tensor {name!r} matched {role} patterns but is not 2d: shape {arr.shape}"
            )
        factors = row_factors(plan, arr.shape[0], role)
        out[name] = (arr.astype(np.float64) * factors[:, None]).astype(arr.dtype)
        patched.append((name, role))
    if not patched:
        raise ValueError(
            f"no tensors matched the query/key patterns {list(q_patterns)} / {list(k_patterns)}"
        )
    save_file(out, out_path)
    return patched

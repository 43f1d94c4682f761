"""Sliding-window perplexity over token documents.

Windows are non-overlapping (stride equals the window size) and each window
is scored from a fresh position 0, the running-average reading of a sliding
window. Aggregation is pooled token-level: one total negative log likelihood
over every predicted token of every document, not a mean of per-document
perplexities.
"""
from __future__ import annotations

import math

import torch

from .model import TinyRopeLM


@torch.no_grad()
def document_nll(
    model: TinyRopeLM, tokens: list[int], length: int, window: int
) -> tuple[float, int]:
    """(total nll, predicted token count) for one document truncated to length."""
    if length < 1 or window < 1:
        raise ValueError(f"length and window must be positive, got {length}, {window}")
    clipped = tokens[: min(length, len(tokens))]
    total, count = 0.0, 0
    for start in range(0, len(clipped), window):
        chunk = clipped[start : start + window]
        if len(chunk) < 2:
            continue
        ids = torch.tensor(chunk, dtype=torch.long).unsqueeze(0)
        logits = model(ids)[0].double()
        logp = torch.log_softmax(logits[:-1], dim=-1)
        targets = torch.tensor(chunk[1:], dtype=torch.long)
        total += float(-logp[torch.arange(len(targets)), targets].sum())
        count += len(targets)
    return total, count


def perplexity(
    model: TinyRopeLM, documents: list[list[int]], length: int, window: int
) -> float:
    total, count = 0.0, 0
    for tokens in documents:
        nll, n = document_nll(model, tokens, length, window)
        total += nll
        count += n
    if count == 0:
        raise ValueError(
            f"no scorable tokens: every document is shorter than 2 tokens at length {length}"
        )
    return math.exp(total / count)

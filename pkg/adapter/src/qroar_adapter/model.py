"""A tiny rotary-attention language model with an HF-style checkpoint layout.

The model is deliberately small (a couple of pre-norm decoder blocks, float32,
CPU) but structurally faithful: rotary phases are applied to query/key pairs
after projection with a uniform position-interpolation factor, so band-wise
weight rescaling interacts with it exactly as with a full-size model.
Checkpoints are a directory of config.json plus model.safetensors using
llama-style tensor names (model.layers.N.self_attn.q_proj.weight, ...).
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
from safetensors.torch import load_file, save_file

from .plans import LoadedPlan, row_factors

CONFIG_NAME = "config.json"
WEIGHTS_NAME = "model.safetensors"
MODEL_TYPE = "tiny_rope_lm"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 32
    num_layers: int = 2
    num_heads: int = 2
    head_dim: int = 16
    mlp_hidden: int = 64
    base: float = 10000.0
    pairing: str = "half_split"
    train_window: int = 64
    pi_factor: float = 4.0
    model_type: str = MODEL_TYPE

    def __post_init__(self) -> None:
        if self.model_type != MODEL_TYPE:
            raise ValueError(f"unsupported model_type {self.model_type!r}")
        if self.head_dim < 2 or self.head_dim % 2:
            raise ValueError(f"head_dim must be a positive even integer, got {self.head_dim}")
        if self.num_heads * self.head_dim != self.d_model:
            raise ValueError(
                f"num_heads * head_dim must equal d_model, got "
                f"{self.num_heads} * {self.head_dim} != {self.d_model}"
            )
        if self.pairing not in ("half_split", "interleaved"):
            raise ValueError(f"unknown pairing {self.pairing!r}")
        if self.pi_factor < 1.0:
            raise ValueError(f"pi_factor must be >= 1, got {self.pi_factor}")


class RMSNorm(torch.nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = torch.nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x):
        scale = torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        return x * scale * self.weight


def _rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor, pairing: str):
    # x: (batch, heads, length, head_dim); cos/sin: (length, pairs)
    if pairing == "half_split":
        pairs = x.shape[-1] // 2
        a, b = x[..., :pairs], x[..., pairs:]
        return torch.cat((a * cos - b * sin, a * sin + b * cos), dim=-1)
    a, b = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = a * cos - b * sin
    out[..., 1::2] = a * sin + b * cos
    return out


class Attention(torch.nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d, rows = config.d_model, config.num_heads * config.head_dim
        self.q_proj = torch.nn.Linear(d, rows, bias=False)
        self.k_proj = torch.nn.Linear(d, rows, bias=False)
        self.v_proj = torch.nn.Linear(d, rows, bias=False)
        self.o_proj = torch.nn.Linear(rows, d, bias=False)
        self.config = config
        pairs = config.head_dim // 2
        freqs = config.base ** (-2.0 * np.arange(pairs) / config.head_dim)
        self.register_buffer("freqs", torch.tensor(freqs, dtype=torch.float32), persistent=False)

    def forward(self, x):
        batch, length, _ = x.shape
        cfg = self.config
        shape = (batch, length, cfg.num_heads, cfg.head_dim)
        q = self.q_proj(x).view(shape).transpose(1, 2)
        k = self.k_proj(x).view(shape).transpose(1, 2)
        v = self.v_proj(x).view(shape).transpose(1, 2)
        positions = torch.arange(length, dtype=torch.float32) / cfg.pi_factor
        angles = positions[:, None] * self.freqs[None, :]
        cos, sin = torch.cos(angles), torch.sin(angles)
        q = _rotate(q, cos, sin, cfg.pairing)
        k = _rotate(k, cos, sin, cfg.pairing)
        scores = q @ k.transpose(-1, -2) / math.sqrt(cfg.head_dim)
        mask = torch.triu(torch.full((length, length), float("-inf")), diagonal=1)
        probs = torch.softmax(scores + mask, dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(batch, length, -1)
        return self.o_proj(out)


class Mlp(torch.nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.up_proj = torch.nn.Linear(config.d_model, config.mlp_hidden, bias=False)
        self.down_proj = torch.nn.Linear(config.mlp_hidden, config.d_model, bias=False)

    def forward(self, x):
        return self.down_proj(torch.nn.functional.silu(self.up_proj(x)))


class Block(torch.nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.input_layernorm = RMSNorm(config.d_model)
        self.self_attn = Attention(config)
        self.post_attention_layernorm = RMSNorm(config.d_model)
        self.mlp = Mlp(config)

    def forward(self, x):
        x = x + self.self_attn(self.input_layernorm(x))
        return x + self.mlp(self.post_attention_layernorm(x))


class TinyRopeLM(torch.nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.embed_tokens = torch.nn.Embedding(config.vocab_size, config.d_model)
        self.layers = torch.nn.ModuleList(Block(config) for _ in range(config.num_layers))
        self.norm = RMSNorm(config.d_model)
        self.lm_head = torch.nn.Linear(config.d_model, config.vocab_size, bias=False)

    @torch.no_grad()
    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = self.embed_tokens(tokens)
        for layer in self.layers:
            x = layer(x)
        return self.lm_head(self.norm(x))

    def qk_modules(self):
        """(layer index, q_proj, k_proj) triples, the plan's patch targets."""
        for i, layer in enumerate(self.layers):
            yield i, layer.self_attn.q_proj, layer.self_attn.k_proj


def init_model(seed: int, config: ModelConfig | None = None) -> TinyRopeLM:
    """Deterministic random weights from a numpy generator, scaled for a
    stable forward pass at depth."""
    config = config or ModelConfig()
    rng = np.random.default_rng([seed, 0xAD])
    model = TinyRopeLM(config)
    std = 1.0 / math.sqrt(config.d_model)
    with torch.no_grad():
        for name, param in sorted(model.named_parameters()):
            if name.endswith("layernorm.weight") or name == "norm.weight":
                continue  # norms stay at their identity init
            values = rng.normal(0.0, std, size=tuple(param.shape))
            param.copy_(torch.tensor(values, dtype=torch.float32))
    model.eval()
    return model


def _to_checkpoint_name(name: str) -> str:
    return name if name.startswith("lm_head.") else f"model.{name}"


def _from_checkpoint_name(name: str) -> str:
    if name.startswith("model."):
        return name[len("model."):]
    return name


def save_model(model: TinyRopeLM, dir_path: str) -> None:
    os.makedirs(dir_path, exist_ok=True)
    with open(os.path.join(dir_path, CONFIG_NAME), "w", encoding="utf-8") as fh:
        json.dump(asdict(model.config), fh, indent=2, sort_keys=True)
        fh.write("\n")
    state = {
        _to_checkpoint_name(name): tensor.contiguous()
        for name, tensor in model.state_dict().items()
    }
    save_file(state, os.path.join(dir_path, WEIGHTS_NAME))


def load_model(dir_path: str) -> TinyRopeLM:
    config_path = os.path.join(dir_path, CONFIG_NAME)
    if not os.path.exists(config_path):
        raise FileNotFoundError(f"{config_path} not found; not a model directory")
    with open(config_path, "r", encoding="utf-8") as fh:
        config = ModelConfig(**json.load(fh))
    model = TinyRopeLM(config)
    state = load_file(os.path.join(dir_path, WEIGHTS_NAME))
    model.load_state_dict({_from_checkpoint_name(k): v for k, v in state.items()}, strict=True)
    model.eval()
    return model


@torch.no_grad()
def apply_plan_to_model(
    model: TinyRopeLM, plan: LoadedPlan, check_pairing: bool = True
) -> None:
    """Rescale the in-memory query/key projections, float64 math as on disk.

    check_pairing=False applies the plan under its own declared pairing even
    when that disagrees with the model; the logit self-test uses this to
    demonstrate what a wrong pairing flag does.
    """
    if check_pairing and plan.pairing != model.config.pairing:
        raise ValueError(
            f"plan pairing {plan.pairing!r} does not match the model's "
            f"{model.config.pairing!r}"
        )
    for _, q_proj, k_proj in model.qk_modules():
        for role, module in (("q", q_proj), ("k", k_proj)):
            factors = torch.tensor(
                row_factors(plan, module.weight.shape[0], role), dtype=torch.float64
            )
            module.weight.copy_((module.weight.double() * factors[:, None]).float())


@torch.no_grad()
def logit_self_test(model: TinyRopeLM, plan: LoadedPlan, seed: int = 0) -> float:
    """Max relative logit change under the plan; near zero for a symmetric
    plan whose pairing matches the model, order one when it does not.

    Restores the weights bitwise before returning.
    """
    cfg = model.config
    rng = np.random.default_rng([seed, 0x5E1F])
    tokens = torch.tensor(
        rng.integers(0, cfg.vocab_size, size=(2, min(3 * cfg.train_window, 192))),
        dtype=torch.long,
    )
    saved = [
        (module, module.weight.detach().clone())
        for _, q, k in model.qk_modules()
        for module in (q, k)
    ]
    before = model(tokens)
    try:
        apply_plan_to_model(model, plan, check_pairing=False)
        after = model(tokens)
    finally:
        for module, weight in saved:
            module.weight.copy_(weight)
    return float((after - before).abs().max() / before.abs().max())


def make_corpus(seed: int, num_docs: int = 4, doc_tokens: int = 2048,
                vocab_size: int = 256) -> list[list[int]]:
    """Deterministic token documents with mild bigram structure."""
    rng = np.random.default_rng([seed, 0xD0C5])
    docs = []
    for _ in range(num_docs):
        drift = rng.integers(1, 17)
        base = rng.integers(0, vocab_size, size=doc_tokens)
        walk = np.cumsum(rng.integers(0, int(drift) + 1, size=doc_tokens))
        docs.append(((base + walk) % vocab_size).astype(int).tolist())
    return docs


def save_corpus(documents: list[list[int]], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"version": 1, "documents": documents}, fh)
        fh.write("\n")


def load_corpus(path: str) -> list[list[int]]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or doc.get("version") != 1:
        raise ValueError(f"{path} is not a version-1 corpus file")
    documents = doc.get("documents")
    if (
        not isinstance(documents, list)
        or not documents
        or any(
            not isinstance(d, list) or not d or any(not isinstance(t, int) or t < 0 for t in d)
            for d in documents
        )
    ):
        raise ValueError("corpus documents must be non-empty lists of non-negative token ids")
    return documents

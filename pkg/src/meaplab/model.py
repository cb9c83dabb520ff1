"""Desk-scale decoder-only transformer.

Pre-norm blocks with RMSNorm, rotary positions on queries/keys, grouped-query
attention (each KV head serves n_heads/n_kv_heads query heads), a SwiGLU MLP,
and an untied output projection. No biases, no dropout. The forward pass can
capture every post-softmax attention matrix for the analysis tooling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, LengthError

RMSNORM_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    n_kv_heads: int
    d_model: int
    d_ff: int
    vocab_size: int
    max_context: int
    rope_theta: float = 10000.0

    def __post_init__(self):
        if min(self.n_layers, self.n_heads, self.n_kv_heads, self.d_model,
               self.d_ff, self.max_context) <= 0:
            raise ConfigError("all model dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"n_heads {self.n_heads} not divisible by n_kv_heads {self.n_kv_heads}")
        if self.vocab_size < 5:
            raise ConfigError(f"vocab_size {self.vocab_size} < 5 (special tokens need room)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


PRESETS: dict[str, ModelConfig] = {
    # smoke: CI-sized; desk: experiment-sized. d_ff is 2.75x d_model.
    "smoke": ModelConfig(n_layers=2, n_heads=4, n_kv_heads=2, d_model=64,
                         d_ff=176, vocab_size=260, max_context=128),
    "desk": ModelConfig(n_layers=4, n_heads=8, n_kv_heads=4, d_model=128,
                        d_ff=352, vocab_size=512, max_context=256),
}


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Source of truth for the parameter set: name -> shape, in init order."""
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    kv_width = config.n_kv_heads * config.d_head
    shapes: dict[str, tuple[int, int]] = {"embed.weight": (v, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.attn_norm.gain"] = (1, d)
        shapes[f"{p}.attn.wq"] = (d, d)
        shapes[f"{p}.attn.wk"] = (d, kv_width)
        shapes[f"{p}.attn.wv"] = (d, kv_width)
        shapes[f"{p}.attn.wo"] = (d, d)
        shapes[f"{p}.mlp_norm.gain"] = (1, d)
        shapes[f"{p}.mlp.w_gate"] = (d, f)
        shapes[f"{p}.mlp.w_up"] = (d, f)
        shapes[f"{p}.mlp.w_down"] = (f, d)
    shapes["final_norm.gain"] = (1, d)
    shapes["output.weight"] = (d, v)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return sum(r * c for r, c in parameter_shapes(config).values())


def init_parameters(config: ModelConfig, seed: int,
                    dtype=np.float32) -> dict[str, Tensor]:
    """normal(0, 0.02) everywhere except: RMSNorm gains are ones, and each
    block's output projections (attn.wo, mlp.w_down) are scaled by
    1/sqrt(2*n_layers). Deterministic given (config, seed, dtype)."""
    rng = np.random.default_rng(seed)
    resid_scale = 1.0 / math.sqrt(2.0 * config.n_layers)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("norm.gain"):
            w = np.ones(shape)
        else:
            w = rng.normal(0.0, INIT_STD, size=shape)
            if name.endswith(("attn.wo", "mlp.w_down")):
                w = w * resid_scale
        params[name] = ad.parameter(w.astype(dtype))
    return params


@dataclass
class AttentionRecord:
    """Post-softmax attention weights: one (n_heads, t, t) array per layer."""

    weights: list[np.ndarray]
    seq_len: int

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_heads(self) -> int:
        return self.weights[0].shape[0]

    def iter_heads(self) -> Iterator[np.ndarray]:
        for layer in self.weights:
            for h in range(layer.shape[0]):
                yield layer[h]


def rope_apply(q_or_k: Tensor, positions, theta: float) -> Tensor:
    """Rotary twist of feature pairs (2i, 2i+1); see autodiff.rope."""
    return ad.rope(q_or_k, positions, theta)


def _rmsnorm(x: Tensor, gain: Tensor) -> Tensor:
    ms = ad.mean_rows(ad.mul(x, x))
    return ad.mul(ad.mul(x, ad.rsqrt(ad.add(ms, RMSNORM_EPS))), gain)


def forward(config: ModelConfig, params: dict[str, Tensor], input_ids,
            capture_attention: bool = False) -> tuple[Tensor, AttentionRecord | None]:
    """Run the transformer over one token sequence.

    Returns (logits [t x vocab], attention record or None). Token ids are
    validated (the offending index is named) and t must fit max_context.
    """
    ids = np.asarray(input_ids, dtype=np.int64)
    t = ids.shape[0]
    if t == 0:
        raise LengthError("forward: empty input")
    if t > config.max_context:
        raise LengthError(f"sequence length {t} exceeds max_context {config.max_context}")

    dh = config.d_head
    group = config.n_heads // config.n_kv_heads
    positions = np.arange(t)
    scale = 1.0 / math.sqrt(dh)

    x = ad.embedding(params["embed.weight"], ids)
    mask = ad.causal_mask(t, x.data.dtype)
    record = AttentionRecord(weights=[], seq_len=t) if capture_attention else None

    for i in range(config.n_layers):
        p = f"layers.{i}"
        h = _rmsnorm(x, params[f"{p}.attn_norm.gain"])
        q = ad.matmul(h, params[f"{p}.attn.wq"])
        k = ad.matmul(h, params[f"{p}.attn.wk"])
        v = ad.matmul(h, params[f"{p}.attn.wv"])

        kv_rot = [rope_apply(ad.slice_cols(k, j * dh, (j + 1) * dh), positions,
                             config.rope_theta)
                  for j in range(config.n_kv_heads)]
        vals = [ad.slice_cols(v, j * dh, (j + 1) * dh)
                for j in range(config.n_kv_heads)]

        head_out = []
        layer_weights = np.empty((config.n_heads, t, t), dtype=x.data.dtype) \
            if capture_attention else None
        for hq in range(config.n_heads):
            kv = hq // group
            qh = rope_apply(ad.slice_cols(q, hq * dh, (hq + 1) * dh), positions,
                            config.rope_theta)
            scores = ad.add(ad.mul(ad.matmul(qh, ad.transpose(kv_rot[kv])), scale), mask)
            attn = ad.softmax_rows(scores)
            if layer_weights is not None:
                layer_weights[hq] = attn.data
            head_out.append(ad.matmul(attn, vals[kv]))
        if record is not None:
            record.weights.append(layer_weights)

        x = ad.add(x, ad.matmul(ad.concat_cols(head_out), params[f"{p}.attn.wo"]))

        h2 = _rmsnorm(x, params[f"{p}.mlp_norm.gain"])
        gate = ad.silu(ad.matmul(h2, params[f"{p}.mlp.w_gate"]))
        up = ad.matmul(h2, params[f"{p}.mlp.w_up"])
        x = ad.add(x, ad.matmul(ad.mul(gate, up), params[f"{p}.mlp.w_down"]))

    final = _rmsnorm(x, params["final_norm.gain"])
    logits = ad.matmul(final, params["output.weight"])
    return logits, record


def greedy_decode(config: ModelConfig, params: dict[str, Tensor], prompt_ids,
                  max_new: int, stop_id: int) -> np.ndarray:
    """Append argmax tokens until stop_id or max_new; ties pick the lowest id.

    The stop token, when produced, is included in the returned continuation.
    """
    prompt = np.asarray(prompt_ids, dtype=np.int64)
    if prompt.shape[0] + max_new > config.max_context:
        raise LengthError(
            f"prompt {prompt.shape[0]} + max_new {max_new} needs context "
            f"{prompt.shape[0] + max_new} > max_context {config.max_context}")
    seq = prompt.copy()
    out: list[int] = []
    with ad.no_grad():
        for _ in range(max_new):
            logits, _ = forward(config, params, seq)
            nxt = int(np.argmax(logits.data[-1]))
            out.append(nxt)
            seq = np.append(seq, nxt)
            if nxt == stop_id:
                break
    return np.asarray(out, dtype=np.int64)

"""BERT-style transformer encoder, instantiated once per input stream.

Each stream (question, visual, subtitle) gets the same architecture but
its own parameter storage. The sequence representation is the hidden
state at position 0 ([CLS]) of a configurable layer counted from the
end; padding keys are masked with -1e9 logits at every layer so they
cannot influence real positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr, ndtri

from . import diffcore as dc
from .textpipe import AssembledSequence, ConfigurationError

MASK_LOGIT = -1e9


@dataclass
class EncoderConfig:
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 64
    max_seq_len: int = 48
    vocab_size: int = 0
    use_positional: bool = True
    # k means: aggregate from the k-th layer counting from the last.
    # 0 resolves to 4 when the stack is deep enough, else to the last layer.
    aggregate_layer_offset: int = 0
    dropout: float = 0.0
    # normalize the summed embeddings before the first layer; from-scratch
    # training at small scale does not move without it
    embedding_layernorm: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.aggregate_layer_offset == 0:
            self.aggregate_layer_offset = 4 if self.n_layers >= 4 else 1
        if not 1 <= self.aggregate_layer_offset <= self.n_layers:
            raise ConfigurationError(
                f"aggregate_layer_offset={self.aggregate_layer_offset} "
                f"outside [1, {self.n_layers}]"
            )
        if self.dropout != 0.0:
            raise ConfigurationError("dropout is a config hook only; set it to 0")


@dataclass
class ModalityEncoding:
    """Aggregated sequence vector for one (example, answer) hypothesis."""

    node: dc.Node
    stream: str
    answer_index: int

    @property
    def vector(self) -> np.ndarray:
        return self.node.value


@dataclass
class EncodeResult:
    encoding: ModalityEncoding
    hidden_states: list  # embedding output plus one entry per layer
    attention: list      # per layer, weights array [B, H, n, n]


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02,
                     bound: float = 2.0) -> np.ndarray:
    """Proper truncated normal at +-bound sigma via inverse CDF."""
    lo, hi = ndtr(-bound), ndtr(bound)
    return ndtri(rng.uniform(lo, hi, size=shape)) * std


def init_encoder_params(cfg: EncoderConfig, seed: int, prefix: str = "") -> dict[str, dc.Parameter]:
    """Truncated-normal weights, zero biases, unit layernorm gains."""
    if cfg.vocab_size < 1:
        raise ConfigurationError("vocab_size must be set before init")
    rng = np.random.default_rng(seed)
    params: dict[str, dc.Parameter] = {}

    def add(name, value):
        params[prefix + name] = dc.Parameter(prefix + name, value)

    add("tok_emb", truncated_normal(rng, (cfg.vocab_size, cfg.d_model)))
    if cfg.use_positional:
        add("pos_emb", truncated_normal(rng, (cfg.max_seq_len, cfg.d_model)))
    add("seg_emb", truncated_normal(rng, (2, cfg.d_model)))
    if cfg.embedding_layernorm:
        add("emb_ln.gain", np.ones(cfg.d_model))
        add("emb_ln.bias", np.zeros(cfg.d_model))
    d, f = cfg.d_model, cfg.d_ff
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        for mat in ("wq", "wk", "wv", "wo"):
            add(p + f"attn.{mat}", truncated_normal(rng, (d, d)))
            add(p + f"attn.{mat}_b", np.zeros(d))
        add(p + "ln1.gain", np.ones(d))
        add(p + "ln1.bias", np.zeros(d))
        add(p + "ff.w1", truncated_normal(rng, (d, f)))
        add(p + "ff.b1", np.zeros(f))
        add(p + "ff.w2", truncated_normal(rng, (f, d)))
        add(p + "ff.b2", np.zeros(d))
        add(p + "ln2.gain", np.ones(d))
        add(p + "ln2.bias", np.zeros(d))
    return params


def _heads(x: dc.Node, n_heads: int) -> dc.Node:
    """[B, n, d] -> [B, H, n, d/H]"""
    return dc.split_heads(x, n_heads)


def attention_block(x: dc.Node, mask: Optional[np.ndarray], n_heads: int,
                    params: dict, prefix: str) -> tuple[dc.Node, dc.Node]:
    """Multi-head scaled dot-product self-attention over [B, n, d].

    Returns the projected output and the attention weights
    ([B, H, n, n]); key positions with mask 0 receive -1e9 logits.
    """
    b, n, d = x.value.shape
    if d % n_heads != 0:
        raise ConfigurationError(f"d_model={d} not divisible by n_heads={n_heads}")
    head_dim = d // n_heads

    def lin(name):
        return dc.linear(x, params[prefix + f"attn.{name}"].node,
                         params[prefix + f"attn.{name}_b"].node)

    q = _heads(lin("wq"), n_heads)
    k = _heads(lin("wk"), n_heads)
    v = _heads(lin("wv"), n_heads)
    scores = dc.mul(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))),
                    dc.constant(1.0 / math.sqrt(head_dim)))
    if mask is not None:
        # 0 for real keys, MASK_LOGIT for padding keys
        bias = (np.asarray(mask, dtype=np.float64) - 1.0) * -MASK_LOGIT
        scores = dc.add(scores, dc.constant(bias.reshape(b, 1, 1, n)))
    weights = dc.softmax(scores)
    ctx = dc.matmul(weights, v)
    merged = dc.merge_heads(ctx)
    out = dc.linear(merged, params[prefix + "attn.wo"].node,
                    params[prefix + "attn.wo_b"].node)
    return out, weights


def multi_head_attention(x: dc.Node, mask, n_heads: int, params: dict,
                         prefix: str = "layer0.") -> tuple[dc.Node, dc.Node]:
    """Single-sequence surface: [n, d] in, ([n, d], [H, n, n]) out."""
    n, d = x.value.shape
    batched = dc.reshape(x, (1, n, d))
    m = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(1, n)
    out, weights = attention_block(batched, m, n_heads, params, prefix)
    return dc.reshape(out, (n, d)), dc.reshape(weights, (n_heads, n, n))


def encoder_layer(x: dc.Node, mask, n_heads: int, params: dict,
                  prefix: str) -> tuple[dc.Node, dc.Node]:
    """attention -> add&norm -> feed-forward(gelu) -> add&norm"""
    attn_out, weights = attention_block(x, mask, n_heads, params, prefix)
    x = dc.layernorm(dc.add(x, attn_out),
                     params[prefix + "ln1.gain"].node, params[prefix + "ln1.bias"].node)
    h = dc.gelu(dc.linear(x, params[prefix + "ff.w1"].node, params[prefix + "ff.b1"].node))
    ff = dc.linear(h, params[prefix + "ff.w2"].node, params[prefix + "ff.b2"].node)
    x = dc.layernorm(dc.add(x, ff),
                     params[prefix + "ln2.gain"].node, params[prefix + "ln2.bias"].node)
    return x, weights


def encode_batch(cfg: EncoderConfig, params: dict, prefix: str,
                 token_ids: np.ndarray, segment_ids: np.ndarray,
                 position_ids: np.ndarray, mask: np.ndarray):
    """Run the stack over an id batch [B, n]; returns (cls [B, d],
    hidden states, per-layer attention weight arrays)."""
    n = token_ids.shape[1]
    if n > cfg.max_seq_len:
        raise ValueError(f"sequence length {n} exceeds max_seq_len={cfg.max_seq_len}")
    tables = [params[prefix + "tok_emb"].node, params[prefix + "seg_emb"].node]
    indices = [token_ids, segment_ids]
    if cfg.use_positional:
        tables.append(params[prefix + "pos_emb"].node)
        indices.append(position_ids)
    x = dc.embedding_sum(tables, indices)
    if cfg.embedding_layernorm:
        x = dc.layernorm(x, params[prefix + "emb_ln.gain"].node,
                         params[prefix + "emb_ln.bias"].node)
    hidden = [x]
    attn = []
    for i in range(cfg.n_layers):
        x, weights = encoder_layer(x, mask, cfg.n_heads, params, f"{prefix}layer{i}.")
        hidden.append(x)
        attn.append(weights.value)
    take = cfg.n_layers - cfg.aggregate_layer_offset + 1
    cls = hidden[take][:, 0]
    return cls, hidden, attn


def encode(cfg: EncoderConfig, params: dict, seq: AssembledSequence,
           prefix: str = "", answer_index: int = 0) -> EncodeResult:
    """Encode one assembled sequence to its aggregated position-0 vector."""
    ids = np.asarray([seq.token_ids])
    segs = np.asarray([seq.segment_ids])
    pos = np.asarray([seq.position_ids])
    mask = np.asarray([seq.attention_mask], dtype=np.float64)
    cls, hidden, attn = encode_batch(cfg, params, prefix, ids, segs, pos, mask)
    vector = dc.reshape(cls, (cfg.d_model,))
    return EncodeResult(
        encoding=ModalityEncoding(node=vector, stream=seq.stream, answer_index=answer_index),
        hidden_states=hidden,
        attention=[a[0] for a in attn],
    )


def pad_batch(seqs: list[AssembledSequence], pad_to: Optional[int] = None):
    """Right-pad assembled sequences to a common length.

    Returns (token_ids, segment_ids, position_ids, mask) as arrays.
    Padding uses token [PAD]=0, segment 0, position 0, mask 0.
    """
    n = pad_to if pad_to is not None else max(len(s) for s in seqs)
    b = len(seqs)
    ids = np.zeros((b, n), dtype=np.int64)
    segs = np.zeros((b, n), dtype=np.int64)
    pos = np.zeros((b, n), dtype=np.int64)
    mask = np.zeros((b, n), dtype=np.float64)
    for i, s in enumerate(seqs):
        k = len(s)
        ids[i, :k] = s.token_ids
        segs[i, :k] = s.segment_ids
        pos[i, :k] = s.position_ids
        mask[i, :k] = 1.0
    return ids, segs, pos, mask

"""Fusion operators over the per-stream aggregated vectors.

Three families:

* simple fusion: elementwise product of the stream vectors;
* transformer fusion: a trainable zero-initialized fuse slot is stacked
  with the stream vectors into a length-(n+1) sequence and run through
  encoder layers with no positional or segment signal, so the output at
  the fuse slot is order-invariant over the stream vectors;
* gated fusion: each stream vector is gated by a sigmoid computed from
  all streams, then merged by one of three variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diffcore as dc
from .encoder import encoder_layer, init_encoder_params, truncated_normal
from .textpipe import ConfigurationError

FUSION_KINDS = ("sf", "mmft", "gated-i", "gated-ii", "gated-iii")
SLOT_LABELS = ("FUSE", "Q", "V", "S")


@dataclass
class MMFTConfig:
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 1
    d_ff: int = 64
    use_skip: bool = False
    # learned per-slot type embeddings; off by default so the fuse output
    # stays invariant to the ordering of the stream vectors
    type_embeddings: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"fusion d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )


@dataclass
class FusedRepresentation:
    node: dc.Node
    answer_index: int
    fusion_kind: str

    @property
    def vector(self) -> np.ndarray:
        return self.node.value


@dataclass
class FusionAttentionRecord:
    """Per-layer attention weights over the fusion slots for one example.

    ``layers[i]`` has shape [H, k, k] with rows/columns ordered as
    ``labels`` (fuse slot first).
    """

    layers: list
    labels: tuple = SLOT_LABELS

    def head_average(self, layer: int = -1) -> np.ndarray:
        return self.layers[layer].mean(axis=0)


def init_mmft_params(cfg: MMFTConfig, seed: int, prefix: str = "mmft.",
                     n_slots: int = 4) -> dict[str, dc.Parameter]:
    """Random encoder-layer weights; the fuse vector starts at zero."""
    rng = np.random.default_rng(seed)
    params: dict[str, dc.Parameter] = {}
    params[prefix + "fuse"] = dc.Parameter(prefix + "fuse", np.zeros(cfg.d_model))
    if cfg.type_embeddings:
        params[prefix + "type_emb"] = dc.Parameter(
            prefix + "type_emb", truncated_normal(rng, (n_slots, cfg.d_model))
        )
    d, f = cfg.d_model, cfg.d_ff
    for i in range(cfg.n_layers):
        p = f"{prefix}layer{i}."
        for mat in ("wq", "wk", "wv", "wo"):
            params[p + f"attn.{mat}"] = dc.Parameter(p + f"attn.{mat}", truncated_normal(rng, (d, d)))
            params[p + f"attn.{mat}_b"] = dc.Parameter(p + f"attn.{mat}_b", np.zeros(d))
        params[p + "ln1.gain"] = dc.Parameter(p + "ln1.gain", np.ones(d))
        params[p + "ln1.bias"] = dc.Parameter(p + "ln1.bias", np.zeros(d))
        params[p + "ff.w1"] = dc.Parameter(p + "ff.w1", truncated_normal(rng, (d, f)))
        params[p + "ff.b1"] = dc.Parameter(p + "ff.b1", np.zeros(f))
        params[p + "ff.w2"] = dc.Parameter(p + "ff.w2", truncated_normal(rng, (f, d)))
        params[p + "ff.b2"] = dc.Parameter(p + "ff.b2", np.zeros(d))
        params[p + "ln2.gain"] = dc.Parameter(p + "ln2.gain", np.ones(d))
        params[p + "ln2.bias"] = dc.Parameter(p + "ln2.bias", np.zeros(d))
    return params


def init_gated_params(d_model: int, seed: int, variant: str,
                      n_streams: int = 3, prefix: str = "gate.") -> dict[str, dc.Parameter]:
    rng = np.random.default_rng(seed)
    params: dict[str, dc.Parameter] = {}
    for name in ("q", "v", "s")[:n_streams]:
        params[prefix + f"{name}.w"] = dc.Parameter(
            prefix + f"{name}.w", truncated_normal(rng, (n_streams * d_model, d_model)))
        params[prefix + f"{name}.b"] = dc.Parameter(prefix + f"{name}.b", np.zeros(d_model))
    if variant == "gated-i":
        params[prefix + "merge.w"] = dc.Parameter(
            prefix + "merge.w", truncated_normal(rng, (n_streams * d_model, d_model)))
        params[prefix + "merge.b"] = dc.Parameter(prefix + "merge.b", np.zeros(d_model))
    elif variant == "gated-iii":
        params[prefix + "merge.w"] = dc.Parameter(
            prefix + "merge.w", truncated_normal(rng, (2 * d_model, d_model)))
        params[prefix + "merge.b"] = dc.Parameter(prefix + "merge.b", np.zeros(d_model))
    return params


def _check_dims(vectors):
    dims = {v.value.shape[-1] for v in vectors}
    if len(dims) != 1:
        raise dc.DimensionError(f"fusion inputs disagree on width: {sorted(dims)}")


def simple_fusion(*vectors: dc.Node) -> dc.Node:
    """Hadamard product of all stream vectors."""
    _check_dims(vectors)
    out = vectors[0]
    for v in vectors[1:]:
        out = dc.mul(out, v)
    return out


def mmft_fuse(cfg: MMFTConfig, params: dict, vectors: list[dc.Node],
              prefix: str = "mmft.") -> tuple[dc.Node, list[FusionAttentionRecord]]:
    """Fuse stream vectors ([B, d] each) through the fusion transformer.

    Builds [fuse, v_1, ..., v_n] per batch row, applies the encoder
    layers (plus an extra residual around the second layer when
    ``use_skip``), and returns the fuse-slot output [B, d] together with
    one attention record per batch row.
    """
    _check_dims(vectors)
    b, d = vectors[0].value.shape
    fuse = dc.broadcast_to(dc.reshape(params[prefix + "fuse"].node, (1, 1, d)), (b, 1, d))
    x = dc.concat([fuse] + [dc.reshape(v, (b, 1, d)) for v in vectors], axis=1)
    if cfg.type_embeddings:
        x = dc.add(x, params[prefix + "type_emb"].node)
    layer_weights = []
    previous = None
    for i in range(cfg.n_layers):
        out, weights = encoder_layer(x, None, cfg.n_heads, params, f"{prefix}layer{i}.")
        if cfg.use_skip and i == 1 and previous is not None:
            out = dc.add(out, previous)
        layer_weights.append(weights.value)
        previous = out
        x = out
    labels = SLOT_LABELS[: len(vectors) + 1]
    records = [
        FusionAttentionRecord(layers=[w[i] for w in layer_weights], labels=labels)
        for i in range(b)
    ]
    return x[:, 0], records


def gated_fusion(variant: str, params: dict, vectors: list[dc.Node],
                 prefix: str = "gate.") -> dc.Node:
    """Gate each stream vector against all streams, then merge."""
    if variant not in ("gated-i", "gated-ii", "gated-iii"):
        raise ConfigurationError(f"unknown gated fusion variant {variant!r}")
    _check_dims(vectors)
    joint = dc.concat(vectors, axis=-1)
    gated = []
    for name, v in zip(("q", "v", "s"), vectors):
        gate = dc.sigmoid(dc.linear(joint, params[prefix + f"{name}.w"].node,
                                    params[prefix + f"{name}.b"].node))
        gated.append(dc.mul(gate, v))
    if variant == "gated-i":
        merged = dc.concat(gated, axis=-1)
        return dc.linear(merged, params[prefix + "merge.w"].node,
                         params[prefix + "merge.b"].node)
    product = simple_fusion(*gated)
    if variant == "gated-ii":
        return product
    both = dc.concat([product, simple_fusion(*vectors)], axis=-1)
    return dc.linear(both, params[prefix + "merge.w"].node,
                     params[prefix + "merge.b"].node)

"""Answer classifiers and the four-term training objective.

Each head concatenates the five per-answer vectors of one example into
a 5*d feature and applies a single linear layer to produce 5 logits.
The total loss sums a cross-entropy term per stream head plus the joint
term; a single-loss switch keeps only the joint term. Prediction uses
the joint logits alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .encoder import truncated_normal

STREAM_LOSS_KEYS = {"q": "l_q", "v": "l_vid", "s": "l_sub"}


@dataclass
class AnswerScores:
    logits: np.ndarray  # exactly 5 entries
    source: str         # Q, V, S or JOINT


@dataclass
class LossBundle:
    l_q: float
    l_vid: float
    l_sub: float
    l_joint: float
    l_total: float

    def as_dict(self) -> dict:
        return {
            "l_q": self.l_q, "l_vid": self.l_vid, "l_sub": self.l_sub,
            "l_joint": self.l_joint, "l_total": self.l_total,
        }


def init_head_params(d_model: int, names, seed: int, n_answers: int = 5) -> dict[str, dc.Parameter]:
    """One [5*d, 5] linear layer per head name, plus bias."""
    rng = np.random.default_rng(seed)
    params: dict[str, dc.Parameter] = {}
    for name in names:
        params[f"head.{name}.w"] = dc.Parameter(
            f"head.{name}.w", truncated_normal(rng, (n_answers * d_model, n_answers)))
        params[f"head.{name}.b"] = dc.Parameter(f"head.{name}.b", np.zeros(n_answers))
    return params


def _apply_head(params: dict, name: str, features: dc.Node) -> dc.Node:
    """features [B, 5, d] -> logits [B, 5] through the named head."""
    b, c, d = features.value.shape
    flat = dc.reshape(features, (b, c * d))
    return dc.linear(flat, params[f"head.{name}.w"].node, params[f"head.{name}.b"].node)


def joint_head(params: dict, fused: dc.Node) -> dc.Node:
    """Joint classifier over the concatenated per-answer fused vectors."""
    if fused.value.ndim != 3 or fused.value.shape[1] != 5:
        raise dc.DimensionError(f"joint_head expects [B, 5, d] fused features, got {fused.value.shape}")
    return _apply_head(params, "joint", fused)


def stream_head(params: dict, stream: str, encodings: dc.Node) -> dc.Node:
    """Per-stream classifier over that stream's five answer encodings."""
    if stream not in ("q", "v", "s", "single"):
        raise ValueError(f"unknown stream {stream!r}")
    if encodings.value.ndim != 3 or encodings.value.shape[1] != 5:
        raise dc.DimensionError(
            f"stream_head expects [B, 5, d] encodings, got {encodings.value.shape}")
    return _apply_head(params, stream, encodings)


def score_answers(params: dict, name: str, vectors, source: str) -> AnswerScores:
    """Five single-example d-vectors in, 5 logits out.

    Rejects a mixed bag: all five vectors must come from the same stream.
    """
    if len(vectors) != 5:
        raise ValueError(f"expected 5 per-answer vectors, got {len(vectors)}")
    streams = {getattr(v, "stream", source) for v in vectors}
    if len(streams) != 1:
        raise ValueError(f"mixed streams in one head call: {sorted(streams)}")
    nodes = [v.node if hasattr(v, "node") else v for v in vectors]
    d = nodes[0].value.shape[-1]
    features = dc.reshape(dc.concat([dc.reshape(n, (1, 1, d)) for n in nodes], axis=1),
                          (1, 5, d))
    logits = _apply_head(params, name, features)
    return AnswerScores(logits=logits.value[0].copy(), source=source)


def total_loss(stream_logits: dict[str, dc.Node], joint_logits: dc.Node,
               labels, weights=(1.0, 1.0, 1.0, 1.0),
               single_loss: bool = False) -> tuple[LossBundle, dc.Node]:
    """Cross-entropy per head; the bundle stores the effective terms.

    ``single_loss`` zeroes the stream terms so only the joint path
    trains (the stream heads drop out of the graph entirely).
    """
    labels = np.asarray(labels, dtype=np.int64)
    w_q, w_v, w_s, w_j = weights
    terms = {"l_q": 0.0, "l_vid": 0.0, "l_sub": 0.0}
    total = dc.mul(dc.cross_entropy(joint_logits, labels), dc.constant(w_j))
    l_joint = float(total.value)
    if not single_loss:
        for stream, weight in (("q", w_q), ("v", w_v), ("s", w_s)):
            if stream not in stream_logits:
                continue
            term = dc.mul(dc.cross_entropy(stream_logits[stream], labels),
                          dc.constant(weight))
            terms[STREAM_LOSS_KEYS[stream]] = float(term.value)
            total = dc.add(total, term)
    bundle = LossBundle(
        l_q=terms["l_q"], l_vid=terms["l_vid"], l_sub=terms["l_sub"],
        l_joint=l_joint,
        l_total=terms["l_q"] + terms["l_vid"] + terms["l_sub"] + l_joint,
    )
    return bundle, total


def predict(logits) -> np.ndarray:
    """Argmax over answers; ties break toward the lowest index."""
    arr = logits.value if isinstance(logits, dc.Node) else np.asarray(logits)
    if not np.isfinite(arr).all():
        raise dc.NonFiniteError("predict received non-finite logits")
    return np.argmax(arr, axis=-1)

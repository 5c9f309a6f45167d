"""Full model assembly: stream encoders, fusion, heads, checkpointing.

The three stream encoders share an architecture but never share
parameter storage; each is initialized from its own derived seed. All
five hypotheses of every example travel through the graph together
because the heads couple them through concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import diffcore as dc
from .config import RunConfig, from_json_dict, to_json_dict
from .encoder import EncoderConfig, encode_batch, init_encoder_params, pad_batch
from .fusion import (
    MMFTConfig,
    gated_fusion,
    init_gated_params,
    init_mmft_params,
    mmft_fuse,
    simple_fusion,
)
from .objective import LossBundle, init_head_params, joint_head, stream_head, total_loss
from .textpipe import ConfigurationError, QAExample, SequenceAssembler, Vocabulary

CHECKPOINT_FORMAT = 1
N_ANSWERS = 5


@dataclass
class ForwardResult:
    joint_logits: dc.Node                 # [B, 5]
    stream_logits: dict                   # stream -> Node [B, 5]
    stream_cls: dict                      # stream -> Node [B, 5, d]
    fusion_records: Optional[list] = None  # [B][5] FusionAttentionRecord (transformer fusion only)
    labels: Optional[np.ndarray] = None


def _derived_seed(seed: int, salt: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, salt])


class MMFTModel:
    """Wires assemblers, encoders, fusion, and classifier heads."""

    def __init__(self, config: RunConfig, vocab: Vocabulary):
        config.validate()
        self.config = config
        self.vocab = vocab
        self.assembler = SequenceAssembler(vocab, config.encoder.max_seq_len)
        e = config.encoder
        self.encoder_cfg = EncoderConfig(
            d_model=e.d_model, n_heads=e.n_heads, n_layers=e.n_layers, d_ff=e.d_ff,
            max_seq_len=e.max_seq_len, vocab_size=len(vocab),
            use_positional=e.use_positional,
            aggregate_layer_offset=e.aggregate_layer_offset, dropout=e.dropout,
            embedding_layernorm=e.embedding_layernorm,
        )
        self.streams = tuple(config.streams)
        self.single_mode = self.streams == ("single",)
        f = config.fusion
        self.fusion_cfg = MMFTConfig(
            d_model=e.d_model, n_heads=f.n_heads, n_layers=f.n_layers, d_ff=f.d_ff,
            use_skip=f.use_skip, type_embeddings=f.type_embeddings,
        )
        if f.kind.startswith("gated") and self.streams != ("q", "v", "s"):
            raise ConfigurationError("gated fusion is wired for exactly the q,v,s streams")
        self.params: dict[str, dc.Parameter] = {}
        self._build_params()

    def _merge(self, new: dict) -> None:
        for name, p in new.items():
            if name in self.params:
                raise ValueError(f"duplicate parameter name {name!r}")
            self.params[name] = p

    def _build_params(self) -> None:
        seed = self.config.seed
        for i, stream in enumerate(self.streams):
            self._merge(init_encoder_params(
                self.encoder_cfg, _derived_seed(seed, 1 + i), prefix=f"{stream}_bert."))
        if self.single_mode:
            self._merge(init_head_params(self.encoder_cfg.d_model, ["single"],
                                         _derived_seed(seed, 20)))
            return
        kind = self.config.fusion.kind
        if kind == "mmft":
            self._merge(init_mmft_params(self.fusion_cfg, _derived_seed(seed, 10),
                                         n_slots=len(self.streams) + 1))
        elif kind.startswith("gated"):
            self._merge(init_gated_params(self.encoder_cfg.d_model,
                                          _derived_seed(seed, 10), variant=kind))
        head_names = list(self.streams) + ["joint"]
        self._merge(init_head_params(self.encoder_cfg.d_model, head_names,
                                     _derived_seed(seed, 20)))

    # ------------------------------------------------------------------

    def _encode_stream(self, stream: str, examples: list[QAExample]):
        """Returns (flat [B*5, d], grouped [B, 5, d]) position-0 vectors."""
        seqs = [
            self.assembler.assemble(stream, ex, j, self.config.localized)
            for ex in examples for j in range(N_ANSWERS)
        ]
        ids, segs, pos, mask = pad_batch(seqs)
        cls_flat, _, _ = encode_batch(
            self.encoder_cfg, self.params, f"{stream}_bert.", ids, segs, pos, mask)
        grouped = dc.reshape(cls_flat, (len(examples), N_ANSWERS, self.encoder_cfg.d_model))
        return cls_flat, grouped

    def forward(self, examples: list[QAExample]) -> ForwardResult:
        b = len(examples)
        d = self.encoder_cfg.d_model
        labels = np.array([ex.label for ex in examples], dtype=np.int64)

        if self.single_mode:
            _, grouped = self._encode_stream("single", examples)
            logits = stream_head(self.params, "single", grouped)
            return ForwardResult(joint_logits=logits, stream_logits={},
                                 stream_cls={"single": grouped}, labels=labels)

        flat, grouped = {}, {}
        for stream in self.streams:
            flat[stream], grouped[stream] = self._encode_stream(stream, examples)

        stream_logits = {s: stream_head(self.params, s, grouped[s]) for s in self.streams}

        kind = self.config.fusion.kind
        records = None
        vectors = [flat[s] for s in self.streams]
        if kind == "sf":
            fused_flat = simple_fusion(*vectors)
        elif kind == "mmft":
            fused_flat, flat_records = mmft_fuse(self.fusion_cfg, self.params, vectors)
            records = [flat_records[i * N_ANSWERS:(i + 1) * N_ANSWERS] for i in range(b)]
        else:
            fused_flat = gated_fusion(kind, self.params, vectors)
        fused = dc.reshape(fused_flat, (b, N_ANSWERS, d))
        joint = joint_head(self.params, fused)
        return ForwardResult(joint_logits=joint, stream_logits=stream_logits,
                             stream_cls=grouped, fusion_records=records, labels=labels)

    def loss(self, examples: list[QAExample]) -> tuple[LossBundle, dc.Node, ForwardResult]:
        result = self.forward(examples)
        bundle, node = total_loss(
            result.stream_logits, result.joint_logits, result.labels,
            weights=self.config.loss_weights, single_loss=self.config.single_loss)
        return bundle, node, result

    def predict(self, examples: list[QAExample]) -> np.ndarray:
        return np.argmax(self.forward(examples).joint_logits.value, axis=-1)

    def joint_probabilities(self, examples: list[QAExample]) -> np.ndarray:
        logits = self.forward(examples).joint_logits.value
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, value in snap.items():
            self.params[name].value = value.copy()


# ---------------------------------------------------------------------------
# checkpoint format: JSON manifest + flat little-endian float64 blob


def save_checkpoint(model: MMFTModel, path: Path | str, step: int = 0) -> Path:
    """Writes ``<path>.json`` and ``<path>.bin``; returns the manifest path."""
    path = Path(path)
    names = sorted(model.params)
    entries = []
    offset = 0
    chunks = []
    for name in names:
        value = model.params[name].value
        raw = np.ascontiguousarray(value, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(value.shape), "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "dtype": "<f8",
        "config": to_json_dict(model.config),
        "vocab": model.vocab.to_dict(),
        "seed": model.config.seed,
        "step": step,
        "params": entries,
    }
    import json

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True)
    with open(path.with_suffix(".bin"), "wb") as fh:
        fh.write(b"".join(chunks))
    return path.with_suffix(".json")


def load_checkpoint(path: Path | str) -> tuple[MMFTModel, dict]:
    """Rebuild a model bit-exactly from ``<path>.json`` + ``<path>.bin``."""
    import json

    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    with open(path.with_suffix(".json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {manifest.get('format_version')}")
    config = from_json_dict(manifest["config"])
    vocab = Vocabulary.from_dict(manifest["vocab"])
    model = MMFTModel(config, vocab)
    blob = path.with_suffix(".bin").read_bytes()
    for entry in manifest["params"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in model.params:
            raise ValueError(f"checkpoint parameter {name!r} unknown to this config")
        size = int(np.prod(shape)) if shape else 1
        value = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape)
        model.params[name].value = value.copy()
    return model, manifest

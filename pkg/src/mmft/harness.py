"""Training loop, evaluation breakdowns, experiment drivers, manifests.

Everything here is deterministic given (config, seed, corpus): batch
order, splits, and permutations all derive from the run seed, so two
runs of the same triple produce bit-identical metrics.
"""

from __future__ import annotations

import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, diffcore as dc
from .config import RunConfig, apply_overrides, flatten, to_json_dict
from .fusion import FusionAttentionRecord
from .model import MMFTModel, load_checkpoint, save_checkpoint
from .objective import predict
from .synthdata import DiagnosticTag, question_family
from .textpipe import QAExample, build_vocab

EVAL_BATCH = 50


def corpus_digest(examples: list[QAExample]) -> str:
    from .synthdata import example_to_dict

    h = hashlib.sha256()
    for ex in examples:
        h.update(json.dumps(example_to_dict(ex), sort_keys=True).encode())
    return h.hexdigest()


def split_corpus(examples, val_fraction: float, seed: int):
    """Deterministic shuffle split; validation gets at least one example."""
    order = np.random.default_rng(np.random.SeedSequence([seed, 977])).permutation(len(examples))
    n_val = max(1, int(round(len(examples) * val_fraction)))
    val_idx = set(order[:n_val].tolist())
    train = [examples[i] for i in order[n_val:]]
    val = [examples[i] for i in order[:n_val]]
    return train, val


@dataclass
class EvalCell:
    n: int = 0
    correct: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.n if self.n else 0.0

    def as_dict(self) -> dict:
        return {"n": self.n, "accuracy": self.accuracy}


@dataclass
class EvalReport:
    overall: EvalCell
    families: dict            # family -> EvalCell
    modalities: dict          # V/S/BOTH/untagged -> EvalCell
    modality_clean: dict      # (modality, clean) -> EvalCell, e.g. visual full vs clean
    clean_subset: EvalCell
    stream_heads: dict        # stream -> EvalCell (standalone head accuracy)

    def recombined_overall(self) -> float:
        total = sum(c.n for c in self.families.values())
        if not total:
            return 0.0
        return sum(c.n * c.accuracy for c in self.families.values()) / total

    def to_json_dict(self) -> dict:
        return {
            "overall": self.overall.as_dict(),
            "families": {k: v.as_dict() for k, v in sorted(self.families.items())},
            "required_modality": {k: v.as_dict() for k, v in sorted(self.modalities.items())},
            "modality_clean": {
                f"{m}_{'clean' if c else 'full'}": cell.as_dict()
                for (m, c), cell in sorted(self.modality_clean.items())
            },
            "clean_subset": self.clean_subset.as_dict(),
            "stream_heads": {k: v.as_dict() for k, v in sorted(self.stream_heads.items())},
        }

    def to_text(self) -> str:
        lines = [f"overall accuracy: {self.overall.accuracy:.4f} (n={self.overall.n})", ""]
        lines.append(f"{'family':<10} {'n':>6} {'accuracy':>9}")
        for fam, cell in sorted(self.families.items()):
            lines.append(f"{fam:<10} {cell.n:>6} {cell.accuracy:>9.4f}")
        lines.append("")
        lines.append(f"{'modality':<16} {'n':>6} {'accuracy':>9}")
        for mod, cell in sorted(self.modalities.items()):
            lines.append(f"{mod:<16} {cell.n:>6} {cell.accuracy:>9.4f}")
        for (mod, clean), cell in sorted(self.modality_clean.items()):
            tag = f"{mod} ({'clean' if clean else 'full'})"
            lines.append(f"{tag:<16} {cell.n:>6} {cell.accuracy:>9.4f}")
        lines.append(f"{'clean subset':<16} {self.clean_subset.n:>6} {self.clean_subset.accuracy:>9.4f}")
        lines.append("")
        lines.append(f"{'stream head':<12} {'n':>6} {'accuracy':>9}")
        for stream, cell in sorted(self.stream_heads.items()):
            lines.append(f"{stream:<12} {cell.n:>6} {cell.accuracy:>9.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        rows = ["section,key,n,accuracy"]
        rows.append(f"overall,all,{self.overall.n},{self.overall.accuracy:.6f}")
        for fam, cell in sorted(self.families.items()):
            rows.append(f"family,{fam},{cell.n},{cell.accuracy:.6f}")
        for mod, cell in sorted(self.modalities.items()):
            rows.append(f"modality,{mod},{cell.n},{cell.accuracy:.6f}")
        for (mod, clean), cell in sorted(self.modality_clean.items()):
            rows.append(f"modality_{'clean' if clean else 'full'},{mod},{cell.n},{cell.accuracy:.6f}")
        rows.append(f"clean_subset,all,{self.clean_subset.n},{self.clean_subset.accuracy:.6f}")
        for stream, cell in sorted(self.stream_heads.items()):
            rows.append(f"stream_head,{stream},{cell.n},{cell.accuracy:.6f}")
        return "\n".join(rows) + "\n"


def _forward_predictions(model: MMFTModel, examples, batch_size=EVAL_BATCH):
    """Joint and per-stream argmax predictions, batched."""
    joint = np.zeros(len(examples), dtype=np.int64)
    streams: dict[str, np.ndarray] = {}
    for i in range(0, len(examples), batch_size):
        batch = examples[i:i + batch_size]
        result = model.forward(batch)
        joint[i:i + len(batch)] = predict(result.joint_logits)
        for s, node in result.stream_logits.items():
            streams.setdefault(s, np.zeros(len(examples), dtype=np.int64))
            streams[s][i:i + len(batch)] = predict(node)
    return joint, streams


def evaluate(model: MMFTModel, examples: list[QAExample],
             tags: Optional[list[DiagnosticTag]] = None) -> EvalReport:
    """Joint-head accuracy with family / modality / clean breakdowns,
    plus each stream head's standalone accuracy."""
    tag_by_qid = {t.qid: t for t in (tags or [])}
    joint, streams = _forward_predictions(model, examples)
    labels = np.array([ex.label for ex in examples])

    overall = EvalCell()
    families: dict[str, EvalCell] = {}
    modalities: dict[str, EvalCell] = {}
    modality_clean: dict[tuple, EvalCell] = {}
    clean_subset = EvalCell()
    untagged = 0
    for i, ex in enumerate(examples):
        hit = int(joint[i] == labels[i])
        overall.n += 1
        overall.correct += hit
        fam = question_family(ex.question)
        families.setdefault(fam, EvalCell())
        families[fam].n += 1
        families[fam].correct += hit
        tag = tag_by_qid.get(ex.qid)
        if tag is None:
            untagged += 1
            modalities.setdefault("untagged", EvalCell())
            modalities["untagged"].n += 1
            modalities["untagged"].correct += hit
            continue
        modalities.setdefault(tag.required_modality, EvalCell())
        modalities[tag.required_modality].n += 1
        modalities[tag.required_modality].correct += hit
        # the full set counts every question of that modality; the clean
        # cell keeps only those whose evidence survived generation
        full_key = (tag.required_modality, False)
        modality_clean.setdefault(full_key, EvalCell())
        modality_clean[full_key].n += 1
        modality_clean[full_key].correct += hit
        if tag.clean:
            clean_key = (tag.required_modality, True)
            modality_clean.setdefault(clean_key, EvalCell())
            modality_clean[clean_key].n += 1
            modality_clean[clean_key].correct += hit
            clean_subset.n += 1
            clean_subset.correct += hit
    if untagged and tags:
        warnings.warn(f"{untagged} examples had no diagnostic tag; counted under 'untagged'")

    stream_heads = {}
    for s, preds in streams.items():
        cell = EvalCell(n=len(examples), correct=int((preds == labels).sum()))
        stream_heads[s] = cell
    return EvalReport(overall=overall, families=families, modalities=modalities,
                      modality_clean=modality_clean, clean_subset=clean_subset,
                      stream_heads=stream_heads)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: MMFTModel
    metrics: dict           # deterministic: per-epoch losses and accuracies
    manifest: dict          # metrics plus config, hashes, wall clock
    best_checkpoint: Optional[Path]
    last_checkpoint: Optional[Path]
    aborted: bool = False


def train(config: RunConfig, examples: list[QAExample],
          tags: Optional[list[DiagnosticTag]] = None,
          out_dir: Optional[Path] = None, log=None) -> TrainResult:
    """Train with Adam over minibatches that keep all five hypotheses of
    an example together; keeps the best-validation checkpoint (ties go
    to the earlier epoch) and aborts on non-finite loss with the last
    good parameters."""
    config.validate()
    t = config.train
    started = time.time()
    train_set, val_set = split_corpus(examples, t.val_fraction, config.seed)
    vocab = build_vocab(train_set, min_count=t.min_count)
    model = MMFTModel(config, vocab)
    optimizer = dc.Adam(model.params, lr=t.lr, betas=(t.beta1, t.beta2),
                        eps=t.eps, weight_decay=t.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 31]))

    epochs_out = []
    best = {"epoch": -1, "accuracy": -1.0, "snapshot": None}
    step = 0
    warmup = max(1, t.warmup_steps)
    aborted = False
    last_good = model.snapshot()
    for epoch in range(t.epochs):
        order = rng.permutation(len(train_set))
        losses = []
        try:
            for i in range(0, len(train_set), t.batch_size):
                batch = [train_set[j] for j in order[i:i + t.batch_size]]
                step += 1
                optimizer.lr = t.lr * min(1.0, step / warmup)
                bundle, node, _ = model.loss(batch)
                dc.backward(node)
                optimizer.step()
                losses.append(bundle.as_dict())
            last_good = model.snapshot()
        except dc.NonFiniteError as err:
            model.restore(last_good)
            aborted = True
            if log:
                log(f"aborting at epoch {epoch}: {err}; restored last good parameters")
        report = evaluate(model, val_set, tags)
        mean_losses = {
            k: float(np.mean([entry[k] for entry in losses])) if losses else float("nan")
            for k in ("l_q", "l_vid", "l_sub", "l_joint", "l_total")
        }
        epoch_row = {
            "epoch": epoch,
            "train_loss": mean_losses,
            "val_accuracy": report.overall.accuracy,
            "val_stream_accuracy": {k: v.accuracy for k, v in sorted(report.stream_heads.items())},
        }
        epochs_out.append(epoch_row)
        if log:
            log(f"epoch {epoch}: loss {mean_losses['l_total']:.4f} "
                f"val {report.overall.accuracy:.4f}")
        if report.overall.accuracy > best["accuracy"]:
            best = {"epoch": epoch, "accuracy": report.overall.accuracy,
                    "snapshot": model.snapshot()}
        if aborted:
            break
        if t.early_stop_acc and report.overall.accuracy >= t.early_stop_acc:
            if log:
                log(f"early stop: validation accuracy reached {t.early_stop_acc}")
            break

    metrics = {
        "epochs": epochs_out,
        "best_epoch": best["epoch"],
        "best_val_accuracy": best["accuracy"],
        "n_train": len(train_set),
        "n_val": len(val_set),
        "vocab_size": len(vocab),
        "parameter_count": model.parameter_count(),
        "aborted": aborted,
    }
    manifest = {
        "artifact": f"mmft {__version__}",
        "kind": "train",
        "config": to_json_dict(config),
        "seed": config.seed,
        "corpus_sha256": corpus_digest(examples),
        "metrics": metrics,
        "wall_clock_sec": time.time() - started,
    }
    best_path = last_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        last_path = save_checkpoint(model, out_dir / "checkpoint_last", step=step).with_suffix("")
        if best["snapshot"] is not None:
            current = model.snapshot()
            model.restore(best["snapshot"])
            best_path = save_checkpoint(model, out_dir / "checkpoint_best", step=step).with_suffix("")
            model.restore(current)
        with open(out_dir / "metrics.json", "w") as fh:
            json.dump(metrics, fh, indent=2, sort_keys=True)
        with open(out_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
    if best["snapshot"] is not None:
        model.restore(best["snapshot"])
    return TrainResult(model=model, metrics=metrics, manifest=manifest,
                       best_checkpoint=best_path, last_checkpoint=last_path,
                       aborted=aborted)


# ---------------------------------------------------------------------------
# experiment drivers


def ablate(base_config: RunConfig, grid: list[dict], examples,
           tags=None, seeds=(0, 1, 2), out_dir: Optional[Path] = None,
           keep_models: bool = False, log=None) -> dict:
    """Train every (cell, seed) and tabulate validation accuracies.

    ``grid`` entries are {"name": ..., "overrides": {dotted: value}}.
    Failed cells are reported, not fatal. Returns the comparison table.
    """
    rows = []
    models = {}
    for cell in grid:
        name = cell["name"]
        accs = []
        status = "ok"
        for seed in seeds:
            config = apply_overrides(
                apply_overrides(RunConfig(), flatten(base_config)),
                dict(cell.get("overrides", {})))
            config.seed = int(seed)
            try:
                result = train(config, examples, tags,
                               out_dir=None, log=None)
                accs.append(result.metrics["best_val_accuracy"])
                if keep_models:
                    models[(name, seed)] = result.model
                if log:
                    log(f"cell {name!r} seed {seed}: {accs[-1]:.4f}")
            except Exception as err:  # cell failures are recorded, not raised
                status = f"failed: {type(err).__name__}: {err}"
                if log:
                    log(f"cell {name!r} seed {seed}: {status}")
                break
        row = {"name": name, "seeds": list(seeds[:len(accs)]), "accuracies": accs,
               "mean": float(np.mean(accs)) if accs else None,
               "sd": float(np.std(accs)) if accs else None,
               "status": status}
        rows.append(row)
    table = {"rows": rows, "seeds": list(seeds)}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "ablation.json", "w") as fh:
            json.dump(table, fh, indent=2, sort_keys=True)
        (out_dir / "ablation.txt").write_text(ablation_text(table))
        (out_dir / "ablation.csv").write_text(ablation_csv(table))
    if keep_models:
        table["models"] = models
    return table


def ablation_text(table: dict) -> str:
    lines = [f"{'cell':<28} {'mean':>7} {'sd':>7}  accuracies"]
    for row in table["rows"]:
        if row["mean"] is None:
            lines.append(f"{row['name']:<28} {'-':>7} {'-':>7}  {row['status']}")
        else:
            accs = " ".join(f"{a:.4f}" for a in row["accuracies"])
            lines.append(f"{row['name']:<28} {row['mean']:>7.4f} {row['sd']:>7.4f}  {accs}")
    return "\n".join(lines) + "\n"


def ablation_csv(table: dict) -> str:
    rows = ["cell,seed,accuracy,status"]
    for row in table["rows"]:
        if not row["accuracies"]:
            rows.append(f"{row['name']},,,{row['status']}")
        for seed, acc in zip(row["seeds"], row["accuracies"]):
            rows.append(f"{row['name']},{seed},{acc:.6f},{row['status']}")
    return "\n".join(rows) + "\n"


DEFAULT_ABLATION_GRID = [
    {"name": "sf single loss", "overrides": {"fusion.kind": "sf", "single_loss": True}},
    {"name": "sf full objective", "overrides": {"fusion.kind": "sf"}},
    {"name": "mmft single loss", "overrides": {"fusion.kind": "mmft", "single_loss": True}},
    {"name": "mmft L=1 H=1", "overrides": {"fusion.kind": "mmft", "fusion.n_heads": 1}},
    {"name": "mmft L=1 (default heads)", "overrides": {"fusion.kind": "mmft"}},
    {"name": "mmft L=2", "overrides": {"fusion.kind": "mmft", "fusion.n_layers": 2}},
    {"name": "mmft L=2 w/ skip",
     "overrides": {"fusion.kind": "mmft", "fusion.n_layers": 2, "fusion.use_skip": True}},
]


def shuffle_visual_tokens(examples, permutation_seed: int):
    """Copies of the examples with each concept list independently shuffled."""
    shuffled = []
    for i, ex in enumerate(examples):
        rng = np.random.default_rng(np.random.SeedSequence([permutation_seed, i]))
        order = rng.permutation(len(ex.vcpt))
        shuffled.append(QAExample(
            qid=ex.qid, question=ex.question, answers=list(ex.answers), label=ex.label,
            vcpt=[ex.vcpt[int(k)] for k in order], ts=ex.ts, sub=list(ex.sub)))
    return shuffled


def shuffle_experiment(model: MMFTModel, examples, tags=None,
                       permutation_seed: int = 0) -> dict:
    """Paired evaluation: original visual-concept order vs a per-example
    random permutation. Without positional signal in the visual encoder
    the gap must be exactly zero."""
    if "v" not in model.streams and model.streams != ("single",):
        raise ValueError("shuffle experiment needs a model with the visual stream")
    original = evaluate(model, examples, tags)
    shuffled_examples = shuffle_visual_tokens(examples, permutation_seed)
    shuffled = evaluate(model, shuffled_examples, tags)
    return {
        "original_accuracy": original.overall.accuracy,
        "shuffled_accuracy": shuffled.overall.accuracy,
        "gap": original.overall.accuracy - shuffled.overall.accuracy,
        "permutation_seed": permutation_seed,
        "n": original.overall.n,
        "v_use_positional": model.encoder_cfg.use_positional,
    }


def attention_report(model: MMFTModel, examples, tags,
                     out_dir: Optional[Path] = None,
                     export_limit: int = 25) -> dict:
    """Fuse-slot attribution: for each correctly answered clean
    single-modality question, check whether the required modality's slot
    carries the largest head-averaged fuse-row weight (the fuse slot
    itself is excluded). Optionally writes per-question JSON and PGM
    exports for the first ``export_limit`` questions."""
    if model.config.fusion.kind != "mmft":
        raise ValueError("attention report requires transformer fusion (mmft)")
    tag_by_qid = {t.qid: t for t in tags or []}
    slot_of = {label: i for i, label in
               enumerate(("FUSE",) + tuple(s.upper() for s in model.streams))}
    attributed = 0
    eligible = 0
    exported = 0
    per_question = []
    for i in range(0, len(examples), EVAL_BATCH):
        batch = examples[i:i + EVAL_BATCH]
        result = model.forward(batch)
        preds = predict(result.joint_logits)
        for b, ex in enumerate(batch):
            tag = tag_by_qid.get(ex.qid)
            records = result.fusion_records[b]
            if out_dir is not None and exported < export_limit:
                _export_question(out_dir, ex, records)
                exported += 1
            if tag is None or not tag.clean or tag.required_modality not in ("V", "S"):
                continue
            if int(preds[b]) != ex.label:
                continue
            if tag.required_modality.lower() not in model.streams:
                continue
            eligible += 1
            fuse_row = records[ex.label].head_average(-1)[0]
            candidate_slots = {s: fuse_row[k] for s, k in slot_of.items() if s != "FUSE"}
            winner = max(candidate_slots, key=candidate_slots.get)
            hit = winner == tag.required_modality
            attributed += int(hit)
            per_question.append({"qid": ex.qid, "required": tag.required_modality,
                                 "winner": winner, "hit": bool(hit)})
    fraction = attributed / eligible if eligible else 0.0
    return {
        "eligible": eligible,
        "attributed_to_required": attributed,
        "fraction": fraction,
        "slots": list(slot_of),
        "per_question": per_question,
    }


def _export_question(out_dir: Path, ex: QAExample, records: list[FusionAttentionRecord]):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for j, record in enumerate(records):
        for layer_idx in range(len(record.layers)):
            entries.append({
                "qid": ex.qid,
                "answer_index": j,
                "layer": layer_idx,
                "head_average": record.head_average(layer_idx).tolist(),
                "labels": list(record.labels),
                "per_head": record.layers[layer_idx].tolist(),
            })
        write_pgm(out_dir / f"q{ex.qid}_a{j}.pgm", record.head_average(-1))
    with open(out_dir / f"q{ex.qid}.json", "w") as fh:
        json.dump(entries, fh, indent=2)


def write_pgm(path: Path, weights: np.ndarray) -> None:
    """Plain-text PGM of an attention map, scaled to 0..255."""
    scaled = np.clip(np.rint(np.asarray(weights) * 255), 0, 255).astype(int)
    rows = "\n".join(" ".join(str(v) for v in row) for row in scaled)
    Path(path).write_text(f"P2\n{scaled.shape[1]} {scaled.shape[0]}\n255\n{rows}\n")


def read_pgm(path: Path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = np.array([int(t) for t in tokens[4:4 + w * h]]).reshape(h, w)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported max value {maxval}")
    return values


def ensemble_eval(models: list[MMFTModel], examples, tags=None) -> dict:
    """Average post-softmax joint probabilities over members, then argmax."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    shapes = {tuple(sorted((n, p.value.shape) for n, p in m.params.items())) for m in models}
    if len(shapes) > 1:
        raise ValueError("ensemble members disagree on parameter shapes")
    labels = np.array([ex.label for ex in examples])
    total_probs = np.zeros((len(examples), 5))
    member_hits = []
    for model in models:
        probs = np.zeros((len(examples), 5))
        for i in range(0, len(examples), EVAL_BATCH):
            batch = examples[i:i + EVAL_BATCH]
            probs[i:i + len(batch)] = model.joint_probabilities(batch)
        member_hits.append(float((probs.argmax(axis=-1) == labels).mean()))
        total_probs += probs
    ensemble_pred = (total_probs / len(models)).argmax(axis=-1)
    return {
        "members": len(models),
        "member_accuracies": member_hits,
        "best_member_accuracy": max(member_hits),
        "ensemble_accuracy": float((ensemble_pred == labels).mean()),
        "n": len(examples),
    }

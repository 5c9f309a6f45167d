"""Synthetic multimodal QA corpora with verifiable evidence placement.

Each example is a templated world: a scene of (attribute, object)
concepts standing in for detected visual labels, plus a short dialogue
of (speaker, fact) utterances. Questions are built so the ground truth
provably lives in a designated modality:

* visual questions ask about scene concepts,
* subtitle questions ask about dialogue facts,
* both-modality questions need a join (the dialogue names which object
  someone holds, the scene knows that object's attribute).

Candidate pools are disjoint across template domains, so a wrong-answer
token never leaks into the other modality unless the distractor knob
plants it there on purpose. Generation is reproducible: every example
draws from its own seed derived from (corpus seed, index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .textpipe import QAExample, SubtitleLine, render_subtitles, tokenize, visual_tokens

ATTRIBUTES = ["blue", "red", "green", "white", "black", "yellow",
              "purple", "orange", "brown", "pink", "gray", "golden"]
OBJECTS = ["shirt", "hat", "lamp", "table", "chair", "sofa", "book", "cup",
           "phone", "jacket", "clock", "mirror", "plate", "bag", "shoe", "vase"]
NAMES = ["marvin", "lucy", "oscar", "nina", "felix", "tara", "ruben", "ada", "piotr", "mona"]
PLACES = ["kitchen", "office", "garden", "garage", "hallway", "balcony", "basement", "studio"]
EMOTIONS = ["happy", "sad", "angry", "tired", "excited", "nervous"]
REASONS = ["party", "exam", "storm", "gift", "game", "letter"]

ALL_FAMILIES = ("what", "who", "where", "why", "how", "others")
_VISUAL_FAMILIES = ("what", "others")
_SUBTITLE_FAMILIES = ("who", "where", "how", "why")
_BOTH_FAMILIES = ("what",)

SCENE_SIZE = 4


class GenerationError(ValueError):
    """The requested corpus cannot be generated from the given spec."""


class DataFormatError(ValueError):
    """A dataset file violates the JSON-lines schema."""


@dataclass
class SynthSpec:
    n_examples: int = 1000
    n_attributes: int = 8
    n_objects: int = 12
    n_speakers: int = 6
    n_places: int = 6
    n_emotions: int = 6
    n_reasons: int = 6
    families: tuple = ALL_FAMILIES
    modality_mix: tuple = (0.4, 0.4, 0.2)  # visual, subtitle, both
    distractor_rate: float = 0.0
    evidence_rate: float = 1.0  # P(evidence present) when clean is False
    clean: bool = True
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.modality_mix) - 1.0) > 1e-9 or min(self.modality_mix) < 0:
            raise GenerationError(f"modality_mix must be a distribution, got {self.modality_mix}")
        limits = [
            ("n_attributes", self.n_attributes, len(ATTRIBUTES), SCENE_SIZE + 4),
            ("n_objects", self.n_objects, len(OBJECTS), SCENE_SIZE + 4),
            ("n_speakers", self.n_speakers, len(NAMES), 5),
            ("n_places", self.n_places, len(PLACES), 5),
            ("n_emotions", self.n_emotions, len(EMOTIONS), 5),
            ("n_reasons", self.n_reasons, len(REASONS), 5),
        ]
        for name, value, pool, minimum in limits:
            if value > pool:
                raise GenerationError(f"{name}={value} exceeds pool size {pool}")
            if value < minimum:
                raise GenerationError(
                    f"{name}={value} too small for 5 distinct answers (need >= {minimum})")
        unknown = set(self.families) - set(ALL_FAMILIES)
        if unknown:
            raise GenerationError(f"unknown question families: {sorted(unknown)}")
        if not self.families:
            raise GenerationError("families must not be empty")


@dataclass
class DiagnosticTag:
    qid: object
    required_modality: str  # V, S or BOTH
    clean: bool


def question_family(question: str) -> str:
    """Surface family from the first question word."""
    first = tokenize(question)[:1]
    if first and first[0] in ("what", "who", "where", "why", "how"):
        return first[0]
    return "others"


# ---------------------------------------------------------------------------
# world building


def _scene(rng, spec):
    """SCENE_SIZE objects with pairwise-distinct attributes."""
    objs = rng.choice(spec.n_objects, size=SCENE_SIZE, replace=False)
    attrs = rng.choice(spec.n_attributes, size=SCENE_SIZE, replace=False)
    return [(ATTRIBUTES[a], OBJECTS[o]) for a, o in zip(attrs, objs)]


def _filler_dialogue(rng, spec, speaker, n=1):
    """Chatter that never mentions places, so location answers stay unique."""
    lines = []
    for _ in range(n):
        emotion = EMOTIONS[rng.integers(0, spec.n_emotions)]
        lines.append((speaker, f"i feel {emotion}"))
    return lines


def _pick_distractors(rng, pool, exclude, k=4):
    candidates = [p for p in pool if p not in exclude]
    if len(candidates) < k:
        raise GenerationError("answer pool too small for distinct distractors")
    picks = rng.choice(len(candidates), size=k, replace=False)
    return [candidates[int(i)] for i in picks]


def _build_visual(rng, spec, family):
    scene = _scene(rng, spec)
    attr, obj = scene[rng.integers(0, SCENE_SIZE)]
    scene_attrs = {a for a, _ in scene}
    scene_objs = {o for _, o in scene}
    if family == "what":
        question = f"what color is the {obj} ?"
        answer = attr
        distractors = _pick_distractors(rng, ATTRIBUTES[: spec.n_attributes], scene_attrs)
        evidence_concept = (attr, obj)
    else:  # which-object template, reported under the others family
        question = f"which object is {attr} ?"
        answer = obj
        distractors = _pick_distractors(rng, OBJECTS[: spec.n_objects], scene_objs)
        evidence_concept = (attr, obj)
    speaker = NAMES[rng.integers(0, spec.n_speakers)]
    dialogue = _filler_dialogue(rng, spec, speaker, n=2)
    return {
        "question": question, "answer": answer, "distractors": distractors,
        "scene": scene, "dialogue": dialogue, "modality": "V",
        "evidence_concept": evidence_concept, "evidence_line": None,
        "evidence_tokens_v": set(tokenize(answer)), "evidence_tokens_s": set(),
    }


def _build_subtitle(rng, spec, family):
    scene = _scene(rng, spec)
    name = NAMES[rng.integers(0, spec.n_speakers)]
    if family == "who":
        place = PLACES[rng.integers(0, spec.n_places)]
        question = f"who is in the {place} ?"
        answer = name
        evidence_line = (name, f"i am in the {place}")
        distractors = _pick_distractors(rng, NAMES[: spec.n_speakers], {name})
    elif family == "where":
        place = PLACES[rng.integers(0, spec.n_places)]
        question = f"where is {name} ?"
        answer = place
        evidence_line = (name, f"i am in the {place}")
        distractors = _pick_distractors(rng, PLACES[: spec.n_places], {place})
    elif family == "how":
        emotion = EMOTIONS[rng.integers(0, spec.n_emotions)]
        question = f"how does {name} feel ?"
        answer = emotion
        evidence_line = (name, f"i feel very {emotion}")
        distractors = _pick_distractors(rng, EMOTIONS[: spec.n_emotions], {emotion})
    else:  # why
        emotion = EMOTIONS[rng.integers(0, spec.n_emotions)]
        reason = REASONS[rng.integers(0, spec.n_reasons)]
        question = f"why is {name} {emotion} ?"
        answer = reason
        evidence_line = (name, f"i am {emotion} because of the {reason}")
        distractors = _pick_distractors(rng, REASONS[: spec.n_reasons], {reason})
    dialogue = [evidence_line]
    if family != "how":
        dialogue.extend(_filler_dialogue(rng, spec, name, n=1))
    return {
        "question": question, "answer": answer, "distractors": distractors,
        "scene": scene, "dialogue": dialogue, "modality": "S",
        "evidence_concept": None, "evidence_line": evidence_line,
        "evidence_tokens_v": set(), "evidence_tokens_s": set(tokenize(answer)),
    }


def _build_both(rng, spec, family):
    """The dialogue says who holds which object; the scene knows colors."""
    scene = _scene(rng, spec)
    held_idx, other_idx = rng.choice(SCENE_SIZE, size=2, replace=False)
    attr, obj = scene[held_idx]
    _, other_obj = scene[other_idx]
    holder, other_name = (NAMES[int(i)] for i in rng.choice(spec.n_speakers, size=2, replace=False))
    question = f"what color is the object {holder} holds ?"
    answer = attr
    # the three remaining scene attributes keep a scene-only reader at chance
    distractors = [a for a, _ in scene if a != attr]
    distractors += _pick_distractors(rng, ATTRIBUTES[: spec.n_attributes],
                                     {a for a, _ in scene}, k=1)
    dialogue = [(holder, f"i hold the {obj}"), (other_name, f"i hold the {other_obj}")]
    return {
        "question": question, "answer": answer, "distractors": distractors,
        "scene": scene, "dialogue": dialogue, "modality": "BOTH",
        "evidence_concept": (attr, obj), "evidence_line": dialogue[0],
        "evidence_tokens_v": set(tokenize(answer)), "evidence_tokens_s": set(tokenize(obj)),
    }


def _plant_distractors(rng, spec, draft):
    """With probability distractor_rate per wrong answer (two at most),
    plant that answer's token in the modality that should not carry it."""
    planted = 0
    for wrong in draft["distractors"]:
        if planted >= 2 or rng.random() >= spec.distractor_rate:
            continue
        planted += 1
        if draft["modality"] == "V":
            speaker = draft["dialogue"][0][0]
            draft["dialogue"].append((speaker, f"i like {wrong}"))
        else:
            attr = ATTRIBUTES[rng.integers(0, spec.n_attributes)]
            draft["scene"].append((attr, wrong))


def _withhold_evidence(draft):
    if draft["modality"] in ("V", "BOTH") and draft["evidence_concept"] is not None:
        draft["scene"] = [c for c in draft["scene"] if c != draft["evidence_concept"]]
    if draft["modality"] == "S" and draft["evidence_line"] is not None:
        draft["dialogue"] = [u for u in draft["dialogue"] if u != draft["evidence_line"]]


_BUILDERS = {"V": (_build_visual, _VISUAL_FAMILIES),
             "S": (_build_subtitle, _SUBTITLE_FAMILIES),
             "BOTH": (_build_both, _BOTH_FAMILIES)}


def generate(spec: SynthSpec) -> tuple[list[QAExample], list[DiagnosticTag]]:
    """Build the corpus and its sidecar diagnostic tags."""
    examples: list[QAExample] = []
    tags: list[DiagnosticTag] = []
    mix = np.asarray(spec.modality_mix)
    for index in range(spec.n_examples):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
        modality = ("V", "S", "BOTH")[int(rng.choice(3, p=mix))]
        builder, allowed = _BUILDERS[modality]
        families = [f for f in allowed if f in spec.families]
        if not families:
            raise GenerationError(
                f"no allowed family for modality {modality} within {spec.families}")
        draft = builder(rng, spec, families[int(rng.integers(0, len(families)))])
        if spec.distractor_rate > 0:
            _plant_distractors(rng, spec, draft)
        evidence_present = True
        if not spec.clean and rng.random() >= spec.evidence_rate:
            _withhold_evidence(draft)
            evidence_present = False

        answers = [draft["answer"]] + list(draft["distractors"])
        if len(set(answers)) != 5:
            raise GenerationError(f"example {index}: candidate answers not distinct: {answers}")
        order = rng.permutation(5)
        answers = [answers[int(k)] for k in order]
        label = int(np.where(order == 0)[0][0])

        sub = [SubtitleLine(speaker, text, float(t), float(t + 1))
               for t, (speaker, text) in enumerate(draft["dialogue"])]
        example = QAExample(
            qid=index,
            question=draft["question"],
            answers=answers,
            label=label,
            vcpt=[f"{a} {o}" for a, o in draft["scene"]],
            ts=(0.0, float(max(1, len(sub)))),
            sub=sub,
        )
        examples.append(example)
        tags.append(DiagnosticTag(
            qid=index,
            required_modality=modality,
            clean=evidence_present and _evidence_check(example, draft),
        ))
    return examples, tags


def _evidence_check(example: QAExample, draft) -> bool:
    """Verify the evidence tokens actually appear in the assembled streams."""
    v_tokens = set(visual_tokens(example, localized=False))
    s_tokens = set(render_subtitles(example, localized=False))
    return (draft["evidence_tokens_v"] <= v_tokens
            and draft["evidence_tokens_s"] <= s_tokens)


# ---------------------------------------------------------------------------
# string-match oracle


def string_match_predict(ex: QAExample, modality: str) -> int:
    """Pick the candidate whose tokens best match one modality's tokens.

    Ties (including the no-evidence case) break toward the lowest index,
    like the model's own argmax.
    """
    if modality == "V":
        tokens = set(visual_tokens(ex, localized=False))
    elif modality == "S":
        tokens = set(render_subtitles(ex, localized=False))
    else:
        raise ValueError(f"modality must be V or S, got {modality!r}")
    scores = []
    for answer in ex.answers:
        parts = tokenize(answer)
        scores.append(sum(t in tokens for t in parts) / len(parts) if parts else 0.0)
    return int(np.argmax(scores))


# ---------------------------------------------------------------------------
# JSON-lines dataset interface


def example_to_dict(ex: QAExample) -> dict:
    return {
        "qid": ex.qid,
        "q": ex.question,
        "a0": ex.answers[0], "a1": ex.answers[1], "a2": ex.answers[2],
        "a3": ex.answers[3], "a4": ex.answers[4],
        "answer_idx": ex.label,
        "ts": list(ex.ts) if ex.ts is not None else None,
        "vcpt": list(ex.vcpt),
        "sub": [{"speaker": u.speaker, "text": u.text, "start": u.start, "end": u.end}
                for u in ex.sub],
    }


def write_jsonl(examples, path) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_dict(ex)) + "\n")


def write_tags(tags, path) -> None:
    with open(path, "w") as fh:
        for tag in tags:
            fh.write(json.dumps({"qid": tag.qid, "required_modality": tag.required_modality,
                                 "clean": tag.clean}) + "\n")


def read_tags(path) -> list[DiagnosticTag]:
    tags = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                tags.append(DiagnosticTag(qid=obj["qid"],
                                          required_modality=obj["required_modality"],
                                          clean=bool(obj["clean"])))
            except (json.JSONDecodeError, KeyError) as err:
                raise DataFormatError(f"{path}: line {lineno}: {err}") from None
    return tags


def _parse_example(obj: dict, lineno: int) -> QAExample:
    required = ["qid", "q", "a0", "a1", "a2", "a3", "a4", "answer_idx", "ts", "vcpt", "sub"]
    missing = [k for k in required if k not in obj]
    if missing:
        raise DataFormatError(f"line {lineno}: missing fields {missing}")
    label = obj["answer_idx"]
    if not isinstance(label, int) or not 0 <= label < 5:
        raise DataFormatError(f"line {lineno}: answer_idx {label!r} outside [0, 5)")
    ts = obj["ts"]
    if ts is not None:
        if (not isinstance(ts, list)) or len(ts) != 2:
            raise DataFormatError(f"line {lineno}: ts must be [start, end] or null")
        if ts[0] > ts[1]:
            raise DataFormatError(f"line {lineno}: ts start {ts[0]} > end {ts[1]}")
    vcpt = obj["vcpt"]
    if not isinstance(vcpt, list) or any(not isinstance(c, str) for c in vcpt):
        raise DataFormatError(f"line {lineno}: vcpt must be a list of strings")
    seen = set()
    unique_vcpt = []
    for concept in vcpt:  # only unique attribute-object pairs are kept
        if concept not in seen:
            seen.add(concept)
            unique_vcpt.append(concept)
    sub = []
    if not isinstance(obj["sub"], list):
        raise DataFormatError(f"line {lineno}: sub must be a list")
    for u in obj["sub"]:
        try:
            sub.append(SubtitleLine(speaker=str(u["speaker"]), text=str(u["text"]),
                                    start=float(u["start"]), end=float(u["end"])))
        except (KeyError, TypeError, ValueError) as err:
            raise DataFormatError(f"line {lineno}: bad subtitle entry: {err}") from None
    answers = [str(obj[f"a{k}"]) for k in range(5)]
    try:
        return QAExample(qid=obj["qid"], question=str(obj["q"]), answers=answers,
                         label=label, vcpt=unique_vcpt,
                         ts=tuple(ts) if ts is not None else None, sub=sub)
    except ValueError as err:
        raise DataFormatError(f"line {lineno}: {err}") from None


def ingest_tvqa(path, fail_fast: bool = True) -> tuple[list[QAExample], list[str]]:
    """Read a JSON-lines dataset; returns (examples, per-line errors).

    With ``fail_fast`` the first malformed line raises; otherwise bad
    lines are skipped and reported.
    """
    examples: list[QAExample] = []
    errors: list[str] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as err:
                    raise DataFormatError(f"line {lineno}: not valid JSON: {err}") from None
                if not isinstance(obj, dict):
                    raise DataFormatError(f"line {lineno}: expected a JSON object")
                examples.append(_parse_example(obj, lineno))
            except DataFormatError as err:
                if fail_fast:
                    raise
                errors.append(str(err))
    return examples, errors

"""Tokenization, vocabulary, and per-hypothesis sequence assembly.

Every question pairs with each of its five candidate answers to form a
hypothesis, and each stream gets its own token layout:

* question stream:            [CLS] Q [SEP] A_j
* visual stream, localized:   [CLS] V . Q [SEP] A_j
* visual stream, full-length: [CLS] Q [SEP] A_j . V
* subtitle stream mirrors the visual stream with rendered dialogue
* single combined stream:     [CLS] V . S . Q [SEP] A_j

The "." between context and question is a reserved separator token, not
punctuation. Truncation drops context tokens from the end first, then
question tokens, and never touches the answer or structural tokens.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

PAD, UNK, CLS, SEP, DOT = 0, 1, 2, 3, 4
RESERVED_TOKENS = {"[PAD]": PAD, "[UNK]": UNK, "[CLS]": CLS, "[SEP]": SEP, ".": DOT}

_TOKEN_RE = re.compile(r"[\w']+|[^\w\s]")


class ConfigurationError(ValueError):
    """A request that the active configuration cannot satisfy."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split punctuation off as separate tokens, split on space."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Token to id map with fixed reserved ids; unknown tokens map to [UNK]."""

    def __init__(self, token_to_id: Optional[dict[str, int]] = None):
        self._map = dict(RESERVED_TOKENS)
        if token_to_id:
            for token, idx in token_to_id.items():
                if token in RESERVED_TOKENS:
                    if idx != RESERVED_TOKENS[token]:
                        raise ConfigurationError(f"reserved token {token!r} reassigned to {idx}")
                    continue
                if idx < len(RESERVED_TOKENS):
                    raise ConfigurationError(f"token {token!r} assigned reserved id {idx}")
                self._map[token] = idx

    def lookup(self, token: str) -> int:
        return self._map.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self._map.get(t, UNK) for t in tokens]

    def __len__(self) -> int:
        return max(self._map.values()) + 1

    def __contains__(self, token: str) -> bool:
        return token in self._map

    def to_dict(self) -> dict[str, int]:
        return dict(self._map)

    @classmethod
    def from_dict(cls, mapping: dict[str, int]) -> "Vocabulary":
        return cls(mapping)


@dataclass(frozen=True)
class SubtitleLine:
    speaker: str
    text: str
    start: float
    end: float


@dataclass
class QAExample:
    """One sample: visual concepts, optional time window, dialogue,
    question, five candidate answers, and the correct index."""

    qid: object
    question: str
    answers: Sequence[str]
    label: int
    vcpt: list[str] = field(default_factory=list)
    ts: Optional[tuple[float, float]] = None
    sub: list[SubtitleLine] = field(default_factory=list)

    def __post_init__(self):
        if len(self.answers) != 5:
            raise ValueError(f"example {self.qid}: expected 5 answers, got {len(self.answers)}")
        if not 0 <= self.label < 5:
            raise ValueError(f"example {self.qid}: label {self.label} outside [0, 5)")
        if self.ts is not None:
            start, end = self.ts
            if start > end:
                raise ValueError(f"example {self.qid}: ts start {start} > end {end}")


@dataclass
class AssembledSequence:
    token_ids: list[int]
    segment_ids: list[int]
    position_ids: list[int]
    attention_mask: list[int]
    stream: str

    def __len__(self) -> int:
        return len(self.token_ids)


def example_tokens(ex: QAExample) -> list[str]:
    """All tokens the assemblers may emit for one example, including the
    ":" inserted when dialogue is rendered."""
    out = tokenize(ex.question)
    for answer in ex.answers:
        out.extend(tokenize(answer))
    for concept in ex.vcpt:
        out.extend(tokenize(concept))
    for line in ex.sub:
        out.extend(tokenize(line.speaker))
        out.append(":")
        out.extend(tokenize(line.text))
    return out


def build_vocab(corpus: Iterable[QAExample], min_count: int = 1) -> Vocabulary:
    """Count tokens over a corpus and assign ids above the reserved range,
    ordered by (count desc, token asc) so two builds agree exactly."""
    counts: Counter[str] = Counter()
    n = 0
    for ex in corpus:
        n += 1
        counts.update(example_tokens(ex))
    if n == 0:
        raise ValueError("build_vocab: empty corpus")
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count and t not in RESERVED_TOKENS),
        key=lambda t: (-counts[t], t),
    )
    base = len(RESERVED_TOKENS)
    return Vocabulary({t: base + i for i, t in enumerate(kept)})


def render_subtitles(ex: QAExample, localized: bool) -> list[str]:
    """Dialogue as "speaker : utterance" token runs in temporal order.

    Localized keeps only utterances overlapping the example's window.
    """
    lines = ex.sub
    if localized:
        if ex.ts is None:
            raise ConfigurationError(f"example {ex.qid}: localized assembly without a time window")
        start, end = ex.ts
        lines = [u for u in lines if u.start <= end and u.end >= start]
    tokens: list[str] = []
    for line in sorted(lines, key=lambda u: u.start):
        tokens.extend(tokenize(line.speaker))
        tokens.append(":")
        tokens.extend(tokenize(line.text))
    return tokens


def visual_tokens(ex: QAExample, localized: bool) -> list[str]:
    # Concepts carry no per-frame times in the wire schema, so the time
    # window cannot narrow them; localized only enforces that a window exists.
    if localized and ex.ts is None:
        raise ConfigurationError(f"example {ex.qid}: localized assembly without a time window")
    tokens: list[str] = []
    for concept in ex.vcpt:
        tokens.extend(tokenize(concept))
    return tokens


# region kinds, in truncation priority: context drops first, then question
_CONTEXT, _QUESTION, _ANSWER, _FIXED = "context", "question", "answer", "fixed"


class SequenceAssembler:
    """Builds per-hypothesis sequences for a fixed vocabulary and length cap.

    Assembly is a pure function of (example, answer index, stream,
    localized flag), so results are memoized per example; examples are
    treated as immutable once assembled.
    """

    def __init__(self, vocab: Vocabulary, max_seq_len: int):
        self.vocab = vocab
        self.max_seq_len = max_seq_len
        self._cache: dict = {}
        self._pinned: dict = {}  # keeps cached examples alive so ids stay unique

    def _finish(self, regions: list[tuple[str, list[int]]], stream: str) -> AssembledSequence:
        total = sum(len(toks) for _, toks in regions)
        overflow = total - self.max_seq_len
        if overflow > 0:
            for kind in (_CONTEXT, _QUESTION):
                if overflow <= 0:
                    break
                # walk regions back to front so later context drops first
                for tag, toks in reversed(regions):
                    if tag != kind:
                        continue
                    drop = min(overflow, len(toks))
                    if drop:
                        del toks[len(toks) - drop:]
                        overflow -= drop
                    if overflow <= 0:
                        break
        if overflow > 0:
            raise ValueError(
                f"sequence cannot fit in max_seq_len={self.max_seq_len}: "
                "answer and structural tokens alone overflow"
            )
        token_ids: list[int] = []
        for _, toks in regions:
            token_ids.extend(toks)
        sep_at = token_ids.index(SEP)
        segment_ids = [0 if i <= sep_at else 1 for i in range(len(token_ids))]
        return AssembledSequence(
            token_ids=token_ids,
            segment_ids=segment_ids,
            position_ids=list(range(len(token_ids))),
            attention_mask=[1] * len(token_ids),
            stream=stream,
        )

    def _ids(self, tokens: list[str]) -> list[int]:
        return self.vocab.encode(tokens)

    def assemble_q(self, ex: QAExample, j: int) -> AssembledSequence:
        """[CLS] Q [SEP] A_j"""
        regions = [
            (_FIXED, [CLS]),
            (_QUESTION, self._ids(tokenize(ex.question))),
            (_FIXED, [SEP]),
            (_ANSWER, self._ids(tokenize(ex.answers[j]))),
        ]
        return self._finish(regions, "Q")

    def assemble_v(self, ex: QAExample, j: int, localized: bool) -> AssembledSequence:
        context = self._ids(visual_tokens(ex, localized))
        return self._finish(self._context_layout(ex, j, context, localized), "V")

    def assemble_s(self, ex: QAExample, j: int, localized: bool) -> AssembledSequence:
        context = self._ids(render_subtitles(ex, localized))
        return self._finish(self._context_layout(ex, j, context, localized), "S")

    def _context_layout(self, ex, j, context, localized):
        question = self._ids(tokenize(ex.question))
        answer = self._ids(tokenize(ex.answers[j]))
        if localized:
            # [CLS] context . Q [SEP] A_j
            return [
                (_FIXED, [CLS]),
                (_CONTEXT, context),
                (_FIXED, [DOT]),
                (_QUESTION, question),
                (_FIXED, [SEP]),
                (_ANSWER, answer),
            ]
        # [CLS] Q [SEP] A_j . context
        return [
            (_FIXED, [CLS]),
            (_QUESTION, question),
            (_FIXED, [SEP]),
            (_ANSWER, answer),
            (_FIXED, [DOT]),
            (_CONTEXT, context),
        ]

    def assemble_single(self, ex: QAExample, j: int) -> AssembledSequence:
        """[CLS] V . S . Q [SEP] A_j for the one-encoder baseline."""
        regions = [
            (_FIXED, [CLS]),
            (_CONTEXT, self._ids(visual_tokens(ex, localized=False))),
            (_FIXED, [DOT]),
            (_CONTEXT, self._ids(render_subtitles(ex, localized=False))),
            (_FIXED, [DOT]),
            (_QUESTION, self._ids(tokenize(ex.question))),
            (_FIXED, [SEP]),
            (_ANSWER, self._ids(tokenize(ex.answers[j]))),
        ]
        return self._finish(regions, "SINGLE")

    def assemble(self, stream: str, ex: QAExample, j: int, localized: bool) -> AssembledSequence:
        key = (id(ex), stream, j, localized)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        if stream == "q":
            seq = self.assemble_q(ex, j)
        elif stream == "v":
            seq = self.assemble_v(ex, j, localized)
        elif stream == "s":
            seq = self.assemble_s(ex, j, localized)
        elif stream == "single":
            seq = self.assemble_single(ex, j)
        else:
            raise ConfigurationError(f"unknown stream {stream!r}")
        self._cache[key] = seq
        self._pinned[id(ex)] = ex
        return seq

"""Data model, tokenization, corpus/embedding ingestion and a synthetic corpus generator."""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np


class CorpusFormatError(ValueError):
    """A corpus, embedding or prediction file violates its expected format."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class TagLabel(Enum):
    """Per-token tag. Label order is the canonical tie-break order for decoding."""

    ACTION = 0
    OBJECT = 1
    NONE = 2

    @classmethod
    def from_string(cls, s: str) -> "TagLabel":
        try:
            return cls[s.strip().upper()]
        except KeyError:
            raise KeyError(f"unknown tag {s!r}") from None


N_LABELS = len(TagLabel)

# Proxy tag names (weak supervision from a parser) map onto the canonical labels.
PROXY_TAG_MAP = {
    "VERB": TagLabel.ACTION,
    "OBJ": TagLabel.OBJECT,
    "NONE": TagLabel.NONE,
    "ACTION": TagLabel.ACTION,
    "OBJECT": TagLabel.OBJECT,
}


@dataclass(frozen=True)
class Utterance:
    """A tokenized text with character offsets back into the original string."""

    id: str
    text: str
    tokens: tuple[str, ...]
    char_offsets: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "char_offsets", tuple(tuple(o) for o in self.char_offsets))
        if len(self.tokens) != len(self.char_offsets):
            raise ValueError("tokens and char_offsets must have equal length")
        for tok, (start, end) in zip(self.tokens, self.char_offsets):
            if not tok:
                raise ValueError("tokens must be non-empty")
            if not (0 <= start < end <= len(self.text)):
                raise ValueError(f"offset ({start}, {end}) out of range for text of length {len(self.text)}")
            if self.text[start:end] != tok:
                raise ValueError(f"offset ({start}, {end}) does not reproduce token {tok!r}")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Span:
    """A contiguous token range carrying an ACTION or OBJECT label."""

    start: int
    end: int  # exclusive
    label: TagLabel
    surface: str

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"invalid span bounds ({self.start}, {self.end})")
        if self.label not in (TagLabel.ACTION, TagLabel.OBJECT):
            raise ValueError("span label must be ACTION or OBJECT")

    @classmethod
    def from_tokens(cls, tokens: Sequence[str], start: int, end: int, label: TagLabel) -> "Span":
        return cls(start, end, label, " ".join(tokens[start:end]))


class IntentSource(Enum):
    W_DIST = "w_dist"
    MLP = "mlp"


@dataclass(frozen=True)
class Intent:
    """A matched action/object span pair. ``source`` is None for gold annotations."""

    action: Span
    object: Span
    score: float = 1.0
    source: IntentSource | None = None

    def __post_init__(self):
        if self.action.label is not TagLabel.ACTION:
            raise ValueError("intent action span must be labeled ACTION")
        if self.object.label is not TagLabel.OBJECT:
            raise ValueError("intent object span must be labeled OBJECT")

    @property
    def surface(self) -> str:
        return f"{self.action.surface} {self.object.surface}"


@dataclass(frozen=True)
class TaggedUtterance:
    utterance: Utterance
    tags: tuple[TagLabel, ...]
    gold_intents: tuple[Intent, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tags", tuple(self.tags))
        object.__setattr__(self, "gold_intents", tuple(self.gold_intents))
        if len(self.tags) != len(self.utterance.tokens):
            raise ValueError(
                f"{len(self.tags)} tags for {len(self.utterance.tokens)} tokens in utterance {self.utterance.id!r}"
            )


@dataclass(frozen=True)
class ExistenceExample:
    utterance: Utterance
    has_intent: bool


# --------------------------------------------------------------------------
# Tokenization
# --------------------------------------------------------------------------

# A token is a digit run with punctuation sandwiched between digits ("10:30",
# "3.5"), a run of word characters, or a single punctuation character.
_TOKEN_RE = re.compile(r"\d+(?:[^\w\s]\d+)+|\w+|[^\w\s]")


def tokenize(text: str, uid: str | None = None) -> Utterance:
    """Split ``text`` on whitespace with punctuation as separate tokens.

    Punctuation between digits stays inside the token, so "10:30" survives
    whole. Original casing and character offsets are preserved; callers
    lowercase for embedding lookup. Empty input yields an empty token list.
    """
    tokens = []
    offsets = []
    for m in _TOKEN_RE.finditer(text):
        tokens.append(m.group())
        offsets.append((m.start(), m.end()))
    if uid is None:
        uid = hashlib.sha1(text.encode("utf-8")).hexdigest()[:12]
    return Utterance(id=uid, text=text, tokens=tuple(tokens), char_offsets=tuple(offsets))


def utterance_from_tokens(tokens: Sequence[str], uid: str) -> Utterance:
    """Build an Utterance from a pre-tokenized sequence (text is the space join)."""
    text = " ".join(tokens)
    offsets = []
    pos = 0
    for tok in tokens:
        offsets.append((pos, pos + len(tok)))
        pos += len(tok) + 1
    return Utterance(id=uid, text=text, tokens=tuple(tokens), char_offsets=tuple(offsets))


def match_phrases(tokens: Sequence[str], phrases: Iterable[str]) -> list[tuple[int, int]]:
    """Find case-insensitive occurrences of multi-word phrases in a token list.

    Returns (start, end) token index pairs sorted by start.
    """
    lowered = [t.lower() for t in tokens]
    phrase_tokens = [tuple(p.lower().split()) for p in phrases]
    hits = []
    for i in range(len(lowered)):
        for ptoks in phrase_tokens:
            if ptoks and tuple(lowered[i : i + len(ptoks)]) == ptoks:
                hits.append((i, i + len(ptoks)))
    return sorted(set(hits))


# --------------------------------------------------------------------------
# Embeddings
# --------------------------------------------------------------------------


class UnkPolicy(Enum):
    ZERO = "zero"
    HASHED_RANDOM = "hashed_random"


def _hashed_unit_vector(word: str, dim: int) -> np.ndarray:
    # Stable across processes: seed from a digest, not the builtin hash.
    seed = int.from_bytes(hashlib.sha256(word.encode("utf-8")).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    norm = np.linalg.norm(v)
    return (v / norm).astype(np.float32)


@dataclass(frozen=True)
class EmbeddingTable:
    """Word vector table with a total, deterministic lookup.

    Unknown words resolve via ``unk_policy``: ZERO yields the zero vector,
    HASHED_RANDOM yields a stable unit-norm vector seeded by the word itself
    so distinct unknown words do not collapse.
    """

    dimension: int
    entries: Mapping[str, np.ndarray] = field(default_factory=dict)
    unk_policy: UnkPolicy = UnkPolicy.HASHED_RANDOM

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        for word, vec in self.entries.items():
            if len(vec) != self.dimension:
                raise ValueError(f"vector for {word!r} has length {len(vec)}, expected {self.dimension}")

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def lookup(self, word: str) -> np.ndarray:
        vec = self.entries.get(word)
        if vec is not None:
            return np.asarray(vec, dtype=np.float32)
        if self.unk_policy is UnkPolicy.ZERO:
            return np.zeros(self.dimension, dtype=np.float32)
        return _hashed_unit_vector(word, self.dimension)

    def materialized(self, words: Iterable[str]) -> "EmbeddingTable":
        """A table whose entries also cover ``words``, resolved via this table.

        Useful with hashed-random tables: consumers that distinguish known
        from unknown words (the semantic similarity metric skips unknowns)
        then see a concrete vocabulary.
        """
        entries = {w: self.lookup(w) for w in set(words)}
        entries.update(self.entries)
        return EmbeddingTable(dimension=self.dimension, entries=entries, unk_policy=self.unk_policy)


def load_embeddings(path, unk_policy: UnkPolicy = UnkPolicy.HASHED_RANDOM) -> EmbeddingTable:
    """Read a text vector file: one "word v1 v2 ... vd" entry per line, no header.

    The dimension is inferred from the first line; later lines with a
    different width raise CorpusFormatError naming the offending line.
    Duplicate words keep their first occurrence.
    """
    entries: dict[str, np.ndarray] = {}
    dimension = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            word, values = parts[0], parts[1:]
            if dimension is None:
                if not values:
                    raise CorpusFormatError("first entry has no vector values", path, lineno)
                dimension = len(values)
            if len(values) != dimension:
                raise CorpusFormatError(
                    f"expected {dimension} values, got {len(values)}", path, lineno
                )
            try:
                vec = np.array([float(v) for v in values], dtype=np.float32)
            except ValueError:
                raise CorpusFormatError("non-numeric vector value", path, lineno) from None
            if word not in entries:
                entries[word] = vec
    if dimension is None:
        raise CorpusFormatError("embedding file is empty", path)
    return EmbeddingTable(dimension=dimension, entries=entries, unk_policy=unk_policy)


# --------------------------------------------------------------------------
# Vocabulary
# --------------------------------------------------------------------------

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


@dataclass(frozen=True)
class Vocabulary:
    """Word and character id maps with reserved PAD (0) and UNK (1) entries."""

    word_to_id: Mapping[str, int]
    char_to_id: Mapping[str, int]

    @classmethod
    def build(cls, utterances: Iterable[Utterance], extra_words: Iterable[str] = ()) -> "Vocabulary":
        """Vocabulary over the corpus tokens plus ``extra_words``.

        Passing the embedding table's entry words keeps frozen pretrained
        vectors addressable for words never seen in training, mirroring how
        a pretrained vector file covers unseen test-time words.
        """
        words = set()
        chars = set()
        for utt in utterances:
            for tok in utt.tokens:
                words.add(tok.lower())
                chars.update(tok)
        for w in extra_words:
            words.add(w.lower())
            chars.update(w)
        word_to_id = {PAD_TOKEN: 0, UNK_TOKEN: 1}
        for w in sorted(words):
            word_to_id.setdefault(w, len(word_to_id))
        char_to_id = {PAD_TOKEN: 0, UNK_TOKEN: 1}
        for c in sorted(chars):
            char_to_id.setdefault(c, len(char_to_id))
        return cls(word_to_id=word_to_id, char_to_id=char_to_id)

    def word_id(self, token: str) -> int:
        return self.word_to_id.get(token.lower(), self.word_to_id[UNK_TOKEN])

    def char_id(self, ch: str) -> int:
        return self.char_to_id.get(ch, self.char_to_id[UNK_TOKEN])

    @property
    def num_words(self) -> int:
        return len(self.word_to_id)

    @property
    def num_chars(self) -> int:
        return len(self.char_to_id)

    def words_in_order(self) -> list[str]:
        return [w for w, _ in sorted(self.word_to_id.items(), key=lambda kv: kv[1])]

    def chars_in_order(self) -> list[str]:
        return [c for c, _ in sorted(self.char_to_id.items(), key=lambda kv: kv[1])]


# --------------------------------------------------------------------------
# Tagged corpus I/O
# --------------------------------------------------------------------------


class CorpusFormat(Enum):
    COLUMN = "column"
    JSONL = "jsonl"


def _read_column_blocks(path) -> Iterator[tuple[int, list[tuple[int, str, str]]]]:
    """Yield (block_index, [(lineno, token, tag), ...]) for each blank-line-separated block."""
    block: list[tuple[int, str, str]] = []
    index = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                if block:
                    yield index, block
                    index += 1
                    block = []
                continue
            if "\t" not in line:
                raise CorpusFormatError("expected token<TAB>tag", path, lineno)
            token, tag = line.split("\t", 1)
            if not token:
                raise CorpusFormatError("empty token", path, lineno)
            block.append((lineno, token, tag))
    if block:
        yield index, block


def _column_corpus(path, tag_map: Mapping[str, TagLabel]) -> list[TaggedUtterance]:
    out = []
    for index, block in _read_column_blocks(path):
        tokens = []
        tags = []
        for lineno, token, tag in block:
            label = tag_map.get(tag.strip().upper())
            if label is None:
                raise CorpusFormatError(f"unknown tag {tag!r}", path, lineno)
            tokens.append(token)
            tags.append(label)
        utt = utterance_from_tokens(tokens, uid=f"{index:06d}")
        out.append(TaggedUtterance(utterance=utt, tags=tuple(tags)))
    return out


def _intent_from_record(tokens: Sequence[str], rec: Mapping, path, lineno: int) -> Intent:
    try:
        a0, a1 = rec["action"]
        o0, o1 = rec["object"]
    except (KeyError, TypeError, ValueError):
        raise CorpusFormatError("intent record needs action/object [start, end] pairs", path, lineno) from None
    n = len(tokens)
    if not (0 <= a0 < a1 <= n and 0 <= o0 < o1 <= n):
        raise CorpusFormatError(f"intent span out of range for {n} tokens", path, lineno)
    return Intent(
        action=Span.from_tokens(tokens, a0, a1, TagLabel.ACTION),
        object=Span.from_tokens(tokens, o0, o1, TagLabel.OBJECT),
    )


def read_tagged_corpus(path, fmt: CorpusFormat = CorpusFormat.COLUMN) -> list[TaggedUtterance]:
    """Read a tag-annotated corpus.

    COLUMN: one "token<TAB>tag" per line, blank line between utterances.
    JSONL: one record per line with fields text, tags, optional id/intents
    where intents carry token-index spans {"action": [i, j], "object": [k, l]}.
    Tag strings map to labels case-insensitively.
    """
    if fmt is CorpusFormat.COLUMN:
        return _column_corpus(path, {label.name: label for label in TagLabel})

    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"invalid JSON: {e.msg}", path, lineno) from None
            if "text" not in rec or "tags" not in rec:
                raise CorpusFormatError("record needs text and tags fields", path, lineno)
            utt = tokenize(rec["text"], uid=str(rec.get("id", f"{lineno:06d}")))
            tag_strings = rec["tags"]
            if len(tag_strings) != len(utt.tokens):
                raise CorpusFormatError(
                    f"record {lineno}: {len(tag_strings)} tags for {len(utt.tokens)} tokens",
                    path,
                    lineno,
                )
            try:
                tags = tuple(TagLabel.from_string(t) for t in tag_strings)
            except KeyError as e:
                raise CorpusFormatError(str(e), path, lineno) from None
            intents = tuple(
                _intent_from_record(utt.tokens, r, path, lineno) for r in rec.get("intents", [])
            )
            out.append(TaggedUtterance(utterance=utt, tags=tags, gold_intents=intents))
    return out


def write_tagged_corpus(corpus: Iterable[TaggedUtterance], path, fmt: CorpusFormat = CorpusFormat.COLUMN) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if fmt is CorpusFormat.COLUMN:
            for tu in corpus:
                for tok, tag in zip(tu.utterance.tokens, tu.tags):
                    fh.write(f"{tok}\t{tag.name}\n")
                fh.write("\n")
        else:
            for tu in corpus:
                rec = {
                    "id": tu.utterance.id,
                    "text": tu.utterance.text,
                    "tags": [t.name for t in tu.tags],
                }
                if tu.gold_intents:
                    rec["intents"] = [
                        {
                            "action": [i.action.start, i.action.end],
                            "object": [i.object.start, i.object.end],
                        }
                        for i in tu.gold_intents
                    ]
                fh.write(json.dumps(rec) + "\n")


def read_proxy_tag_corpus(path) -> list[TaggedUtterance]:
    """Read COLUMN-format proxy tags (VERB/OBJ from a parser) for pre-training."""
    return _column_corpus(path, PROXY_TAG_MAP)


def read_existence_corpus(path) -> list[ExistenceExample]:
    """Read JSONL records {"id", "text", "has_intent"}."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"invalid JSON: {e.msg}", path, lineno) from None
            if "text" not in rec or "has_intent" not in rec:
                raise CorpusFormatError("record needs text and has_intent fields", path, lineno)
            utt = tokenize(rec["text"], uid=str(rec.get("id", f"{lineno:06d}")))
            out.append(ExistenceExample(utterance=utt, has_intent=bool(rec["has_intent"])))
    return out


def write_existence_corpus(corpus: Iterable[ExistenceExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in corpus:
            fh.write(
                json.dumps({"id": ex.utterance.id, "text": ex.utterance.text, "has_intent": ex.has_intent}) + "\n"
            )


# --------------------------------------------------------------------------
# Rule-based proxy tagger
# --------------------------------------------------------------------------


def rule_based_proxy_tagger(
    utterance: Utterance,
    verb_lexicon: Iterable[str],
    noun_lexicon: Iterable[str],
) -> TaggedUtterance:
    """Lexicon fallback for proxy tags when no parser output is available.

    Tokens in the verb lexicon become ACTION, tokens in the noun lexicon
    OBJECT, everything else NONE. A token in both lexicons counts as a verb.
    Matching is case-insensitive.
    """
    verbs = {w.lower() for w in verb_lexicon}
    nouns = {w.lower() for w in noun_lexicon}
    tags = []
    for tok in utterance.tokens:
        low = tok.lower()
        if low in verbs:
            tags.append(TagLabel.ACTION)
        elif low in nouns:
            tags.append(TagLabel.OBJECT)
        else:
            tags.append(TagLabel.NONE)
    return TaggedUtterance(utterance=utterance, tags=tuple(tags))


# --------------------------------------------------------------------------
# Synthetic corpus generation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthDomain:
    """Template vocabulary for one topical domain of the synthetic corpus.

    Positive patterns contain ACT/OBJ placeholders (optionally numbered,
    ACT1/OBJ1 pair into one intent). Negative patterns may use a FILLER
    placeholder drawn from ``fillers``.
    """

    name: str
    actions: tuple[str, ...]
    objects: tuple[str, ...]
    positive_patterns: tuple[str, ...]
    negative_patterns: tuple[str, ...]
    fillers: tuple[str, ...] = ()


_ACT_RE = re.compile(r"^ACT(\d*)$")
_OBJ_RE = re.compile(r"^OBJ(\d*)$")
_FILLER_RE = re.compile(r"^FILLER(\d*)$")


DEFAULT_DOMAINS: tuple[SynthDomain, ...] = (
    SynthDomain(
        name="travel",
        actions=("reserve", "book", "cancel", "request", "upgrade", "change"),
        objects=("seat", "flight", "special meal", "ticket", "window seat", "rental car"),
        positive_patterns=(
            "i would like to ACT1 a OBJ1 and ACT2 a OBJ2 on my flight",
            "please ACT1 the OBJ1",
            "i want to ACT1 a OBJ1 before friday",
            "how can i ACT1 my OBJ1 online",
            "hello , i need to ACT1 a OBJ1 for my trip",
            "is it possible to ACT1 the OBJ1 and also ACT2 my OBJ2",
        ),
        negative_patterns=(
            "the FILLER was crowded all morning",
            "our FILLER arrived on time yesterday",
            "most travellers enjoyed the FILLER last summer",
            "the FILLER near the gate stays open late",
        ),
        fillers=("airport", "terminal", "lounge", "runway", "boarding area"),
    ),
    SynthDomain(
        name="appointments",
        actions=("make", "schedule", "move", "confirm", "postpone", "cancel", "book"),
        objects=("appointment", "haircut appointment", "dentist visit", "meeting", "checkup"),
        positive_patterns=(
            "please ACT1 a OBJ1 for tomorrow morning",
            "i want to ACT1 my OBJ1 to next week",
            "could you ACT1 the OBJ1 at noon",
            "i need to ACT1 a OBJ1 and then ACT2 another OBJ2",
            "how do i ACT1 a OBJ1 with the front desk",
        ),
        negative_patterns=(
            "the FILLER was quiet this afternoon",
            "her FILLER lasted nearly an hour",
            "that FILLER always runs behind in winter",
        ),
        fillers=("clinic", "waiting room", "reception", "calendar week"),
    ),
    SynthDomain(
        name="software",
        actions=("install", "remove", "update", "synchronize", "manage", "configure"),
        objects=("printer driver", "calendar", "sick notes", "absences", "backup tool", "mail client"),
        positive_patterns=(
            "how can i ACT1 the OBJ1 on this machine",
            "i want to ACT1 OBJ1 and ACT2 OBJ2",
            "trying to ACT1 my OBJ1 without admin rights",
            "please ACT1 the OBJ1 then ACT2 the OBJ2 and finally ACT3 the OBJ3",
            "i would like to ACT1 the OBJ1 for the whole team",
        ),
        negative_patterns=(
            "the FILLER crashed twice last night",
            "this FILLER ships with sensible defaults",
            "the FILLER documentation covers most questions",
        ),
        fillers=("server", "laptop", "operating system", "release notes"),
    ),
    SynthDomain(
        name="dining",
        actions=("book", "order", "reserve", "split", "cancel", "request"),
        objects=("table", "pizza", "birthday cake", "bill", "tasting menu"),
        positive_patterns=(
            "please ACT1 the OBJ1",
            "can you ACT1 a OBJ1 for six people",
            "i want to ACT1 a OBJ1 tonight",
            "we would like to ACT1 the OBJ1 and ACT2 a OBJ2",
        ),
        negative_patterns=(
            "the FILLER smelled wonderful yesterday",
            "their FILLER closes early on sundays",
            "the FILLER was reviewed in the paper",
        ),
        fillers=("kitchen", "terrace", "bakery", "dining room"),
    ),
)


def _fill_for(mapping: Mapping[str, str], placeholder: str, key: str) -> str:
    # Accept fills keyed by the pair number ("1") or the literal placeholder ("ACT", "ACT1").
    for candidate in (key, placeholder):
        if candidate in mapping:
            return mapping[candidate]
    raise KeyError(f"no fill for placeholder {placeholder}")


def instantiate_template(
    pattern: str,
    actions: Mapping[str, str],
    objects: Mapping[str, str],
    fillers: Mapping[str, str] | None = None,
    uid: str = "template",
) -> TaggedUtterance:
    """Expand a whitespace pattern with ACT*/OBJ* placeholders into a tagged utterance.

    Placeholder fills may be multi-word; every filled token carries the
    placeholder's label. ACTk pairs with OBJk as one gold intent (bare
    ACT/OBJ count as pair 1).
    """
    tokens: list[str] = []
    tags: list[TagLabel] = []
    action_spans: dict[str, tuple[int, int]] = {}
    object_spans: dict[str, tuple[int, int]] = {}
    for word in pattern.split():
        act = _ACT_RE.match(word)
        obj = _OBJ_RE.match(word)
        fil = _FILLER_RE.match(word)
        if act:
            key = act.group(1) or "1"
            parts = _fill_for(actions, word, key).split()
            action_spans[key] = (len(tokens), len(tokens) + len(parts))
            tokens.extend(parts)
            tags.extend([TagLabel.ACTION] * len(parts))
        elif obj:
            key = obj.group(1) or "1"
            parts = _fill_for(objects, word, key).split()
            object_spans[key] = (len(tokens), len(tokens) + len(parts))
            tokens.extend(parts)
            tags.extend([TagLabel.OBJECT] * len(parts))
        elif fil:
            key = fil.group(1) or "1"
            parts = _fill_for(fillers or {}, word, key).split()
            tokens.extend(parts)
            tags.extend([TagLabel.NONE] * len(parts))
        else:
            tokens.append(word)
            tags.append(TagLabel.NONE)
    utt = utterance_from_tokens(tokens, uid=uid)
    intents = []
    for key in sorted(action_spans):
        if key in object_spans:
            a0, a1 = action_spans[key]
            o0, o1 = object_spans[key]
            intents.append(
                Intent(
                    action=Span.from_tokens(tokens, a0, a1, TagLabel.ACTION),
                    object=Span.from_tokens(tokens, o0, o1, TagLabel.OBJECT),
                )
            )
    return TaggedUtterance(utterance=utt, tags=tuple(tags), gold_intents=tuple(intents))


def _placeholder_keys(pattern: str, regex: re.Pattern) -> list[str]:
    keys = []
    for word in pattern.split():
        m = regex.match(word)
        if m:
            keys.append(m.group(1) or "1")
    return keys


def generate_synthetic_corpus(
    n: int,
    templates: Sequence[SynthDomain] | None = None,
    seed: int = 0,
    positive_ratio: float = 0.5,
) -> tuple[list[TaggedUtterance], list[ExistenceExample]]:
    """Generate a deterministic synthetic corpus of ``n`` utterances.

    Positives are template instantiations with gold tags and intents;
    negatives are declarative filler sentences tagged all-NONE. Returns the
    tagged corpus and matching intent-existence examples; utterance ids are
    "<domain>/<index>" so corpora can be split back by domain.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not (0.0 <= positive_ratio <= 1.0):
        raise ValueError("positive_ratio must be in [0, 1]")
    domains = tuple(templates) if templates is not None else DEFAULT_DOMAINS
    rng = random.Random(seed)
    n_pos = round(n * positive_ratio)

    tagged: list[TaggedUtterance] = []
    existence: list[ExistenceExample] = []
    for i in range(n):
        positive = i < n_pos
        domain = domains[i % len(domains)]
        uid = f"{domain.name}/{i:05d}"
        if positive:
            pattern = rng.choice(domain.positive_patterns)
            act_keys = _placeholder_keys(pattern, _ACT_RE)
            obj_keys = _placeholder_keys(pattern, _OBJ_RE)
            actions = {k: rng.choice(domain.actions) for k in act_keys}
            objects = {}
            for k in obj_keys:
                choices = [o for o in domain.objects if o not in objects.values()]
                objects[k] = rng.choice(choices or list(domain.objects))
            tu = instantiate_template(pattern, actions, objects, uid=uid)
        else:
            pattern = rng.choice(domain.negative_patterns)
            fil_keys = _placeholder_keys(pattern, _FILLER_RE)
            fillers = {k: rng.choice(domain.fillers) for k in fil_keys}
            tu = instantiate_template(pattern, {}, {}, fillers=fillers, uid=uid)
        if rng.random() < 0.5:
            # Natural-text casing variety; tags and offsets are unaffected.
            tu = _capitalize_first(tu)
        tagged.append(tu)
        existence.append(ExistenceExample(utterance=tu.utterance, has_intent=positive))
    order = list(range(n))
    rng.shuffle(order)
    return [tagged[i] for i in order], [existence[i] for i in order]


def _capitalize_first(tu: TaggedUtterance) -> TaggedUtterance:
    toks = list(tu.utterance.tokens)
    if not toks or not toks[0] or not toks[0][0].isalpha():
        return tu
    toks[0] = toks[0][0].upper() + toks[0][1:]
    utt = utterance_from_tokens(toks, uid=tu.utterance.id)
    return TaggedUtterance(utterance=utt, tags=tu.tags, gold_intents=_reanchor_intents(tu.gold_intents, toks))


def _reanchor_intents(intents: Sequence[Intent], tokens: Sequence[str]) -> tuple[Intent, ...]:
    out = []
    for it in intents:
        out.append(
            Intent(
                action=Span.from_tokens(tokens, it.action.start, it.action.end, TagLabel.ACTION),
                object=Span.from_tokens(tokens, it.object.start, it.object.end, TagLabel.OBJECT),
                score=it.score,
                source=it.source,
            )
        )
    return tuple(out)


def split_by_domain(corpus: Iterable[TaggedUtterance]) -> dict[str, list[TaggedUtterance]]:
    """Group a synthetic corpus by the domain prefix of its utterance ids."""
    out: dict[str, list[TaggedUtterance]] = {}
    for tu in corpus:
        domain = tu.utterance.id.split("/", 1)[0] if "/" in tu.utterance.id else "default"
        out.setdefault(domain, []).append(tu)
    return out


def synthetic_proxy_lexicons(
    templates: Sequence[SynthDomain] | None = None,
) -> tuple[set[str], set[str]]:
    """Verb/noun lexicons covering the synthetic vocabulary, for proxy tagging."""
    domains = tuple(templates) if templates is not None else DEFAULT_DOMAINS
    verbs = set()
    nouns = set()
    for d in domains:
        verbs.update(d.actions)
        for obj in d.objects:
            nouns.update(obj.split())
    return verbs, nouns

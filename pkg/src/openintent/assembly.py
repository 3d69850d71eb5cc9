"""Turn tag sequences into intents: span extraction and action/object pairing."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .corpus import EmbeddingTable, Intent, IntentSource, Span, TagLabel, TaggedUtterance, Utterance
from .crf import BIO_LABELS

logger = logging.getLogger(__name__)


def extract_spans(
    tags: Sequence[TagLabel], utterance: Utterance
) -> tuple[list[Span], list[Span]]:
    """Maximal contiguous runs of ACTION and OBJECT become spans; NONE separates runs."""
    if len(tags) != len(utterance.tokens):
        raise ValueError(f"{len(tags)} tags for {len(utterance.tokens)} tokens")
    actions: list[Span] = []
    objects: list[Span] = []
    i = 0
    n = len(tags)
    while i < n:
        label = tags[i]
        if label is TagLabel.NONE:
            i += 1
            continue
        j = i
        while j < n and tags[j] is label:
            j += 1
        span = Span.from_tokens(utterance.tokens, i, j, label)
        (actions if label is TagLabel.ACTION else objects).append(span)
        i = j
    return actions, objects


def extract_spans_bio(label_ids: Sequence[int], utterance: Utterance) -> tuple[list[Span], list[Span]]:
    """Span extraction in BIO mode, where B- starts a new run even between
    adjacent same-label spans."""
    if len(label_ids) != len(utterance.tokens):
        raise ValueError(f"{len(label_ids)} labels for {len(utterance.tokens)} tokens")
    actions: list[Span] = []
    objects: list[Span] = []
    i = 0
    n = len(label_ids)
    while i < n:
        prefix, name = BIO_LABELS[label_ids[i]].split("-", 1)
        label = TagLabel[name]
        if label is TagLabel.NONE:
            i += 1
            continue
        j = i + 1
        while j < n:
            p2, n2 = BIO_LABELS[label_ids[j]].split("-", 1)
            if n2 != name or p2 == "B":
                break
            j += 1
        span = Span.from_tokens(utterance.tokens, i, j, label)
        (actions if label is TagLabel.ACTION else objects).append(span)
        i = j
    return actions, objects


def span_gap(a: Span, b: Span) -> int:
    """Token distance between the nearest edges of two spans (0 when adjacent)."""
    if a.start >= b.end:
        return a.start - b.end
    if b.start >= a.end:
        return b.start - a.end
    return 0


def pair_by_distance(actions: Sequence[Span], objects: Sequence[Span]) -> list[Intent]:
    """Greedy nearest-gap matching of action and object spans.

    Pairs are claimed globally by ascending token gap, each span used once.
    Leftover spans on either side then reuse their nearest counterpart, so one
    action can yield several intents (and vice versa). Either side empty
    yields no intents at all: one-sided intents are never emitted.
    """
    if not actions or not objects:
        return []
    acts = sorted(actions, key=lambda s: s.start)
    objs = sorted(objects, key=lambda s: s.start)
    candidates = sorted(
        (span_gap(a, o), a.start, o.start, ai, oi)
        for ai, a in enumerate(acts)
        for oi, o in enumerate(objs)
    )
    used_a: set[int] = set()
    used_o: set[int] = set()
    pairs: list[tuple[int, int, int]] = []
    for gap, _, _, ai, oi in candidates:
        if ai in used_a or oi in used_o:
            continue
        used_a.add(ai)
        used_o.add(oi)
        pairs.append((ai, oi, gap))
    for ai, a in enumerate(acts):
        if ai in used_a:
            continue
        gap, _, oi = min((span_gap(a, o), o.start, oi) for oi, o in enumerate(objs))
        pairs.append((ai, oi, gap))
    for oi, o in enumerate(objs):
        if oi in used_o:
            continue
        gap, _, ai = min((span_gap(a, o), a.start, ai) for ai, a in enumerate(acts))
        pairs.append((ai, oi, gap))
    intents = [
        Intent(action=acts[ai], object=objs[oi], score=1.0 / (1.0 + gap), source=IntentSource.W_DIST)
        for ai, oi, gap in pairs
    ]
    intents.sort(key=lambda it: (it.action.start, it.object.start))
    return intents


def match_features(action: Span, object_: Span, table: EmbeddingTable, n: int) -> np.ndarray:
    """Sum of word vectors over both spans' tokens plus the normalized gap.

    Length is table.dimension + 1; out-of-vocabulary words resolve through
    the table's UNK policy.
    """
    if n < 1:
        raise ValueError("sequence length must be positive")
    total = np.zeros(table.dimension, dtype=np.float64)
    for word in action.surface.split() + object_.surface.split():
        total += table.lookup(word.lower())
    return np.concatenate([total, [span_gap(action, object_) / n]])


class MatcherModel(nn.Module):
    """Two ReLU hidden layers and a size-one output scoring action/object pairs.

    Carries its embedding table so candidate pairs can be featurized at
    inference time.
    """

    def __init__(self, table: EmbeddingTable, hidden: tuple[int, int] = (64, 32)):
        super().__init__()
        self.table = table
        self.hidden = tuple(hidden)
        dims = [table.dimension + 1, *self.hidden]
        layers: list[nn.Module] = []
        for d_in, d_out in zip(dims, dims[1:]):
            layers += [nn.Linear(d_in, d_out), nn.ReLU()]
        layers.append(nn.Linear(dims[-1], 1))
        self.net = nn.Sequential(*layers)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net(features).squeeze(-1)

    def score(self, action: Span, object_: Span, n: int) -> float:
        feats = torch.from_numpy(match_features(action, object_, self.table, n)).float()
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                return float(self(feats.unsqueeze(0))[0])
        finally:
            self.train(was_training)


def hinge_loss(scores: torch.Tensor, labels: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Margin hinge sum(max(0, 1 - y * y')) with y in {-1, +1}."""
    per_pair = torch.clamp(1.0 - labels * scores, min=0.0)
    if reduction == "sum":
        return per_pair.sum()
    if reduction == "mean":
        return per_pair.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass(frozen=True)
class MatcherExample:
    action: Span
    object: Span
    label: int  # +1 correct pair, -1 incorrect
    sequence_length: int

    def __post_init__(self):
        if self.label not in (1, -1):
            raise ValueError("label must be +1 or -1")


def build_matcher_examples(corpus: Sequence[TaggedUtterance]) -> list[MatcherExample]:
    """Positives from gold intents, negatives from all other same-utterance cross pairs."""
    out: list[MatcherExample] = []
    for tu in corpus:
        if not tu.gold_intents:
            continue
        n = len(tu.utterance.tokens)
        gold = {(it.action.start, it.action.end, it.object.start, it.object.end) for it in tu.gold_intents}
        actions = sorted({it.action for it in tu.gold_intents}, key=lambda s: s.start)
        objects = sorted({it.object for it in tu.gold_intents}, key=lambda s: s.start)
        for a in actions:
            for o in objects:
                label = 1 if (a.start, a.end, o.start, o.end) in gold else -1
                out.append(MatcherExample(action=a, object=o, label=label, sequence_length=n))
    return out


@dataclass
class MatcherConfig:
    hidden: tuple[int, int] = (64, 32)
    learning_rate: float = 0.001
    epochs: int = 60
    batch_size: int = 64
    seed: int = 0


def train_matcher(
    examples: Sequence[MatcherExample],
    table: EmbeddingTable,
    config: MatcherConfig | None = None,
) -> MatcherModel:
    """Fit the pair scorer by minimizing the margin hinge loss."""
    config = config or MatcherConfig()
    if not any(ex.label == 1 for ex in examples):
        raise ValueError("matcher training needs at least one positive pair")
    torch.manual_seed(config.seed)
    model = MatcherModel(table, hidden=config.hidden)
    feats = torch.tensor(
        np.stack([match_features(ex.action, ex.object, table, ex.sequence_length) for ex in examples]),
        dtype=torch.float32,
    )
    labels = torch.tensor([float(ex.label) for ex in examples])
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    order_rng = torch.Generator().manual_seed(config.seed)
    history = []
    model.train()
    for _ in range(config.epochs):
        perm = torch.randperm(len(examples), generator=order_rng)
        epoch_loss = 0.0
        for lo in range(0, len(examples), config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            optimizer.zero_grad()
            loss = hinge_loss(model(feats[idx]), labels[idx], reduction="mean")
            loss.backward()
            optimizer.step()
            epoch_loss += loss.detach().item() * len(idx)
        history.append(epoch_loss / len(examples))
    model.eval()
    model.loss_history = history
    return model


def pair_by_mlp(
    actions: Sequence[Span],
    objects: Sequence[Span],
    matcher: MatcherModel,
    sequence_length: int,
) -> list[Intent]:
    """Each action takes its best-scoring object, provided that score is positive.

    Ties break toward the smaller token gap, then the earlier object. Actions
    whose best score is non-positive yield nothing; either side empty yields [].
    """
    if not actions or not objects:
        return []
    intents = []
    for a in sorted(actions, key=lambda s: s.start):
        scored = [
            (matcher.score(a, o, sequence_length), o)
            for o in sorted(objects, key=lambda s: s.start)
        ]
        scored.sort(key=lambda so: (-so[0], span_gap(a, so[1]), so[1].start))
        best_score, best_obj = scored[0]
        if best_score > 0.0:
            intents.append(Intent(action=a, object=best_obj, score=best_score, source=IntentSource.MLP))
    return intents


def assemble_intents(
    tagged: TaggedUtterance,
    matcher: MatcherModel | None = None,
    label_ids: Sequence[int] | None = None,
    bio: bool = False,
) -> list[Intent]:
    """Spans from tags, paired by word distance or by the matcher when given."""
    if bio:
        if label_ids is None:
            raise ValueError("BIO assembly needs scheme-level label ids")
        actions, objects = extract_spans_bio(label_ids, tagged.utterance)
    else:
        actions, objects = extract_spans(tagged.tags, tagged.utterance)
    if matcher is None:
        return pair_by_distance(actions, objects)
    return pair_by_mlp(actions, objects, matcher, max(1, len(tagged.utterance.tokens)))

"""Evaluation: tag/intent precision-recall-F1, semantic similarity, experiment harnesses."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .corpus import EmbeddingTable, Intent, TagLabel, TaggedUtterance, Vocabulary
from .encoder import EncoderConfig
from .existence import TrainConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PrfResult:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "PrfResult":
        # Zero-denominator convention: a score with no supporting counts is 0.
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls(precision=precision, recall=recall, f1=f1, tp=tp, fp=fp, fn=fn)


@dataclass(frozen=True)
class SimilarityResult:
    mean_cosine: float
    skipped_words: int


class IntentMatchMode(Enum):
    EXACT_SPAN = "exact_span"
    SURFACE = "surface"


def _as_corpus(seqs) -> list[list]:
    seqs = list(seqs)
    if seqs and isinstance(seqs[0], TagLabel):
        return [seqs]
    return [list(s) for s in seqs]


def tag_prf(pred, gold, label: TagLabel) -> PrfResult:
    """Token-level precision/recall/F1 for one label over aligned sequences.

    Accepts either a single aligned pair of tag sequences or two parallel
    lists of sequences.
    """
    pred_seqs = _as_corpus(pred)
    gold_seqs = _as_corpus(gold)
    if len(pred_seqs) != len(gold_seqs):
        raise ValueError(f"{len(pred_seqs)} predicted sequences vs {len(gold_seqs)} gold")
    tp = fp = fn = 0
    for p_seq, g_seq in zip(pred_seqs, gold_seqs):
        if len(p_seq) != len(g_seq):
            raise ValueError(f"sequence length mismatch: {len(p_seq)} vs {len(g_seq)}")
        for p, g in zip(p_seq, g_seq):
            if p is label and g is label:
                tp += 1
            elif p is label:
                fp += 1
            elif g is label:
                fn += 1
    return PrfResult.from_counts(tp, fp, fn)


def _intent_key(intent: Intent, mode: IntentMatchMode):
    if mode is IntentMatchMode.EXACT_SPAN:
        return (intent.action.start, intent.action.end, intent.object.start, intent.object.end)
    return (intent.action.surface.casefold(), intent.object.surface.casefold())


def intent_prf(
    pred: Sequence[Sequence[Intent]],
    gold: Sequence[Sequence[Intent]],
    mode: IntentMatchMode = IntentMatchMode.SURFACE,
) -> PrfResult:
    """Intent-level scores over per-utterance intent lists.

    A prediction is a true positive when both its action and object match a
    gold intent (span equality or case-folded surface equality). Each gold
    intent is consumed by at most one prediction, claimed in descending
    prediction-score order.
    """
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predicted utterances vs {len(gold)} gold")
    tp = fp = fn = 0
    for p_list, g_list in zip(pred, gold):
        remaining = [_intent_key(g, mode) for g in g_list]
        for p in sorted(p_list, key=lambda it: -it.score):
            key = _intent_key(p, mode)
            if key in remaining:
                remaining.remove(key)
                tp += 1
            else:
                fp += 1
        fn += len(remaining)
    return PrfResult.from_counts(tp, fp, fn)


def _phrase_vector(intent: Intent, table: EmbeddingTable) -> tuple[np.ndarray | None, int]:
    """Mean vector over in-vocabulary words of the intent phrase, plus skip count."""
    vectors = []
    skipped = 0
    for word in intent.surface.split():
        low = word.lower()
        if low in table:
            vectors.append(table.lookup(low).astype(np.float64))
        else:
            skipped += 1
    if not vectors:
        return None, skipped
    return np.mean(vectors, axis=0), skipped


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def semantic_similarity(
    pred: Sequence[Sequence[Intent]],
    gold: Sequence[Sequence[Intent]],
    table: EmbeddingTable,
) -> SimilarityResult:
    """Mean cosine between averaged word vectors of predicted and gold intents.

    Words missing from the table are ignored (and counted in skipped_words).
    Within each utterance, gold intents greedily claim their best-cosine
    prediction, each prediction used once; unmatched gold intents contribute 0.
    """
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predicted utterances vs {len(gold)} gold")
    cosines: list[float] = []
    skipped = 0
    for p_list, g_list in zip(pred, gold):
        p_vecs = []
        for p in p_list:
            vec, s = _phrase_vector(p, table)
            skipped += s
            p_vecs.append(vec)
        g_vecs = []
        for g in g_list:
            vec, s = _phrase_vector(g, table)
            skipped += s
            g_vecs.append(vec)
        scored = []
        for gi, gv in enumerate(g_vecs):
            for pi, pv in enumerate(p_vecs):
                if gv is None or pv is None:
                    continue
                scored.append((-_cosine(gv, pv), gi, pi))
        scored.sort()
        used_g: set[int] = set()
        used_p: set[int] = set()
        matched: dict[int, float] = {}
        for neg_cos, gi, pi in scored:
            if gi in used_g or pi in used_p:
                continue
            used_g.add(gi)
            used_p.add(pi)
            matched[gi] = -neg_cos
        for gi in range(len(g_vecs)):
            cosines.append(matched.get(gi, 0.0))
    if not cosines:
        mean = 1.0 if sum(len(p) for p in pred) == 0 else 0.0
    else:
        mean = float(np.mean(cosines))
    return SimilarityResult(mean_cosine=mean, skipped_words=skipped)


# --------------------------------------------------------------------------
# Experiment harnesses
# --------------------------------------------------------------------------


@dataclass
class PipelineEvalConfig:
    """Everything needed to train and evaluate a stage-two pipeline on tagged data."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    table: EmbeddingTable | None = None
    heads: int = 4
    indicator_lexicon: tuple[str, ...] = ()
    decoder: object | None = None  # tagger.Decoder; resolved lazily
    mode: IntentMatchMode = IntentMatchMode.SURFACE
    seed: int = 0

    def __post_init__(self):
        from .tagger import Decoder  # imported here to break the tagger <-> metrics cycle

        if self.table is None:
            self.table = EmbeddingTable(dimension=self.encoder.word_dim)
        if self.decoder is None:
            self.decoder = Decoder.VITERBI


def train_and_evaluate(
    train_corpus: Sequence[TaggedUtterance],
    test_corpus: Sequence[TaggedUtterance],
    config: PipelineEvalConfig,
    adv=None,
    proxy_corpus: Sequence[TaggedUtterance] = (),
) -> tuple[PrfResult, SimilarityResult]:
    """Train a stage-two tagger (optionally pre-trained) and score it on held-out data."""
    from .tagger import build_tagger, fine_tune, pretrain

    vocab_source = list(train_corpus) + list(proxy_corpus)
    vocab = Vocabulary.build(
        (tu.utterance for tu in vocab_source), extra_words=config.table.entries.keys()
    )
    model = build_tagger(
        config.encoder,
        vocab,
        config.table,
        heads=config.heads,
        indicator_lexicon=config.indicator_lexicon,
        seed=config.seed,
    )
    if proxy_corpus:
        pretrain(model, proxy_corpus, config.train)
    fine_tune(model, train_corpus, config.train, adv)
    return evaluate_tagger(model, test_corpus, config)


def evaluate_tagger(model, test_corpus: Sequence[TaggedUtterance], config: PipelineEvalConfig):
    from .assembly import assemble_intents
    from .tagger import tag

    pred_intents = []
    gold_intents = []
    for tu in test_corpus:
        tagged = tag(model, tu.utterance, config.decoder)
        pred_intents.append(assemble_intents(tagged))
        gold_intents.append(list(tu.gold_intents))
    prf = intent_prf(pred_intents, gold_intents, config.mode)
    sim = semantic_similarity(pred_intents, gold_intents, config.table)
    return prf, sim


@dataclass(frozen=True)
class SweepPoint:
    size: int
    intent_f1: float
    similarity: float


def training_size_sweep(
    corpus: Sequence[TaggedUtterance],
    sizes: Sequence[int],
    config: PipelineEvalConfig,
    holdout_fraction: float = 0.2,
) -> list[SweepPoint]:
    """Train a fresh model per training-set size and report held-out metrics.

    The corpus is shuffled once with the config seed; each size takes a prefix
    of the shuffled training portion, so smaller budgets are subsets of larger
    ones. Sizes must be ascending and fit in the training portion.
    """
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be ascending")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(corpus))
    n_test = max(1, int(len(corpus) * holdout_fraction))
    test = [corpus[i] for i in order[:n_test]]
    train_pool = [corpus[i] for i in order[n_test:]]
    if sizes and sizes[-1] > len(train_pool):
        raise ValueError(f"size {sizes[-1]} exceeds available training examples ({len(train_pool)})")
    points = []
    for size in sizes:
        prf, sim = train_and_evaluate(train_pool[:size], test, config)
        points.append(SweepPoint(size=size, intent_f1=prf.f1, similarity=sim.mean_cosine))
        logger.info("sweep size %d: intent F1 %.4f similarity %.4f", size, prf.f1, sim.mean_cosine)
    return points


@dataclass(frozen=True)
class DomainEvalResult:
    domain: str
    held_out: tuple[PrfResult, SimilarityResult]
    augmented: tuple[PrfResult, SimilarityResult]


def leave_one_domain_out(
    corpus_by_domain: Mapping[str, Sequence[TaggedUtterance]],
    domain: str,
    config: PipelineEvalConfig,
    domain_train_fraction: float = 0.5,
) -> DomainEvalResult:
    """Train on all other domains and test on the held-out one.

    The held-out domain splits into a train half and a test half; the
    "augmented" condition adds the train half to the training set while both
    conditions share the same test half.
    """
    if domain not in corpus_by_domain:
        raise ValueError(f"unknown domain {domain!r}")
    if len(corpus_by_domain) < 2:
        raise ValueError("need at least two domains")
    rng = np.random.default_rng(config.seed)
    own = list(corpus_by_domain[domain])
    order = rng.permutation(len(own))
    n_train = int(len(own) * domain_train_fraction)
    own_train = [own[i] for i in order[:n_train]]
    own_test = [own[i] for i in order[n_train:]]
    if not own_test:
        raise ValueError(f"domain {domain!r} has no test examples")
    others = [tu for d, tus in sorted(corpus_by_domain.items()) if d != domain for tu in tus]
    held_out = train_and_evaluate(others, own_test, config)
    augmented = train_and_evaluate(others + own_train, own_test, config)
    return DomainEvalResult(domain=domain, held_out=held_out, augmented=augmented)

"""Stage I: binary prediction of whether an utterance contains an actionable intent."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .corpus import ExistenceExample, Utterance, Vocabulary, EmbeddingTable, match_phrases
from .encoder import Batch, Encoder, EncoderConfig, make_batch

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    lr_decay: float = 0.05
    grad_clip_norm: float = 5.0
    l2_coeff: float = 1e-6
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    dev_fraction: float = 0.1
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lr_decay < 0:
            raise ValueError("lr_decay must be non-negative")


class ExistenceModel(nn.Module):
    """Two-layer BiLSTM encoder, max pooling over time, sigmoid output."""

    def __init__(self, encoder: Encoder, threshold: float = 0.5):
        super().__init__()
        if encoder.config.lstm_layers != 2:
            logger.warning("existence encoder usually stacks two BiLSTM layers, got %d", encoder.config.lstm_layers)
        self.encoder = encoder
        self.dropout = nn.Dropout(encoder.config.dropout)
        self.output = nn.Linear(encoder.config.output_dim, 1)
        self.threshold = threshold
        self.loss_history: list[float] = []

    def forward(self, batch: Batch) -> torch.Tensor:
        """Logits, shape (B,)."""
        h = self.encoder(batch)
        h = h.masked_fill(~batch.mask.unsqueeze(-1), float("-inf"))
        pooled = h.max(dim=1).values
        pooled = torch.where(torch.isinf(pooled), torch.zeros_like(pooled), pooled)
        return self.output(self.dropout(pooled)).squeeze(-1)


def predict_existence(model: ExistenceModel, utterance: Utterance) -> float:
    """Probability that the utterance contains an intent. Empty input -> 0.0."""
    if len(utterance.tokens) == 0:
        return 0.0
    was_training = model.training
    model.eval()
    try:
        batch = make_batch([utterance], model.encoder.vocab, model.encoder.config)
        with torch.no_grad():
            logits = model(batch)
        return float(torch.sigmoid(logits)[0])
    finally:
        model.train(was_training)


def classify_existence(model: ExistenceModel, utterance: Utterance) -> bool:
    return predict_existence(model, utterance) >= model.threshold


def inverse_time_decay(decay: float):
    return lambda epoch: 1.0 / (1.0 + decay * epoch)


def train_existence(
    corpus: Sequence[ExistenceExample],
    config: TrainConfig,
    encoder_config: EncoderConfig,
    table: EmbeddingTable,
    vocab: Vocabulary | None = None,
) -> ExistenceModel:
    """Train the stage-one classifier with Adam, BCE loss and gradient clipping.

    The learning rate decays as lr / (1 + decay * epoch). Per-epoch mean
    training loss lands in ``model.loss_history``. Raises ValueError if the
    corpus does not contain both classes.
    """
    labels = {ex.has_intent for ex in corpus}
    if labels != {True, False}:
        raise ValueError("training corpus must contain both positive and negative examples")
    torch.manual_seed(config.seed)
    if vocab is None:
        vocab = Vocabulary.build(ex.utterance for ex in corpus)
    encoder = Encoder.from_table(encoder_config, vocab, table)
    model = ExistenceModel(encoder)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.l2_coeff)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, inverse_time_decay(config.lr_decay))
    loss_fn = nn.BCEWithLogitsLoss()
    order_rng = torch.Generator().manual_seed(config.seed)

    examples = list(corpus)
    model.train()
    for epoch in range(config.epochs):
        perm = torch.randperm(len(examples), generator=order_rng).tolist()
        epoch_losses = []
        for lo in range(0, len(examples), config.batch_size):
            chunk = [examples[i] for i in perm[lo : lo + config.batch_size]]
            batch = make_batch(
                [ex.utterance for ex in chunk],
                vocab,
                encoder_config,
                labels=[ex.has_intent for ex in chunk],
            )
            optimizer.zero_grad()
            logits = model(batch)
            loss = loss_fn(logits, batch.labels)
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
            optimizer.step()
            epoch_losses.append(loss.detach().item())
        scheduler.step()
        mean_loss = float(np.mean(epoch_losses))
        model.loss_history.append(mean_loss)
        logger.info("existence epoch %d: loss %.4f", epoch, mean_loss)
    model.eval()
    return model


# --------------------------------------------------------------------------
# Hand-crafted feature baseline
# --------------------------------------------------------------------------

WH_WORDS = frozenset({"who", "what", "when", "where", "why", "which", "whose", "whom", "how"})
MODAL_WORDS = frozenset({"will", "would", "can", "could", "shall", "should", "may", "might", "must"})
PERSONAL_PRONOUNS = frozenset(
    {"i", "we", "you", "he", "she", "it", "they", "me", "us", "him", "her", "them"}
)
FIRST_PERSON_PRONOUNS = frozenset({"i", "we", "me", "us"})


@dataclass(frozen=True)
class LexiconPos:
    """Lexicon-backed part-of-speech proxy used by the feature extractor."""

    verbs: frozenset[str] = frozenset()
    nouns: frozenset[str] = frozenset()
    adjectives: frozenset[str] = frozenset()

    def is_verb(self, token: str) -> bool:
        return token.lower() in self.verbs

    def is_noun(self, token: str) -> bool:
        return token.lower() in self.nouns

    def is_adjective(self, token: str) -> bool:
        return token.lower() in self.adjectives


@dataclass(frozen=True)
class HandFeatureVector:
    """The seven lexical/syntactic feature groups of the baseline classifier."""

    noun_count: int
    verb_count: int
    ends_with_noun_or_adjective: bool
    begins_with_verb_or_modal: bool
    wh_count: int
    question_marks: int
    has_personal_pronoun: bool
    first_person_near_infinitive: bool
    has_indicator_phrase: bool

    def to_array(self) -> np.ndarray:
        return np.array(
            [
                self.noun_count,
                self.verb_count,
                float(self.ends_with_noun_or_adjective),
                float(self.begins_with_verb_or_modal),
                self.wh_count,
                self.question_marks,
                float(self.has_personal_pronoun),
                float(self.first_person_near_infinitive),
                float(self.has_indicator_phrase),
            ],
            dtype=np.float64,
        )


def extract_hand_features(
    utterance: Utterance,
    pos_proxy: LexiconPos,
    indicator_lexicon: Iterable[str],
) -> HandFeatureVector:
    """Pure function of the utterance and the supplied lexicons."""
    tokens = utterance.tokens
    lowered = [t.lower() for t in tokens]

    noun_count = sum(1 for t in tokens if pos_proxy.is_noun(t))
    verb_count = sum(1 for t in tokens if pos_proxy.is_verb(t))

    trailing = next((t for t in reversed(tokens) if any(c.isalnum() for c in t)), None)
    ends_with = trailing is not None and (pos_proxy.is_noun(trailing) or pos_proxy.is_adjective(trailing))
    begins_with = bool(tokens) and (pos_proxy.is_verb(tokens[0]) or lowered[0] in MODAL_WORDS)

    wh_count = sum(1 for t in lowered if t in WH_WORDS)
    question_marks = sum(1 for t in tokens if t == "?")
    has_pronoun = any(t in PERSONAL_PRONOUNS for t in lowered)

    infinitive_positions = [
        i for i in range(len(tokens) - 1) if lowered[i] == "to" and pos_proxy.is_verb(tokens[i + 1])
    ]
    first_person_positions = [i for i, t in enumerate(lowered) if t in FIRST_PERSON_PRONOUNS]
    near_infinitive = any(
        abs(i - j) <= 3 for i in first_person_positions for j in infinitive_positions
    )

    has_indicator = bool(match_phrases(tokens, indicator_lexicon))

    return HandFeatureVector(
        noun_count=noun_count,
        verb_count=verb_count,
        ends_with_noun_or_adjective=ends_with,
        begins_with_verb_or_modal=begins_with,
        wh_count=wh_count,
        question_marks=question_marks,
        has_personal_pronoun=has_pronoun,
        first_person_near_infinitive=near_infinitive,
        has_indicator_phrase=has_indicator,
    )

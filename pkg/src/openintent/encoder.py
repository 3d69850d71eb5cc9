"""Shared neural front-end: char CNN, word vectors, highway merge, stacked BiLSTM."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn

from .corpus import EmbeddingTable, TagLabel, Utterance, Vocabulary

logger = logging.getLogger(__name__)

# Utterances longer than EncoderConfig.max_tokens are truncated; this counter
# lets batch jobs report how often that happened.
truncation_count = 0


def reset_truncation_count() -> None:
    global truncation_count
    truncation_count = 0


@dataclass
class EncoderConfig:
    char_dim: int = 25
    char_filters: int = 50
    char_filter_width: int = 3
    word_dim: int = 300
    lstm_hidden: int = 400
    lstm_layers: int = 1
    dropout: float = 0.5
    max_tokens: int = 256
    train_word_vectors: bool = False
    normalize_embeddings: bool = False

    def __post_init__(self):
        if min(self.char_dim, self.char_filters, self.char_filter_width, self.word_dim, self.lstm_hidden) < 1:
            raise ValueError("encoder dimensions must be positive")
        if self.lstm_layers not in (1, 2):
            raise ValueError("lstm_layers must be 1 or 2")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")

    @property
    def merged_dim(self) -> int:
        return self.char_filters + self.word_dim

    @property
    def output_dim(self) -> int:
        return 2 * self.lstm_hidden


def normalize_embeddings(obj):
    """Scale vectors to unit L2 norm. Zero vectors stay zero.

    Accepts an EmbeddingTable (returns a new table), a 2-D array/tensor of
    row vectors, or a single 1-D vector.
    """
    if isinstance(obj, EmbeddingTable):
        entries = {w: normalize_embeddings(v) for w, v in obj.entries.items()}
        return EmbeddingTable(dimension=obj.dimension, entries=entries, unk_policy=obj.unk_policy)
    if isinstance(obj, torch.Tensor):
        norms = obj.norm(dim=-1, keepdim=True)
        return obj / torch.where(norms == 0, torch.ones_like(norms), norms)
    arr = np.asarray(obj, dtype=np.float32)
    norms = np.linalg.norm(arr, axis=-1, keepdims=True)
    return arr / np.where(norms == 0, 1.0, norms)


def build_word_matrix(table: EmbeddingTable, vocab: Vocabulary, normalize: bool = False) -> torch.Tensor:
    """Embedding matrix over the vocabulary, rows resolved through the table's UNK policy."""
    words = vocab.words_in_order()
    mat = np.zeros((len(words), table.dimension), dtype=np.float32)
    for i, word in enumerate(words):
        if i == 0:  # PAD row stays zero
            continue
        mat[i] = table.lookup(word)
    if normalize:
        mat = normalize_embeddings(mat)
        mat[0] = 0.0
    return torch.from_numpy(mat)


class Batch(NamedTuple):
    """Padded tensors for a batch of utterances."""

    word_ids: torch.Tensor       # (B, T) long
    char_ids: torch.Tensor       # (B, T, C) long
    char_lengths: torch.Tensor   # (B, T) long, 0 on padding positions
    lengths: torch.Tensor        # (B,) long
    mask: torch.Tensor           # (B, T) bool
    tags: torch.Tensor | None = None    # (B, T) long
    labels: torch.Tensor | None = None  # (B,) float


def make_batch(
    utterances: Sequence[Utterance],
    vocab: Vocabulary,
    config: EncoderConfig,
    tags: Sequence[Sequence[TagLabel]] | None = None,
    labels: Sequence[bool] | None = None,
) -> Batch:
    global truncation_count
    token_lists = []
    for utt in utterances:
        toks = list(utt.tokens)
        if len(toks) > config.max_tokens:
            truncation_count += 1
            logger.warning("truncating utterance %s from %d to %d tokens", utt.id, len(toks), config.max_tokens)
            toks = toks[: config.max_tokens]
        token_lists.append(toks)
    b = len(token_lists)
    t = max((len(toks) for toks in token_lists), default=0)
    t = max(t, 1)
    c = max((len(tok) for toks in token_lists for tok in toks), default=1)
    c = max(c, config.char_filter_width)

    word_ids = torch.zeros((b, t), dtype=torch.long)
    char_ids = torch.zeros((b, t, c), dtype=torch.long)
    char_lengths = torch.zeros((b, t), dtype=torch.long)
    mask = torch.zeros((b, t), dtype=torch.bool)
    lengths = torch.zeros(b, dtype=torch.long)
    for i, toks in enumerate(token_lists):
        lengths[i] = len(toks)
        for j, tok in enumerate(toks):
            word_ids[i, j] = vocab.word_id(tok)
            mask[i, j] = True
            ids = [vocab.char_id(ch) for ch in tok[:c]]
            char_ids[i, j, : len(ids)] = torch.tensor(ids, dtype=torch.long)
            char_lengths[i, j] = len(ids)

    tag_tensor = None
    if tags is not None:
        tag_tensor = torch.full((b, t), TagLabel.NONE.value, dtype=torch.long)
        for i, seq in enumerate(tags):
            for j, label in enumerate(list(seq)[: len(token_lists[i])]):
                tag_tensor[i, j] = label.value
    label_tensor = None
    if labels is not None:
        label_tensor = torch.tensor([float(x) for x in labels])
    return Batch(word_ids, char_ids, char_lengths, lengths, mask, tag_tensor, label_tensor)


class Highway(nn.Module):
    """Gated merge r * tanh(W_H x + b_H) + (1 - r) * x with r = sigmoid(W_R x + b_R)."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.transform = nn.Linear(dim, dim)
        self.gate = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected last dim {self.dim}, got {x.shape[-1]}")
        r = torch.sigmoid(self.gate(x))
        return r * torch.tanh(self.transform(x)) + (1.0 - r) * x


def highway_merge(e_char: torch.Tensor, e_word: torch.Tensor, highway: Highway) -> torch.Tensor:
    """Merge character and word representations through a highway layer."""
    return highway(torch.cat([e_char, e_word], dim=-1))


class CharCNN(nn.Module):
    """Character convolution with max pooling over positions."""

    def __init__(self, num_chars: int, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(num_chars, config.char_dim, padding_idx=0)
        self.conv = nn.Conv1d(config.char_dim, config.char_filters, config.char_filter_width)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, char_ids: torch.Tensor, char_lengths: torch.Tensor) -> torch.Tensor:
        """(B, T, C) char ids -> (B, T, char_filters)."""
        b, t, c = char_ids.shape
        flat = char_ids.view(b * t, c)
        emb = self.embedding(flat).transpose(1, 2)  # (B*T, char_dim, C)
        conv = self.conv(emb)  # (B*T, filters, P) with P = C - width + 1
        positions = conv.shape[-1]
        # Only windows that start inside the word contribute to the max.
        valid = (
            torch.clamp(char_lengths.view(b * t), min=self.config.char_filter_width)
            - self.config.char_filter_width
            + 1
        )
        pos_index = torch.arange(positions, device=conv.device).unsqueeze(0)
        pos_mask = pos_index < valid.unsqueeze(1)  # (B*T, P)
        conv = conv.masked_fill(~pos_mask.unsqueeze(1), float("-inf"))
        pooled = conv.max(dim=-1).values
        pooled = torch.where(torch.isneginf(pooled), torch.zeros_like(pooled), pooled)
        return self.dropout(pooled.view(b, t, -1))


class Encoder(nn.Module):
    """Char CNN + word vectors merged by a highway layer, fed to a stacked BiLSTM."""

    def __init__(self, config: EncoderConfig, vocab: Vocabulary, word_matrix: torch.Tensor):
        super().__init__()
        if word_matrix.shape != (vocab.num_words, config.word_dim):
            raise ValueError(
                f"word matrix shape {tuple(word_matrix.shape)} does not match "
                f"vocab size {vocab.num_words} x word_dim {config.word_dim}"
            )
        self.config = config
        self.vocab = vocab
        self.char_cnn = CharCNN(vocab.num_chars, config)
        self.word_embedding = nn.Embedding.from_pretrained(
            word_matrix.clone().float(), freeze=not config.train_word_vectors, padding_idx=0
        )
        if config.normalize_embeddings:
            with torch.no_grad():
                w = normalize_embeddings(self.char_cnn.embedding.weight.data)
                w[0] = 0.0
                self.char_cnn.embedding.weight.data.copy_(w)
        self.highway = Highway(config.merged_dim)
        self.lstm = nn.LSTM(
            config.merged_dim,
            config.lstm_hidden,
            num_layers=config.lstm_layers,
            bidirectional=True,
            batch_first=True,
            dropout=config.dropout if config.lstm_layers > 1 else 0.0,
        )

    @classmethod
    def from_table(cls, config: EncoderConfig, vocab: Vocabulary, table: EmbeddingTable) -> "Encoder":
        if table.dimension != config.word_dim:
            raise ValueError(f"table dimension {table.dimension} != config word_dim {config.word_dim}")
        return cls(config, vocab, build_word_matrix(table, vocab, normalize=config.normalize_embeddings))

    def embed(self, batch: Batch) -> torch.Tensor:
        """Merged per-token embeddings e, shape (B, T, merged_dim)."""
        e_char = self.char_cnn(batch.char_ids, batch.char_lengths)
        e_word = self.word_embedding(batch.word_ids)
        e = highway_merge(e_char, e_word, self.highway)
        return e * batch.mask.unsqueeze(-1).to(e.dtype)

    def contextualize(self, e: torch.Tensor, batch: Batch) -> torch.Tensor:
        """Run the BiLSTM over merged embeddings, shape (B, T, 2 * lstm_hidden)."""
        lengths = torch.clamp(batch.lengths, min=1).cpu()
        packed = nn.utils.rnn.pack_padded_sequence(e, lengths, batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        h, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=e.shape[1])
        return h * batch.mask.unsqueeze(-1).to(h.dtype)

    def forward(self, batch: Batch, perturbation: torch.Tensor | None = None) -> torch.Tensor:
        e = self.embed(batch)
        if perturbation is not None:
            e = e + perturbation
        return self.contextualize(e, batch)

    def char_encode(self, token: str) -> torch.Tensor:
        """Character representation of one token (eval mode), shape (char_filters,)."""
        if not token:
            raise ValueError("token must be non-empty")
        was_training = self.training
        self.eval()
        try:
            c = max(len(token), self.config.char_filter_width)
            ids = torch.zeros((1, 1, c), dtype=torch.long)
            for k, ch in enumerate(token):
                ids[0, 0, k] = self.vocab.char_id(ch)
            lengths = torch.tensor([[len(token)]], dtype=torch.long)
            with torch.no_grad():
                out = self.char_cnn(ids, lengths)
            return out[0, 0]
        finally:
            self.train(was_training)


def encode_sequence(encoder: Encoder, utterance: Utterance, mode: str = "eval") -> torch.Tensor:
    """Contextual states for one utterance, shape (n, 2 * lstm_hidden).

    Empty utterances yield an empty (0, 2H) tensor; callers must handle it.
    Dropout applies only in "train" mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if len(utterance.tokens) == 0:
        return torch.zeros((0, encoder.config.output_dim))
    was_training = encoder.training
    encoder.train(mode == "train")
    try:
        batch = make_batch([utterance], encoder.vocab, encoder.config)
        if mode == "eval":
            with torch.no_grad():
                h = encoder(batch)
        else:
            h = encoder(batch)
        return h[0, : len(utterance.tokens)]
    finally:
        encoder.train(was_training)

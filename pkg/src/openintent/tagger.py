"""Stage II: encoder + self-attention + CRF tagger with adversarial training.

Training follows a pretrain-on-proxy-tags then fine-tune-on-gold regime. The
adversarial option perturbs the merged token embeddings with a worst-case
bounded-norm direction from the fast gradient method and mixes clean and
perturbed losses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .attention import MultiHeadSelfAttention
from .corpus import EmbeddingTable, TagLabel, TaggedUtterance, Utterance, Vocabulary, match_phrases
from .crf import (
    BIO_SCHEME,
    ConstraintSet,
    DEFAULT_BEAM_WIDTH,
    DEFAULT_WINDOW_LEN,
    LabelScheme,
    LinearChainCRF,
    RAW_SCHEME,
    beam_decode_constrained,
    ilp_decode_constrained_ids,
    labels_for_scheme,
    tags_to_bio_ids,
    viterbi_ids,
    windows_from_matches,
)
from .encoder import Batch, Encoder, EncoderConfig, make_batch
from .existence import TrainConfig, inverse_time_decay

logger = logging.getLogger(__name__)


class Decoder(Enum):
    VITERBI = "viterbi"
    BEAM = "beam"
    ILP = "ilp"


@dataclass
class AdversarialConfig:
    enabled: bool = False
    epsilon: float = 1.0
    alpha: float = 0.5

    def __post_init__(self):
        if self.enabled and self.epsilon <= 0:
            raise ValueError("epsilon must be positive when adversarial training is enabled")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must be in [0, 1]")


def adversarial_perturbation(g, epsilon: float):
    """Fast-gradient direction of L2 norm epsilon: eta = epsilon * g / ||g||.

    The norm is taken over the flattened input; a zero gradient yields a zero
    perturbation. Accepts a tensor or array and returns the same kind.
    """
    if isinstance(g, torch.Tensor):
        norm = torch.linalg.vector_norm(g)
        if float(norm) == 0.0:
            return torch.zeros_like(g)
        return epsilon * g / norm
    arr = np.asarray(g, dtype=np.float64)
    norm = np.linalg.norm(arr)
    if norm == 0.0:
        return np.zeros_like(arr)
    return epsilon * arr / norm


class TaggerModel(nn.Module):
    """Single-layer BiLSTM encoder, multi-head self-attention, linear-chain CRF."""

    def __init__(
        self,
        encoder: Encoder,
        attention: MultiHeadSelfAttention,
        crf: LinearChainCRF,
        scheme: LabelScheme = RAW_SCHEME,
        indicator_lexicon: Sequence[str] = (),
        pair_existence: bool = True,
        window_len: int = DEFAULT_WINDOW_LEN,
        beam_width: int = DEFAULT_BEAM_WIDTH,
        residual_attention: bool = False,
    ):
        super().__init__()
        if attention.input_dim != encoder.config.output_dim:
            raise ValueError("attention input dim must equal encoder output dim")
        expected = attention.output_dim + (encoder.config.output_dim if residual_attention else 0)
        if crf.emission.in_features != expected:
            raise ValueError(f"CRF expects input dim {crf.emission.in_features}, chain provides {expected}")
        if crf.num_labels != scheme.size:
            raise ValueError(f"CRF has {crf.num_labels} labels, scheme {scheme.labels} needs {scheme.size}")
        self.encoder = encoder
        self.attention = attention
        self.crf = crf
        self.scheme = scheme
        self.indicator_lexicon = tuple(indicator_lexicon)
        self.pair_existence = pair_existence
        self.window_len = window_len
        self.beam_width = beam_width
        self.residual_attention = residual_attention
        self.train_log: dict[str, list[float]] = {}

    def features(self, batch: Batch, perturbation: torch.Tensor | None = None) -> torch.Tensor:
        """CRF input sequence z for a batch, shape (B, T, crf_input_dim)."""
        h = self.encoder(batch, perturbation=perturbation)
        z, _ = self.attention(h, mask=batch.mask)
        if self.residual_attention:
            z = torch.cat([z, h], dim=-1)
        return z

    def batch_tags(self, batch: Batch) -> torch.Tensor:
        if self.scheme is BIO_SCHEME:
            rows = []
            for i in range(batch.tags.shape[0]):
                length = int(batch.lengths[i])
                raw = [TagLabel(int(v)) for v in batch.tags[i, :length]]
                ids = tags_to_bio_ids(raw)
                ids += [ids[-1] if ids else 0] * (batch.tags.shape[1] - length)
                rows.append(ids)
            return torch.tensor(rows, dtype=torch.long)
        return batch.tags

    def loss(self, batch: Batch, perturbation: torch.Tensor | None = None) -> torch.Tensor:
        """Mean CRF negative log-likelihood of the batch's gold tags."""
        z = self.features(batch, perturbation=perturbation)
        emissions = self.crf.emissions(z)
        return self.crf.nll(emissions, self.batch_tags(batch), batch.mask)

    def constraints_for(self, utterance: Utterance) -> ConstraintSet:
        matches = match_phrases(utterance.tokens, self.indicator_lexicon)
        return ConstraintSet(
            pair_existence=self.pair_existence,
            indicator_windows=windows_from_matches(matches, self.window_len),
        )


def combined_loss(model: TaggerModel, batch: Batch, adv: AdversarialConfig) -> torch.Tensor:
    """alpha * clean loss + (1 - alpha) * loss at the adversarially perturbed embedding.

    The perturbation direction comes from the gradient of the clean loss with
    respect to the merged embeddings, normalized per utterance, and is treated
    as a constant (no second-order term). With adversarial training disabled
    or alpha = 1 this is exactly the clean loss.
    """
    if not adv.enabled or adv.alpha >= 1.0:
        return model.loss(batch)
    e = model.encoder.embed(batch)
    h = model.encoder.contextualize(e, batch)
    z, _ = model.attention(h, mask=batch.mask)
    if model.residual_attention:
        z = torch.cat([z, h], dim=-1)
    clean = model.crf.nll(model.crf.emissions(z), model.batch_tags(batch), batch.mask)

    (grad,) = torch.autograd.grad(clean, e, retain_graph=True, create_graph=False)
    eta = torch.zeros_like(e)
    for i in range(e.shape[0]):
        eta[i] = adversarial_perturbation(grad[i], adv.epsilon)
    h_adv = model.encoder.contextualize(e + eta.detach(), batch)
    z_adv, _ = model.attention(h_adv, mask=batch.mask)
    if model.residual_attention:
        z_adv = torch.cat([z_adv, h_adv], dim=-1)
    adv_loss = model.crf.nll(model.crf.emissions(z_adv), model.batch_tags(batch), batch.mask)
    return adv.alpha * clean + (1.0 - adv.alpha) * adv_loss


def build_tagger(
    encoder_config: EncoderConfig,
    vocab: Vocabulary,
    table: EmbeddingTable,
    heads: int = 4,
    scheme: LabelScheme = RAW_SCHEME,
    indicator_lexicon: Sequence[str] = (),
    pair_existence: bool = True,
    window_len: int = DEFAULT_WINDOW_LEN,
    beam_width: int = DEFAULT_BEAM_WIDTH,
    residual_attention: bool = False,
    seed: int | None = None,
) -> TaggerModel:
    """Construct a tagger with dimensions chained encoder -> attention -> CRF."""
    if seed is not None:
        torch.manual_seed(seed)
    encoder = Encoder.from_table(encoder_config, vocab, table)
    attention = MultiHeadSelfAttention(encoder_config.output_dim, heads=heads)
    crf_input = attention.output_dim + (encoder_config.output_dim if residual_attention else 0)
    crf = LinearChainCRF(crf_input, num_labels=scheme.size)
    return TaggerModel(
        encoder,
        attention,
        crf,
        scheme=scheme,
        indicator_lexicon=indicator_lexicon,
        pair_existence=pair_existence,
        window_len=window_len,
        beam_width=beam_width,
        residual_attention=residual_attention,
    )


def _train_epochs(
    model: TaggerModel,
    corpus: Sequence[TaggedUtterance],
    config: TrainConfig,
    adv: AdversarialConfig,
    log_key: str,
    dev: Sequence[TaggedUtterance] = (),
) -> None:
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.l2_coeff)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, inverse_time_decay(config.lr_decay))
    order_rng = torch.Generator().manual_seed(config.seed)
    losses = model.train_log.setdefault(log_key, [])
    dev_f1 = model.train_log.setdefault(f"{log_key}_dev_tag_f1", [])

    examples = [tu for tu in corpus if len(tu.utterance.tokens) > 0]
    model.train()
    for epoch in range(config.epochs):
        perm = torch.randperm(len(examples), generator=order_rng).tolist()
        epoch_losses = []
        for lo in range(0, len(examples), config.batch_size):
            chunk = [examples[i] for i in perm[lo : lo + config.batch_size]]
            batch = make_batch(
                [tu.utterance for tu in chunk],
                model.encoder.vocab,
                model.encoder.config,
                tags=[tu.tags for tu in chunk],
            )
            optimizer.zero_grad()
            loss = combined_loss(model, batch, adv)
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
            optimizer.step()
            epoch_losses.append(loss.detach().item())
        scheduler.step()
        mean_loss = float(np.mean(epoch_losses))
        losses.append(mean_loss)
        if dev:
            f1 = _dev_tag_f1(model, dev)
            dev_f1.append(f1)
            logger.info("%s epoch %d: loss %.4f dev tag F1 %.4f", log_key, epoch, mean_loss, f1)
        else:
            logger.info("%s epoch %d: loss %.4f", log_key, epoch, mean_loss)
    model.eval()


def _dev_tag_f1(model: TaggerModel, dev: Sequence[TaggedUtterance]) -> float:
    from .metrics import tag_prf  # local import to avoid a module cycle

    pred = [tag(model, tu.utterance).tags for tu in dev]
    gold = [tu.tags for tu in dev]
    scores = [tag_prf(pred, gold, label).f1 for label in (TagLabel.ACTION, TagLabel.OBJECT)]
    return float(np.mean(scores))


def pretrain(
    model: TaggerModel,
    proxy_corpus: Sequence[TaggedUtterance],
    config: TrainConfig,
    adv: AdversarialConfig | None = None,
) -> TaggerModel:
    """Train on proxy ACTION/OBJECT/NONE tags. Adversarial training is off by
    default during pre-training."""
    if not proxy_corpus:
        raise ValueError("proxy corpus is empty")
    _train_epochs(model, proxy_corpus, config, adv or AdversarialConfig(enabled=False), "pretrain")
    if config.checkpoint_path:
        from .bundle import save_tagger  # local import to avoid a module cycle

        save_tagger(config.checkpoint_path, model)
    return model


def fine_tune(
    model: TaggerModel,
    corpus: Sequence[TaggedUtterance],
    config: TrainConfig,
    adv: AdversarialConfig | None = None,
) -> TaggerModel:
    """Continue training on gold intent tags; optimizer state starts fresh.

    A dev split of ``config.dev_fraction`` is held out for per-epoch tag-F1
    logging (model.train_log["fine_tune_dev_tag_f1"]).
    """
    if not corpus:
        raise ValueError("labeled corpus is empty")
    examples = list(corpus)
    rng = torch.Generator().manual_seed(config.seed + 1)
    perm = torch.randperm(len(examples), generator=rng).tolist()
    n_dev = int(len(examples) * config.dev_fraction)
    dev = [examples[i] for i in perm[:n_dev]]
    train = [examples[i] for i in perm[n_dev:]]
    _train_epochs(model, train, config, adv or AdversarialConfig(enabled=False), "fine_tune", dev=dev)
    if config.checkpoint_path:
        from .bundle import save_tagger

        save_tagger(config.checkpoint_path, model)
    return model


def tag(model: TaggerModel, utterance: Utterance, decoder: Decoder = Decoder.VITERBI) -> TaggedUtterance:
    """Tag one utterance with the chosen decoder.

    BEAM and ILP decoding apply the model's constraint configuration: pair
    existence plus indicator windows found in the utterance.
    """
    if len(utterance.tokens) == 0:
        return TaggedUtterance(utterance=utterance, tags=())
    was_training = model.training
    model.eval()
    try:
        batch = make_batch([utterance], model.encoder.vocab, model.encoder.config)
        with torch.no_grad():
            z = model.features(batch)[0, : len(utterance.tokens)]
        if decoder is Decoder.VITERBI:
            ids = viterbi_ids(z, model.crf)
        elif decoder is Decoder.BEAM:
            ids = beam_decode_constrained(
                z, model.crf, model.constraints_for(utterance), model.beam_width, model.scheme
            ).label_ids
        elif decoder is Decoder.ILP:
            ids = ilp_decode_constrained_ids(z, model.crf, model.constraints_for(utterance), model.scheme)
        else:
            raise ValueError(f"unknown decoder {decoder}")
        tags = labels_for_scheme(ids, model.scheme)
        return TaggedUtterance(utterance=utterance, tags=tuple(tags))
    finally:
        model.train(was_training)


def decoded_label_ids(model: TaggerModel, utterance: Utterance, decoder: Decoder = Decoder.VITERBI) -> list[int]:
    """Scheme-level label ids (useful in BIO mode where runs carry boundaries)."""
    if len(utterance.tokens) == 0:
        return []
    batch = make_batch([utterance], model.encoder.vocab, model.encoder.config)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            z = model.features(batch)[0, : len(utterance.tokens)]
        if decoder is Decoder.VITERBI:
            return viterbi_ids(z, model.crf)
        if decoder is Decoder.BEAM:
            return beam_decode_constrained(
                z, model.crf, model.constraints_for(utterance), model.beam_width, model.scheme
            ).label_ids
        return ilp_decode_constrained_ids(z, model.crf, model.constraints_for(utterance), model.scheme)
    finally:
        model.train(was_training)

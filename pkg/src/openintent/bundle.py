"""Versioned model bundles: config plus named parameter tensors in one file."""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch

from .corpus import EmbeddingTable, UnkPolicy, Vocabulary
from .crf import BIO_SCHEME, LinearChainCRF, RAW_SCHEME
from .encoder import Encoder, EncoderConfig

FORMAT_VERSION = 1


class ModelError(RuntimeError):
    """A model bundle is missing, unreadable, or incompatible."""


def _vocab_payload(vocab: Vocabulary) -> dict:
    return {"words": vocab.words_in_order(), "chars": vocab.chars_in_order()}


def _vocab_from_payload(payload: dict) -> Vocabulary:
    return Vocabulary(
        word_to_id={w: i for i, w in enumerate(payload["words"])},
        char_to_id={c: i for i, c in enumerate(payload["chars"])},
    )


def _table_payload(table: EmbeddingTable, restrict_to: set[str] | None = None) -> dict:
    words = sorted(table.entries.keys() if restrict_to is None else restrict_to & set(table.entries))
    vectors = (
        torch.stack([torch.from_numpy(table.lookup(w)) for w in words])
        if words
        else torch.zeros((0, table.dimension))
    )
    return {
        "dimension": table.dimension,
        "policy": table.unk_policy.value,
        "words": words,
        "vectors": vectors,
    }


def _table_from_payload(payload: dict) -> EmbeddingTable:
    vectors = payload["vectors"]
    entries = {w: vectors[i].numpy() for i, w in enumerate(payload["words"])}
    return EmbeddingTable(
        dimension=int(payload["dimension"]),
        entries=entries,
        unk_policy=UnkPolicy(payload["policy"]),
    )


def _write(path, payload: dict) -> None:
    payload = dict(payload)
    payload["format_version"] = FORMAT_VERSION
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def _read(path, expected_kind: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ModelError(f"model bundle not found: {p}")
    try:
        payload = torch.load(p, map_location="cpu", weights_only=True)
    except Exception as e:
        raise ModelError(f"cannot read model bundle {p}: {e}") from e
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelError(f"bundle {p} has format version {version}, expected {FORMAT_VERSION}")
    kind = payload.get("kind")
    if kind != expected_kind:
        raise ModelError(f"bundle {p} contains a {kind!r} model, expected {expected_kind!r}")
    return payload


def save_existence(path, model) -> None:
    from .existence import ExistenceModel

    assert isinstance(model, ExistenceModel)
    _write(
        path,
        {
            "kind": "existence",
            "encoder_config": asdict(model.encoder.config),
            "vocab": _vocab_payload(model.encoder.vocab),
            "threshold": model.threshold,
            "state_dict": model.state_dict(),
        },
    )


def load_existence(path):
    from .existence import ExistenceModel

    payload = _read(path, "existence")
    config = EncoderConfig(**payload["encoder_config"])
    vocab = _vocab_from_payload(payload["vocab"])
    encoder = Encoder(config, vocab, torch.zeros((vocab.num_words, config.word_dim)))
    model = ExistenceModel(encoder, threshold=float(payload["threshold"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def save_tagger(path, model, matcher=None) -> None:
    from .tagger import TaggerModel

    assert isinstance(model, TaggerModel)
    payload = {
        "kind": "tagger",
        "encoder_config": asdict(model.encoder.config),
        "vocab": _vocab_payload(model.encoder.vocab),
        "heads": model.attention.heads,
        "head_dim": model.attention.head_dim,
        "scheme": "bio" if model.scheme is BIO_SCHEME else "raw",
        "indicator_lexicon": list(model.indicator_lexicon),
        "pair_existence": model.pair_existence,
        "window_len": model.window_len,
        "beam_width": model.beam_width,
        "residual_attention": model.residual_attention,
        "state_dict": model.state_dict(),
    }
    if matcher is not None:
        payload["matcher"] = {
            "hidden": list(matcher.hidden),
            "table": _table_payload(matcher.table),
            "state_dict": matcher.state_dict(),
        }
    _write(path, payload)


def load_tagger(path):
    from .attention import MultiHeadSelfAttention
    from .assembly import MatcherModel
    from .tagger import TaggerModel

    payload = _read(path, "tagger")
    config = EncoderConfig(**payload["encoder_config"])
    vocab = _vocab_from_payload(payload["vocab"])
    encoder = Encoder(config, vocab, torch.zeros((vocab.num_words, config.word_dim)))
    attention = MultiHeadSelfAttention(
        config.output_dim, heads=int(payload["heads"]), head_dim=int(payload["head_dim"])
    )
    scheme = BIO_SCHEME if payload["scheme"] == "bio" else RAW_SCHEME
    crf_input = attention.output_dim + (config.output_dim if payload["residual_attention"] else 0)
    crf = LinearChainCRF(crf_input, num_labels=scheme.size)
    model = TaggerModel(
        encoder,
        attention,
        crf,
        scheme=scheme,
        indicator_lexicon=payload["indicator_lexicon"],
        pair_existence=bool(payload["pair_existence"]),
        window_len=int(payload["window_len"]),
        beam_width=int(payload["beam_width"]),
        residual_attention=bool(payload["residual_attention"]),
    )
    model.load_state_dict(payload["state_dict"])
    model.eval()
    matcher = None
    if "matcher" in payload:
        m = payload["matcher"]
        matcher = MatcherModel(_table_from_payload(m["table"]), hidden=tuple(m["hidden"]))
        matcher.load_state_dict(m["state_dict"])
        matcher.eval()
    return model, matcher

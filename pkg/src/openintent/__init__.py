"""Open intent discovery: intent existence classification and intent extraction.

Stage one decides whether an utterance contains an actionable intent; stage
two tags Action/Object spans with a BiLSTM + self-attention + CRF tagger
under global decoding constraints and assembles the spans into intents.
"""

from .corpus import (
    CorpusFormat,
    CorpusFormatError,
    EmbeddingTable,
    ExistenceExample,
    Intent,
    IntentSource,
    Span,
    TagLabel,
    TaggedUtterance,
    UnkPolicy,
    Utterance,
    Vocabulary,
    generate_synthetic_corpus,
    load_embeddings,
    read_proxy_tag_corpus,
    read_tagged_corpus,
    rule_based_proxy_tagger,
    tokenize,
    write_tagged_corpus,
)

__all__ = [
    "CorpusFormat",
    "CorpusFormatError",
    "EmbeddingTable",
    "ExistenceExample",
    "Intent",
    "IntentSource",
    "Span",
    "TagLabel",
    "TaggedUtterance",
    "UnkPolicy",
    "Utterance",
    "Vocabulary",
    "generate_synthetic_corpus",
    "load_embeddings",
    "read_proxy_tag_corpus",
    "read_tagged_corpus",
    "rule_based_proxy_tagger",
    "tokenize",
    "write_tagged_corpus",
]

__version__ = "0.1.0"

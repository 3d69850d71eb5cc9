import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from openintent.corpus import (
    CorpusFormat,
    CorpusFormatError,
    EmbeddingTable,
    Intent,
    Span,
    TagLabel,
    TaggedUtterance,
    UnkPolicy,
    Utterance,
    Vocabulary,
    generate_synthetic_corpus,
    instantiate_template,
    load_embeddings,
    match_phrases,
    read_proxy_tag_corpus,
    read_tagged_corpus,
    rule_based_proxy_tagger,
    split_by_domain,
    tokenize,
    utterance_from_tokens,
    write_tagged_corpus,
)


class TestTokenize:
    def test_whitespace_and_punct(self):
        assert tokenize("reserve a seat.").tokens == ("reserve", "a", "seat", ".")

    def test_empty(self):
        assert tokenize("").tokens == ()
        assert tokenize("   \t ").tokens == ()

    def test_digit_internal_punct_kept(self):
        utt = tokenize("Please make a 10:30 sharp appointment for a haircut")
        assert len(utt.tokens) == 9
        assert "10:30" in utt.tokens

    def test_offsets_reconstruct_tokens(self):
        text = "I'd like to book 2 rooms, ok?"
        utt = tokenize(text)
        for tok, (start, end) in zip(utt.tokens, utt.char_offsets):
            assert text[start:end] == tok

    def test_case_preserved(self):
        assert tokenize("Book THE Table").tokens == ("Book", "THE", "Table")

    def test_deterministic(self):
        a = tokenize("update the driver, please")
        b = tokenize("update the driver, please")
        assert a.tokens == b.tokens and a.char_offsets == b.char_offsets

    @given(st.text(max_size=80))
    @settings(max_examples=200, deadline=None)
    def test_offsets_always_valid(self, text):
        utt = tokenize(text)
        for tok, (start, end) in zip(utt.tokens, utt.char_offsets):
            assert 0 <= start < end <= len(text)
            assert text[start:end] == tok
            assert tok

    def test_idempotent_on_join(self):
        utt = tokenize("please cancel my flight !")
        again = tokenize(" ".join(utt.tokens))
        assert again.tokens == utt.tokens


class TestUtteranceInvariants:
    def test_offset_must_match_token(self):
        with pytest.raises(ValueError):
            Utterance(id="x", text="ab", tokens=("b",), char_offsets=((0, 1),))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            Utterance(id="x", text="ab", tokens=("a", "b"), char_offsets=((0, 1),))

    def test_tagged_length_mismatch(self):
        utt = tokenize("a b")
        with pytest.raises(ValueError):
            TaggedUtterance(utterance=utt, tags=(TagLabel.NONE,))


class TestEmbeddings:
    def test_load_two_lines(self, tmp_path):
        p = tmp_path / "vec.txt"
        p.write_text("a 1.0 0.0\nb 0.0 1.0\n")
        table = load_embeddings(p)
        assert table.dimension == 2
        assert np.allclose(table.lookup("a"), [1.0, 0.0])

    def test_zero_policy(self, tmp_path):
        p = tmp_path / "vec.txt"
        p.write_text("a 1.0 0.0\n")
        table = load_embeddings(p, unk_policy=UnkPolicy.ZERO)
        assert np.allclose(table.lookup("zzz-unseen"), [0.0, 0.0])

    def test_dimension_mismatch_names_line(self, tmp_path):
        p = tmp_path / "vec.txt"
        p.write_text("a 1.0 0.0\nb 0.0 1.0\nc 1.0\n")
        with pytest.raises(CorpusFormatError) as err:
            load_embeddings(p)
        assert err.value.line == 3

    def test_unreadable_path(self, tmp_path):
        with pytest.raises(OSError):
            load_embeddings(tmp_path / "missing.txt")

    def test_duplicates_keep_first(self, tmp_path):
        p = tmp_path / "vec.txt"
        p.write_text("a 1.0 0.0\na 9.0 9.0\n")
        assert np.allclose(load_embeddings(p).lookup("a"), [1.0, 0.0])

    def test_hashed_random_deterministic_and_distinct(self):
        table = EmbeddingTable(dimension=8)
        v1 = table.lookup("frobnicate")
        v2 = table.lookup("frobnicate")
        v3 = table.lookup("defrag")
        assert np.array_equal(v1, v2)
        assert not np.array_equal(v1, v3)
        assert np.isclose(np.linalg.norm(v1), 1.0, atol=1e-6)

    @given(st.text(min_size=1, max_size=12))
    @settings(max_examples=50, deadline=None)
    def test_lookup_total_under_both_policies(self, word):
        for policy in UnkPolicy:
            table = EmbeddingTable(dimension=4, unk_policy=policy)
            a = table.lookup(word)
            b = table.lookup(word)
            assert a.shape == (4,)
            assert np.array_equal(a, b)


class TestTaggedCorpusIO:
    def test_column_roundtrip(self, tmp_path):
        p = tmp_path / "c.col"
        p.write_text("make\tACTION\nappointment\tOBJECT\n\n")
        corpus = read_tagged_corpus(p, CorpusFormat.COLUMN)
        assert len(corpus) == 1
        assert corpus[0].tags == (TagLabel.ACTION, TagLabel.OBJECT)
        out = tmp_path / "out.col"
        write_tagged_corpus(corpus, out, CorpusFormat.COLUMN)
        again = read_tagged_corpus(out, CorpusFormat.COLUMN)
        assert [tu.utterance.tokens for tu in again] == [tu.utterance.tokens for tu in corpus]
        assert [tu.tags for tu in again] == [tu.tags for tu in corpus]

    def test_case_insensitive_tags(self, tmp_path):
        p = tmp_path / "c.col"
        p.write_text("seat\tobject\n\n")
        assert read_tagged_corpus(p)[0].tags == (TagLabel.OBJECT,)

    def test_unknown_tag(self, tmp_path):
        p = tmp_path / "c.col"
        p.write_text("seat\tTHING\n\n")
        with pytest.raises(CorpusFormatError):
            read_tagged_corpus(p)

    def test_jsonl_tag_count_mismatch_names_record(self, tmp_path):
        p = tmp_path / "c.jsonl"
        p.write_text('{"text": "a b c", "tags": ["NONE", "NONE"]}\n')
        with pytest.raises(CorpusFormatError) as err:
            read_tagged_corpus(p, CorpusFormat.JSONL)
        assert err.value.line == 1

    def test_jsonl_roundtrip_with_intents(self, tmp_path):
        corpus, _ = generate_synthetic_corpus(20, seed=3)
        p = tmp_path / "c.jsonl"
        write_tagged_corpus(corpus, p, CorpusFormat.JSONL)
        again = read_tagged_corpus(p, CorpusFormat.JSONL)
        assert len(again) == len(corpus)
        for a, b in zip(again, corpus):
            assert a.utterance.tokens == b.utterance.tokens
            assert a.tags == b.tags
            assert [(i.action.surface, i.object.surface) for i in a.gold_intents] == [
                (i.action.surface, i.object.surface) for i in b.gold_intents
            ]


class TestProxyTags:
    def test_verb_obj_mapping(self, tmp_path):
        p = tmp_path / "p.col"
        p.write_text("reserve\tVERB\nseat\tOBJ\n\n")
        corpus = read_proxy_tag_corpus(p)
        assert corpus[0].tags == (TagLabel.ACTION, TagLabel.OBJECT)

    def test_all_none_accepted(self, tmp_path):
        p = tmp_path / "p.col"
        p.write_text("the\tNONE\nweather\tNONE\n\n")
        assert read_proxy_tag_corpus(p)[0].tags == (TagLabel.NONE, TagLabel.NONE)

    def test_unknown_proxy_tag(self, tmp_path):
        p = tmp_path / "p.col"
        p.write_text("seat\tNOUN\n\n")
        with pytest.raises(CorpusFormatError):
            read_proxy_tag_corpus(p)


class TestRuleBasedProxyTagger:
    def test_lexicon_lookup(self):
        utt = utterance_from_tokens(["reserve", "a", "seat"], "u0")
        tagged = rule_based_proxy_tagger(utt, {"reserve"}, {"seat"})
        assert tagged.tags == (TagLabel.ACTION, TagLabel.NONE, TagLabel.OBJECT)

    def test_empty_lexicons(self):
        utt = utterance_from_tokens(["reserve", "a", "seat"], "u0")
        tagged = rule_based_proxy_tagger(utt, set(), set())
        assert set(tagged.tags) == {TagLabel.NONE}

    def test_verb_wins_tie(self):
        utt = utterance_from_tokens(["book"], "u0")
        tagged = rule_based_proxy_tagger(utt, {"book"}, {"book"})
        assert tagged.tags == (TagLabel.ACTION,)


class TestSyntheticCorpus:
    def test_deterministic(self):
        a_tagged, a_exist = generate_synthetic_corpus(50, seed=7)
        b_tagged, b_exist = generate_synthetic_corpus(50, seed=7)
        assert [t.utterance.text for t in a_tagged] == [t.utterance.text for t in b_tagged]
        assert [t.tags for t in a_tagged] == [t.tags for t in b_tagged]
        assert [e.has_intent for e in a_exist] == [e.has_intent for e in b_exist]

    def test_positive_ratio(self):
        _, exist = generate_synthetic_corpus(100, seed=0, positive_ratio=0.5)
        assert sum(e.has_intent for e in exist) == 50

    def test_template_tags(self):
        tu = instantiate_template("please ACT the OBJ", {"ACT": "book"}, {"OBJ": "table"})
        assert tu.utterance.tokens == ("please", "book", "the", "table")
        assert tu.tags == (TagLabel.NONE, TagLabel.ACTION, TagLabel.NONE, TagLabel.OBJECT)
        assert len(tu.gold_intents) == 1
        assert tu.gold_intents[0].surface == "book table"

    def test_multi_intent_template(self):
        tu = instantiate_template(
            "i want to ACT1 a OBJ1 and ACT2 a OBJ2",
            {"1": "reserve", "2": "request"},
            {"1": "seat", "2": "special meal"},
        )
        assert [i.surface for i in tu.gold_intents] == ["reserve seat", "request special meal"]
        assert tu.tags.count(TagLabel.OBJECT) == 3

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            generate_synthetic_corpus(0)

    def test_domains_and_gold_intents(self):
        tagged, exist = generate_synthetic_corpus(200, seed=1)
        domains = split_by_domain(tagged)
        assert len(domains) >= 3
        for tu, ex in zip(tagged, exist):
            if ex.has_intent:
                assert tu.gold_intents
                assert TagLabel.ACTION in tu.tags and TagLabel.OBJECT in tu.tags
            else:
                assert not tu.gold_intents
                assert set(tu.tags) == {TagLabel.NONE}


class TestSpansAndIntents:
    def test_span_invariants(self):
        with pytest.raises(ValueError):
            Span(2, 2, TagLabel.ACTION, "x")
        with pytest.raises(ValueError):
            Span(0, 1, TagLabel.NONE, "x")

    def test_intent_label_checks(self):
        a = Span(0, 1, TagLabel.ACTION, "book")
        o = Span(2, 3, TagLabel.OBJECT, "table")
        Intent(action=a, object=o)
        with pytest.raises(ValueError):
            Intent(action=o, object=o)


class TestMatchPhrases:
    def test_multiword_case_insensitive(self):
        tokens = ["I", "Want", "To", "book", "a", "table"]
        assert match_phrases(tokens, ["want to"]) == [(1, 3)]

    def test_no_match(self):
        assert match_phrases(["hello", "there"], ["want to"]) == []


def test_vocabulary_reserved_ids():
    tagged, _ = generate_synthetic_corpus(10, seed=2)
    vocab = Vocabulary.build(t.utterance for t in tagged)
    assert vocab.word_to_id["<pad>"] == 0
    assert vocab.word_to_id["<unk>"] == 1
    ids = sorted(vocab.word_to_id.values())
    assert ids == list(range(len(ids)))
    assert vocab.word_id("NEVER-SEEN-zzz") == 1

import numpy as np
import pytest
import torch

from openintent.corpus import EmbeddingTable, Vocabulary, generate_synthetic_corpus, tokenize
from openintent.encoder import (
    Encoder,
    EncoderConfig,
    Highway,
    build_word_matrix,
    encode_sequence,
    highway_merge,
    make_batch,
    normalize_embeddings,
    reset_truncation_count,
)
import openintent.encoder as encoder_mod


def tiny_config(**overrides):
    defaults = dict(
        char_dim=6, char_filters=8, char_filter_width=3, word_dim=10,
        lstm_hidden=7, lstm_layers=1, dropout=0.0,
    )
    defaults.update(overrides)
    return EncoderConfig(**defaults)


@pytest.fixture
def setup():
    torch.manual_seed(0)
    tagged, _ = generate_synthetic_corpus(30, seed=5)
    vocab = Vocabulary.build(t.utterance for t in tagged)
    table = EmbeddingTable(dimension=10)
    config = tiny_config()
    encoder = Encoder.from_table(config, vocab, table)
    return encoder, vocab, table, config


class TestCharEncode:
    def test_single_char_token_shape(self, setup):
        encoder, *_ = setup
        out = encoder.char_encode("a")
        assert out.shape == (8,)
        assert torch.isfinite(out).all()

    def test_eval_deterministic(self, setup):
        encoder, *_ = setup
        a = encoder.char_encode("haircut")
        b = encoder.char_encode("haircut")
        assert torch.equal(a, b)

    def test_zero_kernels_zero_output(self, setup):
        encoder, *_ = setup
        with torch.no_grad():
            encoder.char_cnn.conv.weight.zero_()
            encoder.char_cnn.conv.bias.zero_()
        for token in ("a", "flight", "10:30"):
            assert torch.equal(encoder.char_encode(token), torch.zeros(8))


class TestHighway:
    def test_carry_gate_limit(self):
        torch.manual_seed(1)
        hw = Highway(6)
        with torch.no_grad():
            hw.gate.bias.fill_(-1e6)
        x = torch.randn(4, 6)
        assert torch.allclose(hw(x), x)

    def test_transform_gate_limit(self):
        torch.manual_seed(1)
        hw = Highway(6)
        with torch.no_grad():
            hw.gate.bias.fill_(1e6)
        x = torch.randn(4, 6)
        assert torch.allclose(hw(x), torch.tanh(hw.transform(x)))

    def test_output_between_branches(self):
        # Every component is a convex combination of the transform branch and
        # the carry branch, so it lies between them.
        torch.manual_seed(2)
        hw = Highway(9)
        x = torch.randn(50, 9)
        out = hw(x)
        transformed = torch.tanh(hw.transform(x))
        lo = torch.minimum(transformed, x)
        hi = torch.maximum(transformed, x)
        assert (out >= lo - 1e-6).all()
        assert (out <= hi + 1e-6).all()

    def test_shape_mismatch(self):
        hw = Highway(4)
        with pytest.raises(ValueError):
            hw(torch.zeros(3, 5))

    def test_merge_concat_order(self):
        torch.manual_seed(3)
        hw = Highway(5)
        e_c = torch.randn(5, 2)
        e_w = torch.randn(5, 3)
        merged = highway_merge(e_c, e_w, hw)
        assert merged.shape == (5, 5)


class TestEncodeSequence:
    def test_single_token_shape(self, setup):
        encoder, *_ = setup
        h = encode_sequence(encoder, tokenize("book"))
        assert h.shape == (1, 14)

    def test_empty_utterance(self, setup):
        encoder, *_ = setup
        h = encode_sequence(encoder, tokenize(""))
        assert h.shape == (0, 14)

    def test_eval_repeatable(self, setup):
        encoder, *_ = setup
        utt = tokenize("please book the table")
        assert torch.equal(encode_sequence(encoder, utt), encode_sequence(encoder, utt))

    def test_batch_slicing_consistent(self, setup):
        encoder, vocab, _, config = setup
        utt1 = tokenize("please book the table")
        utt2 = tokenize("cancel my flight")
        batch = make_batch([utt1, utt2], vocab, config)
        encoder.eval()
        with torch.no_grad():
            h = encoder(batch)
        single1 = encode_sequence(encoder, utt1)
        single2 = encode_sequence(encoder, utt2)
        assert torch.allclose(h[0, :4], single1, atol=1e-6)
        assert torch.allclose(h[1, :3], single2, atol=1e-6)

    def test_reversal_swaps_directions_with_tied_weights(self, setup):
        # With forward and backward LSTM weights tied, reversing the token
        # order swaps the roles of the forward/backward halves of each state.
        encoder, *_ = setup
        lstm = encoder.lstm
        with torch.no_grad():
            for name in ("weight_ih_l0", "weight_hh_l0", "bias_ih_l0", "bias_hh_l0"):
                getattr(lstm, f"{name}_reverse").copy_(getattr(lstm, name))
        utt = tokenize("cancel the flight now")
        rev = tokenize("now flight the cancel")
        h = encode_sequence(encoder, utt)
        h_rev = encode_sequence(encoder, rev)
        hidden = encoder.config.lstm_hidden
        n = h.shape[0]
        for t in range(n):
            fwd, bwd = h[t, :hidden], h[t, hidden:]
            rev_fwd, rev_bwd = h_rev[n - 1 - t, :hidden], h_rev[n - 1 - t, hidden:]
            assert torch.allclose(fwd, rev_bwd, atol=1e-6)
            assert torch.allclose(bwd, rev_fwd, atol=1e-6)

    def test_two_layer_stack(self, setup):
        _, vocab, table, _ = setup
        config = tiny_config(lstm_layers=2)
        encoder = Encoder.from_table(config, vocab, table)
        h = encode_sequence(encoder, tokenize("book a table"))
        assert h.shape == (3, 14)

    def test_truncation_counter(self, setup):
        _, vocab, table, _ = setup
        config = tiny_config(max_tokens=4)
        encoder = Encoder.from_table(config, vocab, table)
        reset_truncation_count()
        utt = tokenize("one two three four five six")
        h = encode_sequence(encoder, utt)
        assert h.shape[0] == 4
        assert encoder_mod.truncation_count == 1
        reset_truncation_count()


class TestNormalizeEmbeddings:
    def test_three_four_five(self):
        out = normalize_embeddings(np.array([[3.0, 4.0]]))
        assert np.allclose(out, [[0.6, 0.8]])

    def test_unit_vector_unchanged(self):
        v = np.array([[1.0, 0.0]])
        assert np.allclose(normalize_embeddings(v), v)

    def test_zero_vector_stays_zero(self):
        assert np.allclose(normalize_embeddings(np.zeros((1, 3))), np.zeros((1, 3)))

    def test_table_normalization(self):
        table = EmbeddingTable(dimension=2, entries={"a": np.array([3.0, 4.0], dtype=np.float32)})
        normed = normalize_embeddings(table)
        assert np.allclose(normed.lookup("a"), [0.6, 0.8])

    def test_tensor_rows(self):
        t = torch.tensor([[3.0, 4.0], [0.0, 0.0]])
        out = normalize_embeddings(t)
        assert torch.allclose(out, torch.tensor([[0.6, 0.8], [0.0, 0.0]]))


def test_word_matrix_rows_follow_policy():
    tagged, _ = generate_synthetic_corpus(10, seed=4)
    vocab = Vocabulary.build(t.utterance for t in tagged)
    table = EmbeddingTable(dimension=6)
    mat = build_word_matrix(table, vocab)
    assert mat.shape == (vocab.num_words, 6)
    assert torch.equal(mat[0], torch.zeros(6))  # PAD
    word = vocab.words_in_order()[5]
    assert np.allclose(mat[5].numpy(), table.lookup(word))


def test_gradient_check_encoder():
    # Analytic gradients against central finite differences at tiny dims.
    torch.manual_seed(11)
    tagged, _ = generate_synthetic_corpus(6, seed=6)
    vocab = Vocabulary.build(t.utterance for t in tagged)
    table = EmbeddingTable(dimension=4)
    config = EncoderConfig(
        char_dim=3, char_filters=4, char_filter_width=2, word_dim=4,
        lstm_hidden=5, lstm_layers=1, dropout=0.0, train_word_vectors=True,
    )
    encoder = Encoder.from_table(config, vocab, table).double()
    utt = tokenize("book a table")
    batch = make_batch([utt], vocab, config)
    proj = torch.randn(3, 10, dtype=torch.double)

    def loss_fn():
        h = encoder(batch)[0, :3]
        return (h * proj).sum()

    from conftest import max_rel_grad_error

    encoder.train()
    worst = max_rel_grad_error(
        encoder.named_parameters(),
        loss_fn,
        stride_for=lambda name, numel: max(1, numel // 5),
        # Embedding rows at padding_idx are pinned by construction; their
        # autograd gradient is zero by contract, so skip them.
        skip_rows={"char_cnn.embedding.weight", "word_embedding.weight"},
    )
    assert worst <= 1e-4, f"worst relative gradient error {worst}"

import numpy as np
import pytest
import torch

from openintent.corpus import (
    EmbeddingTable,
    TagLabel,
    Vocabulary,
    generate_synthetic_corpus,
    rule_based_proxy_tagger,
    synthetic_proxy_lexicons,
    tokenize,
)
from openintent.crf import BIO_SCHEME
from openintent.encoder import EncoderConfig, make_batch
from openintent.existence import TrainConfig
from openintent.tagger import (
    AdversarialConfig,
    Decoder,
    TaggerModel,
    adversarial_perturbation,
    build_tagger,
    combined_loss,
    decoded_label_ids,
    fine_tune,
    pretrain,
    tag,
)

INDICATORS = ("want to", "would like to", "need to", "how can i", "how do i", "trying to", "possible to")


def tiny_encoder_config(**overrides):
    defaults = dict(
        char_dim=5, char_filters=6, char_filter_width=3, word_dim=12,
        lstm_hidden=8, lstm_layers=1, dropout=0.0,
    )
    defaults.update(overrides)
    return EncoderConfig(**defaults)


def small_setup(n=40, seed=0, **encoder_overrides):
    tagged, _ = generate_synthetic_corpus(n, seed=seed)
    vocab = Vocabulary.build(tu.utterance for tu in tagged)
    table = EmbeddingTable(dimension=12)
    model = build_tagger(
        tiny_encoder_config(**encoder_overrides), vocab, table, heads=2,
        indicator_lexicon=INDICATORS, seed=seed,
    )
    return model, tagged, vocab, table


def quick_train(**overrides):
    defaults = dict(epochs=3, batch_size=8, seed=0, learning_rate=0.01)
    defaults.update(overrides)
    return TrainConfig(**defaults)


class TestAdversarialPerturbation:
    def test_unit_norm_scaling(self):
        eta = adversarial_perturbation(np.array([3.0, 4.0]), 0.1)
        assert np.allclose(eta, [0.06, 0.08])

    def test_norm_equals_epsilon(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            g = rng.standard_normal(rng.integers(2, 30))
            eta = adversarial_perturbation(g, 0.7)
            assert abs(np.linalg.norm(eta) - 0.7) < 1e-9

    def test_zero_gradient_zero_perturbation(self):
        assert np.allclose(adversarial_perturbation(np.zeros(5), 1.0), np.zeros(5))
        t = adversarial_perturbation(torch.zeros(3, 2), 1.0)
        assert torch.equal(t, torch.zeros(3, 2))

    def test_tensor_input(self):
        eta = adversarial_perturbation(torch.tensor([[3.0, 4.0]]), 1.0)
        assert torch.allclose(eta, torch.tensor([[0.6, 0.8]]))


class TestCombinedLoss:
    def _batch(self, model, tagged, k=6):
        chunk = tagged[:k]
        return make_batch(
            [tu.utterance for tu in chunk],
            model.encoder.vocab,
            model.encoder.config,
            tags=[tu.tags for tu in chunk],
        )

    def test_alpha_one_is_clean_loss_bitwise(self):
        model, tagged, *_ = small_setup()
        model.eval()
        batch = self._batch(model, tagged)
        clean = combined_loss(model, batch, AdversarialConfig(enabled=False))
        mixed = combined_loss(model, batch, AdversarialConfig(enabled=True, epsilon=1.0, alpha=1.0))
        assert float(clean.detach()) == float(mixed.detach())

    def test_epsilon_continuity(self):
        model, tagged, *_ = small_setup()
        model.eval()
        batch = self._batch(model, tagged)
        clean = float(combined_loss(model, batch, AdversarialConfig(enabled=False)).detach())
        tiny = float(
            combined_loss(model, batch, AdversarialConfig(enabled=True, epsilon=1e-6, alpha=0.5)).detach()
        )
        assert abs(tiny - clean) <= 1e-3

    def test_alpha_zero_is_adversarial_only(self):
        model, tagged, *_ = small_setup()
        model.eval()
        batch = self._batch(model, tagged)
        half = float(combined_loss(model, batch, AdversarialConfig(True, 0.5, 0.5)).detach())
        zero = float(combined_loss(model, batch, AdversarialConfig(True, 0.5, 0.0)).detach())
        one = float(combined_loss(model, batch, AdversarialConfig(True, 0.5, 1.0)).detach())
        # affine in alpha
        assert abs(half - 0.5 * (zero + one)) < 1e-5
        # the worst-case direction cannot lower the loss
        assert zero >= one - 1e-6

    def test_perturbed_loss_exceeds_clean_for_small_epsilon(self):
        model, tagged, *_ = small_setup(seed=2)
        model.eval()
        batch = self._batch(model, tagged)
        clean = float(combined_loss(model, batch, AdversarialConfig(enabled=False)).detach())
        adv = float(combined_loss(model, batch, AdversarialConfig(True, 0.01, 0.0)).detach())
        assert adv >= clean - 1e-6


class TestTrainingRegimes:
    def test_zero_epochs_leaves_parameters(self):
        model, tagged, *_ = small_setup()
        before = [p.detach().clone() for p in model.parameters()]
        pretrain(model, tagged, quick_train(epochs=0))
        for a, b in zip(before, model.parameters()):
            assert torch.equal(a, b)

    def test_pretrain_deterministic(self):
        losses = []
        for _ in range(2):
            model, tagged, *_ = small_setup(seed=4)
            pretrain(model, tagged, quick_train(epochs=2))
            losses.append(model.train_log["pretrain"])
        assert losses[0] == losses[1]

    def test_empty_corpus_rejected(self):
        model, *_ = small_setup()
        with pytest.raises(ValueError):
            pretrain(model, [], quick_train())
        with pytest.raises(ValueError):
            fine_tune(model, [], quick_train())

    def test_fine_tune_overfits_tiny_set(self):
        model, tagged, *_ = small_setup(n=20, seed=5)
        fine_tune(model, tagged, quick_train(epochs=80, learning_rate=0.02, lr_decay=0.0, dev_fraction=0.0))
        correct = total = 0
        for tu in tagged:
            pred = tag(model, tu.utterance)
            correct += sum(p is g for p, g in zip(pred.tags, tu.tags))
            total += len(tu.tags)
        assert correct == total

    def test_loss_decreases_over_first_epochs(self):
        model, tagged, *_ = small_setup(n=60, seed=6)
        fine_tune(model, tagged, quick_train(epochs=5))
        losses = model.train_log["fine_tune"]
        assert losses[-1] < losses[0]

    def test_adversarial_smoke(self):
        model, tagged, *_ = small_setup(n=20, seed=7)
        fine_tune(model, tagged, quick_train(epochs=2), AdversarialConfig(True, 1.0, 0.5))
        assert all(np.isfinite(model.train_log["fine_tune"]))

    def test_dev_f1_logged(self):
        model, tagged, *_ = small_setup(n=30, seed=8)
        fine_tune(model, tagged, quick_train(epochs=2, dev_fraction=0.2))
        assert len(model.train_log["fine_tune_dev_tag_f1"]) == 2

    def test_proxy_pretraining_runs_on_rule_based_tags(self):
        model, tagged, *_ = small_setup(n=20, seed=9)
        verbs, nouns = synthetic_proxy_lexicons()
        proxy = [rule_based_proxy_tagger(tu.utterance, verbs, nouns) for tu in tagged]
        pretrain(model, proxy, quick_train(epochs=1))
        assert len(model.train_log["pretrain"]) == 1


class TestTag:
    def test_trained_model_tags_template(self):
        model, tagged, *_ = small_setup(n=60, seed=10)
        fine_tune(model, tagged, quick_train(epochs=25, dev_fraction=0.0))
        utt = tokenize("please book the table")
        pred = tag(model, utt)
        assert pred.tags == (TagLabel.NONE, TagLabel.ACTION, TagLabel.NONE, TagLabel.OBJECT)

    def test_empty_utterance(self):
        model, *_ = small_setup()
        assert tag(model, tokenize("")).tags == ()

    def test_deterministic(self):
        model, tagged, *_ = small_setup(n=20, seed=11)
        utt = tagged[0].utterance
        for decoder in Decoder:
            assert tag(model, utt, decoder).tags == tag(model, utt, decoder).tags

    def test_ilp_respects_pair_existence(self):
        model, tagged, *_ = small_setup(n=30, seed=12)
        for tu in tagged:
            tags = tag(model, tu.utterance, Decoder.ILP).tags
            has_a = TagLabel.ACTION in tags
            has_o = TagLabel.OBJECT in tags
            assert has_a == has_o

    def test_beam_uses_indicator_windows(self):
        model, tagged, *_ = small_setup(n=20, seed=13)
        utt = tokenize("i want to book a table")
        cs = model.constraints_for(utt)
        assert cs.indicator_windows  # "want to" and "i want to" both match
        tags = tag(model, utt, Decoder.BEAM).tags
        assert len(tags) == 6

    def test_checkpoint_roundtrip_identical_tags(self, tmp_path):
        from openintent.bundle import load_tagger, save_tagger

        model, tagged, *_ = small_setup(n=30, seed=14)
        fine_tune(model, tagged, quick_train(epochs=3))
        path = tmp_path / "tagger.bundle"
        save_tagger(path, model)
        loaded, matcher = load_tagger(path)
        assert matcher is None
        for tu in tagged[:10]:
            for decoder in (Decoder.VITERBI, Decoder.ILP):
                assert tag(model, tu.utterance, decoder).tags == tag(loaded, tu.utterance, decoder).tags

    def test_bio_scheme_end_to_end(self):
        tagged, _ = generate_synthetic_corpus(30, seed=15)
        vocab = Vocabulary.build(tu.utterance for tu in tagged)
        table = EmbeddingTable(dimension=12)
        model = build_tagger(
            tiny_encoder_config(), vocab, table, heads=2, scheme=BIO_SCHEME,
            indicator_lexicon=INDICATORS, seed=15,
        )
        fine_tune(model, tagged, quick_train(epochs=2))
        utt = tagged[0].utterance
        pred = tag(model, utt)
        assert len(pred.tags) == len(utt.tokens)
        ids = decoded_label_ids(model, utt)
        assert all(0 <= i < 6 for i in ids)


def test_end_to_end_gradient_check():
    from conftest import max_rel_grad_error

    torch.manual_seed(20)
    tagged, _ = generate_synthetic_corpus(6, seed=20)
    vocab = Vocabulary.build(tu.utterance for tu in tagged)
    table = EmbeddingTable(dimension=4)
    config = EncoderConfig(
        char_dim=3, char_filters=4, char_filter_width=2, word_dim=4,
        lstm_hidden=5, lstm_layers=1, dropout=0.0, train_word_vectors=True,
    )
    model = build_tagger(config, vocab, table, heads=2, seed=20).double()
    utt = tokenize("i want to book a table")
    batch = make_batch([utt], vocab, config, tags=[[TagLabel.NONE] * 3 + [TagLabel.ACTION, TagLabel.NONE, TagLabel.OBJECT]])

    def loss_fn():
        return model.loss(batch)

    worst = max_rel_grad_error(
        model.named_parameters(),
        loss_fn,
        stride_for=lambda name, numel: max(1, numel // 8),
        skip_rows={"encoder.char_cnn.embedding.weight", "encoder.word_embedding.weight"},
    )
    assert worst <= 1e-4, f"worst relative gradient error {worst}"

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from shapecap import captioning as cap
from shapecap import data
from shapecap.errors import ConfigurationError, ContractViolation

from oracles import fd_gradient_max_relative_error


@pytest.fixture(scope="module")
def small_vocab():
    corpus = [data.tokenize(s) for s in data.generate_corpus(0, 200)]
    return data.build_vocabulary(
        corpus, 4, tuple(data.OBJECT_CATEGORIES), tuple(data.RELATION_CATEGORIES)
    )


@pytest.fixture(scope="module")
def small_captioner(small_vocab):
    torch.manual_seed(0)
    return cap.Captioner(small_vocab, hidden=64, latent=32)


# ---------------------------------------------------------------------------
# rewards


def test_concept_reward_object_fixture():
    w = cap.RewardWeights(alpha=1.0, beta=0.5, uno=1.0)
    assert cap.concept_reward("circle", [("circle", 0.8)], [], w) == pytest.approx(0.8)


def test_concept_reward_relation_fixture():
    w = cap.RewardWeights(alpha=1.0, beta=0.5, uno=1.0)
    assert cap.concept_reward("above", [], [(("above",), 0.9)], w) == pytest.approx(0.45)


def test_concept_reward_no_match_is_zero():
    w = cap.RewardWeights()
    assert cap.concept_reward("the", [("circle", 0.8)], [(("above",), 0.9)], w) == 0.0


def test_concept_reward_duplicate_instances_both_pay():
    w = cap.RewardWeights(alpha=1.0)
    got = cap.concept_reward("circle", [("circle", 0.8), ("circle", 0.5)], [], w)
    assert got == pytest.approx(1.3)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.tuples(st.sampled_from(["circle", "square", "cross"]),
                       st.floats(0, 1)), max_size=4),
    st.lists(st.tuples(st.sampled_from(["circle", "square", "cross"]),
                       st.floats(0, 1)), max_size=4),
    st.sampled_from(["circle", "square", "cross", "the"]),
)
def test_concept_reward_additive_over_disjoint_sets(o1, o2, token):
    w = cap.RewardWeights(alpha=1.0, beta=0.5)
    rels = [(("above",), 0.4)]
    total = cap.concept_reward(token, o1 + o2, rels, w)
    # relation part counted once: subtract one duplicate evaluation
    parts = (
        cap.concept_reward(token, o1, rels, w)
        + cap.concept_reward(token, o2, rels, w)
        - cap.concept_reward(token, [], rels, w)
    )
    assert total == pytest.approx(parts, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 10.0), st.sampled_from(["circle", "above", "the"]))
def test_concept_reward_homogeneous_in_weights(c, token):
    base = cap.RewardWeights(alpha=1.0, beta=0.5)
    scaled = cap.RewardWeights(alpha=c * 1.0, beta=c * 0.5)
    objs = [("circle", 0.8)]
    rels = [(("above",), 0.9)]
    assert cap.concept_reward(token, objs, rels, scaled) == pytest.approx(
        c * cap.concept_reward(token, objs, rels, base)
    )


def test_uno_loss_fixture():
    scores = {"triangle": 0.3}
    got = cap.uno_loss("triangle", [("circle", 0.8)], frozenset({"triangle", "circle"}),
                       1.0, scores)
    assert got == pytest.approx(0.7)


def test_uno_loss_recognized_object_is_zero():
    assert cap.uno_loss("circle", [("circle", 0.8)], frozenset({"circle"}), 1.0, {}) == 0.0


def test_uno_loss_non_object_word_is_zero():
    assert cap.uno_loss("the", [], frozenset({"circle"}), 1.0, {}) == 0.0


def test_reward_and_uno_mutually_exclusive():
    w = cap.RewardWeights()
    object_words = frozenset({"circle", "square"})
    scores = {"circle": 0.2, "square": 0.9}
    for token in ("circle", "square", "the"):
        for objs in ([], [("circle", 0.8)], [("square", 0.5), ("circle", 0.1)]):
            r = cap.concept_reward(token, objs, [], w)
            u = cap.uno_loss(token, objs, object_words, w.uno, scores)
            assert not (r > 0 and u > 0)


def test_token_loss_fixtures():
    assert cap.token_loss(0.8, 0.0) == pytest.approx(-0.8)
    assert cap.token_loss(0.0, 0.7) == pytest.approx(0.7)
    assert cap.token_loss(0.0, 0.0) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.floats(0.01, 2), st.floats(0.01, 2))
def test_token_loss_antitone_in_reward_monotone_in_penalty(r, u, dr, du):
    assert cap.token_loss(r + dr, u) < cap.token_loss(r, u)
    assert cap.token_loss(r, u + du) > cap.token_loss(r, u)


def test_sequence_rewards_multiword_relation_credits_final_token():
    concepts = cap.ImageConcepts(
        objects=[("circle", 0.8)],
        relations=[(("left", "of"), 0.6)],
        class_scores={"circle": 0.9, "square": 0.1},
    )
    words = ["a", "circle", "left", "of", "a", "square"]
    rewards, penalties = cap.sequence_rewards(
        words, concepts, frozenset({"circle", "square"}), cap.RewardWeights()
    )
    assert rewards == pytest.approx([0.0, 0.8, 0.0, 0.3, 0.0, 0.0])
    assert penalties == pytest.approx([0.0, 0.0, 0.0, 0.0, 0.0, 0.9])


def test_sequence_rewards_isolated_of_earns_nothing():
    concepts = cap.ImageConcepts([], [(("left", "of"), 0.6)], {})
    rewards, _ = cap.sequence_rewards(["of", "left"], concepts, frozenset(), cap.RewardWeights())
    assert rewards == [0.0, 0.0]


def test_reward_weights_validate():
    with pytest.raises(ConfigurationError):
        cap.RewardWeights(alpha=-0.1)


# ---------------------------------------------------------------------------
# encoder


def test_encode_zero_image_finite(small_captioner):
    feature = cap.encode_image(np.zeros((64, 64, 3), dtype=np.float32), small_captioner)
    assert np.isfinite(feature).all()
    assert feature.shape == (32,)


def test_encode_deterministic(small_captioner, rng):
    pixels = rng.random((64, 64, 3)).astype(np.float32)
    a = cap.encode_image(pixels, small_captioner)
    b = cap.encode_image(pixels, small_captioner)
    assert np.array_equal(a, b)


def test_encode_rejects_bad_shape(small_captioner):
    with pytest.raises(ContractViolation):
        cap.encode_image(np.zeros((64, 64), dtype=np.float32), small_captioner)


def test_encoder_gradient_check():
    torch.manual_seed(0)
    encoder = cap.ImageEncoder(latent=6, channels=(2, 3, 4, 5)).double()
    image = torch.rand(1, 3, 8, 8, dtype=torch.float64)

    def loss_fn():
        return encoder(image).pow(2).sum()

    params = list(encoder.parameters())
    err = fd_gradient_max_relative_error(loss_fn, params[:2] + params[-2:])
    assert err < 1e-4


# ---------------------------------------------------------------------------
# decoding


def test_greedy_decode_deterministic(small_captioner, rng):
    f = rng.standard_normal(32).astype(np.float32)
    a = cap.decode(f, small_captioner, "greedy", max_len=8)
    b = cap.decode(f, small_captioner, "greedy", max_len=8)
    assert a.tokens == b.tokens and a.logprobs == b.logprobs


def test_sample_decode_deterministic_per_seed(small_captioner, rng):
    f = rng.standard_normal(32).astype(np.float32)
    a = cap.decode(f, small_captioner, "sample", max_len=8, seed=11)
    b = cap.decode(f, small_captioner, "sample", max_len=8, seed=11)
    c = cap.decode(f, small_captioner, "sample", max_len=8, seed=12)
    assert a.tokens == b.tokens
    assert a.tokens != c.tokens or a.logprobs != c.logprobs


def test_decode_respects_max_len(small_captioner, rng):
    for seed in range(5):
        f = rng.standard_normal(32).astype(np.float32)
        seq = cap.decode(f, small_captioner, "sample", max_len=5, seed=seed)
        assert len(seq.tokens) <= 5
        assert seq.tokens[0] == small_captioner.vocab.bos_id


def test_decode_rejects_short_max_len(small_captioner):
    with pytest.raises(ConfigurationError):
        cap.decode(np.zeros(32, dtype=np.float32), small_captioner, "greedy", max_len=1)


def test_decode_logprobs_nonpositive(small_captioner, rng):
    f = rng.standard_normal(32).astype(np.float32)
    seq = cap.decode(f, small_captioner, "sample", max_len=10, seed=3)
    assert all(lp <= 0 for lp in seq.logprobs)


@pytest.mark.parametrize("min_len", [0, 4])
def test_decode_logprobs_match_teacher_forcing(small_captioner, rng, min_len):
    vocab = small_captioner.vocab
    f = rng.standard_normal(32).astype(np.float32)
    seq = cap.decode(f, small_captioner, "sample", max_len=10, seed=7, min_len=min_len)
    feat = torch.tensor(f)[None]
    logp, mask = cap.sequence_logprobs(
        small_captioner.decoder, feat, [seq.tokens], vocab.pad_id, vocab, min_len
    )
    recomputed = logp[0, : len(seq.tokens) - 1].detach().numpy()
    assert np.allclose(recomputed, seq.logprobs, atol=1e-6)


def test_min_len_blocks_early_eos(small_captioner, rng):
    for seed in range(8):
        f = rng.standard_normal(32).astype(np.float32)
        seq = cap.decode(f, small_captioner, "sample", max_len=12, seed=seed, min_len=5)
        words = seq.tokens[1:]
        eos_positions = [k for k, t in enumerate(words) if t == small_captioner.vocab.eos_id]
        assert all(p >= 5 for p in eos_positions)


# ---------------------------------------------------------------------------
# discriminator


def test_discriminator_deterministic(small_vocab):
    torch.manual_seed(1)
    disc = cap.SentenceDiscriminator(len(small_vocab))
    sentence = [small_vocab.bos_id, 5, 6, small_vocab.eos_id]
    a = cap.discriminator_score(sentence, disc, small_vocab.pad_id)
    b = cap.discriminator_score(sentence, disc, small_vocab.pad_id)
    assert a == b


def test_discriminator_score_strictly_inside_unit_interval(small_vocab, rng):
    torch.manual_seed(2)
    disc = cap.SentenceDiscriminator(len(small_vocab))
    for _ in range(10):
        length = int(rng.integers(1, 9))
        sentence = [int(rng.integers(4, len(small_vocab))) for _ in range(length)]
        score = cap.discriminator_score(sentence, disc, small_vocab.pad_id)
        assert 0.0 < score < 1.0


def test_discriminator_rejects_empty_sentence(small_vocab):
    torch.manual_seed(3)
    disc = cap.SentenceDiscriminator(len(small_vocab))
    with pytest.raises(ContractViolation):
        cap.discriminator_score([], disc, small_vocab.pad_id)


def test_discriminator_gradient_check(small_vocab):
    torch.manual_seed(4)
    disc = cap.SentenceDiscriminator(len(small_vocab), embed=6, hidden=8).double()
    sentences = [[1, 5, 6, 2], [1, 7, 2]]

    def loss_fn():
        logits = disc.logits(sentences, small_vocab.pad_id)
        return torch.nn.functional.binary_cross_entropy_with_logits(
            logits, torch.tensor([1.0, 0.0], dtype=torch.float64)
        )

    params = list(disc.parameters())
    err = fd_gradient_max_relative_error(loss_fn, params[:1] + params[-2:])
    assert err < 1e-4


def test_decoder_cell_gradient_check(small_vocab):
    torch.manual_seed(5)
    decoder = cap.CaptionDecoder(len(small_vocab), hidden=8, latent=6).double()
    f = torch.rand(2, 6, dtype=torch.float64)
    tokens = [[1, 5, 6, 2], [1, 7, 2]]

    def loss_fn():
        logp, mask = cap.sequence_logprobs(decoder, f, tokens, small_vocab.pad_id)
        return -(logp * mask).sum() / mask.sum()

    params = list(decoder.parameters())
    err = fd_gradient_max_relative_error(loss_fn, params[:2] + params[-2:])
    assert err < 1e-4


# ---------------------------------------------------------------------------
# unpaired training (shared micro run)


def test_probe_reward_strictly_increases(micro_unpaired):
    result, _images, _corpus = micro_unpaired
    assert result.reward_curve[-1] > result.reward_curve[0]


def test_adversarially_trained_discriminator_prefers_real(micro_unpaired, tiny_val,
                                                          tiny_vocab):
    result, _images, _corpus = micro_unpaired
    vocab, _ = tiny_vocab
    real = [
        [vocab.bos_id] + vocab.encode(data.tokenize(s)) + [vocab.eos_id]
        for s in tiny_val.corpus_sentences()
    ]
    real_scores = [cap.discriminator_score(s, result.discriminator, vocab.pad_id) for s in real]

    torch.manual_seed(123)
    untrained = cap.Captioner(vocab, hidden=128, latent=128)
    gen = torch.Generator().manual_seed(0)
    fake_feats = torch.randn(len(real), 128, generator=gen)
    fakes = cap.decode_batch(fake_feats, untrained.decoder, vocab, "sample", 12, gen)
    fake_scores = [
        cap.discriminator_score(s, result.discriminator, vocab.pad_id) for s in fakes
    ]
    assert np.mean(real_scores) > np.mean(fake_scores)


def test_training_deterministic_per_seed(tiny_vocab, tiny_concepts, tiny_train):
    from test_objects import params_checksum

    vocab, corpus = tiny_vocab
    corpus_ids = [[vocab.bos_id] + vocab.encode(t) + [vocab.eos_id] for t in corpus]
    ids = tiny_train.image_ids[:10]
    images = {i: tiny_train.image(i).pixels for i in ids}
    kwargs = dict(
        epochs=2, lr=5e-4, batch_size=5, hidden=32, latent=32, max_len=8, min_len=2,
        seed=21, pretrain_epochs=2,
    )
    a = cap.train_unpaired(images, corpus_ids, tiny_concepts, vocab, cap.RewardWeights(), **kwargs)
    b = cap.train_unpaired(images, corpus_ids, tiny_concepts, vocab, cap.RewardWeights(), **kwargs)
    assert params_checksum(a.captioner) == params_checksum(b.captioner)
    assert params_checksum(a.discriminator) == params_checksum(b.discriminator)
    assert a.reward_curve == b.reward_curve


def test_empty_concepts_warn_but_train(tiny_vocab, tiny_train, caplog):
    import logging

    vocab, corpus = tiny_vocab
    corpus_ids = [[vocab.bos_id] + vocab.encode(t) + [vocab.eos_id] for t in corpus]
    ids = tiny_train.image_ids[:4]
    images = {i: tiny_train.image(i).pixels for i in ids}
    concepts = {i: cap.ImageConcepts([], [], {}) for i in ids}
    with caplog.at_level(logging.WARNING):
        cap.train_unpaired(
            images, corpus_ids, concepts, vocab, cap.RewardWeights(),
            epochs=1, lr=1e-4, batch_size=4, hidden=16, latent=16, max_len=6, seed=0,
            pretrain_epochs=0,
        )
    assert any("vacuous" in r.message for r in caplog.records)


def test_checkpoint_round_trip(tmp_path, micro_unpaired):
    from test_objects import params_checksum

    result, _images, _corpus = micro_unpaired
    path = tmp_path / "cap.ckpt"
    cap.save_captioner(path, result.captioner, seed=5, config_hash="h")
    loaded = cap.load_captioner(path)
    assert params_checksum(loaded) == params_checksum(result.captioner)
    assert loaded.vocab.tokens == result.captioner.vocab.tokens

    dpath = tmp_path / "disc.ckpt"
    cap.save_discriminator(dpath, result.discriminator, seed=5, config_hash="h")
    loaded_disc = cap.load_discriminator(dpath)
    assert params_checksum(loaded_disc) == params_checksum(result.discriminator)

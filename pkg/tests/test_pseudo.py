import numpy as np
import pytest

from shapecap import captioning as cap
from shapecap import pseudo
from shapecap.errors import ConfigurationError, ContractViolation

from test_objects import params_checksum


def _seq(vocab, words):
    return cap.TokenSequence([vocab.bos_id] + vocab.encode(words) + [vocab.eos_id], [])


@pytest.fixture()
def vocab(tiny_vocab):
    return tiny_vocab[0]


def test_filter_keeps_caption_with_recognized_object(vocab):
    generated = [("im0", _seq(vocab, ["a", "circle", "above", "a", "square"]))]
    kept = pseudo.filter_pseudo(generated, {"im0": {"circle", "square"}}, vocab, "ckpt-1")
    assert len(kept) == 1
    assert kept[0].image_id == "im0"
    assert kept[0].provenance == "ckpt-1"


def test_filter_drops_caption_without_match(vocab):
    generated = [("im0", _seq(vocab, ["a", "triangle"]))]
    assert pseudo.filter_pseudo(generated, {"im0": {"circle"}}, vocab, "c") == []


def test_filter_matches_bruteforce_scan(vocab, rng):
    words = ["circle", "square", "triangle", "cross", "a", "the", "above"]
    detected = {
        f"im{k}": set(rng.choice(["circle", "square", "triangle", "cross"],
                                 size=rng.integers(0, 3), replace=False))
        for k in range(10)
    }
    generated = []
    for k in range(10):
        caption = [words[i] for i in rng.integers(0, len(words), size=6)]
        generated.append((f"im{k}", _seq(vocab, caption)))
    kept = pseudo.filter_pseudo(generated, detected, vocab, "c")
    want = [
        (iid, seq)
        for iid, seq in generated
        if any(w in detected[iid] for w in seq.words(vocab))
    ]
    assert [(p.image_id, p.caption.tokens) for p in kept] == [
        (iid, seq.tokens) for iid, seq in want
    ]


def test_every_kept_pair_satisfies_invariant(vocab, rng):
    generated = [
        (f"im{k}", _seq(vocab, ["a", str(rng.integers(10))] if k % 2 else ["a", "circle"]))
        for k in range(8)
    ]
    kept = pseudo.filter_pseudo(generated, {f"im{k}": {"circle"} for k in range(8)}, vocab, "c")
    for pair in kept:
        assert any(w == "circle" for w in pair.caption.words(vocab))


# ---------------------------------------------------------------------------
# count_unrecognized


def test_count_unrecognized_fixture():
    captions = [("im0", ["a", "triangle", "cross", "circle"])]
    detected = {"im0": {"circle"}}
    got = pseudo.count_unrecognized(captions, detected, frozenset({"circle", "triangle", "cross"}))
    assert got == pytest.approx(2.0)


def test_count_unrecognized_none():
    captions = [("im0", ["a", "circle"])]
    assert pseudo.count_unrecognized(captions, {"im0": {"circle"}}, frozenset({"circle"})) == 0.0


def test_count_unrecognized_batch_average_matches_recount(rng):
    object_words = frozenset({"circle", "square", "triangle", "cross"})
    detected = {f"im{k}": {"circle"} if k % 2 else {"square"} for k in range(12)}
    words = ["circle", "square", "triangle", "a", "the"]
    captions = [
        (f"im{k}", [words[i] for i in rng.integers(0, len(words), size=5)])
        for k in range(12)
    ]
    got = pseudo.count_unrecognized(captions, detected, object_words)
    total = 0
    for iid, caption in captions:
        for w in caption:
            if w in object_words and w not in detected[iid]:
                total += 1
    assert got == pytest.approx(total / 12)


def test_count_unrecognized_zero_on_own_objects():
    detected = {"im0": {"circle", "square"}}
    captions = [("im0", ["a", "circle", "and", "a", "square", "circle"])]
    assert pseudo.count_unrecognized(captions, detected,
                                     frozenset({"circle", "square", "cross"})) == 0.0


def test_count_unrecognized_empty_list_rejected():
    with pytest.raises(ContractViolation):
        pseudo.count_unrecognized([], {}, frozenset())


# ---------------------------------------------------------------------------
# supervised retraining


def _pairs(vocab, tiny_train, n=10):
    out = []
    for image_id in tiny_train.image_ids[:n]:
        out.append(pseudo.PseudoPair(image_id, _seq(vocab, ["a", "circle"]), "ckpt"))
    return out


def test_train_supervised_rejects_empty(vocab, tiny_train):
    with pytest.raises(ConfigurationError):
        pseudo.train_supervised([], {}, vocab)


def test_one_epoch_decreases_cross_entropy(vocab, tiny_train):
    pairs = _pairs(vocab, tiny_train)
    images = {p.image_id: tiny_train.image(p.image_id).pixels for p in pairs}
    result = pseudo.train_supervised(pairs, images, vocab, epochs=1, seed=0,
                                     hidden=32, latent=32)
    assert result.probe_perplexity_end < result.probe_perplexity_start


def test_train_supervised_deterministic(vocab, tiny_train):
    pairs = _pairs(vocab, tiny_train)
    images = {p.image_id: tiny_train.image(p.image_id).pixels for p in pairs}
    a = pseudo.train_supervised(pairs, images, vocab, epochs=2, seed=4, hidden=32, latent=32)
    b = pseudo.train_supervised(pairs, images, vocab, epochs=2, seed=4, hidden=32, latent=32)
    assert params_checksum(a.captioner) == params_checksum(b.captioner)

"""Shared fixtures: a small generated dataset and models trained on it once.

These are deliberately smaller than the acceptance-suite protocol; unit
tests exercise contracts, the acceptance module exercises quality bars.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

from shapecap import captioning, data, objects, relations


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinyds")
    data.build_split(root / "train", "train", range(0, 96), corpus_seed=700,
                     corpus_sentences=300)
    data.build_split(root / "val", "val", range(9000, 9024), corpus_seed=701,
                     corpus_sentences=40)
    return root


@pytest.fixture(scope="session")
def tiny_train(tiny_root):
    return data.read_dataset(tiny_root / "train")


@pytest.fixture(scope="session")
def tiny_val(tiny_root):
    return data.read_dataset(tiny_root / "val")


@pytest.fixture(scope="session")
def toy_classifier(tiny_train):
    return objects.train_classifier(tiny_train, epochs=80, lr=2e-3, seed=3)


@pytest.fixture(scope="session")
def tiny_graphs(tiny_train, toy_classifier):
    clf = toy_classifier.classifier
    graphs = {}
    for image_id in tiny_train.image_ids:
        instances, feats = objects.detect(tiny_train.image(image_id).pixels, clf)
        graphs[image_id] = relations.build_graph(instances, feats)
    return graphs


@pytest.fixture(scope="session")
def tiny_vocab(tiny_train):
    corpus = [data.tokenize(s) for s in tiny_train.corpus_sentences()]
    vocab = data.build_vocabulary(
        corpus,
        min_count=4,
        object_names=tuple(tiny_train.manifest.object_registry.names),
        relation_names=tuple(tiny_train.manifest.relation_registry.names),
    )
    return vocab, corpus


@pytest.fixture(scope="session")
def tiny_concepts(tiny_train, toy_classifier):
    """Object concepts + class scores per image (no relations)."""
    clf = toy_classifier.classifier
    registry = tiny_train.manifest.object_registry
    concepts = {}
    for image_id in tiny_train.image_ids:
        instances, _ = objects.detect(tiny_train.image(image_id).pixels, clf)
        objs = [(registry.name_of(i.category), float(i.score)) for i in instances]
        sig = objects.class_sigmoids(tiny_train.image(image_id).pixels, clf)
        scores = {registry.name_of(c): float(sig[c]) for c in range(len(registry))}
        concepts[image_id] = captioning.ImageConcepts(objs, [], scores)
    return concepts


@pytest.fixture(scope="session")
def micro_unpaired(tiny_train, tiny_vocab, tiny_concepts, toy_classifier):
    """One small unpaired training run shared by captioner/pseudo tests."""
    vocab, corpus = tiny_vocab
    corpus_ids = [[vocab.bos_id] + vocab.encode(t) + [vocab.eos_id] for t in corpus]
    images = {i: tiny_train.image(i).pixels for i in tiny_train.image_ids}
    trunk_state = {
        k.removeprefix("trunk."): v.numpy()
        for k, v in toy_classifier.classifier.state_dict().items()
        if k.startswith("trunk.")
    }
    result = captioning.train_unpaired(
        images,
        corpus_ids,
        tiny_concepts,
        vocab,
        captioning.RewardWeights(),
        epochs=25,
        lr=5e-4,
        batch_size=16,
        hidden=128,
        latent=128,
        max_len=12,
        min_len=4,
        seed=5,
        adversarial_weight=1.0,
        discriminator_lr=2e-3,
        discriminator_steps=3,
        pretrain_epochs=8,
        pretrain_lr=5e-3,
    )
    return result, images, corpus_ids


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_determinism():
    torch.manual_seed(0)

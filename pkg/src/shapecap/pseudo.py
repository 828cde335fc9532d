"""Pseudo-caption self-training.

Captions generated by the unpaired model are kept only when they mention at
least one object concept recognized in their image; the surviving pairs then
train a fresh captioner with ordinary teacher-forced cross-entropy. Also
home to the unrecognized-object counter used for training-curve analysis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .captioning import Captioner, TokenSequence, sequence_logprobs
from .data import Vocabulary
from .errors import ConfigurationError, ContractViolation
from .nn import batch_to_tensor, seed_everything

log = logging.getLogger(__name__)


@dataclass
class PseudoPair:
    image_id: str
    caption: TokenSequence
    provenance: str  # generator checkpoint id


def filter_pseudo(
    generated: list[tuple[str, TokenSequence]],
    detected_words: dict[str, set[str]],
    vocab: Vocabulary,
    provenance: str,
) -> list[PseudoPair]:
    """Keep exactly the captions containing at least one word that names an
    object recognized in their image; input order is preserved."""
    kept = []
    for image_id, seq in generated:
        words = seq.words(vocab)
        if any(w in detected_words.get(image_id, set()) for w in words):
            kept.append(PseudoPair(image_id, seq, provenance))
    return kept


def count_unrecognized(
    captions: list[tuple[str, list[str]]],
    detected_words: dict[str, set[str]],
    object_words: frozenset[str],
) -> float:
    """Mean over captions of the number of object-word tokens that are not
    among the recognized objects of their image."""
    if not captions:
        raise ContractViolation("cannot average over an empty caption list")
    total = 0
    for image_id, words in captions:
        detected = detected_words.get(image_id, set())
        total += sum(1 for w in words if w in object_words and w not in detected)
    return total / len(captions)


@dataclass
class SupervisedTraining:
    captioner: Captioner
    probe_perplexity_start: float
    probe_perplexity_end: float


def train_supervised(
    pairs: list[PseudoPair],
    images: dict[str, np.ndarray],
    vocab: Vocabulary,
    epochs: int = 10,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 24,
    hidden: int = 512,
    latent: int = 512,
    channels: tuple[int, ...] = (8, 16, 32, 64),
    encoder_trunk_state: dict | None = None,
    corpus_ids: list[list[int]] | None = None,
    pretrain_epochs: int = 0,
    pretrain_lr: float = 5e-3,
) -> SupervisedTraining:
    """Teacher-forced cross-entropy on (image, pseudo caption) pairs, from a
    freshly initialized captioner (optionally warm-started like the unpaired
    model: classifier trunk for the encoder, corpus language model for the
    decoder)."""
    if not pairs:
        raise ConfigurationError("pseudo-caption set is empty")
    from .captioning import pretrain_language_model

    gen = seed_everything(seed)
    captioner = Captioner(vocab, hidden, latent, channels)
    if encoder_trunk_state is not None:
        captioner.encoder.trunk.load_state_dict(
            {k: torch.as_tensor(np.array(v)) for k, v in encoder_trunk_state.items()}
        )
    if corpus_ids and pretrain_epochs > 0:
        pretrain_language_model(
            captioner, corpus_ids, pretrain_epochs, pretrain_lr, batch_size, gen
        )
    pad = vocab.pad_id
    opt = torch.optim.Adam(captioner.parameters(), lr=lr)

    probe = pairs[: min(len(pairs), batch_size)]

    def probe_nll() -> float:
        with torch.no_grad():
            f = captioner.encoder(batch_to_tensor([images[p.image_id] for p in probe]))
            logp, mask = sequence_logprobs(
                captioner.decoder, f, [p.caption.tokens for p in probe], pad
            )
            return (-(logp * mask).sum() / mask.sum()).item()

    ppl_start = float(np.exp(probe_nll()))
    n = len(pairs)
    for _epoch in range(epochs):
        order = torch.randperm(n, generator=gen).tolist()
        for start in range(0, n, batch_size):
            batch = [pairs[k] for k in order[start : start + batch_size]]
            opt.zero_grad()
            f = captioner.encoder(batch_to_tensor([images[p.image_id] for p in batch]))
            logp, mask = sequence_logprobs(
                captioner.decoder, f, [p.caption.tokens for p in batch], pad
            )
            loss = -(logp * mask).sum() / mask.sum()
            loss.backward()
            opt.step()
    ppl_end = float(np.exp(probe_nll()))
    return SupervisedTraining(captioner, ppl_start, ppl_end)

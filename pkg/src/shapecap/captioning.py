"""Unpaired caption generation.

A small conv encoder feeds a recurrent decoder that emits one word per step.
No image-caption pair is ever read: training combines (a) per-token concept
rewards paid when an emitted word names a recognized object or relation,
(b) a penalty when an emitted object word was not recognized in the image,
and (c) an adversarial signal from an LSTM sentence discriminator trained
against the unpaired sentence corpus. Reward terms reach the generator
through a REINFORCE estimator with reward-to-go and a moving-average
baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import (
    Checkpoint,
    load_checkpoint_kind,
    load_state_dict_arrays,
    save_checkpoint,
    state_dict_arrays,
)
from .data import Vocabulary
from .errors import ConfigurationError, ContractViolation
from .nn import ConvTrunk, batch_to_tensor, image_to_tensor, seed_everything

log = logging.getLogger(__name__)

SCORE_EPS = 1e-7  # keeps discriminator outputs strictly inside (0, 1)


# ---------------------------------------------------------------------------
# Rewards and losses on emitted tokens. These are plain float functions: the
# reward signal is not differentiated, only the log-probabilities are.


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 1.0  # object concept reward
    beta: float = 0.5  # relation concept reward
    uno: float = 1.0  # unrecognized-object penalty

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.uno < 0:
            raise ConfigurationError("reward weights must be nonnegative")


@dataclass
class ImageConcepts:
    """Recognized concepts for one image, as consumed by caption training.

    objects: (word, confidence) per detected instance; a category detected
    twice appears twice. relations: (word tuple, confidence) per recognized
    relation; multi-word names keep their token split. class_scores: the
    classifier sigmoid per object word for this image.
    """

    objects: list[tuple[str, float]]
    relations: list[tuple[tuple[str, ...], float]]
    class_scores: dict[str, float]


def concept_reward(
    token: str,
    objects: list[tuple[str, float]],
    relations: list[tuple[tuple[str, ...], float]],
    weights: RewardWeights,
) -> float:
    """alpha * sum of confidences of matching objects + beta * likewise for
    single-word relations. Every matching entry contributes its confidence.
    Multi-word relations never match a token in isolation; see
    sequence_rewards for the n-gram convention."""
    reward = weights.alpha * sum(z for word, z in objects if word == token)
    reward += weights.beta * sum(z for words, z in relations if words == (token,))
    return reward


def unrecognized_penalty(class_score: float) -> float:
    """Penalty magnitude for an unrecognized object word: one minus the
    classifier's sigmoid for that category, so confidently-absent objects
    are penalized hardest."""
    return 1.0 - class_score


def uno_loss(
    token: str,
    objects: list[tuple[str, float]],
    object_words: frozenset[str],
    uno_weight: float,
    class_scores: dict[str, float],
) -> float:
    """Nonzero only for an object-vocabulary word absent from the recognized
    set."""
    if token not in object_words:
        return 0.0
    if any(word == token for word, _ in objects):
        return 0.0
    return uno_weight * unrecognized_penalty(class_scores.get(token, 0.0))


def token_loss(reward: float, uno: float) -> float:
    return -reward + uno


def sequence_rewards(
    words: list[str],
    concepts: ImageConcepts,
    object_words: frozenset[str],
    weights: RewardWeights,
) -> tuple[list[float], list[float]]:
    """Per-token rewards and penalties for a word sequence.

    Multi-word relation names are matched as contiguous n-grams with the
    reward credited to the final token of the match."""
    single_rel = [(ws, z) for ws, z in concepts.relations if len(ws) == 1]
    multi_rel = [(ws, z) for ws, z in concepts.relations if len(ws) > 1]
    rewards = [
        concept_reward(w, concepts.objects, single_rel, weights) for w in words
    ]
    for ws, z in multi_rel:
        k = len(ws)
        for t in range(k - 1, len(words)):
            if tuple(words[t - k + 1 : t + 1]) == ws:
                rewards[t] += weights.beta * z
    penalties = [
        uno_loss(w, concepts.objects, object_words, weights.uno, concepts.class_scores)
        for w in words
    ]
    return rewards, penalties


# ---------------------------------------------------------------------------
# Modules.


class ImageEncoder(nn.Module):
    def __init__(self, latent: int = 512, channels: tuple[int, ...] = (8, 16, 32, 64)):
        super().__init__()
        self.trunk = ConvTrunk(channels)
        self.project = nn.Linear(channels[-1], latent)
        self.latent = latent

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(self.trunk(x)[-1].mean(dim=(2, 3)))


class CaptionDecoder(nn.Module):
    """LSTM-cell decoder: the projected image feature is the first input,
    afterwards each step consumes the embedding of the previous word."""

    def __init__(self, vocab_size: int, hidden: int = 512, latent: int = 512):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, latent)
        self.init_proj = nn.Linear(latent, latent)
        self.cell = nn.LSTMCell(latent, hidden)
        self.head = nn.Linear(hidden, vocab_size)
        self.hidden = hidden
        self.latent = latent
        self.vocab_size = vocab_size

    def start_state(self, batch: int):
        h = torch.zeros(batch, self.hidden)
        return h, torch.zeros(batch, self.hidden)

    def step(self, x: torch.Tensor, state):
        state = self.cell(x, state)
        return self.head(state[0]), state


class Captioner(nn.Module):
    def __init__(
        self,
        vocab: Vocabulary,
        hidden: int = 512,
        latent: int = 512,
        channels: tuple[int, ...] = (8, 16, 32, 64),
    ):
        super().__init__()
        self.encoder = ImageEncoder(latent, channels)
        self.decoder = CaptionDecoder(len(vocab), hidden, latent)
        self.vocab = vocab
        self.channels = tuple(channels)

    def encode(self, pixels: np.ndarray) -> torch.Tensor:
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ContractViolation("encoder expects an HxWx3 image")
        self.encoder.eval()
        with torch.no_grad():
            return self.encoder(image_to_tensor(pixels))[0]


def encode_image(pixels: np.ndarray, captioner: Captioner) -> np.ndarray:
    return captioner.encode(pixels).numpy()


@dataclass
class TokenSequence:
    tokens: list[int]  # starts with BOS; ends with EOS or at max_len
    logprobs: list[float]  # aligned with tokens[1:]

    def words(self, vocab: Vocabulary) -> list[str]:
        return vocab.decode(self.tokens)


def _mask_logits(
    logits: torch.Tensor, vocab: Vocabulary, step: int, min_len: int
) -> torch.Tensor:
    """The generation policy never emits padding or a second BOS, and holds
    back EOS until min_len tokens are out. Probabilities are renormalized
    over the permitted tokens; the same rule applies when recomputing
    log-probabilities, so stored values stay exactly reproducible."""
    masked = logits.clone()
    masked[:, vocab.pad_id] = float("-inf")
    masked[:, vocab.bos_id] = float("-inf")
    if step < min_len:
        masked[:, vocab.eos_id] = float("-inf")
    return masked


def decode_batch(
    f_im: torch.Tensor,
    decoder: CaptionDecoder,
    vocab: Vocabulary,
    mode: str = "greedy",
    max_len: int = 16,
    generator: torch.Generator | None = None,
    min_len: int = 0,
) -> list[TokenSequence]:
    if max_len < 2:
        raise ConfigurationError("max_len must be at least 2")
    if mode not in ("greedy", "sample"):
        raise ConfigurationError(f"unknown decode mode {mode!r}")
    batch = f_im.shape[0]
    eos = vocab.eos_id
    with torch.no_grad():
        x = decoder.init_proj(f_im)
        state = decoder.start_state(batch)
        tokens = [[vocab.bos_id] for _ in range(batch)]
        logprobs = [[] for _ in range(batch)]
        alive = [True] * batch
        for step in range(max_len - 1):
            logits, state = decoder.step(x, state)
            logits = _mask_logits(logits, vocab, step, min_len)
            logp = F.log_softmax(logits, dim=1)
            if mode == "greedy":
                chosen = logp.argmax(dim=1)
            else:
                chosen = torch.multinomial(
                    F.softmax(logits, dim=1), 1, generator=generator
                ).squeeze(1)
            for b in range(batch):
                if not alive[b]:
                    continue
                tok = int(chosen[b])
                tokens[b].append(tok)
                logprobs[b].append(float(logp[b, tok]))
                if tok == eos:
                    alive[b] = False
            if not any(alive):
                break
            x = decoder.embed(chosen)
    return [TokenSequence(t, lp) for t, lp in zip(tokens, logprobs)]


def decode(
    f_im,
    captioner: Captioner,
    mode: str = "greedy",
    max_len: int = 16,
    seed: int = 0,
    min_len: int = 0,
) -> TokenSequence:
    """Single-sequence decode; sample mode is deterministic per seed."""
    gen = torch.Generator()
    gen.manual_seed(seed)
    feat = torch.as_tensor(np.asarray(f_im, dtype=np.float32))[None]
    return decode_batch(feat, captioner.decoder, captioner.vocab, mode, max_len, gen, min_len)[0]


def sequence_logprobs(
    decoder: CaptionDecoder,
    f_im: torch.Tensor,
    token_lists: list[list[int]],
    pad_id: int,
    vocab: Vocabulary | None = None,
    min_len: int = 0,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Teacher-forced log-probabilities of given sequences (differentiable).

    Returns (logp, mask), both (B, T-1) where T is the padded length; mask
    marks real targets. Row t scores tokens[t+1] given the prefix. Passing
    `vocab` applies the same token masking as decode_batch, so logprobs of
    decoded sequences are recomputed exactly.
    """
    batch = len(token_lists)
    max_t = max(len(t) for t in token_lists)
    padded = torch.full((batch, max_t), pad_id, dtype=torch.long)
    for b, toks in enumerate(token_lists):
        padded[b, : len(toks)] = torch.tensor(toks, dtype=torch.long)
    lengths = torch.tensor([len(t) for t in token_lists])

    x = decoder.init_proj(f_im)
    state = decoder.start_state(batch)
    out = []
    for t in range(max_t - 1):
        logits, state = decoder.step(x, state)
        if vocab is not None:
            logits = _mask_logits(logits, vocab, t, min_len)
        logp = F.log_softmax(logits, dim=1)
        out.append(logp.gather(1, padded[:, t + 1 : t + 2]).squeeze(1))
        x = decoder.embed(padded[:, t + 1])
    logp = torch.stack(out, dim=1)
    mask = (torch.arange(max_t - 1)[None, :] < (lengths - 1)[:, None]).float()
    return logp, mask


class SentenceDiscriminator(nn.Module):
    """LSTM sentence classifier: probability that a sentence is real."""

    def __init__(self, vocab_size: int, embed: int = 64, hidden: int = 128):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, embed)
        self.cell = nn.LSTMCell(embed, hidden)
        self.head = nn.Linear(hidden, 1)
        self.hidden = hidden

    def logits(self, token_lists: list[list[int]], pad_id: int) -> torch.Tensor:
        if any(len(t) == 0 for t in token_lists):
            raise ContractViolation("discriminator needs nonempty sentences")
        batch = len(token_lists)
        max_t = max(len(t) for t in token_lists)
        padded = torch.full((batch, max_t), pad_id, dtype=torch.long)
        for b, toks in enumerate(token_lists):
            padded[b, : len(toks)] = torch.tensor(toks, dtype=torch.long)
        lengths = torch.tensor([len(t) for t in token_lists])
        h = torch.zeros(batch, self.hidden)
        c = torch.zeros(batch, self.hidden)
        final = torch.zeros(batch, self.hidden)
        emb = self.embed(padded)
        for t in range(max_t):
            h, c = self.cell(emb[:, t], (h, c))
            final = torch.where((lengths - 1 == t)[:, None], h, final)
        return self.head(final).squeeze(1)


def discriminator_score(sentence: TokenSequence | list[int], disc: SentenceDiscriminator,
                        pad_id: int = 0) -> float:
    tokens = sentence.tokens if isinstance(sentence, TokenSequence) else list(sentence)
    tokens = [t for t in tokens]
    if len(tokens) == 0:
        raise ContractViolation("empty sentence")
    disc.eval()
    with torch.no_grad():
        score = torch.sigmoid(disc.logits([tokens], pad_id))[0].item()
    return min(max(score, SCORE_EPS), 1.0 - SCORE_EPS)


# ---------------------------------------------------------------------------
# Training.


@dataclass
class UnpairedTraining:
    captioner: Captioner
    discriminator: SentenceDiscriminator
    reward_curve: list[float]  # mean concept reward per probe caption, per epoch
    unrecognized_curve: list[float]  # mean unrecognized object words, per epoch


def pretrain_language_model(
    captioner: Captioner,
    corpus_ids: list[list[int]],
    epochs: int,
    lr: float,
    batch_size: int,
    gen: torch.Generator,
) -> None:
    """Teacher-forced cross-entropy on the sentence corpus with a zero image
    context, so the decoder starts from a fluent language prior."""
    if epochs <= 0 or not corpus_ids:
        return
    decoder = captioner.decoder
    pad = captioner.vocab.pad_id
    opt = torch.optim.Adam(
        [p for n, p in decoder.named_parameters()], lr=lr
    )
    zeros = torch.zeros(batch_size, decoder.latent)
    n = len(corpus_ids)
    for _epoch in range(epochs):
        order = torch.randperm(n, generator=gen).tolist()
        for start in range(0, n, batch_size):
            batch = [corpus_ids[k] for k in order[start : start + batch_size]]
            opt.zero_grad()
            logp, mask = sequence_logprobs(decoder, zeros[: len(batch)], batch, pad)
            loss = -(logp * mask).sum() / mask.sum()
            loss.backward()
            opt.step()


PROBE_SEED = 0x5EED


def _probe_stats(
    captioner: Captioner,
    probe: list[tuple[str, np.ndarray]],
    concepts: dict[str, ImageConcepts],
    weights: RewardWeights,
    max_len: int,
    samples_per_image: int = 4,
    min_len: int = 0,
) -> tuple[float, float]:
    """Mean (per caption) concept reward sum and unrecognized-word count over
    sampled captions for the probe images; the sampler is freshly seeded so
    the measurement is deterministic given the parameters."""
    vocab = captioner.vocab
    gen = torch.Generator()
    gen.manual_seed(PROBE_SEED)
    with torch.no_grad():
        f = captioner.encoder(batch_to_tensor([px for _, px in probe]))
    total_r = 0.0
    total_u = 0.0
    count = 0
    for _rep in range(samples_per_image):
        seqs = decode_batch(f, captioner.decoder, vocab, "sample", max_len, gen, min_len)
        for (image_id, _), seq in zip(probe, seqs):
            words = seq.words(vocab)
            rewards, _ = sequence_rewards(words, concepts[image_id], vocab.object_words, weights)
            total_r += sum(rewards)
            detected = {w for w, _ in concepts[image_id].objects}
            total_u += sum(1 for w in words if w in vocab.object_words and w not in detected)
            count += 1
    return total_r / count, total_u / count


def train_unpaired(
    images: dict[str, np.ndarray],
    corpus_ids: list[list[int]],
    concepts: dict[str, ImageConcepts],
    vocab: Vocabulary,
    weights: RewardWeights,
    epochs: int = 20,
    lr: float = 1e-5,
    batch_size: int = 24,
    hidden: int = 512,
    latent: int = 512,
    channels: tuple[int, ...] = (8, 16, 32, 64),
    max_len: int = 12,
    seed: int = 0,
    adversarial_weight: float = 1.0,
    baseline_decay: float = 0.9,
    pretrain_epochs: int = 8,
    pretrain_lr: float = 5e-3,
    discriminator_lr: float = 1e-3,
    discriminator_steps: int = 1,
    probe_size: int = 32,
    encoder_trunk_state: dict | None = None,
    min_len: int = 0,
) -> UnpairedTraining:
    """Policy-gradient caption training against recognized concepts.

    Per sampled token the return is the reward-to-go of (reward - penalty)
    plus a sentence-level adversarial term log D(s); a moving-average
    baseline is subtracted and the result weights the token log-probability.
    The discriminator is updated in alternation on corpus sentences (real)
    vs sampled captions (fake).
    """
    if not images:
        raise ConfigurationError("no training images")
    if all(
        not concepts[i].objects and not concepts[i].relations for i in images
    ):
        log.warning("every concept set is empty; the reward signal is vacuous")

    gen = seed_everything(seed)
    captioner = Captioner(vocab, hidden, latent, channels)
    if encoder_trunk_state is not None:
        # warm-start the visual trunk from the image-level classifier, the
        # desk-scale stand-in for a pretrained classification backbone
        captioner.encoder.trunk.load_state_dict(
            {k: torch.as_tensor(np.array(v)) for k, v in encoder_trunk_state.items()}
        )
    disc = SentenceDiscriminator(len(vocab))
    pad = vocab.pad_id

    pretrain_language_model(captioner, corpus_ids, pretrain_epochs, pretrain_lr, batch_size, gen)

    ids = sorted(images)
    pixels = {i: images[i] for i in ids}
    probe_ids = ids[: min(probe_size, len(ids))]
    probe = [(i, pixels[i]) for i in probe_ids]

    opt_gen = torch.optim.Adam(captioner.parameters(), lr=lr)
    opt_disc = torch.optim.Adam(disc.parameters(), lr=discriminator_lr)
    # per-position moving average of returns; position magnitudes differ
    # because reward-to-go shrinks toward the end of the sequence
    baseline = np.zeros(max_len - 1)
    baseline_ready = False

    reward_curve = []
    unrecognized_curve = []
    r0, u0 = _probe_stats(captioner, probe, concepts, weights, max_len, min_len=min_len)
    reward_curve.append(r0)
    unrecognized_curve.append(u0)

    n = len(ids)
    for _epoch in range(epochs):
        order = torch.randperm(n, generator=gen).tolist()
        for start in range(0, n, batch_size):
            batch_ids = [ids[k] for k in order[start : start + batch_size]]
            imgs = batch_to_tensor([pixels[i] for i in batch_ids])
            f_im = captioner.encoder(imgs)
            samples = decode_batch(
                f_im.detach(), captioner.decoder, vocab, "sample", max_len, gen, min_len
            )

            returns = []
            for image_id, seq in zip(batch_ids, samples):
                words = vocab.decode(seq.tokens[1:], drop_specials=False)
                rewards, penalties = sequence_rewards(
                    words, concepts[image_id], vocab.object_words, weights
                )
                gains = [r - p for r, p in zip(rewards, penalties)]
                suffix = np.cumsum(gains[::-1])[::-1]
                adv_reward = 0.0
                if adversarial_weight > 0.0:
                    adv_reward = adversarial_weight * float(
                        np.log(discriminator_score(seq, disc, pad))
                    )
                returns.append(suffix + adv_reward)

            batch_mean = np.zeros(max_len - 1)
            counts = np.zeros(max_len - 1)
            for g in returns:
                batch_mean[: len(g)] += g
                counts[: len(g)] += 1
            batch_mean /= np.maximum(counts, 1)
            if not baseline_ready:
                baseline = batch_mean
                baseline_ready = True
            advantage = [
                torch.tensor(g - baseline[: len(g)], dtype=torch.float32) for g in returns
            ]
            baseline = baseline_decay * baseline + (1.0 - baseline_decay) * batch_mean

            opt_gen.zero_grad()
            logp, mask = sequence_logprobs(
                captioner.decoder, f_im, [s.tokens for s in samples], pad, vocab, min_len
            )
            adv = torch.zeros_like(logp)
            for b, g in enumerate(advantage):
                adv[b, : len(g)] = g
            gen_loss = -(logp * adv * mask).sum() / mask.sum()
            gen_loss.backward()
            opt_gen.step()

            # discriminator steps: corpus sentences vs the sampled captions
            k = len(batch_ids)
            fake = [s.tokens for s in samples]
            for _dstep in range(discriminator_steps):
                real_idx = torch.randint(0, len(corpus_ids), (k,), generator=gen).tolist()
                real = [corpus_ids[r] for r in real_idx]
                opt_disc.zero_grad()
                logits = disc.logits(real + fake, pad)
                targets = torch.cat([torch.ones(k), torch.zeros(len(fake))])
                d_loss = F.binary_cross_entropy_with_logits(logits, targets)
                d_loss.backward()
                opt_disc.step()

        r, u = _probe_stats(captioner, probe, concepts, weights, max_len, min_len=min_len)
        reward_curve.append(r)
        unrecognized_curve.append(u)

    return UnpairedTraining(captioner, disc, reward_curve, unrecognized_curve)


# ---------------------------------------------------------------------------
# Checkpointing.


def save_captioner(path, captioner: Captioner, seed: int, config_hash: str) -> None:
    extra = {
        "channels": list(captioner.channels),
        "hidden": captioner.decoder.hidden,
        "latent": captioner.decoder.latent,
        "vocab": captioner.vocab.to_json(),
    }
    save_checkpoint(
        path, Checkpoint("captioner", state_dict_arrays(captioner), extra, seed, config_hash)
    )


def load_captioner(path) -> Captioner:
    ckpt = load_checkpoint_kind(path, "captioner")
    vocab = Vocabulary.from_json(ckpt.extra["vocab"])
    captioner = Captioner(
        vocab, ckpt.extra["hidden"], ckpt.extra["latent"], tuple(ckpt.extra["channels"])
    )
    load_state_dict_arrays(captioner, ckpt.arrays)
    captioner.eval()
    return captioner


def save_discriminator(path, disc: SentenceDiscriminator, seed: int, config_hash: str) -> None:
    extra = {
        "embed": disc.embed.embedding_dim,
        "hidden": disc.hidden,
        "vocab_size": disc.embed.num_embeddings,
    }
    save_checkpoint(
        path, Checkpoint("discriminator", state_dict_arrays(disc), extra, seed, config_hash)
    )


def load_discriminator(path) -> SentenceDiscriminator:
    ckpt = load_checkpoint_kind(path, "discriminator")
    disc = SentenceDiscriminator(ckpt.extra["vocab_size"], ckpt.extra["embed"], ckpt.extra["hidden"])
    load_state_dict_arrays(disc, ckpt.arrays)
    disc.eval()
    return disc

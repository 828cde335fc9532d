"""Stage orchestration: I (object recognition), II (relation recognition),
III (unpaired captioning with optional pseudo-caption retraining).

Every stage persists its artifacts under a directory keyed by the hash of
the configuration slice it depends on, so reruns reuse identical prerequisite
stages and a stage can never silently consume artifacts from a different
configuration. Inference loads only the final captioner: the recognition
modules are not imported on that path, which a call-graph check enforces.
"""

from __future__ import annotations

import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .checkpoint import file_checksum
from .config import RunConfig, config_hash, subset_hash
from .data import (
    Dataset,
    audit_phase,
    build_split,
    build_vocabulary,
    default_config,
    read_dataset,
    tokenize,
)
from .errors import ConfigurationError, DependencyError

log = logging.getLogger(__name__)

STAGES = ("I", "II", "III")

_DATA_KEYS = ("dataset_dir", "train_scenes", "val_scenes", "corpus_sentences", "data_seed")
_STAGE1_KEYS = _DATA_KEYS + (
    "classifier_epochs",
    "classifier_lr",
    "classifier_batch",
    "classifier_seed",
)
_STAGE2_KEYS = (
    "relation_epochs",
    "relation_lr",
    "relation_batch",
    "relation_seed",
    "relation_width",
    "relation_blocks",
    "relation_bn",
    "relation_residual",
    "logit_threshold",
    "mask_threshold",
    "min_area_fraction",
)
_STAGE3_KEYS = (
    "vocab_min_count",
    "alpha",
    "beta",
    "uno_weight",
    "caption_epochs",
    "caption_lr",
    "caption_batch",
    "caption_seed",
    "hidden_size",
    "latent_size",
    "max_caption_len",
    "min_caption_len",
    "adversarial_weight",
    "baseline_decay",
    "pretrain_epochs",
    "pretrain_lr",
    "discriminator_lr",
    "discriminator_steps",
    "pseudo_epochs",
    "pseudo_lr",
    "pseudo_seed",
    "logit_threshold",
    "mask_threshold",
    "min_area_fraction",
    "confidence_threshold",
    "rel_enabled",
    "uno_enabled",
    "pseudo_enabled",
)


def stage_key(stage: str, config: RunConfig) -> str:
    if stage == "I":
        return subset_hash(config, _STAGE1_KEYS)
    if stage == "II":
        return subset_hash(config, _STAGE2_KEYS, extra=stage_key("I", config))
    if stage == "III":
        upstream = stage_key("I", config)
        if config.rel_enabled:
            upstream += stage_key("II", config)
        return subset_hash(config, _STAGE3_KEYS, extra=upstream)
    raise ConfigurationError(f"unknown stage {stage!r}")


def stage_dir(workdir: Path, stage: str, config: RunConfig) -> Path:
    return Path(workdir) / f"stage{stage}_{stage_key(stage, config)}"


def _fragment_path(directory: Path) -> Path:
    return directory / "fragment.json"


def _write_fragment(directory: Path, fragment: dict) -> None:
    _fragment_path(directory).write_text(
        json.dumps(fragment, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )


def _read_fragment(directory: Path) -> dict:
    return json.loads(_fragment_path(directory).read_text(encoding="utf-8"))


def ensure_dataset(config: RunConfig) -> tuple[Dataset, Dataset]:
    """Generate the train/val splits for this config unless already present."""
    root = Path(config.dataset_dir)
    gen_config = default_config()
    base = config.data_seed * 1_000_000
    if not (root / "train" / "manifest.json").exists():
        build_split(
            root / "train",
            "train",
            range(base, base + config.train_scenes),
            corpus_seed=base + 900_000,
            corpus_sentences=config.corpus_sentences,
            config=gen_config,
        )
    if not (root / "val" / "manifest.json").exists():
        build_split(
            root / "val",
            "val",
            range(base + 500_000, base + 500_000 + config.val_scenes),
            corpus_seed=base + 900_001,
            corpus_sentences=max(40, config.corpus_sentences // 8),
            config=gen_config,
        )
    return read_dataset(root / "train"), read_dataset(root / "val")


def _require_stage(workdir: Path, stage: str, config: RunConfig) -> Path:
    directory = stage_dir(workdir, stage, config)
    if not _fragment_path(directory).exists():
        raise DependencyError(
            f"stage {stage} artifacts missing at {directory}; run stage {stage} first"
        )
    return directory


def run_stage(stage: str, config: RunConfig, workdir: Path) -> dict:
    """Execute one training stage; artifacts land under a config-keyed dir."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    if stage == "I":
        return _run_stage1(config, workdir)
    if stage == "II":
        return _run_stage2(config, workdir)
    if stage == "III":
        return _run_stage3(config, workdir)
    raise ConfigurationError(f"unknown stage {stage!r}")


def _run_stage1(config: RunConfig, workdir: Path) -> dict:
    from .objects import save_classifier, train_classifier

    directory = stage_dir(workdir, "I", config)
    if _fragment_path(directory).exists():
        return _read_fragment(directory)
    directory.mkdir(parents=True, exist_ok=True)
    train, _val = ensure_dataset(config)
    with audit_phase("train-stage-I"):
        result = train_classifier(
            train,
            epochs=config.classifier_epochs,
            lr=config.classifier_lr,
            seed=config.classifier_seed,
            batch_size=config.classifier_batch,
        )
    ckpt = directory / "classifier.ckpt"
    save_classifier(ckpt, result, config.classifier_seed, config_hash(config))
    fragment = {
        "stage": "I",
        "key": stage_key("I", config),
        "checkpoints": {"classifier": {"path": str(ckpt), "sha256": file_checksum(ckpt)}},
        "probe_loss_start": result.probe_loss_start,
        "probe_loss_end": result.probe_loss_end,
    }
    _write_fragment(directory, fragment)
    return fragment


def _detect_all(config: RunConfig, dataset: Dataset, classifier):
    from .objects import detect

    out = {}
    for image_id in dataset.image_ids:
        out[image_id] = detect(
            dataset.image(image_id).pixels,
            classifier,
            logit_threshold=config.logit_threshold,
            mask_threshold=config.mask_threshold,
            min_area_fraction=config.min_area_fraction,
        )
    return out


def _run_stage2(config: RunConfig, workdir: Path) -> dict:
    from .objects import load_classifier
    from .relations import build_graph, save_relation_model, train_relations

    directory = stage_dir(workdir, "II", config)
    if _fragment_path(directory).exists():
        return _read_fragment(directory)
    stage1 = _require_stage(workdir, "I", config)
    directory.mkdir(parents=True, exist_ok=True)
    train, _val = ensure_dataset(config)
    classifier, _ = load_classifier(stage1 / "classifier.ckpt")
    with audit_phase("train-stage-II"):
        detections = _detect_all(config, train, classifier)
        graphs = {i: build_graph(inst, feats) for i, (inst, feats) in detections.items()}
        labels = {i: train.labels(i).relations for i in train.image_ids}
        result = train_relations(
            graphs,
            labels,
            num_relations=len(train.manifest.relation_registry),
            batch_size=config.relation_batch,
            epochs=config.relation_epochs,
            lr=config.relation_lr,
            seed=config.relation_seed,
            width=config.relation_width,
            blocks=config.relation_blocks,
            use_bn=config.relation_bn,
            use_residual=config.relation_residual,
        )
    ckpt = directory / "relations.ckpt"
    save_relation_model(ckpt, result.model, config.relation_seed, config_hash(config))
    fragment = {
        "stage": "II",
        "key": stage_key("II", config),
        "checkpoints": {"relations": {"path": str(ckpt), "sha256": file_checksum(ckpt)}},
        "probe_loss_start": result.probe_loss_start,
        "probe_loss_end": result.probe_loss_end,
    }
    _write_fragment(directory, fragment)
    return fragment


def build_concepts(config: RunConfig, dataset: Dataset, classifier, relation_model):
    """Recognized concepts per image for caption training: detected object
    words with confidences, thresholded relation words, class sigmoids."""
    from .captioning import ImageConcepts
    from .objects import class_sigmoids
    from .relations import build_graph, predict_relations

    obj_reg = dataset.manifest.object_registry
    rel_reg = dataset.manifest.relation_registry
    detections = _detect_all(config, dataset, classifier)
    concepts = {}
    for image_id, (instances, feats) in detections.items():
        objects = [(obj_reg.name_of(i.category), float(i.score)) for i in instances]
        rels = []
        if relation_model is not None:
            graph = build_graph(instances, feats)
            for rid, score in predict_relations(
                graph, relation_model, config.confidence_threshold
            ):
                rels.append((tuple(tokenize(rel_reg.name_of(rid))), score))
        sig = class_sigmoids(dataset.image(image_id).pixels, classifier)
        scores = {obj_reg.name_of(c): float(sig[c]) for c in range(len(obj_reg))}
        concepts[image_id] = ImageConcepts(objects, rels, scores)
    return concepts


def _build_vocab(config: RunConfig, dataset: Dataset):
    corpus = [tokenize(s) for s in dataset.corpus_sentences()]
    return (
        build_vocabulary(
            corpus,
            min_count=config.vocab_min_count,
            object_names=tuple(dataset.manifest.object_registry.names),
            relation_names=tuple(dataset.manifest.relation_registry.names),
        ),
        corpus,
    )


def _encode_corpus(vocab, corpus: list[list[str]]) -> list[list[int]]:
    return [[vocab.bos_id] + vocab.encode(sent) + [vocab.eos_id] for sent in corpus]


def _run_stage3(config: RunConfig, workdir: Path) -> dict:
    from .captioning import (
        RewardWeights,
        decode_batch,
        save_captioner,
        save_discriminator,
        train_unpaired,
    )
    from .nn import batch_to_tensor
    from .objects import load_classifier
    from .pseudo import filter_pseudo, train_supervised
    from .relations import load_relation_model

    directory = stage_dir(workdir, "III", config)
    if _fragment_path(directory).exists():
        return _read_fragment(directory)
    stage1 = _require_stage(workdir, "I", config)
    relation_model = None
    if config.rel_enabled:
        stage2 = _require_stage(workdir, "II", config)
        relation_model = load_relation_model(stage2 / "relations.ckpt")
    directory.mkdir(parents=True, exist_ok=True)
    train, _val = ensure_dataset(config)
    classifier, _ = load_classifier(stage1 / "classifier.ckpt")

    vocab, corpus = _build_vocab(config, train)
    corpus_ids = _encode_corpus(vocab, corpus)
    weights = RewardWeights(
        alpha=config.alpha,
        beta=config.beta,
        uno=config.uno_weight if config.uno_enabled else 0.0,
    )

    trunk_state = {
        k.removeprefix("trunk."): v
        for k, v in classifier.state_dict().items()
        if k.startswith("trunk.")
    }
    with audit_phase("train-stage-III"):
        concepts = build_concepts(config, train, classifier, relation_model)
        images = {i: train.image(i).pixels for i in train.image_ids}
        result = train_unpaired(
            images,
            corpus_ids,
            concepts,
            vocab,
            weights,
            epochs=config.caption_epochs,
            lr=config.caption_lr,
            batch_size=config.caption_batch,
            hidden=config.hidden_size,
            latent=config.latent_size,
            max_len=config.max_caption_len,
            seed=config.caption_seed,
            adversarial_weight=config.adversarial_weight,
            baseline_decay=config.baseline_decay,
            pretrain_epochs=config.pretrain_epochs,
            pretrain_lr=config.pretrain_lr,
            discriminator_lr=config.discriminator_lr,
            discriminator_steps=config.discriminator_steps,
            encoder_trunk_state=trunk_state,
            min_len=config.min_caption_len,
        )

    unpaired_ckpt = directory / "captioner_unpaired.ckpt"
    save_captioner(unpaired_ckpt, result.captioner, config.caption_seed, config_hash(config))
    disc_ckpt = directory / "discriminator.ckpt"
    save_discriminator(disc_ckpt, result.discriminator, config.caption_seed, config_hash(config))
    checkpoints = {
        "captioner_unpaired": {"path": str(unpaired_ckpt), "sha256": file_checksum(unpaired_ckpt)},
        "discriminator": {"path": str(disc_ckpt), "sha256": file_checksum(disc_ckpt)},
    }

    pseudo_kept = None
    final_ckpt = unpaired_ckpt
    if config.pseudo_enabled:
        with audit_phase("train-stage-III-pseudo"):
            import torch

            ids = sorted(images)
            with torch.no_grad():
                feats = result.captioner.encoder(batch_to_tensor([images[i] for i in ids]))
            # sampled generations give the student some phrasing diversity;
            # the sampler is freshly seeded so the pseudo set is reproducible
            sample_gen = torch.Generator()
            sample_gen.manual_seed(config.pseudo_seed)
            generated = []
            for _rep in range(2):
                seqs = decode_batch(
                    feats,
                    result.captioner.decoder,
                    vocab,
                    "sample",
                    config.max_caption_len,
                    sample_gen,
                    config.min_caption_len,
                )
                generated.extend(zip(ids, seqs))
            detected_words = {
                i: {w for w, _ in concepts[i].objects} for i in ids
            }
            pairs = filter_pseudo(
                generated, detected_words, vocab, provenance=stage_key("III", config)
            )
            pseudo_kept = len(pairs)
            supervised = train_supervised(
                pairs,
                images,
                vocab,
                epochs=config.pseudo_epochs,
                seed=config.pseudo_seed,
                lr=config.pseudo_lr,
                batch_size=config.caption_batch,
                hidden=config.hidden_size,
                latent=config.latent_size,
                encoder_trunk_state=trunk_state,
                corpus_ids=corpus_ids,
                pretrain_epochs=config.pretrain_epochs,
                pretrain_lr=config.pretrain_lr,
            )
        final_ckpt = directory / "captioner_final.ckpt"
        save_captioner(final_ckpt, supervised.captioner, config.pseudo_seed, config_hash(config))
        checkpoints["captioner_final"] = {
            "path": str(final_ckpt),
            "sha256": file_checksum(final_ckpt),
        }

    fragment = {
        "stage": "III",
        "key": stage_key("III", config),
        "checkpoints": checkpoints,
        "final_checkpoint": str(final_ckpt),
        "reward_curve": [round(x, 6) for x in result.reward_curve],
        "unrecognized_curve": [round(x, 6) for x in result.unrecognized_curve],
        "pseudo_pairs_kept": pseudo_kept,
    }
    _write_fragment(directory, fragment)
    return fragment


# ---------------------------------------------------------------------------
# Full runs and reporting.


def evaluate_captioner(captioner, dataset: Dataset, max_len: int, min_len: int = 0):
    """Greedy captions for a split, scored against its hidden reference
    captions (a legal read: evaluation only)."""
    import torch

    from .captioning import decode_batch
    from .nn import batch_to_tensor

    ids = dataset.image_ids
    with torch.no_grad():
        feats = captioner.encoder(batch_to_tensor([dataset.image(i).pixels for i in ids]))
    seqs = decode_batch(
        feats, captioner.decoder, captioner.vocab, "greedy", max_len, None, min_len
    )
    candidates = [seq.words(captioner.vocab) for seq in seqs]
    with audit_phase("evaluate"):
        references = [dataset.hidden(i).captions for i in ids]
    report = metrics_mod.evaluate(candidates, references)
    return report, dict(zip(ids, [" ".join(c) for c in candidates]))


def run_pipeline(
    config: RunConfig, workdir: Path, stages: tuple[str, ...] = STAGES
) -> dict:
    """Run the requested stages in order and assemble the run report.

    The report hash covers every deterministic field; wall-clock timings are
    recorded outside the hashed payload.
    """
    from .captioning import load_captioner

    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    effective = [s for s in STAGES if s in stages]
    if "II" in effective and not config.rel_enabled:
        log.info("relation stage disabled by ablation; skipping stage II")
        effective = [s for s in effective if s != "II"]

    fragments = {}
    timings = {}
    for stage in effective:
        start = time.perf_counter()
        fragments[stage] = run_stage(stage, config, workdir)
        timings[stage] = time.perf_counter() - start

    payload = {
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "stages": fragments,
    }
    if "III" in fragments:
        start = time.perf_counter()
        _train, val = ensure_dataset(config)
        captioner = load_captioner(fragments["III"]["final_checkpoint"])
        report, captions = evaluate_captioner(
            captioner, val, config.max_caption_len, config.min_caption_len
        )
        payload["metrics"] = report.as_dict()
        payload["val_captions"] = captions
        timings["evaluate"] = time.perf_counter() - start

    payload["report_hash"] = report_hash(payload)
    out = dict(payload)
    out["timing_seconds"] = {k: round(v, 3) for k, v in timings.items()}
    report_path = workdir / f"report_{config_hash(config)}.json"
    report_path.write_text(json.dumps(out, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return out


def report_hash(payload: dict) -> str:
    import hashlib

    hashed = {k: v for k, v in payload.items() if k not in ("timing_seconds", "report_hash")}
    return hashlib.sha256(json.dumps(hashed, sort_keys=True).encode("utf-8")).hexdigest()


def load_report(workdir: Path, config: RunConfig) -> dict:
    path = Path(workdir) / f"report_{config_hash(config)}.json"
    if not path.exists():
        raise DependencyError(f"no report for this config at {path}; run the pipeline first")
    return json.loads(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Inference: only the captioning model is touched.

_RECOGNITION_MODULES = ("shapecap.objects", "shapecap.relations")


def infer(target: Path, checkpoint: Path, mode: str = "greedy", max_len: int = 16,
          seed: int = 0, min_len: int = 0) -> list[tuple[str, str]]:
    """Caption an image file, a directory of .ppm files, or a written split.

    Never invokes object or relation recognition; asserts that inference did
    not pull those modules in.
    """
    from .captioning import decode, load_captioner
    from .data import read_ppm

    preloaded = {m for m in _RECOGNITION_MODULES if m in sys.modules}
    captioner = load_captioner(checkpoint)
    target = Path(target)
    if target.is_dir():
        if (target / "manifest.json").exists():
            dataset = read_dataset(target)
            items = [(i, dataset.image(i).pixels) for i in dataset.image_ids]
        else:
            items = [(p.stem, read_ppm(p)) for p in sorted(target.glob("*.ppm"))]
    else:
        items = [(target.stem, read_ppm(target))]

    out = []
    for image_id, pixels in items:
        f_im = captioner.encode(pixels)
        seq = decode(
            f_im.numpy(), captioner, mode=mode, max_len=max_len, seed=seed, min_len=min_len
        )
        out.append((image_id, " ".join(seq.words(captioner.vocab))))

    pulled = [m for m in _RECOGNITION_MODULES if m in sys.modules and m not in preloaded]
    if pulled:
        raise AssertionError(f"inference imported recognition modules: {pulled}")
    return out

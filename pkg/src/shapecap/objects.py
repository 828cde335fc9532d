"""Weakly-supervised object recognition.

A small multi-label CNN classifier is trained on image-level object labels
only. Class attention maps are read off the global-average-pooling head
(per-class weights dotted with the coarsest feature maps, normalized by the
map maximum), and pseudo-instances are extracted by thresholding each map
and splitting it into 4-connected components. No localized supervision is
ever used.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

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
from .data import Dataset, Registry
from .errors import ConfigurationError, ContractViolation
from .nn import ConvTrunk, batch_to_tensor, image_to_tensor, seed_everything

log = logging.getLogger(__name__)

DEFAULT_LOGIT_THRESHOLD = 2.0
DEFAULT_MASK_THRESHOLD = 0.4
DEFAULT_MIN_AREA_FRACTION = 0.01


@dataclass
class FeatureMaps:
    """Four spatial scales of feature tensors (C x H x W each), finest first."""

    scales: list[np.ndarray]

    def __post_init__(self):
        if len(self.scales) != 4:
            raise ContractViolation("expected exactly four feature scales")
        sizes = [s.shape[1] for s in self.scales]
        if any(later >= earlier for earlier, later in zip(sizes[:-1], sizes[1:])):
            raise ContractViolation(f"spatial sizes must strictly decrease, got {sizes}")

    @property
    def coarsest(self) -> np.ndarray:
        return self.scales[-1]


@dataclass
class Cam:
    category: int
    map: np.ndarray  # H_c x W_c in [0, 1]


@dataclass
class Instance:
    category: int
    mask: np.ndarray  # H x W bool at image resolution
    score: float  # in (0, 1]


class ObjectClassifier(nn.Module):
    """Conv trunk + global average pooling + per-class linear head."""

    def __init__(self, num_classes: int, channels: tuple[int, ...] = (8, 16, 32, 64)):
        super().__init__()
        self.trunk = ConvTrunk(channels)
        self.head = nn.Linear(channels[-1], num_classes)
        self.num_classes = num_classes

    def feature_scales(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.trunk(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = self.trunk(x)[-1].mean(dim=(2, 3))
        return self.head(pooled)


def multi_label_soft_margin_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over classes of -[y log sigmoid(x) + (1-y) log sigmoid(-x)].

    1-D inputs score one example; 2-D inputs average over the batch too.
    """
    logits = torch.as_tensor(logits)
    targets = torch.as_tensor(targets, dtype=logits.dtype)
    if logits.shape != targets.shape:
        raise ContractViolation(f"shape mismatch {tuple(logits.shape)} vs {tuple(targets.shape)}")
    per_class = -(targets * F.logsigmoid(logits) + (1.0 - targets) * F.logsigmoid(-logits))
    return per_class.mean()


def compute_features(classifier: ObjectClassifier, pixels: np.ndarray) -> FeatureMaps:
    """Frozen forward pass; returns the four scales as numpy arrays."""
    classifier.eval()
    with torch.no_grad():
        scales = classifier.feature_scales(image_to_tensor(pixels))
    return FeatureMaps([s[0].numpy() for s in scales])


def compute_cam(features: FeatureMaps, classifier: ObjectClassifier, category: int) -> Cam:
    """Per-class attention map: weights . features, divided by the map max,
    negatives clamped to zero. A nonpositive max yields an all-zeros map."""
    if not 0 <= category < classifier.num_classes:
        raise ContractViolation(f"category {category} outside classifier range")
    weights = classifier.head.weight.detach().numpy()[category].astype(np.float64)
    fmap = features.coarsest.astype(np.float64)  # C x h x w
    raw = np.tensordot(weights, fmap, axes=(0, 0))  # h x w
    peak = raw.max()
    if peak <= 0.0:
        return Cam(category, np.zeros_like(raw))
    return Cam(category, np.clip(raw / peak, 0.0, 1.0))


def predict_objects(
    pixels: np.ndarray,
    classifier: ObjectClassifier,
    logit_threshold: float = DEFAULT_LOGIT_THRESHOLD,
) -> list[tuple[int, float]]:
    """Categories with logit strictly above the threshold, score-descending."""
    classifier.eval()
    with torch.no_grad():
        logits = classifier(image_to_tensor(pixels))[0]
    out = [
        (cid, torch.sigmoid(logits[cid]).item())
        for cid in range(classifier.num_classes)
        if logits[cid].item() > logit_threshold
    ]
    out.sort(key=lambda pair: (-pair[1], pair[0]))
    return out


def class_sigmoids(pixels: np.ndarray, classifier: ObjectClassifier) -> np.ndarray:
    classifier.eval()
    with torch.no_grad():
        return torch.sigmoid(classifier(image_to_tensor(pixels))[0]).numpy()


def _nearest_upsample(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = arr.shape
    rows = (np.arange(out_h) * in_h) // out_h
    cols = (np.arange(out_w) * in_w) // out_w
    return arr[rows][:, cols]


def extract_instances(
    cams: list[Cam],
    object_scores: dict[int, float],
    image_shape: tuple[int, int],
    mask_threshold: float = DEFAULT_MASK_THRESHOLD,
    min_area_fraction: float = DEFAULT_MIN_AREA_FRACTION,
) -> list[Instance]:
    """Binarize each map, upsample (nearest) to image resolution, split into
    4-connected components, drop small ones. Component score = class sigmoid
    x mean attention inside the component. Order: score descending, then
    category id, then component centroid row-major."""
    from scipy import ndimage

    h, w = image_shape
    min_area = min_area_fraction * h * w
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    keyed = []
    for cam in cams:
        if cam.category not in object_scores:
            raise ContractViolation(
                f"CAM for category {cam.category} lacks a matching object score"
            )
        up = _nearest_upsample(cam.map, h, w)
        binary = up >= mask_threshold
        labeled, count = ndimage.label(binary, structure=structure)
        for k in range(1, count + 1):
            mask = labeled == k
            area = int(mask.sum())
            if area < min_area:
                continue
            score = float(object_scores[cam.category] * up[mask].mean())
            ys, xs = np.nonzero(mask)
            centroid = (float(ys.mean()), float(xs.mean()))
            keyed.append((-score, cam.category, centroid, Instance(cam.category, mask, score)))
    keyed.sort(key=lambda item: (item[0], item[1], item[2]))
    return [item[3] for item in keyed]


def detect(
    pixels: np.ndarray,
    classifier: ObjectClassifier,
    logit_threshold: float = DEFAULT_LOGIT_THRESHOLD,
    mask_threshold: float = DEFAULT_MASK_THRESHOLD,
    min_area_fraction: float = DEFAULT_MIN_AREA_FRACTION,
) -> tuple[list[Instance], FeatureMaps]:
    """Full single-image inference: predicted categories -> CAMs -> instances."""
    features = compute_features(classifier, pixels)
    predicted = predict_objects(pixels, classifier, logit_threshold)
    cams = [compute_cam(features, classifier, cid) for cid, _ in predicted]
    instances = extract_instances(
        cams,
        dict(predicted),
        pixels.shape[:2],
        mask_threshold,
        min_area_fraction,
    )
    return instances, features


@dataclass
class ClassifierTraining:
    classifier: ObjectClassifier
    registry: Registry
    probe_loss_start: float
    probe_loss_end: float
    epoch_losses: list[float]


def train_classifier(
    dataset: Dataset,
    epochs: int = 25,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 32,
    channels: tuple[int, ...] = (8, 16, 32, 64),
) -> ClassifierTraining:
    """Multi-label training on image-level object labels only."""
    if len(dataset) == 0:
        raise ConfigurationError("cannot train a classifier on an empty split")
    gen = seed_everything(seed)
    registry = dataset.manifest.object_registry
    num_classes = len(registry)
    classifier = ObjectClassifier(num_classes, channels)

    images = batch_to_tensor([dataset.image(i).pixels for i in dataset.image_ids])
    targets = torch.zeros(len(dataset), num_classes)
    for row, image_id in enumerate(dataset.image_ids):
        for cid in dataset.labels(image_id).objects:
            targets[row, cid] = 1.0

    probe = min(len(dataset), batch_size)
    with torch.no_grad():
        probe_start = multi_label_soft_margin_loss(classifier(images[:probe]), targets[:probe]).item()

    opt = torch.optim.Adam(classifier.parameters(), lr=lr)
    epoch_losses = []
    n = len(dataset)
    for _epoch in range(epochs):
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            opt.zero_grad()
            loss = multi_label_soft_margin_loss(classifier(images[idx]), targets[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        epoch_losses.append(total / n)

    with torch.no_grad():
        probe_end = multi_label_soft_margin_loss(classifier(images[:probe]), targets[:probe]).item()
    return ClassifierTraining(classifier, registry, probe_start, probe_end, epoch_losses)


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Area under the precision/recall curve by the rank-sum formula."""
    order = np.argsort(-scores, kind="stable")
    positives = np.asarray(positives, dtype=bool)[order]
    if not positives.any():
        return 0.0
    hits = np.cumsum(positives)
    ranks = np.arange(1, len(positives) + 1)
    return float((hits[positives] / ranks[positives]).mean())


def per_class_average_precision(dataset: Dataset, classifier: ObjectClassifier) -> np.ndarray:
    scores = np.stack([class_sigmoids(dataset.image(i).pixels, classifier) for i in dataset.image_ids])
    targets = np.zeros_like(scores, dtype=bool)
    for row, image_id in enumerate(dataset.image_ids):
        for cid in dataset.labels(image_id).objects:
            targets[row, cid] = True
    return np.array(
        [average_precision(scores[:, c], targets[:, c]) for c in range(scores.shape[1])]
    )


def save_classifier(path, training_or_model, seed: int, config_hash: str) -> None:
    model = getattr(training_or_model, "classifier", training_or_model)
    registry = getattr(training_or_model, "registry", None)
    extra = {
        "channels": list(model.trunk.channels),
        "num_classes": model.num_classes,
    }
    if registry is not None:
        extra["object_categories"] = registry.names
    save_checkpoint(
        path,
        Checkpoint("object-classifier", state_dict_arrays(model), extra, seed, config_hash),
    )


def load_classifier(path) -> tuple[ObjectClassifier, Registry | None]:
    ckpt = load_checkpoint_kind(path, "object-classifier")
    model = ObjectClassifier(ckpt.extra["num_classes"], tuple(ckpt.extra["channels"]))
    load_state_dict_arrays(model, ckpt.arrays)
    model.eval()
    registry = None
    if "object_categories" in ckpt.extra:
        registry = Registry(list(ckpt.extra["object_categories"]))
    return model, registry



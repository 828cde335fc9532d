"""Weakly-supervised relationship recognition.

Detected instances become nodes of a fully-connected directed graph whose
node features combine mask-pooled appearance (all four feature scales) with
normalized spatial geometry. Every directed edge is classified over the
relation categories plus a background class; per-edge softmax outputs are
max-pooled into image-level scores and supervised by the image-level
relation labels alone.

The edge network normalizes activations with fixed (frozen) per-dimension
statistics and stacks residual MLP blocks; both enhancements can be ablated
to recover the plain variant.
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
from .errors import ConfigurationError, ContractViolation
from .nn import seed_everything
from .objects import FeatureMaps, Instance

log = logging.getLogger(__name__)

DEFAULT_CONFIDENCE_THRESHOLD = 0.7
SPATIAL_DIM = 9
EDGE_EXTRA_DIM = 3  # centroid displacement (2) + log area ratio


@dataclass
class InstanceGraph:
    """Nodes carry (appearance, spatial) features; edges cover all ordered pairs."""

    appearance: np.ndarray  # N x A
    spatial: np.ndarray  # N x SPATIAL_DIM, all entries in [0, 1]
    edges: list[tuple[int, int]]  # ordered pairs (i, j), i != j
    edge_features: np.ndarray  # E x (2*SPATIAL_DIM + EDGE_EXTRA_DIM)

    @property
    def num_nodes(self) -> int:
        return self.appearance.shape[0]

    @property
    def num_edges(self) -> int:
        return len(self.edges)


def _resize_mask_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = mask.shape
    rows = (np.arange(out_h) * in_h) // out_h
    cols = (np.arange(out_w) * in_w) // out_w
    return mask[rows][:, cols]


def _spatial_vector(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    h, w = mask.shape
    cx = (xs.mean() + 0.5) / w
    cy = (ys.mean() + 0.5) / h
    area = mask.sum() / (h * w)
    x0, y0 = xs.min() / w, ys.min() / h
    x1, y1 = (xs.max() + 1) / w, (ys.max() + 1) / h
    return np.array([cx, cy, area, x0, y0, x1, y1, x1 - x0, y1 - y0], dtype=np.float32)


def build_graph(instances: list[Instance], features: FeatureMaps) -> InstanceGraph:
    """Fully-connected directed graph over the instances.

    Appearance = concatenation over the four scales of the mean feature
    vector under the (nearest-resized) instance mask; if a small mask
    vanishes at a coarse scale, the cell containing its centroid stands in.
    """
    n = len(instances)
    appearance_dim = sum(s.shape[0] for s in features.scales)
    if n == 0:
        return InstanceGraph(
            appearance=np.zeros((0, appearance_dim), dtype=np.float32),
            spatial=np.zeros((0, SPATIAL_DIM), dtype=np.float32),
            edges=[],
            edge_features=np.zeros((0, 2 * SPATIAL_DIM + EDGE_EXTRA_DIM), dtype=np.float32),
        )

    spatial = np.stack([_spatial_vector(inst.mask) for inst in instances])
    appearance_rows = []
    for inst in instances:
        h, w = inst.mask.shape
        parts = []
        for scale in features.scales:
            c, sh, sw = scale.shape
            resized = _resize_mask_nearest(inst.mask, sh, sw)
            if not resized.any():
                ys, xs = np.nonzero(inst.mask)
                ry = min(int(ys.mean() * sh / h), sh - 1)
                rx = min(int(xs.mean() * sw / w), sw - 1)
                resized = np.zeros((sh, sw), dtype=bool)
                resized[ry, rx] = True
            parts.append(scale[:, resized].mean(axis=1))
        appearance_rows.append(np.concatenate(parts).astype(np.float32))
    appearance = np.stack(appearance_rows)

    edges = [(i, j) for i in range(n) for j in range(n) if i != j]
    feats = []
    for i, j in edges:
        si, sj = spatial[i], spatial[j]
        extra = np.array(
            [sj[0] - si[0], sj[1] - si[1], np.log(si[2] / sj[2])], dtype=np.float32
        )
        feats.append(np.concatenate([si, sj, extra]))
    edge_features = (
        np.stack(feats) if feats else np.zeros((0, 2 * SPATIAL_DIM + EDGE_EXTRA_DIM), np.float32)
    )
    return InstanceGraph(appearance, spatial, edges, edge_features)


def bn_fixed(h: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    """Elementwise (h - mean) / sqrt(var) with frozen statistics."""
    h = np.asarray(h, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if h.shape[-1] != mean.shape[-1] or mean.shape != var.shape:
        raise ContractViolation("bn_fixed: shape mismatch")
    if (var <= 0).any():
        raise ContractViolation("bn_fixed: variance entries must be positive")
    return (h - mean) / np.sqrt(var)


def residual_block(h: np.ndarray, inner) -> np.ndarray:
    """Shortcut form: inner(h) + h; inner must preserve the dimension."""
    h = np.asarray(h)
    out = np.asarray(inner(h))
    if out.shape != h.shape:
        raise ContractViolation(
            f"residual inner transform changed shape {h.shape} -> {out.shape}"
        )
    return out + h


class _FixedNorm(nn.Module):
    """Normalization by frozen statistics; identity until stats are set."""

    def __init__(self, dim: int):
        super().__init__()
        self.register_buffer("mean", torch.zeros(dim))
        self.register_buffer("var", torch.ones(dim))

    def set_stats(self, mean: torch.Tensor, var: torch.Tensor) -> None:
        if (var <= 0).any():
            raise ContractViolation("fixed normalization needs positive variances")
        self.mean.copy_(mean)
        self.var.copy_(var)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / torch.sqrt(self.var)


class _ResidualMLP(nn.Module):
    def __init__(self, width: int, use_bn: bool, use_residual: bool):
        super().__init__()
        self.norm = _FixedNorm(width) if use_bn else None
        self.lin1 = nn.Linear(width, width)
        self.lin2 = nn.Linear(width, width)
        self.use_residual = use_residual

    def inner(self, h: torch.Tensor) -> torch.Tensor:
        x = h if self.norm is None else self.norm(h)
        return self.lin2(F.gelu(self.lin1(x)))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        out = self.inner(h)
        return out + h if self.use_residual else out


class EdgeClassifier(nn.Module):
    """Relation logits for every directed edge of an instance graph."""

    def __init__(
        self,
        appearance_dim: int,
        num_relations: int,
        width: int = 128,
        blocks: int = 3,
        use_bn: bool = True,
        use_residual: bool = True,
    ):
        super().__init__()
        node_dim = appearance_dim + SPATIAL_DIM
        edge_dim = 2 * SPATIAL_DIM + EDGE_EXTRA_DIM
        self.node_transform = nn.Linear(node_dim, width)
        self.edge_transform = nn.Linear(edge_dim, width)
        self.input_norm = _FixedNorm(3 * width) if use_bn else None
        self.input_proj = nn.Linear(3 * width, width)
        self.blocks = nn.ModuleList(
            _ResidualMLP(width, use_bn, use_residual) for _ in range(blocks)
        )
        self.classifier = nn.Linear(width, num_relations + 1)  # + background
        self.appearance_dim = appearance_dim
        self.num_relations = num_relations
        self.width = width
        self.use_bn = use_bn
        self.use_residual = use_residual

    def _edge_inputs(self, graph: InstanceGraph) -> torch.Tensor:
        dtype = self.node_transform.weight.dtype
        nodes = torch.from_numpy(
            np.concatenate([graph.appearance, graph.spatial], axis=1)
        ).to(dtype)
        src = torch.tensor([i for i, _ in graph.edges], dtype=torch.long)
        dst = torch.tensor([j for _, j in graph.edges], dtype=torch.long)
        ef = torch.from_numpy(graph.edge_features).to(dtype)
        tv = self.node_transform(nodes)
        return torch.cat([tv[src], tv[dst], self.edge_transform(ef)], dim=1)

    def stack_forward(self, z: torch.Tensor) -> torch.Tensor:
        if self.input_norm is not None:
            z = self.input_norm(z)
        h = F.gelu(self.input_proj(z))
        for block in self.blocks:
            h = block(h)
        return self.classifier(h)

    def forward(self, graph: InstanceGraph) -> torch.Tensor:
        if graph.num_edges == 0:
            return torch.zeros((0, self.num_relations + 1))
        return self.stack_forward(self._edge_inputs(graph))

    def freeze_stats(self, graphs: list[InstanceGraph]) -> None:
        """Warm-up pass: estimate per-layer input statistics over `graphs`
        with the current weights, then freeze them."""
        if self.input_norm is None:
            return
        with torch.no_grad():
            zs = [self._edge_inputs(g) for g in graphs if g.num_edges > 0]
            if not zs:
                raise ConfigurationError("warm-up needs at least one edge")
            z = torch.cat(zs, dim=0)
            self.input_norm.set_stats(*_batch_stats(z))
            h = F.gelu(self.input_proj(self.input_norm(z)))
            for block in self.blocks:
                block.norm.set_stats(*_batch_stats(h))
                h = block(h)


def _batch_stats(x: torch.Tensor, floor: float = 1e-5) -> tuple[torch.Tensor, torch.Tensor]:
    mean = x.mean(dim=0)
    var = x.var(dim=0, unbiased=False).clamp_min(floor)
    return mean, var


def gnn_edge_logits(graph: InstanceGraph, model: EdgeClassifier) -> np.ndarray:
    """Per-edge relation logits, aligned with graph.edges."""
    model.eval()
    with torch.no_grad():
        return model(graph).numpy()


def aggregate_edges(edge_softmax: np.ndarray) -> np.ndarray:
    """Image-level score per relation class = max over edges of its softmax
    mass (background column excluded). Zero edges yield all-zeros."""
    arr = np.asarray(edge_softmax, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractViolation("expected an E x (R+1) softmax array")
    if arr.shape[0] == 0:
        return np.zeros(max(arr.shape[1] - 1, 0))
    return arr[:, :-1].max(axis=0)


def _aggregate_torch(edge_logits: torch.Tensor) -> torch.Tensor:
    probs = F.softmax(edge_logits, dim=1)
    return probs[:, :-1].max(dim=0).values


@dataclass
class RelationTraining:
    model: EdgeClassifier
    probe_loss_start: float
    probe_loss_end: float
    epoch_losses: list[float]


def train_relations(
    graphs: dict[str, InstanceGraph],
    labels: dict[str, frozenset[int]],
    num_relations: int,
    batch_size: int = 256,
    epochs: int = 40,
    lr: float = 3e-3,
    seed: int = 0,
    width: int = 128,
    blocks: int = 3,
    use_bn: bool = True,
    use_residual: bool = True,
) -> RelationTraining:
    """Binary cross-entropy between max-pooled edge softmax scores and the
    image-level relation indicator. Normalization statistics are frozen from
    a warm-up pass before the first update."""
    ids = [i for i in graphs if graphs[i].num_edges > 0]
    if not ids:
        raise ConfigurationError("no graphs with edges to train on")
    if batch_size > len(ids):
        log.warning(
            "batch size %d exceeds the %d usable images; clamping", batch_size, len(ids)
        )
        batch_size = len(ids)

    gen = seed_everything(seed)
    appearance_dim = graphs[ids[0]].appearance.shape[1]
    model = EdgeClassifier(
        appearance_dim, num_relations, width, blocks, use_bn=use_bn, use_residual=use_residual
    )
    model.freeze_stats([graphs[i] for i in ids])

    targets = {
        i: torch.tensor(
            [1.0 if r in labels[i] else 0.0 for r in range(num_relations)]
        )
        for i in ids
    }

    def batch_loss(batch_ids: list[str]) -> torch.Tensor:
        # one fused forward over the batch's edges, then per-image max-pool
        inputs = torch.cat([model._edge_inputs(graphs[i]) for i in batch_ids], dim=0)
        logits = model.stack_forward(inputs)
        losses = []
        offset = 0
        for i in batch_ids:
            count = graphs[i].num_edges
            scores = _aggregate_torch(logits[offset : offset + count]).clamp(1e-6, 1.0 - 1e-6)
            losses.append(F.binary_cross_entropy(scores, targets[i]))
            offset += count
        return torch.stack(losses).mean()

    probe_ids = ids[: min(len(ids), batch_size)]
    with torch.no_grad():
        probe_start = batch_loss(probe_ids).item()

    opt = torch.optim.Adam(model.parameters(), lr=lr)
    epoch_losses = []
    for _epoch in range(epochs):
        order = torch.randperm(len(ids), generator=gen).tolist()
        total = 0.0
        for start in range(0, len(ids), batch_size):
            batch = [ids[k] for k in order[start : start + batch_size]]
            opt.zero_grad()
            loss = batch_loss(batch)
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        epoch_losses.append(total / len(ids))

    with torch.no_grad():
        probe_end = batch_loss(probe_ids).item()
    return RelationTraining(model, probe_start, probe_end, epoch_losses)


def predict_relations(
    graph: InstanceGraph,
    model: EdgeClassifier,
    confidence_threshold: float = DEFAULT_CONFIDENCE_THRESHOLD,
) -> list[tuple[int, float]]:
    """Relations whose aggregated score strictly exceeds the threshold,
    sorted by confidence descending."""
    logits = gnn_edge_logits(graph, model)
    if logits.shape[0] == 0:
        return []
    exp = np.exp(logits - logits.max(axis=1, keepdims=True))
    scores = aggregate_edges(exp / exp.sum(axis=1, keepdims=True))
    out = [
        (rid, float(s)) for rid, s in enumerate(scores) if s > confidence_threshold
    ]
    out.sort(key=lambda pair: (-pair[1], pair[0]))
    return out


def micro_f1(predicted: dict[str, set[int]], truth: dict[str, set[int]]) -> float:
    tp = fp = fn = 0
    for image_id, true in truth.items():
        pred = predicted.get(image_id, set())
        tp += len(pred & true)
        fp += len(pred - true)
        fn += len(true - pred)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 1.0


def save_relation_model(path, model: EdgeClassifier, seed: int, config_hash: str) -> None:
    extra = {
        "appearance_dim": model.appearance_dim,
        "blocks": len(model.blocks),
        "num_relations": model.num_relations,
        "use_bn": model.use_bn,
        "use_residual": model.use_residual,
        "width": model.width,
    }
    save_checkpoint(
        path, Checkpoint("relation-gnn", state_dict_arrays(model), extra, seed, config_hash)
    )


def load_relation_model(path) -> EdgeClassifier:
    ckpt = load_checkpoint_kind(path, "relation-gnn")
    model = EdgeClassifier(
        ckpt.extra["appearance_dim"],
        ckpt.extra["num_relations"],
        ckpt.extra["width"],
        ckpt.extra["blocks"],
        use_bn=ckpt.extra["use_bn"],
        use_residual=ckpt.extra["use_residual"],
    )
    load_state_dict_arrays(model, ckpt.arrays)
    model.eval()
    return model

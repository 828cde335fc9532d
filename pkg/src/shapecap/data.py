"""Synthetic weakly-labeled scene corpus: generation, on-disk formats, vocabulary.

A scene is a dark canvas with 1..K colored shapes. Each object category has a
fixed paint color, so categories are re-detectable from pixels by exact color
matching; relations are decided by fixed bounding-box predicates on the
visible (post-occlusion) masks. Image-level labels are therefore verifiable
by construction.

Ground truth that a paired-captioning system would train on (per-instance
masks, relation triplets, reference captions) is stored separately and only
reachable through a guarded accessor that records every read in the audit
log. Training code never touches it; tests assert that.
"""

from __future__ import annotations

import contextlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractViolation, DataError

# ---------------------------------------------------------------------------
# Tokenization. Frozen convention: lowercase, split on anything that is not
# a letter or digit, punctuation dropped.

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


# ---------------------------------------------------------------------------
# Category registries.


class Registry:
    """Bijection between contiguous integer ids and category names."""

    def __init__(self, names: list[str]):
        if len(set(names)) != len(names):
            raise ConfigurationError("registry names must be unique")
        self.names = list(names)
        self._index = {name: i for i, name in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def __eq__(self, other) -> bool:
        return isinstance(other, Registry) and self.names == other.names

    def id_of(self, name: str) -> int:
        if name not in self._index:
            raise ContractViolation(f"unknown category {name!r}")
        return self._index[name]

    def name_of(self, cid: int) -> str:
        if not 0 <= cid < len(self.names):
            raise ContractViolation(f"category id {cid} outside registry")
        return self.names[cid]


# ---------------------------------------------------------------------------
# Domain types.


@dataclass
class SceneImage:
    id: str
    pixels: np.ndarray  # H x W x 3 float32 in [0, 1]

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ContractViolation(f"image {self.id}: expected HxWx3 pixels")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ContractViolation(f"image {self.id}: pixel values outside [0,1]")


@dataclass(frozen=True)
class ImageLevelLabels:
    objects: frozenset[int]
    relations: frozenset[int]


Bbox = tuple[int, int, int, int]  # (x0, y0, x1, y1), inclusive pixel coords


@dataclass
class HiddenInstance:
    category: int
    mask: np.ndarray  # H x W bool, visible (post-occlusion) pixels
    bbox: Bbox


@dataclass
class HiddenGroundTruth:
    """Evaluation-only ground truth; reach it via Dataset.hidden()."""

    instances: list[HiddenInstance]
    triplets: list[tuple[int, int, int]]  # (subject idx, relation id, object idx)
    captions: list[list[str]]  # tokenized reference sentences


@dataclass(frozen=True)
class DatasetRecord:
    image_id: str
    image_path: str  # relative to dataset root
    labels_path: str


@dataclass
class DatasetManifest:
    split: str
    records: list[DatasetRecord]
    object_registry: Registry
    relation_registry: Registry
    corpus_path: str

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, DatasetManifest)
            and self.split == other.split
            and self.records == other.records
            and self.object_registry == other.object_registry
            and self.relation_registry == other.relation_registry
            and self.corpus_path == other.corpus_path
        )


# ---------------------------------------------------------------------------
# Audit log guarding the hidden ground truth.


@dataclass(frozen=True)
class AuditEvent:
    phase: str
    image_id: str
    field: str


class AuditLog:
    def __init__(self):
        self.events: list[AuditEvent] = []
        self._phase = "ambient"

    @contextlib.contextmanager
    def phase(self, name: str):
        prev = self._phase
        self._phase = name
        try:
            yield
        finally:
            self._phase = prev

    def record(self, image_id: str, field: str) -> None:
        self.events.append(AuditEvent(self._phase, image_id, field))

    def reads(self, fields: tuple[str, ...], phase_prefix: str = "") -> int:
        return sum(
            1
            for e in self.events
            if e.field in fields and e.phase.startswith(phase_prefix)
        )

    def clear(self) -> None:
        self.events.clear()


AUDIT = AuditLog()


def audit_phase(name: str):
    """Tag hidden-ground-truth reads made inside the block with `name`."""
    return AUDIT.phase(name)


class GuardedHidden:
    """Lazy accessor for one image's hidden ground truth; every read is logged."""

    def __init__(self, image_id: str, loader):
        self._image_id = image_id
        self._loader = loader

    @property
    def instances(self) -> list[HiddenInstance]:
        AUDIT.record(self._image_id, "instances")
        return self._loader().instances

    @property
    def triplets(self) -> list[tuple[int, int, int]]:
        AUDIT.record(self._image_id, "triplets")
        return self._loader().triplets

    @property
    def captions(self) -> list[list[str]]:
        AUDIT.record(self._image_id, "captions")
        return self._loader().captions


# ---------------------------------------------------------------------------
# Scene generator.

OBJECT_CATEGORIES = ["circle", "square", "triangle", "cross"]
RELATION_CATEGORIES = ["left of", "above", "inside", "overlapping"]

# Fixed paint colors (8-bit RGB), one per object category, plus background.
CATEGORY_COLORS = {
    "circle": (230, 60, 50),
    "square": (60, 200, 90),
    "triangle": (60, 110, 235),
    "cross": (235, 215, 70),
}
BACKGROUND_COLOR = (16, 16, 20)


@dataclass(frozen=True)
class GeneratorConfig:
    height: int = 64
    width: int = 64
    categories: tuple[str, ...] = tuple(OBJECT_CATEGORIES)
    relations: tuple[str, ...] = tuple(RELATION_CATEGORIES)
    min_objects: int = 1
    max_objects: int = 4
    radius_min: int = 8
    radius_max: int = 14
    pair_probability: float = 0.45  # chance the scene contains an interacting pair
    inside_probability: float = 0.5  # inside vs overlapping, given a pair
    min_gap: int = 2  # bbox gap between non-interacting instances
    min_visible_px: int = 60

    def validate(self) -> None:
        if not self.categories:
            raise ConfigurationError("at least one object category required")
        if self.max_objects < 1 or self.min_objects < 1 or self.min_objects > self.max_objects:
            raise ConfigurationError("object count bounds invalid")
        if self.radius_min < 4 or self.radius_max < self.radius_min:
            raise ConfigurationError("radius bounds invalid")
        if min(self.height, self.width) < 4 * self.radius_max:
            raise ConfigurationError("canvas too small for the configured radii")


def default_config() -> GeneratorConfig:
    return GeneratorConfig()


def _footprint(kind: str, h: int, w: int, cx: int, cy: int, r: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    if kind == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if kind == "square":
        s = max(3, round(0.82 * r))
        return (np.abs(xs - cx) <= s) & (np.abs(ys - cy) <= s)
    if kind == "triangle":
        # upward isoceles: apex (cx, cy - r), base row cy + ceil(0.6 r)
        top = cy - r
        base = cy + int(np.ceil(0.6 * r))
        half_base = max(3, round(1.05 * r))
        t = (ys - top) / max(1, base - top)
        return (ys >= top) & (ys <= base) & (np.abs(xs - cx) <= t * half_base)
    if kind == "cross":
        th = max(1, round(0.38 * r))
        horiz = (np.abs(ys - cy) <= th) & (np.abs(xs - cx) <= r)
        vert = (np.abs(xs - cx) <= th) & (np.abs(ys - cy) <= r)
        return horiz | vert
    raise ConfigurationError(f"unknown shape kind {kind!r}")


def _mask_bbox(mask: np.ndarray) -> Bbox:
    ys, xs = np.nonzero(mask)
    return (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def _bbox_inside(a: Bbox, b: Bbox) -> bool:
    return a[0] > b[0] and a[1] > b[1] and a[2] < b[2] and a[3] < b[3]


def _bbox_intersect(a: Bbox, b: Bbox) -> bool:
    return not (a[2] < b[0] or b[2] < a[0] or a[3] < b[1] or b[3] < a[1])


def relation_holds(name: str, a: Bbox, b: Bbox) -> bool:
    """Whether ordered pair (a, b) satisfies the named geometric relation."""
    if name == "left of":
        return a[2] < b[0]
    if name == "above":
        return a[3] < b[1]
    if name == "inside":
        return _bbox_inside(a, b)
    if name == "overlapping":
        return _bbox_intersect(a, b) and not _bbox_inside(a, b) and not _bbox_inside(b, a)
    raise ContractViolation(f"unknown relation {name!r}")


def _bbox_gap_ok(a: Bbox, b: Bbox, gap: int) -> bool:
    grown = (a[0] - gap, a[1] - gap, a[2] + gap, a[3] + gap)
    return not _bbox_intersect(grown, b)


def scene_captions(cat_names: list[str], triplets: list[tuple[int, int, int]],
                   relation_names: list[str]) -> list[str]:
    """Three deterministic reference sentences for a scene."""
    caps = []
    if triplets:
        s, r, o = triplets[0]
        caps.append(f"a {cat_names[s]} {relation_names[r]} a {cat_names[o]}")
    elif len(cat_names) >= 2:
        caps.append(f"a {cat_names[0]} and a {cat_names[1]}")
    else:
        caps.append(f"a {cat_names[0]}")
    caps.append("the picture shows " + " and ".join(f"a {c}" for c in cat_names))
    if triplets:
        s, r, o = triplets[-1]
        caps.append(f"there is a {cat_names[s]} {relation_names[r]} a {cat_names[o]}")
    else:
        caps.append(f"there is a {cat_names[0]}")
    return caps


class GenerationError(RuntimeError):
    pass


def generate_scene(
    seed: int, config: GeneratorConfig | None = None
) -> tuple[SceneImage, ImageLevelLabels, HiddenGroundTruth]:
    """Render one scene. Deterministic for a fixed (seed, config)."""
    config = config or default_config()
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    h, w = config.height, config.width
    obj_reg = Registry(list(config.categories))
    rel_reg = Registry(list(config.relations))

    for _attempt in range(200):
        scene = _try_scene(rng, config, obj_reg)
        if scene is None:
            continue
        footprints, cats = scene

        # Visible mask of instance i = footprint minus everything painted later.
        visible = []
        for i, fp in enumerate(footprints):
            vis = fp.copy()
            for later in footprints[i + 1 :]:
                vis &= ~later
            visible.append(vis)
        if not _scene_valid(footprints, visible, cats, config):
            continue

        bboxes = [_mask_bbox(v) for v in visible]
        triplets = []
        for i in range(len(visible)):
            for j in range(len(visible)):
                if i == j:
                    continue
                for rid, rname in enumerate(config.relations):
                    if relation_holds(rname, bboxes[i], bboxes[j]):
                        triplets.append((i, rid, j))

        image = np.empty((h, w, 3), dtype=np.uint8)
        image[:, :] = BACKGROUND_COLOR
        for vis, cat in zip(visible, cats):
            image[vis] = CATEGORY_COLORS[obj_reg.name_of(cat)]

        pixels = image.astype(np.float32) / 255.0
        cat_names = [obj_reg.name_of(c) for c in cats]
        captions = [tokenize(c) for c in scene_captions(cat_names, triplets, list(config.relations))]
        labels = ImageLevelLabels(
            objects=frozenset(cats),
            relations=frozenset(rid for _, rid, _ in triplets),
        )
        hidden = HiddenGroundTruth(
            instances=[
                HiddenInstance(category=c, mask=v, bbox=b)
                for c, v, b in zip(cats, visible, bboxes)
            ],
            triplets=triplets,
            captions=captions,
        )
        return SceneImage(id=f"scene-{seed:08d}", pixels=pixels), labels, hidden

    raise GenerationError(f"could not generate a valid scene for seed {seed}")


def _try_scene(rng, config: GeneratorConfig, obj_reg: Registry):
    """One placement attempt: returns (footprints, categories) or None."""
    h, w = config.height, config.width
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    want_pair = n >= 2 and rng.random() < config.pair_probability
    pair_inside = rng.random() < config.inside_probability

    footprints: list[np.ndarray] = []
    cats: list[int] = []
    bboxes: list[Bbox] = []

    def place(kind_id: int, r: int, forbid: list[Bbox]) -> np.ndarray | None:
        kind = obj_reg.name_of(kind_id)
        margin = r + 2
        if w - margin <= margin or h - margin <= margin:
            return None
        for _ in range(60):
            cx = int(rng.integers(margin, w - margin))
            cy = int(rng.integers(margin, h - margin))
            fp = _footprint(kind, h, w, cx, cy, r)
            if not fp.any():
                continue
            bb = _mask_bbox(fp)
            if all(_bbox_gap_ok(bb, other, config.min_gap) for other in forbid):
                return fp
        return None

    remaining = n
    if want_pair:
        if pair_inside:
            # outer drawn from the solid convex kinds so the inner always fits
            solid = [i for i, name in enumerate(obj_reg.names) if name in ("circle", "square")]
            if not solid:
                return None
            ca = int(rng.choice(solid))
            others = [i for i in range(len(obj_reg)) if i != ca]
            cb = int(rng.choice(others))
            r_out = 15
            outer = place(ca, r_out, bboxes)
            if outer is None:
                return None
            ob = _mask_bbox(outer)
            ocx, ocy = (ob[0] + ob[2]) // 2, (ob[1] + ob[3]) // 2
            r_in = int(rng.integers(7, 9))
            inner = None
            for _ in range(20):
                jitter = max(1, r_out - r_in - 5)
                icx = ocx + int(rng.integers(-jitter, jitter + 1))
                icy = ocy + int(rng.integers(-jitter, jitter + 1))
                cand = _footprint(obj_reg.name_of(cb), config.height, config.width, icx, icy, r_in)
                if cand.any() and not (cand & ~outer).any():
                    cb_box = _mask_bbox(cand)
                    if _bbox_inside(cb_box, ob):
                        inner = cand
                        break
            if inner is None:
                return None
            footprints.extend([outer, inner])
            cats.extend([ca, cb])
            bboxes.append(ob)
        else:
            ca, cb = (int(x) for x in rng.choice(len(obj_reg), size=2, replace=False))
            r1 = int(rng.integers(config.radius_min, config.radius_max + 1))
            r2 = int(rng.integers(config.radius_min, config.radius_max + 1))
            bottom = place(ca, r1, bboxes)
            if bottom is None:
                return None
            bb = _mask_bbox(bottom)
            bcx, bcy = (bb[0] + bb[2]) // 2, (bb[1] + bb[3]) // 2
            top = None
            for _ in range(20):
                angle = rng.uniform(0, 2 * np.pi)
                dist = (r1 + r2) * rng.uniform(0.55, 0.8)
                tcx = int(round(bcx + dist * np.cos(angle)))
                tcy = int(round(bcy + dist * np.sin(angle)))
                m2 = r2 + 2
                if not (m2 <= tcx < config.width - m2 and m2 <= tcy < config.height - m2):
                    continue
                cand = _footprint(obj_reg.name_of(cb), config.height, config.width, tcx, tcy, r2)
                if cand.any() and (cand & bottom).sum() >= 8:
                    top = cand
                    break
            if top is None:
                return None
            footprints.extend([bottom, top])
            cats.extend([ca, cb])
            bboxes.append(_mask_bbox(bottom | top))
        remaining -= 2

    for _ in range(remaining):
        cid = int(rng.integers(0, len(obj_reg)))
        r = int(rng.integers(config.radius_min, config.radius_max + 1))
        fp = place(cid, r, bboxes)
        if fp is None:
            return None
        footprints.append(fp)
        cats.append(cid)
        bboxes.append(_mask_bbox(fp))
    return footprints, cats


def _connected(mask: np.ndarray) -> bool:
    from scipy import ndimage

    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    _, count = ndimage.label(mask, structure=structure)
    return count == 1


def _scene_valid(footprints, visible, cats, config: GeneratorConfig) -> bool:
    for vis in visible:
        if vis.sum() < config.min_visible_px or not _connected(vis):
            return False
    bboxes = [_mask_bbox(v) for v in visible]
    for i in range(len(visible)):
        for j in range(i + 1, len(visible)):
            interacting = bool((footprints[i] & footprints[j]).any())
            if interacting:
                if cats[i] == cats[j]:
                    return False
            else:
                if not _bbox_gap_ok(bboxes[i], bboxes[j], config.min_gap):
                    return False
    return True


def generate_corpus(seed: int, n_sentences: int, config: GeneratorConfig | None = None) -> list[str]:
    """Unpaired sentence corpus: descriptions of sampled abstract scenes.

    Never derived from any generated image; shares only the grammar.
    """
    config = config or default_config()
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    cats = list(config.categories)
    rels = list(config.relations)
    sentences = []
    while len(sentences) < n_sentences:
        n = int(rng.integers(config.min_objects, config.max_objects + 1))
        names = [cats[int(rng.integers(0, len(cats)))] for _ in range(n)]
        triplets = []
        if n >= 2 and rng.random() < 0.75:
            i, j = rng.choice(n, size=2, replace=False)
            triplets.append((int(i), int(rng.integers(0, len(rels))), int(j)))
        caps = scene_captions(names, triplets, rels)
        sentences.append(caps[int(rng.integers(0, len(caps)))])
    return sentences


# ---------------------------------------------------------------------------
# Vocabulary.

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)


@dataclass
class Vocabulary:
    tokens: list[str]  # id -> token, specials first
    object_words: frozenset[str]
    relation_words: frozenset[str]

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractViolation("duplicate tokens in vocabulary")
        for s in SPECIALS:
            if s not in self.index:
                raise ContractViolation(f"special token {s} missing")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def encode(self, words: list[str]) -> list[int]:
        unk = self.unk_id
        return [self.index.get(w, unk) for w in words]

    def decode(self, ids: list[int], drop_specials: bool = True) -> list[str]:
        words = [self.tokens[i] for i in ids]
        if drop_specials:
            words = [w for w in words if w not in SPECIALS]
        return words

    def to_json(self) -> dict:
        return {
            "tokens": self.tokens,
            "object_words": sorted(self.object_words),
            "relation_words": sorted(self.relation_words),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Vocabulary":
        return cls(
            tokens=list(data["tokens"]),
            object_words=frozenset(data["object_words"]),
            relation_words=frozenset(data["relation_words"]),
        )


def build_vocabulary(
    corpus: list[list[str]],
    min_count: int = 4,
    object_names: tuple[str, ...] = (),
    relation_names: tuple[str, ...] = (),
) -> Vocabulary:
    """Tokens kept iff corpus frequency >= min_count; specials always present.

    Id order: specials, then frequency descending with lexicographic
    tie-break, so the mapping is deterministic.
    """
    freq: dict[str, int] = {}
    for sent in corpus:
        for tok in sent:
            freq[tok] = freq.get(tok, 0) + 1
    kept = sorted(
        (t for t, c in freq.items() if c >= min_count and t not in SPECIALS),
        key=lambda t: (-freq[t], t),
    )
    tokens = list(SPECIALS) + kept
    vocab_set = set(tokens)
    relation_words = set()
    for name in relation_names:
        relation_words.update(tokenize(name))
    return Vocabulary(
        tokens=tokens,
        object_words=frozenset(set(object_names) & vocab_set),
        relation_words=frozenset(relation_words & vocab_set),
    )


# ---------------------------------------------------------------------------
# On-disk formats. All JSON is UTF-8 with sorted keys; images are binary PPM
# (P6, 8-bit); the sentence corpus is one sentence per line.


def write_ppm(path: Path, pixels: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing image file: {path}") from None
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6":
        raise DataError(f"corrupt PPM file: {path}")
    w, h = (int(x) for x in parts[1].split())
    body = parts[3]
    if len(body) != w * h * 3:
        raise DataError(f"corrupt PPM payload: {path}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float32) / 255.0


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _load_json(path: Path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt JSON file: {path}: {e}") from None


def _mask_to_runs(mask: np.ndarray) -> list[list[int]]:
    flat = np.asarray(mask, dtype=bool).ravel()
    runs = []
    idx = np.flatnonzero(np.diff(np.concatenate(([0], flat.view(np.int8), [0]))))
    for start, end in zip(idx[0::2], idx[1::2]):
        runs.append([int(start), int(end - start)])
    return runs


def _runs_to_mask(runs: list[list[int]], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    for start, length in runs:
        flat[start : start + length] = True
    return flat.reshape(shape)


def write_dataset(
    root: Path,
    split: str,
    records: list[tuple[SceneImage, ImageLevelLabels, HiddenGroundTruth]],
    object_registry: Registry,
    relation_registry: Registry,
    corpus_sentences: list[str],
) -> DatasetManifest:
    """Persist a split as the documented file tree and return its manifest."""
    root = Path(root)
    for sub in ("images", "labels", "hidden"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    manifest_records = []
    for image, labels, hidden in records:
        image_rel = f"images/{image.id}.ppm"
        labels_rel = f"labels/{image.id}.json"
        write_ppm(root / image_rel, image.pixels)
        _dump_json(
            root / labels_rel,
            {
                "objects": sorted(object_registry.name_of(c) for c in labels.objects),
                "relations": sorted(relation_registry.name_of(r) for r in labels.relations),
            },
        )
        h, w = image.pixels.shape[:2]
        _dump_json(
            root / f"hidden/{image.id}.json",
            {
                "captions": [" ".join(c) for c in hidden.captions],
                "instances": [
                    {
                        "bbox": list(inst.bbox),
                        "category": object_registry.name_of(inst.category),
                        "mask_runs": _mask_to_runs(inst.mask),
                    }
                    for inst in hidden.instances
                ],
                "shape": [h, w],
                "triplets": [
                    [s, relation_registry.name_of(r), o] for s, r, o in hidden.triplets
                ],
            },
        )
        manifest_records.append(DatasetRecord(image.id, image_rel, labels_rel))

    (root / "corpus.txt").write_text("\n".join(corpus_sentences) + "\n", encoding="utf-8")
    manifest = DatasetManifest(
        split=split,
        records=manifest_records,
        object_registry=object_registry,
        relation_registry=relation_registry,
        corpus_path="corpus.txt",
    )
    _dump_json(
        root / "manifest.json",
        {
            "corpus": manifest.corpus_path,
            "object_categories": object_registry.names,
            "records": [
                {"id": r.image_id, "image": r.image_path, "labels": r.labels_path}
                for r in manifest.records
            ],
            "relation_categories": relation_registry.names,
            "split": split,
        },
    )
    return manifest


class Dataset:
    """Read-only view over a written split; hidden ground truth is guarded."""

    def __init__(self, root: Path, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest
        self._by_id = {r.image_id: r for r in manifest.records}

    def __len__(self) -> int:
        return len(self.manifest.records)

    @property
    def image_ids(self) -> list[str]:
        return [r.image_id for r in self.manifest.records]

    def image(self, image_id: str) -> SceneImage:
        rec = self._record(image_id)
        return SceneImage(id=image_id, pixels=read_ppm(self.root / rec.image_path))

    def labels(self, image_id: str) -> ImageLevelLabels:
        rec = self._record(image_id)
        data = _load_json(self.root / rec.labels_path)
        return ImageLevelLabels(
            objects=frozenset(
                self.manifest.object_registry.id_of(n) for n in data["objects"]
            ),
            relations=frozenset(
                self.manifest.relation_registry.id_of(n) for n in data["relations"]
            ),
        )

    def hidden(self, image_id: str) -> GuardedHidden:
        self._record(image_id)
        path = self.root / f"hidden/{image_id}.json"

        def load() -> HiddenGroundTruth:
            data = _load_json(path)
            shape = tuple(data["shape"])
            return HiddenGroundTruth(
                instances=[
                    HiddenInstance(
                        category=self.manifest.object_registry.id_of(i["category"]),
                        mask=_runs_to_mask(i["mask_runs"], shape),
                        bbox=tuple(i["bbox"]),
                    )
                    for i in data["instances"]
                ],
                triplets=[
                    (s, self.manifest.relation_registry.id_of(r), o)
                    for s, r, o in data["triplets"]
                ],
                captions=[tokenize(c) for c in data["captions"]],
            )

        return GuardedHidden(image_id, load)

    def corpus_sentences(self) -> list[str]:
        path = self.root / self.manifest.corpus_path
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise DataError(f"missing corpus file: {path}") from None
        return [line for line in text.splitlines() if line.strip()]

    def _record(self, image_id: str) -> DatasetRecord:
        if image_id not in self._by_id:
            raise DataError(f"unknown image id {image_id!r} in split {self.manifest.split!r}")
        return self._by_id[image_id]


def read_dataset(root: Path) -> Dataset:
    root = Path(root)
    data = _load_json(root / "manifest.json")
    manifest = DatasetManifest(
        split=data["split"],
        records=[
            DatasetRecord(r["id"], r["image"], r["labels"]) for r in data["records"]
        ],
        object_registry=Registry(list(data["object_categories"])),
        relation_registry=Registry(list(data["relation_categories"])),
        corpus_path=data["corpus"],
    )
    dataset = Dataset(root, manifest)
    for rec in manifest.records:
        for rel in (rec.image_path, rec.labels_path):
            if not (root / rel).exists():
                raise DataError(f"manifest references missing file: {root / rel}")
    if not (root / manifest.corpus_path).exists():
        raise DataError(f"manifest references missing file: {root / manifest.corpus_path}")
    return dataset


def build_split(
    root: Path,
    split: str,
    seeds: range,
    corpus_seed: int,
    corpus_sentences: int,
    config: GeneratorConfig | None = None,
) -> DatasetManifest:
    """Generate scenes for `seeds`, write the split, return its manifest."""
    config = config or default_config()
    records = [generate_scene(s, config) for s in seeds]
    return write_dataset(
        Path(root),
        split,
        records,
        Registry(list(config.categories)),
        Registry(list(config.relations)),
        generate_corpus(corpus_seed, corpus_sentences, config),
    )

"""Run configuration: one flat, hash-stable record of every knob.

Defaults follow the published operating points wherever one is stated
(thresholds 2 and 0.7, reward weights 1/0.5/1, caption learning rate 1e-5,
relation batch 256, hidden and latent sizes 512); everything else is a
desk-scale default. Configs serialize to a flat TOML document whose keys
mirror the field names exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class RunConfig:
    # dataset
    dataset_dir: str = "data"
    train_scenes: int = 240
    val_scenes: int = 60
    corpus_sentences: int = 500
    data_seed: int = 0
    vocab_min_count: int = 4
    # stage I: object recognition
    classifier_epochs: int = 100
    classifier_lr: float = 2e-3
    classifier_batch: int = 32
    classifier_seed: int = 1
    logit_threshold: float = 2.0
    mask_threshold: float = 0.4
    min_area_fraction: float = 0.01
    # stage II: relation recognition
    relation_epochs: int = 60
    relation_lr: float = 2e-3
    relation_batch: int = 256
    relation_seed: int = 2
    relation_width: int = 128
    relation_blocks: int = 3
    relation_bn: bool = True
    relation_residual: bool = True
    confidence_threshold: float = 0.7
    # stage III: unpaired captioning
    alpha: float = 1.0
    beta: float = 0.5
    uno_weight: float = 1.0
    caption_epochs: int = 20
    caption_lr: float = 1e-5
    caption_batch: int = 24
    caption_seed: int = 3
    hidden_size: int = 512
    latent_size: int = 512
    max_caption_len: int = 12
    min_caption_len: int = 4
    adversarial_weight: float = 1.0
    baseline_decay: float = 0.9
    pretrain_epochs: int = 8
    pretrain_lr: float = 5e-3
    discriminator_lr: float = 1e-3
    discriminator_steps: int = 1
    # pseudo-caption retraining
    pseudo_epochs: int = 10
    pseudo_lr: float = 1e-3
    pseudo_seed: int = 4
    # ablation switches
    rel_enabled: bool = True
    uno_enabled: bool = True
    pseudo_enabled: bool = True

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def config_from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(_FIELDS)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    coerced = {}
    for key, value in data.items():
        want = _FIELDS[key].type
        if want == "float" and isinstance(value, int):
            value = float(value)
        coerced[key] = value
    return RunConfig(**coerced)


def config_hash(config: RunConfig) -> str:
    payload = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def subset_hash(config: RunConfig, keys: tuple[str, ...], extra: str = "") -> str:
    data = {k: getattr(config, k) for k in keys}
    payload = json.dumps(data, sort_keys=True) + extra
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def load_config(path: Path) -> RunConfig:
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"missing config file: {path}") from None
    return config_from_dict(data)


def dump_config(config: RunConfig, path: Path) -> None:
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, bool):
            lines.append(f"{key} = {'true' if value else 'false'}")
        elif isinstance(value, str):
            lines.append(f'{key} = "{value}"')
        else:
            lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_ablations(spec: str) -> dict:
    """--ablate strings like "uno=off,rel=on" -> config field overrides."""
    mapping = {"rel": "rel_enabled", "uno": "uno_enabled", "pseudo": "pseudo_enabled"}
    out = {}
    if not spec:
        return out
    for part in spec.split(","):
        if "=" not in part:
            raise ConfigurationError(f"bad ablation {part!r}; expected name=on|off")
        name, state = part.split("=", 1)
        name, state = name.strip(), state.strip().lower()
        if name not in mapping or state not in ("on", "off"):
            raise ConfigurationError(f"bad ablation {part!r}; expected rel|uno|pseudo=on|off")
        out[mapping[name]] = state == "on"
    return out

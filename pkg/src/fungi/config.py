"""Run configuration: one flat key=value file with section headers.

Defaults encode the reference hyperparameters of the method: per-objective
temperatures and projection widths, crop counts and scale ranges, retrieval
and segmentation parameters. Serialization is canonical (fixed section and
key order), so a configuration hash identifies compatible artifacts.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from typing import get_type_hints

from . import backbone as bb

OBJECTIVES = ("kl", "dino", "simclr")


class ConfigError(ValueError):
    """Malformed configuration text or inconsistent values."""


@dataclass
class EncoderSection:
    image_size: int = 224
    patch_size: int = 16
    depth: int = 2
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    pooling: str = "cls"
    seed: int = 0
    collapse_output_paths: bool = False


@dataclass
class GradientSection:
    objectives: tuple = OBJECTIVES
    block_index: int = -1  # -1 = last block
    layer_kind: str = "attn_proj"
    precision: str = "f32"


@dataclass
class KlSection:
    temperature: float = 15.0
    proj_dim: int = 768
    normalize_input: bool = True


@dataclass
class DinoSection:
    proj_dim: int = 2048
    normalize_input: bool = True
    global_crops: int = 2
    local_crops: int = 10
    global_scale: tuple = (0.25, 1.0)
    local_scale: tuple = (0.05, 0.25)
    teacher_temperature: float = 0.07
    student_temperature: float = 0.1


@dataclass
class SimclrSection:
    proj_dim: int = 96
    normalize_input: bool = False
    positive_views: int = 49
    view_patch: int = 112
    negative_images: int = 256
    temperature: float = 0.07


@dataclass
class ProjectionSection:
    kind: str = "binary"
    seed: int = 0


@dataclass
class PcaSection:
    out_dim: int = 64
    vit_s_dim: int = 384
    vit_b_dim: int = 512


@dataclass
class EvalSection:
    knn_k: int = 20
    shots: int = 5
    probe_lambda_min: float = 5e-06
    probe_lambda_max: float = 0.0005
    probe_lambda_count: int = 5
    probe_max_epochs: int = 300


@dataclass
class SegmentationSection:
    k: int = 30
    temperature: float = 0.02
    augmentation_epochs: int = 1
    few_shot_k: int = 90
    few_shot_temperature: float = 0.1
    few_shot_augmentation_epochs: int = 8
    ivf_num_leaves: int = 512
    ivf_leaves_to_search: int = 32
    ivf_rerank: int = 120
    few_shot_ivf_leaves_to_search: int = 256
    few_shot_ivf_rerank: int = 1800
    ivf_dims_per_block: int = 4
    ivf_anisotropic_threshold: float = 0.2
    simclr_proj_dim: int = 96
    simclr_temperature: float = 0.07
    retrieved_negatives_per_patch: int = 2
    loss_negatives_per_patch: int = 1
    color_jitter_prob: float = 0.5
    color_jitter_delta: float = 0.1


@dataclass
class RunConfig:
    encoder: EncoderSection = field(default_factory=EncoderSection)
    gradients: GradientSection = field(default_factory=GradientSection)
    kl: KlSection = field(default_factory=KlSection)
    dino: DinoSection = field(default_factory=DinoSection)
    simclr: SimclrSection = field(default_factory=SimclrSection)
    projection: ProjectionSection = field(default_factory=ProjectionSection)
    pca: PcaSection = field(default_factory=PcaSection)
    eval: EvalSection = field(default_factory=EvalSection)
    segmentation: SegmentationSection = field(default_factory=SegmentationSection)

    def validate(self):
        for name in self.gradients.objectives:
            if name not in OBJECTIVES:
                raise ConfigError(f"unknown objective {name!r}")
        if self.gradients.layer_kind not in bb.LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.gradients.layer_kind!r}")
        if self.gradients.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        if "simclr" in self.gradients.objectives:
            grid = round(self.simclr.positive_views ** 0.5)
            if grid * grid != self.simclr.positive_views:
                raise ConfigError("simclr positive_views must be a perfect square (patch grid)")
            if self.simclr.view_patch > self.encoder.image_size:
                raise ConfigError("simclr view_patch larger than encoder input")
        try:
            self.encoder_config()
            self.gradient_source().validate(self.encoder_config())
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    # -- derived objects ----------------------------------------------------

    def encoder_config(self):
        return bb.EncoderConfig(
            image_size=self.encoder.image_size,
            patch_size=self.encoder.patch_size,
            depth=self.encoder.depth,
            dim=self.encoder.dim,
            heads=self.encoder.heads,
            mlp_ratio=self.encoder.mlp_ratio,
            pooling=self.encoder.pooling,
        )

    def gradient_source(self):
        block = self.gradients.block_index
        if block < 0:
            block = self.encoder.depth + block
        return bb.GradientSource(block_index=block, layer_kind=self.gradients.layer_kind)

    def objective_section(self, name):
        return {"kl": self.kl, "dino": self.dino, "simclr": self.simclr}[name]

    def probe_lambda_grid(self):
        import numpy as np

        return np.linspace(
            self.eval.probe_lambda_min, self.eval.probe_lambda_max, self.eval.probe_lambda_count
        )

    # -- serialization ------------------------------------------------------

    def to_text(self):
        lines = []
        for section_field in fields(self):
            section = getattr(self, section_field.name)
            lines.append(f"[{section_field.name}]")
            for f in fields(section):
                lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_text(cls, text):
        raw = {}
        current = None
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                raw[current] = {}
                continue
            if "=" not in line or current is None:
                raise ConfigError(f"line {lineno}: expected 'key = value' inside a section")
            key, _, value = line.partition("=")
            raw[current][key.strip()] = value.strip()

        config = cls()
        section_names = {f.name for f in fields(config)}
        for section_name, entries in raw.items():
            if section_name not in section_names:
                raise ConfigError(f"unknown section [{section_name}]")
            section = getattr(config, section_name)
            hints = get_type_hints(type(section))
            known = {f.name for f in fields(section)}
            for key, value in entries.items():
                if key not in known:
                    raise ConfigError(f"unknown key {key!r} in [{section_name}]")
                setattr(section, key, _parse_value(value, hints[key], key))
        return config.validate()

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text, hint, key):
    try:
        if hint is bool:
            if text not in ("true", "false"):
                raise ValueError("expected true/false")
            return text == "true"
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is tuple:
            parts = [p for p in text.split(",") if p]
            if key == "objectives":
                return tuple(parts)
            return tuple(float(p) for p in parts)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r} ({exc})") from exc

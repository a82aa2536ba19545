"""Run configuration.

A single dataclass covers scene pretraining and both watermark-embedding
phases; decoder pretraining has its own, smaller one.  Configs round-trip
through JSON and every consumer validates on construction, so a bad file
fails before any compute happens.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple


@dataclass
class TrainConfig:
    # model shape
    resolution: Tuple[int, int, int] = (96, 96, 96)
    density_rank: int = 16
    appearance_rank: int = 48
    appearance_dim: int = 27
    watermark_rank: int = 8
    num_ids: int = 64
    view_freqs: int = 2
    hidden_dim: int = 128

    # registry
    num_watermarks: int = 1
    message_bits: int = 48
    min_hamming: Optional[int] = None  # default: bits // 4, floored at 1

    # loss weights
    lambda_message: float = 0.95
    lambda_percept: float = 0.05
    lambda_rgb: float = 0.1
    lambda_tv: float = 0.02
    lambda_ssim: float = 0.20
    perceptual: str = "ssim_grad"

    # optimization
    lr_grids: float = 0.02
    lr_network: float = 1e-3
    adam_betas: Tuple[float, float] = (0.9, 0.99)
    lr_decay_target: float = 0.1  # final lr fraction after each stage
    pretrain_iters: int = 2000
    phase1_iters: int = 200
    phase2_iters: int = 800
    ray_batch: int = 4096
    samples_per_ray: int = 64
    patch_size: int = 64
    weight_threshold: float = 1e-4
    stratified: bool = True
    train_decoder_phase2: bool = True
    keep_message_terms_phase2: bool = True
    augment: bool = True
    augment_count: int = 2
    augment_probability: float = 0.75

    # rendering
    white_background: bool = True
    near: Optional[float] = None  # None: take from the scene
    far: Optional[float] = None

    # bookkeeping
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 500

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.validate()

    def validate(self) -> None:
        for name in ("lambda_message", "lambda_percept", "lambda_rgb",
                     "lambda_tv", "lambda_ssim"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("pretrain_iters", "phase1_iters", "phase2_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("lr_grids", "lr_network"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.lr_decay_target <= 1:
            raise ValueError(f"lr_decay_target must lie in (0, 1], got {self.lr_decay_target}")
        if self.num_watermarks < 1:
            raise ValueError("num_watermarks must be >= 1")
        if self.num_watermarks > self.num_ids:
            raise ValueError(
                f"num_watermarks ({self.num_watermarks}) exceeds the embedder "
                f"capacity num_ids ({self.num_ids})")
        if self.message_bits < 1:
            raise ValueError("message_bits must be >= 1")
        if self.samples_per_ray < 1 or self.ray_batch < 1 or self.patch_size < 1:
            raise ValueError("samples_per_ray, ray_batch and patch_size must be >= 1")
        if not 0 <= self.augment_probability <= 1:
            raise ValueError("augment_probability must lie in [0, 1]")
        if (self.near is None) != (self.far is None):
            raise ValueError("near and far must be set together")
        if self.near is not None and self.far <= self.near:
            raise ValueError("far must exceed near")

    @property
    def effective_min_hamming(self) -> int:
        if self.min_hamming is not None:
            return self.min_hamming
        return max(1, self.message_bits // 4)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["resolution"] = list(self.resolution)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_file(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class DecoderPretrainConfig:
    num_bits: int = 48
    steps: int = 1500
    batch_size: int = 8
    tile: int = 64
    lr: float = 1e-3
    image_weight: float = 0.7
    noise: bool = True
    noise_count: int = 2
    noise_probability: float = 0.75
    holdout: int = 32
    min_corpus: int = 200
    target_accuracy: float = 0.95
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.num_bits < 1:
            raise ValueError("num_bits must be >= 1")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.tile < 8 or self.tile % 4:
            raise ValueError("tile must be >= 8 and divisible by 4")
        if not 0 < self.target_accuracy <= 1:
            raise ValueError("target_accuracy must lie in (0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderPretrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

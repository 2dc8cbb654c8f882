"""Flat JSON experiment configuration, validated before any compute."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import ATTACKS
from .data import Dataset, load_idx, synth_gaussian
from .forge import ForgeConfig
from .model import Hyperparams, ModelSpec


class ConfigError(ValueError):
    pass


# Offsets applied to the base seed; one stream per pipeline stage.
SEED_OFFSETS = {"init": 0, "schedule": 1, "plan": 2, "forge": 3, "shadow": 4, "probe": 5, "por": 6, "data": 7}


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "synthetic"  # "synthetic" | "idx"
    idx_images: str = ""
    idx_labels: str = ""
    n_train: int = 200
    holdout: int = 200
    dim: int = 10
    classes: int = 3
    separation: float = 4.0
    # model
    model: str = "mlp"  # "logreg" | "mlp" | "cnn"
    hidden: list[int] = field(default_factory=lambda: [16])
    channels: list[int] = field(default_factory=list)
    # training
    step_size: float = 0.1
    batch_size: int = 20
    steps: int = 100
    momentum: float = 0.0
    weight_decay: float = 0.0
    lr_schedule: str = "constant"
    lr_min: float = 0.0
    augment: bool = False
    checkpoint_interval: int = 1
    # forging
    mu: int = 20
    kappa: int = 5
    lam: int = 1
    por_count: int = 10
    por_checkpoint_interval: int = 50
    # attacks
    attacks: list[str] = field(default_factory=lambda: list(ATTACKS))
    shadows: int = 16
    shadow_steps: int = 0  # 0: same as steps
    lira_mode: str = "max_accuracy"
    fpr: float = 0.1
    probe_size: int = 5
    # verification
    epsilon: float = 1e-3
    seed: int = 0
    base_dir: str = field(default="", metadata={"internal": True})

    # ------------------------------------------------------------ io

    @classmethod
    def from_dict(cls, obj: dict, base_dir: str = "") -> ExperimentConfig:
        known = {f.name for f in dataclasses.fields(cls)} - {"base_dir"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(**obj, base_dir=base_dir)
        except TypeError as e:
            raise ConfigError(str(e)) from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        path = Path(path)
        try:
            obj = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(obj, str(path.parent.resolve()))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "base_dir"}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def seed_for(self, stage: str) -> int:
        return self.seed * 100 + SEED_OFFSETS[stage]

    # ------------------------------------------------------ validation

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() or not self.base_dir else Path(self.base_dir) / path

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.dataset in ("synthetic", "idx"), "dataset must be 'synthetic' or 'idx'")
        if self.dataset == "idx":
            for p in (self.idx_images, self.idx_labels):
                need(bool(p), "idx dataset requires idx_images and idx_labels")
                need(self.resolve(p).is_file(), f"dataset file not found: {p}")
        need(self.n_train >= 2, "n_train must be >= 2")
        need(self.holdout >= 0, "holdout must be >= 0")
        need(self.model in ("logreg", "mlp", "cnn"), "model must be logreg, mlp or cnn")
        need(all(h >= 1 for h in self.hidden), "hidden widths must be >= 1")
        need(self.model != "cnn" or self.dataset == "idx", "cnn requires image data")
        need(not self.augment or self.dataset == "idx", "augmentation requires image data")
        need(1 <= self.batch_size <= self.n_train, "batch_size must be in [1, n_train]")
        need(self.n_train % self.batch_size == 0, "batch_size must divide n_train")
        need(self.steps >= 1, "steps must be >= 1")
        need(self.step_size > 0, "step_size must be > 0")
        need(0 <= self.momentum < 1, "momentum must be in [0, 1)")
        need(self.weight_decay >= 0, "weight_decay must be >= 0")
        need(self.lr_schedule in ("constant", "cosine"), "lr_schedule must be constant or cosine")
        need(self.checkpoint_interval >= 1, "checkpoint_interval must be >= 1")
        need(self.mu >= 1 and self.kappa >= 1 and self.lam >= 1, "mu, kappa and lam must be >= 1")
        need(self.n_train % (self.lam * self.kappa) == 0, "lam * kappa must divide n_train")
        need(self.batch_size <= self.n_train - self.n_train // self.kappa,
             "batch_size exceeds the candidate pool outside one split")
        need(self.por_checkpoint_interval >= 1, "por_checkpoint_interval must be >= 1")
        need(1 <= self.por_count <= self.n_train // self.lam, "por_count must be in [1, n_train / lam]")
        need(all(a in ATTACKS for a in self.attacks), f"attacks must be drawn from {list(ATTACKS)}")
        need(len(set(self.attacks)) == len(self.attacks), "duplicate attack names")
        need(self.shadows >= 4 or not ({"lira"} & set(self.attacks)), "LiRA needs >= 4 shadows")
        need(self.shadows >= 2, "shadows must be >= 2")
        need(self.shadow_steps >= 0, "shadow_steps must be >= 0")
        need(self.lira_mode in ("max_accuracy", "ratio"), "lira_mode must be max_accuracy or ratio")
        need(0 < self.fpr < 1, "fpr must be in (0, 1)")
        need(self.probe_size >= 1, "probe_size must be >= 1")
        need(self.holdout >= self.probe_size, "holdout must hold at least probe_size samples")
        pool = self.n_train + self.holdout
        need((pool // 2) >= self.batch_size, "shadow training sets smaller than batch_size")
        need(self.epsilon >= 0, "epsilon must be >= 0")

    # ------------------------------------------------------- builders

    def datasets(self) -> tuple[Dataset, Dataset, np.ndarray]:
        """``(train, pool, holdout_pool_indices)``; pool = train followed by holdout."""
        total = self.n_train + self.holdout
        if self.dataset == "synthetic":
            full = synth_gaussian(total, self.dim, self.classes, self.seed_for("data"), self.separation)
        else:
            raw = load_idx(self.resolve(self.idx_images), self.resolve(self.idx_labels))
            if raw.n < total:
                raise ConfigError(f"dataset has {raw.n} samples, need n_train + holdout = {total}")
            perm = np.random.default_rng(self.seed_for("data")).permutation(raw.n)[:total]
            full = raw.subset(perm)
        train = full.subset(np.arange(self.n_train))
        return train, full, np.arange(self.n_train, total)

    def model_spec(self, dataset: Dataset) -> ModelSpec:
        if self.model == "logreg":
            return ModelSpec.logreg(dataset.dim, dataset.classes)
        if self.model == "mlp":
            return ModelSpec.mlp((dataset.dim, *self.hidden, dataset.classes))
        if dataset.image_shape is None:
            raise ConfigError("cnn requires image data")
        return ModelSpec.cnn(tuple(self.channels), dataset.image_shape, dataset.classes)

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(self.step_size, self.batch_size, self.steps, self.momentum, self.weight_decay,
                           self.lr_schedule, self.lr_min)

    def shadow_hyperparams(self) -> Hyperparams:
        steps = self.shadow_steps or self.steps
        return dataclasses.replace(self.hyperparams(), total_steps=steps)

    def forge_config(self) -> ForgeConfig:
        return ForgeConfig(self.mu, self.kappa, self.lam, self.seed_for("forge"), self.augment)

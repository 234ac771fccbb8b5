"""Run configuration: YAML round trip, defaults, and validation.

Defaults follow the training recipe the package implements: translation
optimizer (0.5, 0.999) at 2e-4, stereo optimizer (0.9, 0.999) at 1e-4,
stage lengths 10/50 epochs, and the standard trade-off weights.
"""

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch
import yaml

from .errors import ConfigError
from .losses import LossWeights
from .networks import DiscriminatorSpec, GeneratorSpec, MatcherSpec

ABLATABLE_TERMS = ("fx", "fy", "corr", "ms")
DEVICE_ENV_VAR = "STEREOADAPT_DEVICE"


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float
    beta1: float
    beta2: float

    def validate(self, name):
        if self.learning_rate <= 0:
            raise ConfigError(f"{name}: learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"{name}: betas must lie in [0, 1)")


TRANSLATION_OPTIMIZER = OptimizerConfig(2e-4, 0.5, 0.999)
STEREO_OPTIMIZER = OptimizerConfig(1e-4, 0.9, 0.999)


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/run"
    synthetic_manifest: str = ""
    real_manifest: str = ""
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    matcher: MatcherSpec = field(default_factory=MatcherSpec)
    weights: LossWeights = field(default_factory=LossWeights)
    translation_optimizer: OptimizerConfig = TRANSLATION_OPTIMIZER
    stereo_optimizer: OptimizerConfig = STEREO_OPTIMIZER
    warmup_translation_epochs: int = 10
    warmup_stereo_epochs: int = 50
    joint_epochs: int = 10
    ablate: tuple = ()
    d1_combine: str = "and"
    translate_source: bool = True  # False = train the matcher on raw source pairs
    fy_to_generators: bool = False
    adversarial_mode: str = "log"
    grad_clip_norm: float = 10.0
    checkpoint_every_epochs: int = 1
    crop: tuple = None

    def validate(self) -> "RunConfig":
        for name in ("warmup_translation_epochs", "warmup_stereo_epochs", "joint_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        unknown = [t for t in self.ablate if t not in ABLATABLE_TERMS]
        if unknown:
            raise ConfigError(f"cannot ablate {unknown}; choose from {ABLATABLE_TERMS}")
        if self.d1_combine not in ("and", "or"):
            raise ConfigError(f"d1_combine must be 'and' or 'or', got {self.d1_combine!r}")
        if self.adversarial_mode not in ("log", "least_squares"):
            raise ConfigError(f"adversarial_mode must be log or least_squares")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive")
        if self.crop is not None and (len(self.crop) != 2 or min(self.crop) < 16):
            raise ConfigError(f"crop must be (height, width) >= 16, got {self.crop}")
        self.translation_optimizer.validate("translation_optimizer")
        self.stereo_optimizer.validate("stereo_optimizer")
        return self

    def effective_weights(self, ms_decay_steps: int = None) -> LossWeights:
        """Weights with ablated terms zeroed and the decay horizon applied."""
        kw = asdict(self.weights)
        for term in self.ablate:
            kw[f"lambda_{term}"] = 0.0
        if ms_decay_steps is not None:
            kw["ms_decay_steps"] = ms_decay_steps
        return LossWeights(**kw)

    @property
    def ablation_tag(self) -> str:
        return " ".join(f"w/o L_{t}" for t in self.ablate)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["generator"]["tap_layers"] = list(self.generator.tap_layers)
        doc["matcher"]["pyramid_scales"] = list(self.matcher.pyramid_scales)
        doc["ablate"] = list(self.ablate)
        doc["crop"] = list(self.crop) if self.crop else None
        return doc


def config_from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    builders = {
        "generator": GeneratorSpec,
        "discriminator": DiscriminatorSpec,
        "matcher": MatcherSpec,
        "weights": LossWeights,
        "translation_optimizer": OptimizerConfig,
        "stereo_optimizer": OptimizerConfig,
    }
    for key, cls in builders.items():
        if key in doc and isinstance(doc[key], dict):
            kw = dict(doc[key])
            for tuple_key in ("tap_layers", "pyramid_scales"):
                if isinstance(kw.get(tuple_key), list):
                    kw[tuple_key] = tuple(kw[tuple_key])
            try:
                doc[key] = cls(**kw)
            except TypeError as exc:
                raise ConfigError(f"bad {key} section: {exc}") from exc
    if isinstance(doc.get("ablate"), list):
        doc["ablate"] = tuple(doc["ablate"])
    if isinstance(doc.get("crop"), list):
        doc["crop"] = tuple(doc["crop"])
    try:
        return RunConfig(**doc).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return config_from_dict(doc)


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


def resolve_device() -> torch.device:
    """Compute device from the environment, falling back to CPU when the
    requested device is unavailable."""
    name = os.environ.get(DEVICE_ENV_VAR, "cpu")
    if name.startswith("cuda") and not torch.cuda.is_available():
        return torch.device("cpu")
    return torch.device(name)

"""Run configuration: defaults, key=value files, validation, seed derivation."""
from __future__ import annotations

import dataclasses
import hashlib

import numpy as np


class ConfigError(ValueError):
    """Bad configuration or usage; maps to exit code 2 at the CLI."""


MODES = ("uv", "uo", "rfuc", "nfuc")

TOGGLE_FIELDS = ("intra_fusion", "visual_adapter", "llm_guide", "utpl",
                 "inter_fusion", "vlm_guide")

# Fields that define the model/world structure; the training checkpoint hash
# covers exactly these, so resuming with a new schedule (lr, epochs, batch)
# is allowed while a dimension or toggle mismatch refuses to load.
STRUCTURAL_FIELDS = (
    "n_verbs", "n_objects", "n_hoi", "n_train", "n_test", "d_p", "patch_px",
    "det_noise", "zipf_s", "d_v", "d_t", "d_a", "n_layers", "heads_t", "heads_v",
    "n_prompt_tokens", "n_prompt_layers", "n_disparity", "det_threshold",
    "logit_scale", "tau_train", "tau_infer", "focal_gamma", "focal_alpha",
    "relation_weight", "mode", "unseen_verb_frac", "unseen_object_frac",
    "unseen_class_frac", "rare_threshold",
) + TOGGLE_FIELDS


@dataclasses.dataclass
class RunConfig:
    # synthetic world
    n_verbs: int = 12
    n_objects: int = 10
    n_hoi: int = 60
    n_train: int = 800
    n_test: int = 200
    d_p: int = 7
    patch_px: int = 4
    det_noise: float = 0.1
    zipf_s: float = 1.1
    # frozen dual encoder
    d_v: int = 48
    d_t: int = 32
    d_a: int = 32
    n_layers: int = 12
    heads_t: int = 4
    heads_v: int = 4
    pretrain_steps: int = 800
    pretrain_lr: float = 2e-3
    pretrain_batch: int = 32
    # prompt geometry
    n_prompt_tokens: int = 2
    n_prompt_layers: int = 9
    n_disparity: int = 3
    # pair scoring head
    det_threshold: float = 0.2
    logit_scale: float = 20.0
    tau_train: float = 1.0
    tau_infer: float = 2.8
    # losses
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    relation_weight: float = 150.0
    # optimization
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 15
    early_stop_patience: int = 2
    early_stop_delta: float = 1e-3
    val_fraction: float = 0.1
    # component toggles
    intra_fusion: bool = True
    visual_adapter: bool = True
    llm_guide: bool = True
    utpl: bool = True
    inter_fusion: bool = True
    vlm_guide: bool = True
    # run identity
    seed: int = 0
    mode: str = "uv"
    precision: int = 32
    # zero-shot split construction
    unseen_verb_frac: float = 0.25
    unseen_object_frac: float = 0.25
    unseen_class_frac: float = 0.20
    rare_threshold: int = 10

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    @property
    def n_patches(self):
        return self.d_p * self.d_p

    @property
    def image_px(self):
        return self.d_p * self.patch_px

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if not (self.d_v > self.d_t):
            raise ConfigError(f"visual width must exceed text width: d_v={self.d_v}, d_t={self.d_t}")
        if self.d_a != self.d_t:
            raise ConfigError(f"aligned width must equal text width: d_a={self.d_a}, d_t={self.d_t}")
        if self.n_prompt_layers > self.n_layers:
            raise ConfigError(f"n_prompt_layers={self.n_prompt_layers} exceeds n_layers={self.n_layers}")
        if self.d_t % self.heads_t or self.d_v % self.heads_v:
            raise ConfigError("encoder widths must be divisible by their head counts")
        for field in ("unseen_verb_frac", "unseen_object_frac", "unseen_class_frac"):
            v = getattr(self, field)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{field} must lie in [0, 1), got {v}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if not 0.0 <= self.det_threshold < 1.0:
            raise ConfigError(f"det_threshold must lie in [0, 1), got {self.det_threshold}")
        if min(self.n_verbs, self.n_objects, self.n_hoi, self.n_train, self.n_test,
               self.n_prompt_tokens, self.n_prompt_layers, self.batch_size) < 1:
            raise ConfigError("counts must be positive")
        if self.n_hoi > self.n_verbs * self.n_objects:
            raise ConfigError(f"n_hoi={self.n_hoi} exceeds {self.n_verbs}x{self.n_objects} combinations")
        if self.n_hoi < 2 * self.n_verbs:
            raise ConfigError("need at least two classes per verb on average: raise n_hoi")
        return self

    def as_dict(self):
        return dataclasses.asdict(self)

    def to_text(self):
        """Canonical key=value echo, one field per line, declaration order."""
        lines = [f"{f.name}={_render(getattr(self, f.name))}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"

    def structural_hash(self):
        payload = "\n".join(f"{k}={_render(getattr(self, k))}" for k in STRUCTURAL_FIELDS)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _render(value):
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name, raw, target_type):
    raw = raw.strip()
    try:
        if target_type is bool:
            lowered = raw.lower()
            if lowered in ("on", "true", "1", "yes"):
                return True
            if lowered in ("off", "false", "0", "no"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {name}={raw!r} as {target_type.__name__}") from None


def parse_overrides(pairs):
    """['key=value', ...] -> typed dict; unknown keys refuse."""
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    actual = {f.name: type(getattr(RunConfig(), f.name)) for f in dataclasses.fields(RunConfig)}
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _parse_value(key, raw, actual[key])
    return out


def load_config(path=None, overrides=None):
    """Build a validated RunConfig from an optional key=value file plus overrides."""
    values = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                lines = f.readlines()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from None
        pairs = []
        for ln, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
            pairs.append(line)
        values.update(parse_overrides(pairs))
    if overrides:
        values.update(overrides)
    return RunConfig(**values).validate()


def derive_seed(root_seed, label):
    """Stable 64-bit stream seed for a named purpose under one root seed."""
    digest = hashlib.sha256(f"{root_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(root_seed, label):
    return np.random.default_rng(derive_seed(root_seed, label))

"""Run configuration: typed sections, INI round-trip, validation, hashing.

The config file is INI with one section per dataclass below::

    [model]
    fusion = lmf
    d_model = 32

Dotted keys (``model.fusion=lmf``) address the same fields as overrides.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .fusion import FUSION_VARIANTS

DATA_KINDS = ("synthetic", "csv_timeseries", "beats_csv")
SYNTHETIC_TASKS = ("xor_classification", "product_regression")
MODALITY_CHOICES = ("both", "1", "2")


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value; ``key`` names the culprit."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class DataConfig:
    kind: str = "synthetic"
    task: str = "xor_classification"
    path: str = ""
    n: int = 2000
    noise: float = 0.3
    target_noise: float = 0.05
    # sample length: series length for synthetic data, sliding window for CSV series
    window: int = 16
    # series front-end chunk length
    patch: int = 4
    horizon: int = 1
    target: str = "OT"
    timestamp: str = "date"
    n_classes: int = 5
    raster_height: int = 15
    raster_width: int = 30
    raster_patch: int = 5
    split_train: float = 0.7
    split_val: float = 0.15
    split_test: float = 0.15
    normalize: bool = True


@dataclass
class ModelConfig:
    d_model: int = 32
    n_blocks: int = 2
    n_heads: int = 2
    d_fused: int = 32
    d_emb: int = 16
    fusion: str = "atd"
    modality: str = "both"
    lmf_rank: int = 4
    cross_heads: int = 2
    # hidden width of the fully connected head; 0 gives a single linear layer
    head_hidden: int = 32
    shared_guide: bool = False
    shared_encoder: bool = False
    guide_eps: float = 1e-5
    guide_momentum: float = 0.1
    ortho_penalty: float = 0.0
    alt_schedule: bool = False


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    out: str = "runs/default"


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "optim": OptimConfig,
    "train": TrainConfig,
}


def _coerce(key, kind, value):
    if isinstance(value, str):
        raw = value.strip()
        try:
            if kind is bool:
                low = raw.lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            if kind is int:
                return int(raw)
            if kind is float:
                return float(raw)
        except ValueError:
            raise ConfigError(key, f"cannot parse {raw!r} as {kind.__name__}") from None
        return raw
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is not bool and isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigError(key, f"expected {kind.__name__}, got {value!r}")
    return value


_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    # -- construction -------------------------------------------------------
    @classmethod
    def from_dict(cls, nested):
        cfg = cls()
        for section, values in nested.items():
            if section not in SECTIONS:
                raise ConfigError(section, "unknown config section")
            for key, value in values.items():
                cfg.set(f"{section}.{key}", value)
        cfg.validate()
        return cfg

    @classmethod
    def from_ini(cls, text):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError("<file>", f"malformed config: {exc}") from None
        return cls.from_dict({s: dict(parser[s]) for s in parser.sections()})

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_ini(fh.read())

    def set(self, dotted, value):
        section, _, key = dotted.partition(".")
        if section not in SECTIONS:
            raise ConfigError(dotted, "unknown config section")
        obj = getattr(self, section)
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if key not in fields:
            raise ConfigError(dotted, "unknown config key")
        kind = fields[key].type
        kind = _TYPES.get(kind, kind) if isinstance(kind, str) else kind
        setattr(obj, key, _coerce(dotted, kind, value))

    def with_overrides(self, overrides):
        cfg = RunConfig.from_dict(self.to_dict())
        for key, value in overrides.items():
            cfg.set(key, value)
        cfg.validate()
        return cfg

    # -- serialization --------------------------------------------------------
    def to_dict(self):
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def to_ini(self):
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {repr(value) if isinstance(value, float) else value}")
            lines.append("")
        return "\n".join(lines)

    def hash(self):
        """Short digest identifying the run; the output directory is excluded."""
        d = self.to_dict()
        d["train"].pop("out")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # -- validation -----------------------------------------------------------
    def validate(self):
        d, m, o, t = self.data, self.model, self.optim, self.train
        if d.kind not in DATA_KINDS:
            raise ConfigError("data.kind", f"must be one of {DATA_KINDS}")
        if d.kind == "synthetic" and d.task not in SYNTHETIC_TASKS:
            raise ConfigError("data.task", f"must be one of {SYNTHETIC_TASKS}")
        if d.kind != "synthetic" and not d.path:
            raise ConfigError("data.path", f"required for data.kind={d.kind}")
        splits = (d.split_train, d.split_val, d.split_test)
        if min(splits) < 0 or abs(sum(splits) - 1.0) > 1e-9:
            raise ConfigError("data.split_train", "split fractions must be >= 0 and sum to 1")
        for key in ("n", "window", "patch", "horizon", "n_classes",
                    "raster_height", "raster_width", "raster_patch"):
            if getattr(d, key) < 1:
                raise ConfigError(f"data.{key}", "must be >= 1")
        if d.noise < 0 or d.target_noise < 0:
            raise ConfigError("data.noise", "noise levels must be >= 0")
        if m.fusion not in FUSION_VARIANTS:
            raise ConfigError("model.fusion", f"must be one of {FUSION_VARIANTS}")
        if m.modality not in MODALITY_CHOICES:
            raise ConfigError("model.modality", f"must be one of {MODALITY_CHOICES}")
        for key in ("d_model", "n_heads", "d_fused", "d_emb", "lmf_rank", "cross_heads"):
            if getattr(m, key) < 1:
                raise ConfigError(f"model.{key}", "must be >= 1")
        if m.n_blocks < 0 or m.head_hidden < 0:
            raise ConfigError("model.n_blocks", "must be >= 0")
        if m.d_model % m.n_heads:
            raise ConfigError("model.n_heads", "must divide model.d_model")
        if m.d_model % m.cross_heads:
            raise ConfigError("model.cross_heads", "must divide model.d_model")
        if m.guide_eps <= 0:
            raise ConfigError("model.guide_eps", "must be > 0")
        if not 0 < m.guide_momentum <= 1:
            raise ConfigError("model.guide_momentum", "must lie in (0, 1]")
        if o.lr <= 0 or o.eps <= 0 or o.clip_norm < 0:
            raise ConfigError("optim.lr", "lr and eps must be > 0, clip_norm >= 0")
        if not (0 <= o.beta1 < 1 and 0 <= o.beta2 < 1):
            raise ConfigError("optim.beta1", "betas must lie in [0, 1)")
        if t.epochs < 0:
            raise ConfigError("train.epochs", "must be >= 0")
        if t.batch_size < 2:
            raise ConfigError("train.batch_size", "must be >= 2 (batch statistics)")
        return self

"""Run configuration: line-oriented ``key = value`` text with dotted keys.

Every field has a default. Files may set any subset; unknown keys and
malformed values are errors. ``dumps`` writes every field, so
``loads(dumps(c)) == c`` and dumping again gives the same text.
"""
import dataclasses
import typing
from dataclasses import dataclass, field

from .encoder import PRESETS, EncoderConfig, preset
from .errors import ConfigError
from .model import ModelConfig
from .synthetic import SHAPES, SyntheticSpec


@dataclass
class ModelSection:
    name: str = "tiny"
    variant: str = "full"
    refine_steps: int = 1
    logit_scale: str = "patches"


@dataclass
class EncoderSection:
    image_size: int = 32
    patch_size: int = 8
    depth: int = 4
    embed_dim: int = 32
    head_dim: int = 16
    num_classes: int = 4
    token_head_depth: int = 2
    attn_agg_layers: int = 2
    output_stride: typing.Tuple[int, ...] = (4, 4)

    @classmethod
    def from_preset(cls, name):
        enc = preset(name)
        return cls(**{f.name: getattr(enc, f.name) for f in dataclasses.fields(cls)})


@dataclass
class TrainSection:
    base_lr: float = 1e-3
    power: float = 0.9
    weight_decay: float = 0.0
    momentum: float = 0.0
    epochs: int = 100
    batch_size: int = 8
    crop_size: int = 0          # 0: the model's image size
    seed: int = 0
    precision: str = "float32"


@dataclass
class DataSection:
    seed: int = 0
    count: int = 8
    image_size: int = 48
    num_classes: int = 4
    shapes: typing.Tuple[str, ...] = SHAPES
    min_shapes: int = 1
    max_shapes: int = 3


@dataclass
class InferSection:
    scales: typing.Tuple[float, ...] = (1.0,)
    flip: bool = False
    window: int = 0             # 0: the model's image size
    stride: int = 0             # 0: half the window


@dataclass
class PathSection:
    data: str = "data"
    out: str = "out"
    checkpoint: str = "out/model.ckpt"


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    infer: InferSection = field(default_factory=InferSection)
    paths: PathSection = field(default_factory=PathSection)

    def model_config(self):
        try:
            enc = EncoderConfig(**dataclasses.asdict(self.encoder))
            return ModelConfig(enc, self.model.variant, self.model.refine_steps, self.model.logit_scale)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def synthetic_spec(self, **overrides):
        d = dataclasses.asdict(self.data)
        d.update(overrides)
        return SyntheticSpec(**d)

    def use_preset(self, name):
        if name not in PRESETS:
            raise ConfigError(f"unknown model {name!r}; choose from {sorted(PRESETS)}")
        self.model.name = name
        self.encoder = EncoderSection.from_preset(name)


# -- text form ---------------------------------------------------------

def _fields(obj):
    hints = typing.get_type_hints(type(obj))
    return [(f.name, hints[f.name]) for f in dataclasses.fields(obj)]


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def _parse(text, kind, key):
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        if typing.get_origin(kind) is tuple:
            elem = typing.get_args(kind)[0]
            parts = [p.strip() for p in text.split(",") if p.strip()]
            return tuple(_parse(p, elem, key) for p in parts)
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None
    raise ConfigError(f"unsupported field type for {key}")


def items(cfg):
    """``(dotted key, value)`` for every field, in declaration order."""
    for section, _ in _fields(cfg):
        sub = getattr(cfg, section)
        for name, _ in _fields(sub):
            yield f"{section}.{name}", getattr(sub, name)


def set_value(cfg, key, text):
    """Set a dotted key from its text form."""
    section, _, name = key.partition(".")
    sub = getattr(cfg, section, None) if section in dict(_fields(cfg)) else None
    kinds = dict(_fields(sub)) if sub is not None else {}
    if name not in kinds:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(sub, name, _parse(text.strip(), kinds[name], key))


def loads(text, base=None):
    """Parse config text on top of ``base`` (defaults if None).

    ``model.name`` switches the encoder to that preset before later lines are
    applied, so a file can name a preset and then override single fields.
    """
    cfg = base if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key = key.strip()
        if key == "model.name":
            cfg.use_preset(value.strip())
            continue
        try:
            set_value(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def dumps(cfg):
    lines = []
    current = None
    for key, value in items(cfg):
        section = key.split(".", 1)[0]
        if section != current:
            if current is not None:
                lines.append("")
            current = section
        lines.append(f"{key} = {_format(value)}")
    return "\n".join(lines) + "\n"


def load(path, base=None):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text, base)

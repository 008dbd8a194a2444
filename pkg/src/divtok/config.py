"""Model/training configuration and the ``key = value`` config file parser."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from divtok.data import DEFAULT_VOCAB
from divtok.tokenizer import StreamSpec, split_quota

log = logging.getLogger(__name__)

IMAGE_TOKENS = 16
VIDEO_TOKENS = 8


class ConfigError(ValueError):
    pass


def parse_streams(text: str) -> tuple[StreamSpec, ...]:
    """``"8x32x32:2x8, 16x16x16:2x4"`` -> stream specs (frames x size x size : tubelet x patch)."""
    specs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            extent, tube = part.split(":")
            t, h, w = (int(v) for v in extent.split("x"))
            pt, p = (int(v) for v in tube.split("x"))
        except ValueError:
            raise ConfigError(f"bad stream spec {part!r}, expected TxHxW:PTxP") from None
        if h != w:
            raise ConfigError(f"stream {part!r} must be square")
        specs.append(StreamSpec(t, h, pt, p))
    if not specs:
        raise ConfigError("no streams given")
    return tuple(specs)


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "image"
    vocab_size: int = len(DEFAULT_VOCAB)
    width: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    tokens: int | None = None
    ff_hidden: int = 128
    map_hidden: int = 64
    image_size: int = 32
    patch: int = 8
    frames: int = 16
    video_size: int = 32
    streams: str = "8x32x32:2x8,16x16x16:2x4"
    lam: float = 0.1
    div_layers: str = "all"
    iterative: bool | None = None
    max_question_len: int = 16
    max_answer_len: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("image", "video"):
            raise ConfigError(f"mode must be image or video, not {self.mode!r}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.num_tokens < 1:
            raise ConfigError("token budget must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.div_layers not in ("all", "last"):
            raise ConfigError("div_layers must be all or last")
        if self.mode == "image" and self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.mode == "video":
            for s in self.stream_specs:
                if self.frames % s.frames or self.video_size % s.size:
                    raise ConfigError(f"stream {s} does not evenly subsample {self.frames}x{self.video_size}")

    @property
    def num_tokens(self) -> int:
        if self.tokens is not None:
            return self.tokens
        return IMAGE_TOKENS if self.mode == "image" else VIDEO_TOKENS

    @property
    def stream_specs(self) -> tuple[StreamSpec, ...]:
        if self.mode == "image":
            return (StreamSpec(1, self.image_size, 1, self.patch),)
        return parse_streams(self.streams)

    @property
    def quotas(self) -> list[int]:
        return split_quota(self.num_tokens, len(self.stream_specs))

    @property
    def is_iterative(self) -> bool:
        return self.mode == "video" if self.iterative is None else self.iterative


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    steps: int = 3000
    eval_every: int = 500
    clip_norm: float = 1.0
    train_count: int = 2000
    val_count: int = 200
    test_count: int = 200
    grid: int = 2
    data_seed: int = 0
    tau: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.steps < 0 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1, steps >= 0")
        if not 0 < self.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    source: str | None = None
    unknown: list[str] = field(default_factory=list)


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(v)


def _auto_bool(v: str):
    return None if v.lower() == "auto" else _bool(v)


def _auto_int(v: str):
    return None if v.lower() == "auto" else int(v)


# file key -> (section, field, converter)
_KEYS: dict[str, tuple[str, str, object]] = {}
for _f in fields(ModelConfig):
    _KEYS[_f.name] = ("model", _f.name, {int: int, float: float, str: str}.get(type(_f.default), str))
for _f in fields(TrainConfig):
    _KEYS[_f.name] = ("train", _f.name, {int: int, float: float, str: str}.get(type(_f.default), str))
_KEYS["tokens"] = ("model", "tokens", _auto_int)
_KEYS["iterative"] = ("model", "iterative", _auto_bool)
_KEYS["lambda"] = ("model", "lam", float)
del _KEYS["lam"]
for _alias, _target in {"hidden": "width", "layers": "enc_layers", "wd": "weight_decay"}.items():
    _KEYS[_alias] = _KEYS[_target]


def parse_config_text(text: str, source: str | None = None) -> RunConfig:
    updates: dict[str, dict[str, object]] = {"model": {}, "train": {}}
    unknown = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            log.warning("line %d: unknown config key %r ignored", lineno, key)
            unknown.append(key)
            continue
        section, name, conv = _KEYS[key]
        try:
            updates[section][name] = conv(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: invalid value {value!r} for {key}") from None
    try:
        model = ModelConfig(**updates["model"])
        train = TrainConfig(**updates["train"])
    except (ConfigError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return RunConfig(model, train, source, unknown)


def parse_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text, str(path))


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    """Copy with ``model``/``train`` fields replaced by keyword."""
    mkeys = {f.name for f in fields(ModelConfig)}
    model = replace(cfg.model, **{k: v for k, v in kw.items() if k in mkeys})
    train = replace(cfg.train, **{k: v for k, v in kw.items() if k not in mkeys})
    return RunConfig(model, train, cfg.source, list(cfg.unknown))

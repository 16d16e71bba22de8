"""Declarative run configuration (INI text file) with command-line overrides.

Schema (section.key = default):

    [run]      mode = SS3          US3 | US4 | SS3
               seed = 0
               dtype = float64     float64 | float32
    [unet]     depth = 4
               base_features = 64
               out_channels = auto auto derives 3 or 4 from the mode
               dropout_p = 0.5
               dropout_rescale = true
    [train]    lr0 = 0.0005        lr_min = 0.0001      momentum = 0.5
               batch_size = 24     max_epochs = 100
               restart0_epochs = 10                     restart_mult = 2
               reset_velocity_on_restart = false
               split_train = 2     split_val = 1
    [slic]     n_segments = 0      0 sizes superpixels from target_mm
               target_mm = 4.0     compactness = 0.1    iters = 10
    [tiling]   tile = 256          inset = 128          overlap = 32
    [postproc] hole_area = 512     radius = 2           min_object = 128
               gt_min_object = 256 baseline_hole_area = 256
               knot_step = 1       aggregate_channel = auto
               porosity_channel = 2

Each pipeline stage hashes the sections it depends on (plus those of the
stages before it) so that artifacts made under another configuration can
be detected.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

MODES = {"US3": 3, "US4": 4, "SS3": 3}


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    mode: str = "SS3"
    seed: int = 0
    dtype: str = "float64"


@dataclass
class UNetSection:
    depth: int = 4
    base_features: int = 64
    out_channels: str = "auto"
    dropout_p: float = 0.5
    dropout_rescale: bool = True


@dataclass
class TrainSection:
    lr0: float = 5e-4
    lr_min: float = 1e-4
    momentum: float = 0.5
    batch_size: int = 24
    max_epochs: int = 100
    restart0_epochs: float = 10
    restart_mult: float = 2
    reset_velocity_on_restart: bool = False
    split_train: float = 2
    split_val: float = 1


@dataclass
class SlicSection:
    n_segments: int = 0
    target_mm: float = 4.0
    compactness: float = 0.1
    iters: int = 10


@dataclass
class TilingSection:
    tile: int = 256
    inset: int = 128
    overlap: int = 32


@dataclass
class PostprocSection:
    hole_area: int = 512
    radius: int = 2
    min_object: int = 128
    gt_min_object: int = 256
    baseline_hole_area: int = 256
    knot_step: int = 1
    aggregate_channel: str = "auto"
    porosity_channel: int = 2


SECTIONS = {
    "run": RunSection,
    "unet": UNetSection,
    "train": TrainSection,
    "slic": SlicSection,
    "tiling": TilingSection,
    "postproc": PostprocSection,
}

# sections each stage reads; a stage's hash also covers its upstream stages
STAGES = {
    "preprocess": (),
    "superpixels": ("slic", "tiling", "run"),
    "train": ("unet", "train"),
    "predict": ("tiling",),
    "postprocess": ("postproc",),
    "evaluate": ("postproc",),
}
STAGE_ORDER = ("preprocess", "superpixels", "train", "predict", "postprocess", "evaluate")


def _coerce(value: str, kind):
    if kind is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    try:
        return kind(value.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse {value!r} as {kind.__name__}") from exc


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    unet: UNetSection = field(default_factory=UNetSection)
    train: TrainSection = field(default_factory=TrainSection)
    slic: SlicSection = field(default_factory=SlicSection)
    tiling: TilingSection = field(default_factory=TilingSection)
    postproc: PostprocSection = field(default_factory=PostprocSection)

    # -- construction ----------------------------------------------------

    @classmethod
    def from_ini(cls, path=None, overrides=()):
        cfg = cls()
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise FileNotFoundError(f"config file not found: {path}")
            parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
            parser.read(path)
            for section in parser.sections():
                for key, value in parser.items(section):
                    cfg.set(section, key, value)
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            dotted, value = item.split("=", 1)
            section, key = dotted.split(".", 1)
            cfg.set(section.strip(), key.strip(), value)
        cfg.validate()
        return cfg

    def set(self, section, key, value):
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        sec = getattr(self, section)
        types = {f.name: f.type for f in fields(sec)}
        if key not in types:
            raise ConfigError(f"unknown key '{key}' in [{section}]")
        kind = {"int": int, "float": float, "bool": bool, "str": str}[types[key]]
        setattr(sec, key, _coerce(value, kind) if isinstance(value, str) else kind(value))

    def to_ini(self, path):
        parser = configparser.ConfigParser()
        for name in SECTIONS:
            parser[name] = {k: _fmt(v) for k, v in asdict(getattr(self, name)).items()}
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            parser.write(fh)

    # -- validation and derived values ------------------------------------

    @property
    def out_channels(self):
        if self.unet.out_channels == "auto":
            return MODES[self.run.mode]
        return int(self.unet.out_channels)

    @property
    def label_mode(self):
        return "SS" if self.run.mode.startswith("SS") else "US"

    def validate(self):
        if self.run.mode not in MODES:
            raise ConfigError(f"mode must be one of {sorted(MODES)}, got {self.run.mode!r}")
        if self.unet.out_channels != "auto":
            try:
                n = int(self.unet.out_channels)
            except ValueError:
                raise ConfigError("unet.out_channels must be 'auto' or an integer") from None
            if n != MODES[self.run.mode]:
                raise ConfigError(
                    f"mode {self.run.mode} needs {MODES[self.run.mode]} output channels, "
                    f"config sets out_channels = {n}")
        if self.run.dtype not in ("float64", "float32"):
            raise ConfigError("run.dtype must be float64 or float32")
        if self.train.lr_min > self.train.lr0:
            raise ConfigError("train.lr_min must not exceed train.lr0")
        if self.train.batch_size < 1 or self.train.max_epochs < 1:
            raise ConfigError("train.batch_size and train.max_epochs must be >= 1")
        if not 0 <= self.unet.dropout_p < 1:
            raise ConfigError("unet.dropout_p must lie in [0, 1)")
        if self.tiling.overlap >= self.tiling.tile or self.tiling.overlap < 0:
            raise ConfigError("tiling.overlap must satisfy 0 <= overlap < tile")
        agg = self.postproc.aggregate_channel
        if agg != "auto" and not agg.isdigit():
            raise ConfigError("postproc.aggregate_channel must be 'auto' or a channel index")
        if self.postproc.knot_step < 1:
            raise ConfigError("postproc.knot_step must be >= 1")
        return self

    # -- hashing -----------------------------------------------------------

    def section_dict(self, name):
        return asdict(getattr(self, name))

    def stage_hash(self, stage):
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        upto = STAGE_ORDER[:STAGE_ORDER.index(stage) + 1]
        names = sorted({s for st in upto for s in STAGES[st]})
        payload = json.dumps({n: self.section_dict(n) for n in names}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)

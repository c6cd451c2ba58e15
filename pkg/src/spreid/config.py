"""Run configuration: ``key = value`` lines grouped under ``[section]`` headers.

Every field has a default; files and ``section.key=value`` overrides only
change what they mention. :meth:`RunConfig.dumps` writes the fully resolved
configuration so a run can be repeated from its echo.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from .backbone import BackboneConfig, ConfigError
from .head import VARIANTS, AggregationConfig
from .parsing import COARSE_REGIONS, DEFAULT_PARTS, CoarseGrouping
from .trainer import OptimizerConfig, TrainSchedule


@dataclass
class RunSection:
    seed: int = 0


@dataclass
class DataSection:
    n_ids: int = 40
    imgs_per_id: int = 12
    n_cams: int = 3
    height: int = 128
    width: int = 48
    clutter: float = 0.6
    occlusion: float = 0.1
    jitter: bool = True
    noise: float = 0.03
    train_fraction: float = 0.5


@dataclass
class BackboneSection:
    stem_channels: tuple = (16, 32)
    block_channels: tuple = (32, 48, 64)
    convs_per_stage: int = 2
    kernel: int = 3


@dataclass
class ParserSection:
    iters: int = 1200
    base_lr: float = 0.01
    head_lr_scale: float = 10.0
    stem_channels: tuple = (8, 16)
    block_channels: tuple = (16, 24, 32)
    aspp_channels: int = 32
    merge: str = "sum"
    input_scale: float = 2.0
    label_stride: int = 2
    batch_size: int = 15


@dataclass
class GroupingSection:
    head: tuple = DEFAULT_PARTS["Head"]
    upper_body: tuple = DEFAULT_PARTS["Upper-body"]
    lower_body: tuple = DEFAULT_PARTS["Lower-body"]
    shoes: tuple = DEFAULT_PARTS["Shoes"]


@dataclass
class HeadSection:
    variant: str = "spreid_w_fg"
    weight_sharing: bool = True


@dataclass
class TrainSection:
    phase1_iters: int = 2000
    phase2_iters: int = 500
    phase1_height: int = 64
    phase1_width: int = 24
    phase2_height: int = 97
    phase2_width: int = 36
    phase1_lr: float = 0.01
    phase2_lr: float = 0.001
    batch_size: int = 15
    momentum: float = 0.9
    weight_decay: float = 0.0005
    clip_norm: float = 2.0
    n_decays: int = 10
    decay_rate: float = 0.9


@dataclass
class RetrievalSection:
    metric: str = "cosine"


@dataclass
class RerankSection:
    k1: int = 20
    k2: int = 6
    lam: float = 0.3


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "backbone": BackboneSection,
    "parser": ParserSection,
    "grouping": GroupingSection,
    "head": HeadSection,
    "train": TrainSection,
    "retrieval": RetrievalSection,
    "rerank": RerankSection,
}


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(s) for s in items)
        return tuple(items)
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    parser: ParserSection = field(default_factory=ParserSection)
    grouping: GroupingSection = field(default_factory=GroupingSection)
    head: HeadSection = field(default_factory=HeadSection)
    train: TrainSection = field(default_factory=TrainSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    rerank: RerankSection = field(default_factory=RerankSection)

    # -- parsing --------------------------------------------------------------
    @classmethod
    def loads(cls, text: str, overrides=()) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        cfg = cls()
        for section in cp.sections():
            for key, raw in cp.items(section):
                cfg.set(section, key, raw)
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            dotted, raw = item.split("=", 1)
            section, key = dotted.split(".", 1)
            cfg.set(section.strip(), key.strip(), raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        text = "" if path is None else open(path).read()
        return cls.loads(text, overrides)

    def set(self, section: str, key: str, raw: str) -> None:
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        sec = getattr(self, section)
        names = {f.name for f in fields(sec)}
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        try:
            setattr(sec, key, _parse_value(raw, getattr(type(sec)(), key)))
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc

    def dumps(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _format_value(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    # -- validation and typed views -----------------------------------------------
    def validate(self) -> None:
        d, t, p, r = self.data, self.train, self.parser, self.rerank
        checks = [
            (d.n_ids >= 2, "data.n_ids must be >= 2"),
            (d.n_cams >= 2, "data.n_cams must be >= 2"),
            (d.imgs_per_id >= 2, "data.imgs_per_id must be >= 2"),
            (d.height >= 1 and d.width >= 1, "data image size must be positive"),
            (0 <= d.clutter <= 1 and 0 <= d.occlusion <= 1, "clutter/occlusion must lie in [0, 1]"),
            (0 < d.train_fraction < 1, "data.train_fraction must lie in (0, 1)"),
            (t.batch_size >= 1 and p.batch_size >= 1, "batch sizes must be positive"),
            (0 <= t.momentum < 1, "train.momentum must lie in [0, 1)"),
            (t.weight_decay >= 0, "train.weight_decay must be >= 0"),
            (t.clip_norm > 0, "train.clip_norm must be > 0"),
            (t.phase1_lr > 0 and t.phase2_lr > 0 and p.base_lr > 0, "learning rates must be > 0"),
            (0 < t.decay_rate <= 1, "train.decay_rate must lie in (0, 1]"),
            (p.merge in ("sum", "concat"), "parser.merge must be sum or concat"),
            (p.label_stride >= 1, "parser.label_stride must be >= 1"),
            (p.input_scale > 0, "parser.input_scale must be > 0"),
            (p.iters >= 11, "parser.iters must leave room for the 10 decay points"),
            (self.head.variant in VARIANTS, f"head.variant must be one of {VARIANTS}"),
            (self.retrieval.metric in ("cosine", "euclidean"), "retrieval.metric must be cosine or euclidean"),
            (r.k1 > r.k2 >= 1, "rerank needs k1 > k2 >= 1"),
            (0 <= r.lam <= 1, "rerank.lam must lie in [0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        self.backbone_config().validate()
        self.parser_backbone_config().validate()
        self.grouping_config()
        try:
            self.schedule().validate()
        except ValueError as exc:
            raise ConfigError(f"[train] {exc}") from exc

    def backbone_config(self, output_stride: int = 32) -> BackboneConfig:
        b = self.backbone
        return BackboneConfig(stem_channels=tuple(b.stem_channels), block_channels=tuple(b.block_channels),
                              convs_per_stage=b.convs_per_stage, kernel=b.kernel,
                              output_stride=output_stride)

    def parser_backbone_config(self) -> BackboneConfig:
        p = self.parser
        return BackboneConfig(stem_channels=tuple(p.stem_channels), block_channels=tuple(p.block_channels),
                              convs_per_stage=self.backbone.convs_per_stage, kernel=self.backbone.kernel,
                              output_stride=16)

    def grouping_config(self) -> CoarseGrouping:
        g = self.grouping
        return CoarseGrouping(dict(zip(COARSE_REGIONS[1:], (g.head, g.upper_body, g.lower_body, g.shoes))))

    def aggregation(self) -> AggregationConfig:
        return AggregationConfig(self.head.variant, self.head.weight_sharing)

    def schedule(self) -> TrainSchedule:
        t = self.train
        return TrainSchedule(
            phase1_iters=t.phase1_iters, phase2_iters=t.phase2_iters,
            phase1_size=(t.phase1_height, t.phase1_width), phase2_size=(t.phase2_height, t.phase2_width),
            phase1_lr=t.phase1_lr, phase2_lr=t.phase2_lr, n_decays=t.n_decays,
            decay_rate=t.decay_rate, batch_size=t.batch_size,
        )

    def optimizer(self) -> OptimizerConfig:
        t = self.train
        return OptimizerConfig(momentum=t.momentum, weight_decay=t.weight_decay, clip_norm=t.clip_norm)

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


def substream_seed(seed: int, name: str) -> int:
    """Derive a named sub-seed (dataset, init:reid, init:parse, shuffle) from the run seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])

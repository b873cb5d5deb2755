"""Experiment configuration: YAML loading, strict validation, defaults.

One file holds every knob an experiment can turn: anchor source, model
dimensions, loss weights, optimizer settings, exemplar capacity, proposal
mining, metric options, and the ablation switches. Unknown keys are errors so
a typo in an ablation flag cannot silently run the wrong experiment. Paths
are resolved relative to the config file's directory.

configs/default.yaml in the repository documents every field at its default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _is_real(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


@dataclass
class AnchorConfig:
    source: str = "random"          # "random" | "file"
    dim: int = 32                   # anchor dimension for the random source
    file: str | None = None         # anchor file path for the file source
    normalize: bool = True          # L2-normalize vectors on file ingest

    def __post_init__(self):
        _require(self.source in ("random", "file"),
                 f"anchors.source must be 'random' or 'file', got {self.source!r}")
        _require(isinstance(self.dim, int) and not isinstance(self.dim, bool)
                 and self.dim >= 1, "anchors.dim must be a positive integer")
        if self.source == "file":
            _require(bool(self.file), "anchors.source 'file' needs anchors.file")


@dataclass
class ModelConfig:
    input_dim: int = 16
    hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    max_classes: int = 20

    def __post_init__(self):
        if isinstance(self.hidden, list):
            self.hidden = tuple(self.hidden)
        for name in ("input_dim", "feature_dim", "max_classes"):
            v = getattr(self, name)
            _require(isinstance(v, int) and not isinstance(v, bool) and v >= 1,
                     f"model.{name} must be a positive integer")
        _require(all(isinstance(h, int) and not isinstance(h, bool) and h >= 1
                     for h in self.hidden),
                 "model.hidden must be a list of positive integers")


@dataclass
class LossConfig:
    w_sa: float = 1.0
    w_se: float = 1.0
    w_roi: float = 1.0
    w_reg: float = 1.0
    # whether mined unknown instances are pulled toward the unknown anchor
    sa_on_unknown: bool = True

    def __post_init__(self):
        for name in ("w_sa", "w_se", "w_roi", "w_reg"):
            v = getattr(self, name)
            _require(_is_real(v) and v >= 0, f"loss.{name} must be a real >= 0")


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 32
    finetune_epochs: int = 15
    finetune_lr: float = 0.01
    freeze_extractor_in_finetune: bool = False

    def __post_init__(self):
        _require(_is_real(self.lr) and self.lr > 0, "optimizer.lr must be > 0")
        _require(_is_real(self.finetune_lr) and self.finetune_lr > 0,
                 "optimizer.finetune_lr must be > 0")
        _require(_is_real(self.momentum) and 0.0 <= self.momentum < 1.0,
                 "optimizer.momentum must lie in [0, 1)")
        _require(isinstance(self.batch_size, int)
                 and not isinstance(self.batch_size, bool) and self.batch_size >= 1,
                 "optimizer.batch_size must be an integer >= 1")
        for name in ("epochs", "finetune_epochs"):
            v = getattr(self, name)
            _require(isinstance(v, int) and not isinstance(v, bool) and v >= 0,
                     f"optimizer.{name} must be an integer >= 0")


@dataclass
class ExemplarConfig:
    capacity: int = 100

    def __post_init__(self):
        _require(isinstance(self.capacity, int) and not isinstance(self.capacity, bool)
                 and self.capacity >= 1, "exemplars.capacity must be >= 1")


@dataclass
class RpnConfig:
    k: int = 1
    overlap_thresh: float = 0.0

    def __post_init__(self):
        _require(isinstance(self.k, int) and not isinstance(self.k, bool) and self.k >= 0,
                 "rpn.k must be an integer >= 0")
        _require(_is_real(self.overlap_thresh) and 0.0 <= self.overlap_thresh < 1.0,
                 "rpn.overlap_thresh must lie in [0, 1)")


@dataclass
class MetricConfig:
    iou_thresh: float = 0.5
    aose_score_thresh: float = 0.05
    wi_recall_level: float = 0.8
    use_11point: bool = False

    def __post_init__(self):
        _require(_is_real(self.iou_thresh) and 0.0 < self.iou_thresh <= 1.0,
                 "metrics.iou_thresh must lie in (0, 1]")
        _require(_is_real(self.aose_score_thresh) and 0.0 <= self.aose_score_thresh <= 1.0,
                 "metrics.aose_score_thresh must lie in [0, 1]")
        _require(_is_real(self.wi_recall_level) and 0.0 < self.wi_recall_level <= 1.0,
                 "metrics.wi_recall_level must lie in (0, 1]")


@dataclass
class AblationConfig:
    disable_unknown_anchor: bool = False
    disable_sa: bool = False
    disable_cls_se: bool = False
    disable_cls_roi: bool = False
    plain_finetune: bool = False    # stabilization runs with the anchor term off

    def __post_init__(self):
        _require(not (self.disable_cls_se and self.disable_cls_roi),
                 "cannot disable both classifier heads; no posterior would remain")


@dataclass
class DataConfig:
    schedule: str | None = None     # YAML file listing tasks as arrays of class names
    train: str | None = None
    eval: str | None = None
    proposals: str | None = None
    # synthetic benchmark parameters (gen-data)
    sigma: float = 0.5
    radius: float = 2.25
    train_per_class: int = 200
    eval_per_class: int = 100

    def __post_init__(self):
        _require(_is_real(self.sigma) and self.sigma > 0, "data.sigma must be > 0")
        _require(_is_real(self.radius) and self.radius > 0, "data.radius must be > 0")
        for name in ("train_per_class", "eval_per_class"):
            v = getattr(self, name)
            _require(isinstance(v, int) and not isinstance(v, bool) and v >= 1,
                     f"data.{name} must be an integer >= 1")


_SECTIONS = {
    "anchors": AnchorConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "optimizer": OptimizerConfig,
    "exemplars": ExemplarConfig,
    "rpn": RpnConfig,
    "metrics": MetricConfig,
    "ablation": AblationConfig,
    "data": DataConfig,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/out"
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    exemplars: ExemplarConfig = field(default_factory=ExemplarConfig)
    rpn: RpnConfig = field(default_factory=RpnConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    base_dir: Path | None = None    # set by load_config; not serialized

    def __post_init__(self):
        _require(isinstance(self.seed, int) and not isinstance(self.seed, bool),
                 "seed must be an integer")
        _require(isinstance(self.output_dir, str) and bool(self.output_dir),
                 "output_dir must be a non-empty string")

    def resolve_path(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        if not path.is_absolute() and self.base_dir is not None:
            path = self.base_dir / path
        return path

    def effective_weights(self) -> tuple[float, float, float, float]:
        """(w_sa, w_se, w_roi, w_reg) after applying the ablation switches."""
        w_sa = 0.0 if self.ablation.disable_sa else self.loss.w_sa
        w_se = 0.0 if self.ablation.disable_cls_se else self.loss.w_se
        w_roi = 0.0 if self.ablation.disable_cls_roi else self.loss.w_roi
        return w_sa, w_se, w_roi, self.loss.w_reg

    def inference_mode(self) -> str:
        """'ensemble', or the single surviving head when one is ablated."""
        if self.ablation.disable_cls_se:
            return "roi"
        if self.ablation.disable_cls_roi:
            return "sem"
        return "ensemble"

    def sa_applies_to_unknown(self) -> bool:
        return self.loss.sa_on_unknown and not self.ablation.disable_unknown_anchor

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "output_dir": self.output_dir}
        for name, cls in _SECTIONS.items():
            section = dataclasses.asdict(getattr(self, name))
            if name == "model":
                section["hidden"] = list(section["hidden"])
            out[name] = section
        return out


def _build_section(cls, raw: dict, section: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in section {section!r}")
    return cls(**raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    known = {"seed", "output_dir", *_SECTIONS}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level config key {sorted(unknown)[0]!r}")
    kwargs = {}
    if "seed" in raw:
        kwargs["seed"] = raw["seed"]
    if "output_dir" in raw:
        kwargs["output_dir"] = raw["output_dir"]
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build_section(cls, raw[name], name)
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such config file: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if raw is None:
        raw = {}
    try:
        cfg = config_from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg.base_dir = path.parent.resolve()
    return cfg

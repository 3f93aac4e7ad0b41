"""Pipeline configuration (single JSON file)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError

SOURCES = ("modal", "time_history", "synthetic")


@dataclass(frozen=True)
class SamplerSettings:
    enabled: bool = False
    n_samples: int = 10_000
    seed: int = 0
    theta_box: tuple = (0.75, 1.25)
    var_box: tuple = (0.0, 0.01)
    mh_steps: int = 20
    compare_models: bool = True

    def __post_init__(self):
        if self.n_samples < 100:
            raise ConfigError("sampler.n_samples must be at least 100")
        if self.mh_steps < 1:
            raise ConfigError("sampler.mh_steps must be at least 1")
        for name in ("theta_box", "var_box"):
            box = tuple(float(v) for v in getattr(self, name))
            if len(box) != 2 or not box[1] > box[0]:
                raise ConfigError(f"sampler.{name} must be [lower, upper] with upper > lower")
            object.__setattr__(self, name, box)
        if self.var_box[0] != 0:
            raise ConfigError("sampler.var_box must start at 0")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one run needs.

    ``source`` is ``"modal"`` (ModalDataset JSON files), ``"time_history"``
    (records plus frequency ``bands``) or ``"synthetic"`` (the two-story
    generator, configured by ``synthetic``).
    """

    source: str
    output_dir: Path
    model_path: Path | None = None
    modal_files: tuple = ()
    time_history_files: tuple = ()
    bands: tuple = ()
    synthetic: dict = field(default_factory=dict)
    tol: float = 1e-6
    max_iter: int = 500
    isotropic: bool = True
    ignore_identification: bool = False
    sampler: SamplerSettings = field(default_factory=SamplerSettings)

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError(f"dataset source must be one of {SOURCES}")
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be at least 1")
        if self.modal_files and self.time_history_files:
            raise ConfigError("give either time-history or modal-statistics files, not both")
        if self.source == "modal" and not self.modal_files:
            raise ConfigError("empty dataset list")
        if self.source == "time_history":
            if not self.time_history_files:
                raise ConfigError("empty dataset list")
            if not self.bands:
                raise ConfigError("time-history source needs frequency bands")
        if self.source != "synthetic" and self.model_path is None:
            raise ConfigError("a model file is required unless the source is synthetic")

    def with_overrides(self, tol=None, seed=None, output_dir=None) -> "PipelineConfig":
        cfg = self
        if tol is not None:
            cfg = replace(cfg, tol=float(tol))
        if seed is not None:
            cfg = replace(cfg, sampler=replace(cfg.sampler, seed=int(seed)))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=Path(output_dir))
        return cfg

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "PipelineConfig":
        base = Path(base_dir)

        def path(p):
            p = Path(p)
            return p if p.is_absolute() else base / p

        d = dict(d)
        known = {f.name for f in fields(cls)} | {"datasets", "model"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        src = d.pop("datasets", None)
        if not isinstance(src, dict) or len(src) != 1:
            raise ConfigError("'datasets' must be an object with exactly one of " + ", ".join(SOURCES))
        kind, val = next(iter(src.items()))
        kw = {"source": kind}
        if kind == "modal":
            kw["modal_files"] = tuple(path(p) for p in val)
        elif kind == "time_history":
            if not isinstance(val, dict):
                raise ConfigError("'time_history' must be an object with 'files' and 'bands'")
            kw["time_history_files"] = tuple(path(p) for p in val.get("files", ()))
            kw["bands"] = tuple(tuple(float(x) for x in b) for b in val.get("bands", ()))
        elif kind == "synthetic":
            kw["synthetic"] = dict(val or {})
        else:
            raise ConfigError(f"dataset source must be one of {SOURCES}")
        if d.get("model") is not None:
            kw["model_path"] = path(d.pop("model"))
        d.pop("model", None)
        kw["output_dir"] = path(d.pop("output_dir", "hbmodal-out"))
        samp = d.pop("sampler", None) or {}
        try:
            kw["sampler"] = SamplerSettings(**samp)
        except TypeError as exc:
            raise ConfigError(f"invalid sampler settings: {exc}") from None
        for k in ("tol", "max_iter", "isotropic", "ignore_identification"):
            if k in d:
                kw[k] = d.pop(k)
        return cls(**kw)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read configuration: {exc}", path=str(path)) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}",
                          path=str(path)) from None
    if not isinstance(d, dict):
        raise ConfigError("configuration must be a JSON object", path=str(path))
    try:
        return PipelineConfig.from_dict(d, base_dir=path.parent)
    except ConfigError as exc:
        raise ConfigError(str(exc).removeprefix("[config-error] "), path=str(path)) from None

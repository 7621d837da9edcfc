"""Pipeline configuration, loaded from one YAML or JSON file.

Top-level keys are :class:`PipelineConfig` fields; ``ransac`` and
``simulation`` are nested mappings.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .registration import FitOptions, GridSpec, RansacParams
from .simulate import SimConfig


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    s_threshold: float = 0.1
    q_threshold: float = 0.1
    match_iou: float = 0.5
    shape_mode: str = "box"
    matcher: str = "greedy"
    ransac: RansacParams = field(default_factory=RansacParams)
    use_ransac: bool = True
    affine_model: str = "affine"
    tps: bool = True
    tps_regularization: float = 0.1
    tps_grid_spacing: float = 25.0
    tps_grid_margin: float = 100.0
    inverse_tol: float = 0.01
    inverse_max_iter: int = 20
    calibration_shift: float = 70.0
    unit_um: float = 1.0
    simulation: SimConfig | None = None

    def __post_init__(self):
        for name in ("s_threshold", "q_threshold", "match_iou"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name} must be in (0, 1), got {v}")
        if self.shape_mode not in ("box", "circle"):
            raise ConfigError(f"shape_mode must be 'box' or 'circle', got {self.shape_mode!r}")
        if self.matcher not in ("greedy", "hungarian"):
            raise ConfigError(f"matcher must be 'greedy' or 'hungarian', got {self.matcher!r}")
        if self.affine_model not in ("affine", "similarity"):
            raise ConfigError(f"affine_model must be 'affine' or 'similarity', got {self.affine_model!r}")

    @classmethod
    def from_dict(cls, data: dict | None) -> "PipelineConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if isinstance(data.get("ransac"), dict):
                data["ransac"] = RansacParams(**data["ransac"])
            if isinstance(data.get("simulation"), dict):
                data["simulation"] = SimConfig.from_dict(data["simulation"])
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)

    def with_overrides(self, **kw) -> "PipelineConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self

    def fit_options(self, grid: GridSpec | None) -> FitOptions:
        return FitOptions(
            ransac=self.ransac, use_ransac=self.use_ransac, model=self.affine_model,
            tps=self.tps, tps_regularization=self.tps_regularization, grid=grid,
            inverse_tol=self.inverse_tol, inverse_max_iter=self.inverse_max_iter,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["simulation"] = self.simulation.to_dict() if self.simulation else None
        return d

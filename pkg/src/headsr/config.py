"""Benchmark configuration: one JSON-serializable spec for the whole run."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ContractViolation
from .headmodel import HeadConfig, RefineConfig
from .inversion import CameraRigConfig, InversionConfig, LossWeights
from .prior import DegradeConfig, PriorConfig
from .render import RenderConfig


@dataclass(frozen=True)
class EvalConfig:
    n_eval_cameras: int = 8
    n_holdout_expressions: int = 3
    landmark_noise_px: float = 0.5
    holdout_expr_scale: float = 1.2


@dataclass(frozen=True)
class BenchmarkSpec:
    seed: int = 0
    resolution: int = 128
    factor: int = 4
    cameras_per_expr: int = 4
    beta_sigma: float = 0.3
    head: HeadConfig = field(default_factory=HeadConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    rig: CameraRigConfig = field(default_factory=CameraRigConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    render: RenderConfig = field(default_factory=RenderConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.resolution % self.factor != 0:
            raise ContractViolation("resolution must be divisible by the factor")
        if self.resolution < 16:
            raise ContractViolation("resolution too small")


_SUBSPECS = {
    "head": HeadConfig,
    "prior": PriorConfig,
    "degrade": DegradeConfig,
    "rig": CameraRigConfig,
    "inversion": InversionConfig,
    "weights": LossWeights,
    "render": RenderConfig,
    "refine": RefineConfig,
    "eval": EvalConfig,
}


def spec_to_json_dict(spec: BenchmarkSpec) -> dict:
    d = asdict(spec)
    d["schema_version"] = 1
    d["head"]["radii"] = list(d["head"]["radii"])
    return d


def _build(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ContractViolation(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = dict(data)
    if cls is HeadConfig and "radii" in kwargs:
        kwargs["radii"] = tuple(kwargs["radii"])
    if cls is PriorConfig:
        for key in ("base_color", "wave_numbers"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
    if cls is InversionConfig and kwargs.get("views_per_iter") is not None:
        kwargs["views_per_iter"] = int(kwargs["views_per_iter"])
    return cls(**kwargs)


def spec_from_json_dict(d: dict) -> BenchmarkSpec:
    data = dict(d)
    data.pop("schema_version", None)
    kwargs = {}
    for key, value in data.items():
        if key in _SUBSPECS:
            kwargs[key] = _build(_SUBSPECS[key], value)
        else:
            kwargs[key] = value
    return _build(BenchmarkSpec, kwargs)


def default_spec_json() -> dict:
    return spec_to_json_dict(BenchmarkSpec())


def with_overrides(spec: BenchmarkSpec, **kw) -> BenchmarkSpec:
    return replace(spec, **kw)

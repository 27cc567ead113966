"""
Declarative run configuration: TOML (or JSON) files validated into
dataclasses before any compute happens.

Unknown keys are rejected at every level, the schema carries a version, and
the config hash is a sha256 over the canonical JSON of everything that can
change results (``output_dir`` and ``workers`` are excluded).
Environment variables ``FSEFT_<SECTION>__<KEY>=value`` override single keys;
values are parsed as JSON when possible, else taken as strings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli

from .engines.benchmark import BenchmarkConfig
from .engines.training import AdaptConfig, PretrainConfig
from .errors import ConfigError
from .nets import TrainStrategy
from .phantoms import DatasetSpec, OrganSpec, check_feasible

SCHEMA_VERSION = 1
ENV_PREFIX = "FSEFT_"
HASH_EXCLUDE = ("output_dir", "workers")

# HU of the phantom tissues; windowing maps [-175, 250] onto [0, 1]
_HU_BACKGROUND = -47.5
_HU_NOISE = 21.25


@dataclass
class OrganConfig:
    class_id: int
    center_range: list
    radii_range: list
    intensity: list = field(default_factory=lambda: [80.0, 12.75])
    name: str = ""
    allow_overlap: bool = False

    def to_spec(self) -> OrganSpec:
        return OrganSpec(
            self.class_id, self.center_range, self.radii_range, self.intensity, self.name, self.allow_overlap
        )


def _quadrant(class_id, name, cx, cy, hu):
    return OrganConfig(
        class_id,
        [[cx - 0.03, cx + 0.03], [cy - 0.03, cy + 0.03], [0.47, 0.53]],
        [[0.13, 0.17]] * 3,
        [hu, 12.75],
        name,
    )


def _default_organs():
    return [
        _quadrant(0, "liver", 0.25, 0.25, 58.75),
        _quadrant(1, "spleen", 0.75, 0.25, 88.5),
        _quadrant(2, "kidney", 0.25, 0.75, 122.5),
        _quadrant(3, "aorta", 0.75, 0.75, 156.5),
    ]


@dataclass
class PhantomConfig:
    """Acquisition grid and organ set shared by all datasets."""

    grid_shape: list = field(default_factory=lambda: [32, 32, 32])
    spacing: list = field(default_factory=lambda: [1.5, 1.5, 1.5])
    background: float = _HU_BACKGROUND
    noise_sigma: float = _HU_NOISE
    orientation: str = "RAS"
    organs: list[OrganConfig] = field(default_factory=_default_organs)


@dataclass
class DatasetConfig:
    name: str
    n_volumes: int
    annotation_vector: list
    intensity_shift: float = 0.0
    radii_scale: float = 1.0


def _default_datasets():
    return [
        DatasetConfig("A", 10, [1, 1, 0, 0]),
        DatasetConfig("B", 10, [0, 1, 1, 0]),
        DatasetConfig("C", 10, [1, 0, 1, 1]),
    ]


@dataclass
class SiteConfig:
    """Acquisition changes of a few-shot site relative to the shared phantom."""

    intensity_shift: float = 0.0
    radii_scale: float = 1.0
    background_shift: float = 0.0
    noise_sigma: float | None = None
    shell_width: float = 0.0
    shell_intensity: float = 0.0
    shell_classes: list[int] = field(default_factory=list)  # empty: every organ


@dataclass
class TargetConfig:
    """The few-shot site; ``query`` optionally overrides the query acquisition."""

    name: str = "target"
    support: SiteConfig = field(default_factory=lambda: SiteConfig(intensity_shift=12.75))
    query: SiteConfig | None = None


@dataclass
class PreprocessConfig:
    enabled: bool = True
    orientation: str = "RAS"
    target_spacing: float = 1.5
    clip_lo: float = -175.0
    clip_hi: float = 250.0


@dataclass
class ModelConfig:
    features: int = 48
    widths: list = field(default_factory=lambda: [48, 192, 768])


@dataclass
class PretrainSection:
    epochs: int = 40
    patches_per_volume: int = 3
    batch_volumes: int = 2
    base_lr: float = 1e-3
    weight_decay: float = 1e-5
    warmup_epochs: int = 4
    patch_size: list = field(default_factory=lambda: [32, 32, 32])
    intensity_shift: float = 0.1
    rotate90: bool = True
    fg_fraction: float = 0.5


@dataclass
class AdaptSection:
    epochs: int = 100
    base_lr: float = 0.5
    ft_lr: float = 1e-4
    weight_decay: float = 1e-5
    ti_start_epoch: int = 50
    gamma: float = 0.2
    lam: float = 1.0
    patches_per_volume: int = 6
    batch_volumes: int = 1
    patch_size: list = field(default_factory=lambda: [32, 32, 32])
    overlap: float = 0.5
    support_loss: str = "dice"
    size_mode: str = "full"
    size_units: str = "voxels"
    fg_fraction: float = 0.5
    feature_cache_mb: int = 512


@dataclass
class EvalSection:
    strategies: list = field(default_factory=lambda: ["GENERALIZATION", "LINEAR_PROBE", "FT", "ADAPTER", "ADAPTER_TI"])
    shots: list = field(default_factory=lambda: [1, 5, 10])
    folds: int = 5
    organs: list = field(default_factory=lambda: [0, 1, 2, 3])
    gammas: list = field(default_factory=lambda: [0.2])
    threshold: float = 0.5


@dataclass
class RunConfig:
    version: int = SCHEMA_VERSION
    seed: int = 0
    output_dir: str = "runs/desk"
    workers: int = 1
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    datasets: list[DatasetConfig] = field(default_factory=_default_datasets)
    target: TargetConfig = field(default_factory=TargetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- derived objects -------------------------------------------------

    @property
    def n_classes(self) -> int:
        return len(self.datasets[0].annotation_vector)

    def organ_specs(self) -> tuple:
        return tuple(o.to_spec() for o in self.phantom.organs)

    def _base_spec(self, name, n_volumes, w) -> DatasetSpec:
        p = self.phantom
        return DatasetSpec(
            name, n_volumes, tuple(w), self.organ_specs(), tuple(p.grid_shape), tuple(p.spacing),
            p.noise_sigma, p.background, p.orientation,
        )

    def dataset_specs(self) -> list[DatasetSpec]:
        return [
            self._base_spec(d.name, d.n_volumes, d.annotation_vector).shifted(
                name=d.name, intensity_shift=d.intensity_shift, radii_scale=d.radii_scale
            )
            for d in self.datasets
        ]

    def _site_spec(self, name, site: SiteConfig) -> DatasetSpec:
        base = self._base_spec(name, 1, [1] * self.n_classes)
        changes = dict(
            background=base.background + site.background_shift,
            shell_width=site.shell_width,
            shell_intensity=site.shell_intensity,
            shell_classes=tuple(site.shell_classes),
        )
        if site.noise_sigma is not None:
            changes["noise_sigma"] = site.noise_sigma
        return base.shifted(name=name, intensity_shift=site.intensity_shift, radii_scale=site.radii_scale, **changes)

    def target_spec(self) -> DatasetSpec:
        return self._site_spec(self.target.name, self.target.support)

    def query_spec(self) -> DatasetSpec | None:
        if self.target.query is None:
            return None
        return self._site_spec(f"{self.target.name}-query", self.target.query)

    def prep(self) -> dict | None:
        p = self.preprocess
        if not p.enabled:
            return None
        return {"orientation": p.orientation, "target_spacing": p.target_spacing, "clip_lo": p.clip_lo, "clip_hi": p.clip_hi}

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(**asdict(self.pretrain), seed=self.seed)

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(**asdict(self.adapt), seed=self.seed)

    def benchmark_config(self) -> BenchmarkConfig:
        e = self.eval
        return BenchmarkConfig(
            strategies=e.strategies, shots=e.shots, folds=e.folds, organs=e.organs,
            gammas=e.gammas, adapt=self.adapt_config(), threshold=e.threshold, seed=self.seed,
        )

    def organ_names(self) -> dict:
        return {o.class_id: o.name or str(o.class_id) for o in self.phantom.organs}

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return config_hash(self)

    # -- validation -------------------------------------------------------

    def validate(self) -> "RunConfig":
        if self.version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config version {self.version} (expected {SCHEMA_VERSION})")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.datasets:
            raise ConfigError("at least one dataset is required")
        if len({len(d.annotation_vector) for d in self.datasets}) != 1:
            raise ConfigError("all datasets must share the annotation vector length")
        if len({d.name for d in self.datasets}) != len(self.datasets):
            raise ConfigError("dataset names must be unique")
        ids = sorted(o.class_id for o in self.phantom.organs)
        if ids != list(range(self.n_classes)):
            raise ConfigError(f"organ class ids {ids} must cover 0..{self.n_classes - 1} once each")
        for s in self.eval.strategies:
            try:
                TrainStrategy.parse(s)
            except ValueError:
                valid = ", ".join(t.value for t in TrainStrategy)
                raise ConfigError(f"unknown strategy {s!r}; valid tags: {valid}") from None
        bad = [o for o in self.eval.organs if not 0 <= int(o) < self.n_classes]
        if bad:
            raise ConfigError(f"eval organs {bad} out of range")
        # build every engine object once so their own invariants run here
        try:
            for spec in [*self.dataset_specs(), self.target_spec(), self.query_spec()]:
                if spec is not None:
                    check_feasible(spec.organs, spec.grid_shape)
            self.pretrain_config()
            self.benchmark_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        return self


# ---------------------------------------------------------------------------
# dict -> dataclass with strict keys and light type coercion
# ---------------------------------------------------------------------------


def _unwrap_optional(tp):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _coerce(value, tp, path: str):
    tp, optional = _unwrap_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: value required")
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    origin = typing.get_origin(tp)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        (item,) = typing.get_args(tp) or (typing.Any,)
        return [_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return [list(v) if isinstance(v, tuple) else v for v in value]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a table, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f" in [{path}]" if path else ""
        raise ConfigError(f"unknown key(s){where}: {', '.join(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        sub = f"{path}.{f.name}" if path else f.name
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], sub)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"{sub}: missing required key")
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# loading, overrides, hashing
# ---------------------------------------------------------------------------


def read_config_file(path) -> dict:
    p = Path(path)
    try:
        text = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror or exc}") from exc
    try:
        if p.suffix.lower() == ".json":
            return json.loads(text)
        return tomli.loads(text.decode("utf-8"))
    except (tomli.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_env_overrides(data: dict, environ=None) -> dict:
    """``FSEFT_PRETRAIN__EPOCHS=2`` sets ``data["pretrain"]["epochs"] = 2``."""
    environ = os.environ if environ is None else environ
    out = json.loads(json.dumps(data))
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in key[len(ENV_PREFIX):].split("__") if p]
        if not parts:
            continue
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: {p} is not a table")
        node[parts[-1]] = _parse_env_value(environ[key])
    return out


def load_config(path=None, *, overrides: dict | None = None, environ=None) -> RunConfig:
    """Read, override (env, then explicit ``overrides``) and validate."""
    data = read_config_file(path) if path is not None else {}
    data = apply_env_overrides(data, environ)
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k] = v
    return from_dict(RunConfig, data).validate()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    for k in HASH_EXCLUDE:
        d.pop(k, None)
    return hashlib.sha256(canonical_json(d).encode()).hexdigest()[:16]

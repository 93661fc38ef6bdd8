"""Layered run configuration: packaged profile < config file < environment
< command-line overrides, validated against the schema derived from the
dataclass tree. Unknown keys are rejected; the fully resolved config is
echoed into every run directory and re-parses to an equal RunConfig.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, is_dataclass
from importlib import resources
from pathlib import Path

from . import ConfigError
from .hybridtrain import TrainConfig
from .phantom import PhantomConfig
from .twostage import PipelineOptions

ENV_PREFIX = "STMT_"
RUN_ROOT_ENV = "STMT_RUN_ROOT"


@dataclass(frozen=True)
class NetSection:
    base_channels: int = 8
    num_scales: int = 3
    blocks_per_scale: int = 1
    max_channels: int = 320


@dataclass(frozen=True)
class EvalSection:
    nsd_tolerance_mm: float = 1.0
    time_tolerance_s: float = 15.0
    mem_tolerance_mb: float = 4096.0


@dataclass(frozen=True)
class AblateSection:
    num_seeds: int = 5
    eval_cases: int = 12
    eval_seed: int = 424242


def _desk_phantom() -> PhantomConfig:
    return PhantomConfig(
        volume_shape=(24, 24, 24),
        volume_shape_max=(32, 32, 32),
        num_organs=4,
        counts=(20, 40, 40),
        tumor_rate=0.75,
        tumor_annotation_rate=0.8,
        partial_annotation_rate=0.5,
        partial_annotation_decay=0.4,
        organ_radius_frac=0.16,
        jitter_frac=0.04,
        noise_sigma=0.02,
        tumor_min_radius_vox=2.4,
        seed=0,
    )


def _desk_train() -> TrainConfig:
    return TrainConfig(
        epochs=20,
        iters_per_epoch=50,
        shape_stage1=(24, 24, 24),
        shape_organ=(24, 24, 24),
        shape_tumor=(24, 24, 24),
    )


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 1
    run_root: str = "runs"
    phantom: PhantomConfig = field(default_factory=_desk_phantom)
    train: TrainConfig = field(default_factory=_desk_train)
    stage1_net: NetSection = field(default_factory=NetSection)
    organ_net: NetSection = field(default_factory=NetSection)
    tumor_net: NetSection = field(default_factory=NetSection)
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)


# ---------------------------------------------------------------------------
# flatten / override machinery

def flatten_config(cfg) -> dict[str, object]:
    """Dotted-key view of the dataclass tree, leaves only."""
    out: dict[str, object] = {}

    def walk(prefix: str, node):
        for f in fields(node):
            value = getattr(node, f.name)
            key = f"{prefix}{f.name}"
            if is_dataclass(value):
                walk(key + ".", value)
            else:
                out[key] = value

    walk("", cfg)
    return out


def _coerce(key: str, raw, template):
    """Coerce a raw override (usually a string) to the type of the default."""
    if isinstance(raw, str):
        text = raw.strip()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError:
            raw = text
    if raw is None:
        return None
    if template is None:
        return tuple(raw) if isinstance(raw, list) else raw
    t = type(template)
    try:
        if t is bool:
            if isinstance(raw, bool):
                return raw
            if isinstance(raw, str) and raw.lower() in ("true", "false"):
                return raw.lower() == "true"
            if isinstance(raw, int) and raw in (0, 1):
                return bool(raw)
            raise ValueError(f"expected a boolean, got {raw!r}")
        if t is int:
            if isinstance(raw, bool) or (isinstance(raw, float) and raw != int(raw)):
                raise ValueError(f"expected an integer, got {raw!r}")
            return int(raw)
        if t is float:
            if isinstance(raw, bool):
                raise ValueError(f"expected a number, got {raw!r}")
            return float(raw)
        if t is str:
            return str(raw)
        if t is tuple:
            if isinstance(raw, str):
                raw = [p for p in raw.replace(",", " ").split() if p]
            if not isinstance(raw, (list, tuple)):
                raise ValueError(f"expected a list, got {raw!r}")
            inner = type(template[0]) if template else float
            return tuple(inner(v) for v in raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config key '{key}': {e}") from e
    raise ConfigError(f"config key '{key}': unsupported value type {t.__name__}")


def apply_overrides(cfg: RunConfig, overrides: dict[str, object]) -> RunConfig:
    """Return a new RunConfig with dotted-key overrides applied."""
    known = flatten_config(cfg)
    for key in overrides:
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'")

    def rebuild(prefix: str, node):
        kwargs = {}
        for f in fields(node):
            value = getattr(node, f.name)
            key = f"{prefix}{f.name}"
            if is_dataclass(value):
                kwargs[f.name] = rebuild(key + ".", value)
            elif key in overrides:
                kwargs[f.name] = _coerce(key, overrides[key], value)
            else:
                kwargs[f.name] = value
        try:
            return type(node)(**kwargs)
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"invalid configuration: {e}") from e

    return rebuild("", cfg)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse 'key = value' lines; values are JSON when possible, else raw."""
    overrides: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


def env_overrides(environ=None) -> dict[str, object]:
    """STMT_SECTION__FIELD=value environment overrides (double underscore
    separates path components). STMT_RUN_ROOT maps to run_root."""
    environ = os.environ if environ is None else environ
    out: dict[str, object] = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        if name == RUN_ROOT_ENV:
            out["run_root"] = value
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        out[key] = value
    return out


def load_profile(name_or_path: str) -> dict[str, object]:
    """Load a packaged profile by name ('desk', 'flare') or a file path."""
    packaged = resources.files("stmt").joinpath(f"profiles/{name_or_path}.cfg")
    if packaged.is_file():
        return parse_config_text(packaged.read_text(), source=f"profile:{name_or_path}")
    path = Path(name_or_path)
    if path.is_file():
        return parse_config_text(path.read_text(), source=str(path))
    raise ConfigError(f"unknown profile '{name_or_path}' (not packaged, not a file)")


def load_run_config(
    profile: str | None = None,
    config_file: str | Path | None = None,
    cli_overrides: dict[str, object] | None = None,
    environ=None,
) -> RunConfig:
    """Resolve the layered configuration: profile < file < env < CLI."""
    cfg = RunConfig()
    if profile:
        cfg = apply_overrides(cfg, load_profile(profile))
    if config_file:
        path = Path(config_file)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = apply_overrides(cfg, parse_config_text(path.read_text(), source=str(path)))
    cfg = apply_overrides(cfg, env_overrides(environ))
    if cli_overrides:
        cfg = apply_overrides(cfg, cli_overrides)
    return cfg


def echo_config(cfg: RunConfig) -> str:
    """Fully resolved 'key = value' text; parsing it back yields an equal config."""
    lines = []
    for key, value in sorted(flatten_config(cfg).items()):
        if isinstance(value, tuple):
            value = list(value)
        if isinstance(value, frozenset):
            value = sorted(value)
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(echo_config(cfg).encode()).hexdigest()[:16]


def net_spec_from_section(section: NetSection, num_classes: int, in_channels: int = 1):
    from .nets import NetSpec

    return NetSpec(
        in_channels=in_channels,
        num_classes=num_classes,
        base_channels=section.base_channels,
        num_scales=section.num_scales,
        blocks_per_scale=section.blocks_per_scale,
        max_channels=section.max_channels,
    )

"""Run configuration: ``key = value`` files with ``#`` comments, plus overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .pipeline import PipelineConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}
PATH_KEYS = ("manifest", "out_dir", "probe", "resume")


@dataclass(frozen=True)
class RunConfig:
    scale: int = 4
    channels: int = 96
    rscfl_count: int = 7
    alpha: float = 0.9
    variant: str = "full"
    share_stages: bool = True
    fusion_after: Optional[int] = None
    d_state: int = 16
    expand: int = 2
    steps: int = 500
    lr: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    dtype: str = "float64"
    probe_every: int = 10
    checkpoint_every: int = 0
    threads: int = 1
    manifest: Optional[str] = None
    out_dir: str = "run"
    probe: Optional[str] = None
    resume: Optional[str] = None

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(scale=self.scale, channels=self.channels, rscfl_count=self.rscfl_count,
                              alpha=self.alpha, variant=self.variant, share_stages=self.share_stages,
                              fusion_after=self.fusion_after, d_state=self.d_state, expand=self.expand)

    def training(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, lr=self.lr, batch_size=self.batch_size, seed=self.seed,
                           probe_every=self.probe_every, checkpoint_every=self.checkpoint_every, dtype=self.dtype)

    def validate(self) -> "RunConfig":
        """Raise :class:`ConfigError` naming the violated constraint, else return self."""
        try:
            self.pipeline()
            self.training()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        return self


def _field_types() -> dict:
    return {f.name: f for f in fields(RunConfig)}


def coerce(key: str, raw: str):
    """Convert a textual value to the type of ``key``."""
    spec = _field_types().get(key)
    if spec is None:
        raise ConfigError(f"unknown configuration key '{key}'")
    text = str(raw).strip()
    kind = spec.type if isinstance(spec.type, str) else getattr(spec.type, "__name__", str(spec.type))
    if "Optional" in kind and text.lower() in ("", "none"):
        return None
    try:
        if "bool" in kind:
            if text.lower() not in _BOOL:
                raise ValueError(f"expected a boolean, got {text!r}")
            return _BOOL[text.lower()]
        if "int" in kind:
            return int(text)
        if "float" in kind:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"invalid value for '{key}': {exc}") from None
    return text


def parse_config_text(text: str, base: Optional[Path] = None) -> dict:
    """Parse ``key = value`` lines. Relative paths resolve against ``base``."""
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key = key.strip().replace("-", "_")
        val = coerce(key, value)
        if key in PATH_KEYS and val is not None and base is not None and not Path(val).is_absolute():
            val = str(base / val)
        values[key] = val
    return values


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    """Built-in defaults, then the file (if any), then ``overrides`` (non-None entries)."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        values.update(parse_config_text(path.read_text(), path.parent))
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = coerce(key, val) if isinstance(val, str) else val
    return replace(RunConfig(), **values).validate()


def format_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config_text`; paths are written absolute so the text loads from anywhere."""
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in PATH_KEYS and value is not None:
            value = Path(value).resolve()
        lines.append(f"{f.name} = {value}\n")
    return "".join(lines)

"""Plain-text run configuration.

One ``key = value`` per line; ``#`` starts a comment.  Relative paths are
resolved against the directory holding the config file.  Unknown keys are
rejected so that typos do not silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    pass


PATH_KEYS = ("target", "target_vertices", "target_diff", "target_geo",
             "reference_vertices", "reference_diff", "reference_geo", "bones", "out_dir")


@dataclass
class RunConfig:
    # inputs; target_vertices defaults to the target cloud itself
    target: Optional[Path] = None
    target_vertices: Optional[Path] = None
    target_diff: Optional[Path] = None
    target_geo: Optional[Path] = None
    reference_vertices: Optional[Path] = None
    reference_diff: Optional[Path] = None
    reference_geo: Optional[Path] = None
    bones: Optional[Path] = None
    out_dir: Path = Path("out")
    out_format: str = "bin"

    seed: int = 0
    deterministic: bool = True

    # simulation
    resolution: int = 64
    substeps: int = 24
    young: float = 1e4
    poisson: float = 0.3
    density: float = 1000.0
    particle_volume: float = 1e-6
    gravity: tuple = (0.0, 0.0, 0.0)
    # comma-separated face:kind pairs, e.g. "y-:sticky,x+:slip"
    boundary: str = "y-:sticky"
    reach_factor: float = 1.5

    # optimiser
    iters: int = 200
    lr: float = 1e-2
    tv_weight: float = 1e-3
    rms_decay: float = 0.999
    phases: int = -1                 # -1 runs every frame pair
    share_velocity: bool = True
    control_resolution: int = 41
    plane_resolution: int = 32
    plane_channels: int = 16
    hidden: int = 64
    scale_global_translation: bool = True

    # part matching
    outlier_k: float = 2.0
    coverage: str = "diagonal"

    # ablation
    alphas: tuple = (0.5, 1.0, 2.0, 4.0)

    source: Optional[Path] = field(default=None, repr=False)

    def boundary_map(self) -> dict:
        out = {}
        for item in filter(None, (s.strip() for s in self.boundary.split(","))):
            face, _, kind = item.partition(":")
            out[face.strip()] = kind.strip() or "sticky"
        return out

    def update(self, **overrides) -> "RunConfig":
        """Apply non-None overrides (e.g. from command-line flags)."""
        for k, v in overrides.items():
            if v is None:
                continue
            if k not in _FIELDS:
                raise ConfigError(f"unknown configuration key {k!r}")
            setattr(self, k, v)
        return self

    def require(self, *keys):
        missing = [k for k in keys if getattr(self, k) is None]
        if missing:
            raise ConfigError(f"missing required configuration keys: {', '.join(missing)}")


_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "source"}


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple:
    return tuple(float(t) for t in s.replace(",", " ").split())


def _convert(key: str, raw: str, base: Path):
    if key in PATH_KEYS:
        p = Path(raw).expanduser()
        return p if p.is_absolute() else base / p
    default = _FIELDS[key].default
    if key == "gravity":
        vals = _floats(raw)
        if len(vals) != 3:
            raise ValueError("gravity needs three components")
        return vals
    if key == "alphas":
        return _floats(raw)
    if isinstance(default, bool):
        return _bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, base_dir=".", source=None) -> RunConfig:
    base = Path(base_dir)
    cfg = RunConfig()
    cfg.out_dir = base / cfg.out_dir
    where = source or "<config>"
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{where}:{lineno}: expected 'key = value'")
        if key not in _FIELDS:
            raise ConfigError(f"{where}:{lineno}: unknown configuration key {key!r}")
        try:
            setattr(cfg, key, _convert(key, value, base))
        except ValueError as exc:
            raise ConfigError(f"{where}:{lineno}: bad value for {key!r}: {exc}") from None
    cfg.source = Path(source) if source else None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path.parent, str(path))


def format_config(cfg: RunConfig, base_dir=None) -> str:
    """Render a config so that :func:`parse_config` reads it back unchanged."""
    base = Path(base_dir) if base_dir else None
    lines = []
    for name in _FIELDS:
        v = getattr(cfg, name)
        if v is None:
            continue
        if name in PATH_KEYS:
            p = Path(v)
            if base is not None:
                try:
                    p = p.relative_to(base)
                except ValueError:
                    pass
            v = p.as_posix()
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = ", ".join(repr(float(t)) for t in v)
        lines.append(f"{name} = {v}")
    return "\n".join(lines) + "\n"

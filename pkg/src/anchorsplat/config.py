"""Run configuration: every tunable, a flat key = value file format with
sections, and the effective-config echo used for exact reproduction.

Precedence: CLI flags > config file > defaults. Floats are echoed with
repr() so a round trip through the echo file reproduces values bit-exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ParseError, ValidationError


@dataclass
class RunConfig:
    # scene
    data_format: str = "auto"  # auto | colmap | transforms
    split_rule: str = "every-nth:8"
    voxel_size: str = "auto"  # "auto" or a positive float literal
    random_grid_count: int = 100000
    random_grid_expand: float = 1.5
    # model
    k: int = 10
    tau_alpha: float = 0.0
    frustum_margin: float = 1.0
    enable_frustum: bool = True
    enable_opacity: bool = True
    # refine
    refine_every: int = 100
    tau_g_mult: float = 64.0  # gradient threshold = tau_g_mult * voxel_size
    levels: int = 3
    keep_prob: float = 0.5
    prune_opacity: float = 0.5
    enable_grow: bool = True
    enable_prune: bool = True
    refine_start: int = 500
    refine_end_frac: float = 0.6
    # loss
    lambda_ssim: float = 0.2
    lambda_vol: float = 0.001
    # train
    iterations: int = 30000
    seed: int = 0
    lr_offsets: float = 0.01
    lr_offsets_final: float = 0.01  # multiplier reached at the last iteration
    lr_features: float = 0.0075
    lr_scales: float = 0.007
    lr_mlp: float = 0.002
    # raster
    tile_size: int = 16
    near: float = 0.01
    sigma_skip: float = 1.0 / 255.0
    t_stop: float = 1e-4
    background: str = "auto"  # auto | black | white | r,g,b

    def resolved_voxel_size(self):
        if self.voxel_size.strip().lower() == "auto":
            return None
        try:
            eps = float(self.voxel_size)
        except ValueError as exc:
            raise ValidationError(f"bad voxel_size '{self.voxel_size}'") from exc
        if eps <= 0:
            raise ValidationError("voxel_size must be positive")
        return eps

    def resolved_background(self, scene_kind):
        name = self.background.strip().lower()
        if name == "auto":
            name = "white" if scene_kind == "transforms" else "black"
        if name == "black":
            return [0.0, 0.0, 0.0]
        if name == "white":
            return [1.0, 1.0, 1.0]
        parts = name.split(",")
        if len(parts) != 3:
            raise ValidationError(f"bad background '{self.background}'")
        try:
            return [float(p) for p in parts]
        except ValueError as exc:
            raise ValidationError(f"bad background '{self.background}'") from exc


_SECTIONS = {
    "scene": ["data_format", "split_rule", "voxel_size", "random_grid_count", "random_grid_expand"],
    "model": ["k", "tau_alpha", "frustum_margin", "enable_frustum", "enable_opacity"],
    "refine": [
        "refine_every",
        "tau_g_mult",
        "levels",
        "keep_prob",
        "prune_opacity",
        "enable_grow",
        "enable_prune",
        "refine_start",
        "refine_end_frac",
    ],
    "loss": ["lambda_ssim", "lambda_vol"],
    "train": [
        "iterations",
        "seed",
        "lr_offsets",
        "lr_offsets_final",
        "lr_features",
        "lr_scales",
        "lr_mlp",
    ],
    "raster": ["tile_size", "near", "sigma_skip", "t_stop", "background"],
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(name, text, where):
    kind = _FIELD_TYPES[name]
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError as exc:
        raise ParseError(f"{where}: bad value for {name}: '{text}'") from exc


def parse_config_text(text, where="<config>", base=None):
    """Parse key = value config text into a RunConfig."""
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            continue  # sections are cosmetic; keys are globally unique
        if "=" not in line:
            raise ParseError(f"{where}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ParseError(f"{where}:{lineno}: unknown config key '{key}'")
        setattr(cfg, key, _parse_value(key, value, f"{where}:{lineno}"))
    return cfg


def load_config_file(path, base=None):
    """Parse a key = value config file into a RunConfig."""
    with open(path, "r") as fh:
        return parse_config_text(fh.read(), where=str(path), base=base)


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_text(cfg):
    """Render the effective configuration; parsing it back reproduces cfg."""
    lines = []
    for section, names in _SECTIONS.items():
        lines.append(f"[{section}]")
        for name in names:
            lines.append(f"{name} = {_format_value(getattr(cfg, name))}")
        lines.append("")
    return "\n".join(lines) + "\n"


def write_config_file(cfg, path):
    """Write the effective configuration; reloading it reproduces cfg."""
    with open(path, "w") as fh:
        fh.write(config_to_text(cfg))

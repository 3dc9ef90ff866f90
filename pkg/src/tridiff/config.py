"""Run configuration: sectioned key=value text with full defaults.

Grammar: UTF-8 INI-style sections ([data], [mae], ...) holding
`key = value` lines; '#' starts a comment. Every field has a default,
so the empty document is a valid config. Unknown sections or keys are
rejected with the nearest valid name suggested. `parse(emit(cfg))`
reproduces `cfg` exactly.
"""

from __future__ import annotations

import configparser
import difflib
import hashlib
import io
from dataclasses import dataclass, field, fields

from .data import MODALITIES


class ConfigError(ValueError):
    """Invalid configuration text or field value."""


@dataclass
class DataCfg:
    n_unimodal: int = 2000
    n_paired: int = 400
    n_test: int = 200


@dataclass
class MaeCfg:
    steps: int = 200
    batch: int = 32
    lr: float = 2e-3
    mask_ratio: float = 0.5


@dataclass
class AlignCfg:
    anchor_steps: int = 1000
    finetune_steps: int = 300
    batch: int = 32
    anchor_lr: float = 2e-3
    finetune_lr: float = 1e-2
    tau_init: float = 0.07


@dataclass
class DiffusionCfg:
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    train_steps: int = 2500
    batch: int = 32
    lr: float = 2e-3
    lr_final: float = 2e-4     # cosine decay target over train_steps
    condition_mask_ratio: float = 0.5


@dataclass
class ControlCfg:
    alpha: float = 0.1
    fusion: str = "sum"
    freeze_base: bool = False


@dataclass
class SampleCfg:
    n_samples: int = 64
    output_modality: str = "image"
    conditions: str = "audio,text"


@dataclass
class EvalCfg:
    n_eval: int = 96
    probe_steps: int = 300


@dataclass
class RunConfig:
    seed: int = 0
    data: DataCfg = field(default_factory=DataCfg)
    mae: MaeCfg = field(default_factory=MaeCfg)
    align: AlignCfg = field(default_factory=AlignCfg)
    diffusion: DiffusionCfg = field(default_factory=DiffusionCfg)
    control: ControlCfg = field(default_factory=ControlCfg)
    sample: SampleCfg = field(default_factory=SampleCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)

    def condition_list(self) -> list[str]:
        return [c.strip() for c in self.sample.conditions.split(",") if c.strip()]


_SECTIONS = {
    "run": None,  # scalar fields of RunConfig itself
    "data": DataCfg,
    "mae": MaeCfg,
    "align": AlignCfg,
    "diffusion": DiffusionCfg,
    "control": ControlCfg,
    "sample": SampleCfg,
    "eval": EvalCfg,
}

_RUN_SCALARS = ("seed",)


def _section_keys(section: str) -> list[str]:
    if section == "run":
        return list(_RUN_SCALARS)
    return [f.name for f in fields(_SECTIONS[section])]


def _coerce(raw: str, target_type, where: str):
    raw = raw.strip()
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {target_type.__name__}") from None


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(delimiters=("=",), interpolation=None,
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    cfg = RunConfig()
    for section in cp.sections():
        if section not in _SECTIONS:
            hint = difflib.get_close_matches(section, list(_SECTIONS), n=1)
            extra = f"; did you mean '[{hint[0]}]'?" if hint else ""
            raise ConfigError(f"unknown section '[{section}]'{extra}")
        valid = _section_keys(section)
        target = cfg if section == "run" else getattr(cfg, section)
        for key, raw in cp.items(section):
            if key not in valid:
                hint = difflib.get_close_matches(key, valid, n=1)
                extra = f"; did you mean '{hint[0]}'?" if hint else ""
                raise ConfigError(f"unknown key '{key}' in [{section}]{extra}")
            current = getattr(target, key)
            setattr(target, key, _coerce(raw, type(current), f"[{section}] {key}"))
    validate_config(cfg)
    return cfg


def emit_config(cfg: RunConfig) -> str:
    out = io.StringIO()
    for section in _SECTIONS:
        out.write(f"[{section}]\n")
        target = cfg if section == "run" else getattr(cfg, section)
        for key in _section_keys(section):
            v = getattr(target, key)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            out.write(f"{key} = {v}\n")
        out.write("\n")
    return out.getvalue()


def validate_config(cfg: RunConfig) -> None:
    d = cfg.data
    if d.n_unimodal <= 0 or d.n_paired <= 0 or d.n_test <= 0:
        raise ConfigError("[data] sizes must be positive")
    if d.n_unimodal < d.n_paired:
        raise ConfigError("[data] n_unimodal must be >= n_paired")
    for name, ratio in (("[mae] mask_ratio", cfg.mae.mask_ratio),
                        ("[diffusion] condition_mask_ratio",
                         cfg.diffusion.condition_mask_ratio)):
        if not 0.0 <= ratio <= 1.0:
            raise ConfigError(f"{name} must be in [0, 1], got {ratio}")
    if cfg.control.alpha < 0.0:
        raise ConfigError(f"[control] alpha must be >= 0, got {cfg.control.alpha}")
    if cfg.control.fusion not in ("sum", "mean"):
        raise ConfigError(f"[control] fusion must be 'sum' or 'mean', "
                          f"got '{cfg.control.fusion}'")
    df = cfg.diffusion
    if df.timesteps < 1:
        raise ConfigError("[diffusion] timesteps must be >= 1")
    if not (0.0 < df.beta_start <= df.beta_end < 1.0):
        raise ConfigError("[diffusion] need 0 < beta_start <= beta_end < 1")
    for name, n in (("[mae] steps", cfg.mae.steps),
                    ("[align] anchor_steps", cfg.align.anchor_steps),
                    ("[align] finetune_steps", cfg.align.finetune_steps),
                    ("[diffusion] train_steps", df.train_steps),
                    ("[sample] n_samples", cfg.sample.n_samples),
                    ("[eval] n_eval", cfg.eval.n_eval),
                    ("[eval] probe_steps", cfg.eval.probe_steps)):
        if n < 1:
            raise ConfigError(f"{name} must be >= 1")
    if cfg.align.tau_init <= 0:
        raise ConfigError("[align] tau_init must be positive")
    if not (0.0 < df.lr_final <= df.lr):
        raise ConfigError(
            f"[diffusion] need 0 < lr_final <= lr, got lr_final={df.lr_final} lr={df.lr}")
    if cfg.sample.output_modality not in MODALITIES:
        raise ConfigError(f"[sample] output_modality must be one of {MODALITIES}")
    conds = cfg.condition_list()
    if not conds:
        raise ConfigError("[sample] conditions must name at least one modality")
    for c in conds:
        if c not in MODALITIES:
            raise ConfigError(f"[sample] conditions: unknown modality '{c}'")
    if len(set(conds)) != len(conds):
        raise ConfigError("[sample] conditions must not repeat a modality")


def load_config_file(path) -> RunConfig:
    from pathlib import Path
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(emit_config(cfg).encode("utf-8")).hexdigest()

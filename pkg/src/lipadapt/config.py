"""Experiment configuration: INI parsing, validation, canonical hashing.

Every tunable lives in a flat section/key schema. Unknown sections or keys are
rejected rather than ignored so a typo cannot silently fall back to defaults.
The config hash covers every value except the output directory, which only
says where results land, not what they are.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field, fields, replace

from .losses import LossConfig
from .model import ModelConfig


class ConfigError(ValueError):
    """Malformed, unknown, or out-of-range configuration input."""


@dataclass
class DataConfig:
    n_train_speakers: int = 20
    n_unseen_speakers: int = 4
    n_words: int = 10
    clips_per_speaker: int = 20
    adapt_clips_per_speaker: int = 300
    test_clips_per_speaker: int = 25
    frames: int = 16
    height: int = 32
    width: int = 32
    noise_std: float = 0.02
    fps: float = 16.0
    task: str = "word"
    alphabet_size: int = 5
    min_symbols: int = 2
    max_symbols: int = 6


@dataclass
class ModelSection:
    d_id: int = 64
    verifier_channels: tuple[int, ...] = (8, 16)
    frontend_channels: int = 16
    block_channels: tuple[int, ...] = (16, 16, 32, 32)
    backend_hidden: int = 48
    head_seed_channels: int = 8
    use_enhancement: bool = True
    use_suppression: bool = True


@dataclass
class StageConfig:
    epochs: int
    lr: float = 1e-3
    batch_size: int = 16


@dataclass
class AdaptConfig:
    budgets_min: tuple[float, ...] = (1.0, 3.0, 5.0)
    lr: float = 1e-4
    epochs: int = 2
    batch_size: int = 16


STAGE_NAMES = ("1a", "1b", "2", "3")
_DEFAULT_STAGE_EPOCHS = {"1a": 5, "1b": 10, "2": 5, "3": 5}


def _default_stages() -> dict:
    return {name: StageConfig(epochs=_DEFAULT_STAGE_EPOCHS[name]) for name in STAGE_NAMES}


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossConfig = field(default_factory=LossConfig)
    stages: dict = field(default_factory=_default_stages)
    adaptation: AdaptConfig = field(default_factory=AdaptConfig)

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError("experiment.seed must be >= 0")
        d = self.data
        for name in (
            "n_train_speakers",
            "n_unseen_speakers",
            "n_words",
            "clips_per_speaker",
            "adapt_clips_per_speaker",
            "test_clips_per_speaker",
        ):
            if getattr(d, name) < 1:
                raise ConfigError(f"data.{name} must be >= 1")
        if d.task not in ("word", "sentence"):
            raise ConfigError("data.task must be 'word' or 'sentence'")
        if d.task == "word" and d.n_words < 2:
            raise ConfigError("data.n_words must be >= 2")
        if d.alphabet_size < 2:
            raise ConfigError("data.alphabet_size must be >= 2")
        if not 1 <= d.min_symbols <= d.max_symbols:
            raise ConfigError("need 1 <= data.min_symbols <= data.max_symbols")
        if d.noise_std < 0:
            raise ConfigError("data.noise_std must be >= 0")
        if d.fps <= 0:
            raise ConfigError("data.fps must be > 0")
        m = self.model
        if len(m.verifier_channels) != 2:
            raise ConfigError("model.verifier_channels needs exactly 2 entries")
        if len(m.block_channels) != 4:
            raise ConfigError("model.block_channels needs exactly 4 entries")
        for name in ("d_id", "frontend_channels", "backend_hidden", "head_seed_channels"):
            if getattr(m, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if any(c < 1 for c in m.verifier_channels + m.block_channels):
            raise ConfigError("model channel counts must be >= 1")
        try:
            self.loss.validate()
            self.model_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for name, st in self.stages.items():
            if st.epochs < 0:
                raise ConfigError(f"stage_{name}.epochs must be >= 0")
            if st.lr <= 0:
                raise ConfigError(f"stage_{name}.lr must be > 0")
            if st.batch_size < 1:
                raise ConfigError(f"stage_{name}.batch_size must be >= 1")
        a = self.adaptation
        if not a.budgets_min or any(b < 0 for b in a.budgets_min):
            raise ConfigError("adaptation.budgets_min must be non-empty, all >= 0")
        if a.lr <= 0 or a.epochs < 1 or a.batch_size < 1:
            raise ConfigError("adaptation lr/epochs/batch_size out of range")

    def model_config(self) -> ModelConfig:
        d, m = self.data, self.model
        n_classes = d.n_words if d.task == "word" else d.alphabet_size
        return ModelConfig(
            n_classes=n_classes,
            task=d.task,
            frames=d.frames,
            height=d.height,
            width=d.width,
            d_id=m.d_id,
            verifier_channels=tuple(m.verifier_channels),
            frontend_channels=m.frontend_channels,
            block_channels=tuple(m.block_channels),
            backend_hidden=m.backend_hidden,
            head_seed_channels=m.head_seed_channels,
            use_enhancement=m.use_enhancement,
            use_suppression=m.use_suppression,
        )

    def build_splits_kwargs(self) -> dict:
        d = self.data
        return dict(
            task=d.task,
            alphabet_size=d.alphabet_size,
            min_symbols=d.min_symbols,
            max_symbols=d.max_symbols,
            adapt_clips_per_speaker=d.adapt_clips_per_speaker,
            test_clips_per_speaker=d.test_clips_per_speaker,
            n_frames=d.frames,
            height=d.height,
            width=d.width,
            noise_std=d.noise_std,
        )

    def canonical_items(self, include_output_dir: bool = False) -> list[tuple[str, str]]:
        items = [("experiment.seed", _canon(self.seed))]
        if include_output_dir:
            items.append(("experiment.output_dir", _canon(self.output_dir)))
        for section, obj in (
            ("data", self.data),
            ("model", self.model),
            ("loss", self.loss),
            ("adaptation", self.adaptation),
        ):
            for f in sorted(fields(obj), key=lambda f: f.name):
                items.append((f"{section}.{f.name}", _canon(getattr(obj, f.name))))
        for name in STAGE_NAMES:
            st = self.stages[name]
            for f in sorted(fields(st), key=lambda f: f.name):
                items.append((f"stage_{name}.{f.name}", _canon(getattr(st, f.name))))
        return items

    def config_hash(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in self.canonical_items())
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    @property
    def run_id(self) -> str:
        return self.config_hash()[:12]


def _canon(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "auto"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_canon(v) for v in value)
    return str(value)


# --- INI schema ------------------------------------------------------------

def _to_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"expected integer, got {text!r}") from None


def _to_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected number, got {text!r}") from None


def _to_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected boolean, got {text!r}")


def _to_str(text: str) -> str:
    return text.strip()


def _to_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(_to_int(p.strip()) for p in text.split(",") if p.strip())


def _to_float_tuple(text: str) -> tuple[float, ...]:
    return tuple(_to_float(p.strip()) for p in text.split(",") if p.strip())


def _to_margin(text: str):
    if text.strip().lower() in ("auto", "none"):
        return None
    return _to_float(text)


_DATA_PARSERS = {
    "n_train_speakers": _to_int,
    "n_unseen_speakers": _to_int,
    "n_words": _to_int,
    "clips_per_speaker": _to_int,
    "adapt_clips_per_speaker": _to_int,
    "test_clips_per_speaker": _to_int,
    "frames": _to_int,
    "height": _to_int,
    "width": _to_int,
    "noise_std": _to_float,
    "fps": _to_float,
    "task": _to_str,
    "alphabet_size": _to_int,
    "min_symbols": _to_int,
    "max_symbols": _to_int,
}

_MODEL_PARSERS = {
    "d_id": _to_int,
    "verifier_channels": _to_int_tuple,
    "frontend_channels": _to_int,
    "block_channels": _to_int_tuple,
    "backend_hidden": _to_int,
    "head_seed_channels": _to_int,
    "use_enhancement": _to_bool,
    "use_suppression": _to_bool,
}

_LOSS_PARSERS = {
    "margin_id": _to_float,
    "margin_enh": _to_float,
    "margin_sup": _to_margin,
    "vsr_weight": _to_float,
    "id_weight": _to_float,
    "enh_weight": _to_float,
    "sup_weight": _to_float,
    "prob_floor": _to_float,
}

_STAGE_PARSERS = {"epochs": _to_int, "lr": _to_float, "batch_size": _to_int}

_ADAPT_PARSERS = {
    "budgets_min": _to_float_tuple,
    "lr": _to_float,
    "epochs": _to_int,
    "batch_size": _to_int,
}

_EXPERIMENT_PARSERS = {"seed": _to_int, "output_dir": _to_str}


def _apply_section(obj, parsers: dict, section: str, mapping: dict) -> None:
    for key, raw in mapping.items():
        if key not in parsers:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        try:
            setattr(obj, key, parsers[key](raw))
        except ConfigError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None


def config_from_mapping(mapping: dict) -> ExperimentConfig:
    """Build and validate a config from a {section: {key: raw_string}} mapping."""
    cfg = ExperimentConfig()
    known = {"experiment", "data", "model", "loss", "adaptation"} | {
        f"stage_{n}" for n in STAGE_NAMES
    }
    for section in mapping:
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
    if "experiment" in mapping:
        exp = dict(mapping["experiment"])
        for key, raw in exp.items():
            if key not in _EXPERIMENT_PARSERS:
                raise ConfigError(f"unknown key {key!r} in section [experiment]")
            setattr(cfg, key, _EXPERIMENT_PARSERS[key](raw))
    if "data" in mapping:
        _apply_section(cfg.data, _DATA_PARSERS, "data", mapping["data"])
    if "model" in mapping:
        _apply_section(cfg.model, _MODEL_PARSERS, "model", mapping["model"])
    if "loss" in mapping:
        _apply_section(cfg.loss, _LOSS_PARSERS, "loss", mapping["loss"])
    for name in STAGE_NAMES:
        section = f"stage_{name}"
        if section in mapping:
            _apply_section(cfg.stages[name], _STAGE_PARSERS, section, mapping[section])
    if "adaptation" in mapping:
        _apply_section(cfg.adaptation, _ADAPT_PARSERS, "adaptation", mapping["adaptation"])
    cfg.validate()
    return cfg


def parse_config(path: str) -> ExperimentConfig:
    """Read an INI file into a validated ExperimentConfig."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    mapping = {section: dict(cp[section]) for section in cp.sections()}
    return config_from_mapping(mapping)


def write_config(cfg: ExperimentConfig, path: str) -> None:
    """Write the canonical INI form of ``cfg`` (used to snapshot run inputs)."""
    sections: dict[str, list[tuple[str, str]]] = {}
    for dotted, value in cfg.canonical_items(include_output_dir=True):
        section, key = dotted.split(".", 1)
        sections.setdefault(section, []).append((key, value))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for section in sections:
            fh.write(f"[{section}]\n")
            for key, value in sections[section]:
                fh.write(f"{key} = {value}\n")
            fh.write("\n")

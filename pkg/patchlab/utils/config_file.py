"""
Experiment config files.

Flat key = value text with section headers:

    # comment            (also ';')
    [data]
    d = 2000
    rho = 0.8, 0.15, 0.05

Sections are data, model, train.erm, train.cutout, train.cutmix, eval and output.
Validation errors are reported with the line of the offending key, or of the
section header when the key is absent.
"""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from patchlab.errors import PatchLabError
from patchlab.models.configs import (
    ActivationParams,
    DataConfig,
    EvalConfig,
    ExperimentConfig,
    InitConfig,
    OutputConfig,
    TrainConfig,
)
from patchlab.models.enums import TrainingMethod

logger = logging.getLogger(__name__)

SECTION_ORDER = (
    "data",
    "model",
    "train.erm",
    "train.cutout",
    "train.cutmix",
    "eval",
    "output",
)
LIST_KEYS = frozenset({"tiers", "rho"})
MODEL_KEYS = ("m", "beta", "r", "sigma_0", "init_seed")
TRAIN_KEYS = tuple(k for k in TrainConfig.model_fields if k != "method")

_SECTION_RE = re.compile(r"^\[([A-Za-z0-9_.]+)\]$")
_ENTRY_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$")


class ConfigParseError(PatchLabError):
    """Raised for malformed or invalid config files; carries the 1-based line."""

    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{message}", "CONFIG_PARSE_ERROR", {"line": line, "key": key})
        self.line = line
        self.key = key


@dataclass
class _Section:
    name: str
    line: int
    entries: dict[str, tuple[str, int]] = field(default_factory=dict)

    def line_of(self, key: str | None) -> int:
        if key is not None and key in self.entries:
            return self.entries[key][1]
        return self.line


def _allowed_keys(section: str) -> tuple[str, ...]:
    if section == "data":
        return tuple(DataConfig.model_fields)
    if section == "model":
        return MODEL_KEYS
    if section.startswith("train."):
        return TRAIN_KEYS
    if section == "eval":
        return tuple(EvalConfig.model_fields)
    return tuple(OutputConfig.model_fields)


def _read_sections(text: str) -> dict[str, _Section]:
    sections: dict[str, _Section] = {}
    current: _Section | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        header = _SECTION_RE.match(line)
        if header:
            name = header.group(1)
            if name not in SECTION_ORDER:
                raise ConfigParseError(f"unknown section [{name}]", lineno)
            if name in sections:
                raise ConfigParseError(f"duplicate section [{name}]", lineno)
            current = _Section(name=name, line=lineno)
            sections[name] = current
            continue
        entry = _ENTRY_RE.match(line)
        if not entry:
            raise ConfigParseError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if current is None:
            raise ConfigParseError("entry outside of any section", lineno)
        key, value = entry.group(1), entry.group(2).strip()
        if key not in _allowed_keys(current.name):
            raise ConfigParseError(f"unknown key {key!r} in [{current.name}]", lineno, key)
        if key in current.entries:
            raise ConfigParseError(f"duplicate key {key!r}", lineno, key)
        current.entries[key] = (value, lineno)
    return sections


def _value(key: str, raw: str) -> Any:
    if key in LIST_KEYS:
        return [item.strip() for item in raw.split(",") if item.strip()]
    if raw.lower() in {"none", ""}:
        return None
    return raw


def _values(section: _Section) -> dict[str, Any]:
    return {key: _value(key, raw) for key, (raw, _) in section.entries.items()}


def _build_payload(sections: dict[str, _Section]) -> tuple[dict[str, Any], list[str]]:
    if "data" not in sections:
        raise ConfigParseError("missing required section [data]", 1)
    trainers = [name for name in SECTION_ORDER if name.startswith("train.") and name in sections]
    if not trainers:
        raise ConfigParseError("at least one [train.<method>] section is required", 1)

    payload: dict[str, Any] = {"data": _values(sections["data"])}
    if "model" in sections:
        values = _values(sections["model"])
        model: dict[str, Any] = {"activation": {}, "init": {}}
        for key, value in values.items():
            if key == "m":
                model["m"] = value
            elif key in ("beta", "r"):
                model["activation"][key] = value
            elif key == "sigma_0":
                model["init"]["sigma_0"] = value
            else:
                model["init"]["seed"] = value
        payload["model"] = model
    payload["train"] = [
        {"method": name.split(".", 1)[1], **_values(sections[name])} for name in trainers
    ]
    for name in ("eval", "output"):
        if name in sections:
            payload[name] = _values(sections[name])
    return payload, trainers


def _locate(
    loc: tuple[int | str, ...], sections: dict[str, _Section], trainers: list[str]
) -> tuple[int, str | None]:
    """Map a pydantic error location to (line, key)."""
    if not loc:
        cutout = sections.get("train.cutout")
        if cutout is not None:
            return cutout.line_of("C"), "C"
        return sections[trainers[0]].line, None
    head = str(loc[0])
    if head == "train" and len(loc) >= 2 and isinstance(loc[1], int):
        section = sections[trainers[loc[1]]]
        key = str(loc[2]) if len(loc) >= 3 else None
        return section.line_of(key), key
    if head == "model" and "model" in sections:
        key = str(loc[-1]) if len(loc) >= 2 else None
        if len(loc) >= 3 and loc[1] == "init" and key == "seed":
            key = "init_seed"
        return sections["model"].line_of(key), key
    if head in sections:
        key = str(loc[1]) if len(loc) >= 2 and not isinstance(loc[1], int) else None
        return sections[head].line_of(key), key
    return 1, None


def parse_config(text: str) -> ExperimentConfig:
    """
    Parse and validate config text.

    Args:
        text: Config file contents.

    Returns:
        The validated experiment config.

    Raises:
        ConfigParseError: On syntax errors, unknown keys or failed validation.
    """
    sections = _read_sections(text)
    payload, trainers = _build_payload(sections)
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as e:
        first = e.errors()[0]
        line, key = _locate(tuple(first["loc"]), sections, trainers)
        field_name = ".".join(str(p) for p in first["loc"]) or "config"
        raise ConfigParseError(f"{field_name}: {first['msg']}", line, key) from e


def load_config(path: Path) -> ExperimentConfig:
    """Read and parse a config file."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigParseError(f"cannot read config {path}: {e.strerror or e}") from e
    config = parse_config(text)
    logger.info(
        f"Loaded config {path}",
        extra={"methods": [t.method.value for t in config.train], "d": config.data.d},
    )
    return config


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def _lines(section: str, values: dict[str, Any]) -> list[str]:
    lines = [f"[{section}]"]
    for key, value in values.items():
        if value is None:
            continue
        lines.append(f"{key} = {_format(value)}")
    return lines


def serialize_config(config: ExperimentConfig) -> str:
    """Write a config back to text; parse_config(serialize_config(c)) == c."""
    act: ActivationParams = config.model.activation
    init: InitConfig = config.model.init
    blocks = [
        _lines("data", {k: getattr(config.data, k) for k in DataConfig.model_fields}),
        _lines(
            "model",
            {
                "m": config.model.m,
                "beta": act.beta,
                "r": act.r,
                "sigma_0": init.sigma_0,
                "init_seed": init.seed,
            },
        ),
    ]
    for method in TrainingMethod:
        trainer = config.trainer(method)
        if trainer is not None:
            blocks.append(
                _lines(f"train.{method.value}", {k: getattr(trainer, k) for k in TRAIN_KEYS})
            )
    blocks.append(_lines("eval", {k: getattr(config.eval, k) for k in EvalConfig.model_fields}))
    blocks.append(
        _lines("output", {k: getattr(config.output, k) for k in OutputConfig.model_fields})
    )
    return "\n\n".join("\n".join(block) for block in blocks) + "\n"

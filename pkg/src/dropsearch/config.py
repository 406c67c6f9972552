"""Run configuration: JSON file, validated, with command-line overrides.

Defaults follow the reference search setup: batch of 16 samples per update,
Adam at 3.5e-4, entropy weight 1e-5, baseline momentum 0.95, and a 4-layer
attention controller. ``python -m dropsearch.config`` prints the JSON schema.
"""
from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ContractError


class ConfigError(ContractError):
    def __init__(self, msg: str, path=None, line: int | None = None):
        self.path, self.line = path, line
        where = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(where + msg)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SearchSection(_Strict):
    budget: int = Field(16_384, ge=1)
    batch_size: int = Field(16, ge=1)
    capacity: Optional[int] = Field(None, ge=1, description="q_unfinished capacity; default 4 * batch_size")
    seed: int = 0
    mode: Literal["simulated", "live"] = "simulated"
    workers: int = Field(16, ge=1)
    trace: Union[Literal["constant", "fluctuating"], list[tuple[float, int]]] = "constant"
    max_failure_rate: float = Field(0.5, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _check(self):
        cap = self.capacity if self.capacity is not None else 4 * self.batch_size
        if not cap >= self.batch_size:
            raise ValueError("capacity must be at least batch_size")
        if self.budget < self.batch_size:
            raise ValueError("budget must be at least batch_size")
        return self


class ControllerSection(_Strict):
    backend: Literal["attention", "factorized"] = "attention"
    lr: float = Field(3.5e-4, gt=0.0)
    entropy_coef: float = Field(1e-5, ge=0.0)
    baseline_momentum: float = Field(0.95, ge=0.0, lt=1.0)
    ratio_clip: Optional[float] = Field(None, gt=1.0)
    n_layers: int = Field(4, ge=1)
    d_model: int = Field(128, ge=1)
    n_heads: int = Field(4, ge=1)
    d_head: int = Field(32, ge=1)
    d_ff: int = Field(32, ge=1)
    init_std: float = Field(0.02, gt=0.0)


class RewardSection(_Strict):
    kind: Literal["synthetic", "toy-conv", "toy-lm"] = "synthetic"
    params: dict = Field(default_factory=dict)


class RunConfig(_Strict):
    search: SearchSection = Field(default_factory=SearchSection)
    controller: ControllerSection = Field(default_factory=ControllerSection)
    reward: RewardSection = Field(default_factory=RewardSection)
    output_dir: str = "runs"

    def canonical(self) -> dict:
        """Everything that determines the run's results (not where it is written)."""
        d = self.model_dump(mode="json")
        d.pop("output_dir")
        return d

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _line_of(text: str, loc) -> int | None:
    """Best-effort line of the key at ``loc`` (a pydantic error location) in ``text``."""
    pos, line = 0, None
    for part in loc:
        if isinstance(part, int):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(str(part))).search(text, pos)
        if m is None:
            break
        pos = m.end()
        line = text.count("\n", 0, m.start()) + 1
    return line


def parse_config(text: str, path=None, overrides: dict | None = None) -> RunConfig:
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", path, exc.lineno) from exc
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a JSON object", path, 1)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, key = dotted.split(".")
        raw.setdefault(section, {})
        if not isinstance(raw[section], dict):
            raise ConfigError(f"{section!r} must be an object", path, _line_of(text, [section]))
        raw[section][key] = value
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(f"{loc}: {err['msg']}", path, _line_of(text, err["loc"])) from exc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    if path is None:
        return parse_config("", None, overrides)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from exc
    return parse_config(text, path, overrides)


def schema() -> dict:
    return RunConfig.model_json_schema()


if __name__ == "__main__":
    print(json.dumps(schema(), indent=2))

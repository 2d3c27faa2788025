"""Pipeline configuration: a TOML-style key/value file plus environment
overrides prefixed ``SHELF_``.

Every published constant is a named key with its default: ``svm_c`` =
2048, ``rbf_gamma`` = 2 (the RBF width; the source material's lambda),
``fire_threshold`` = -1.5, ``top_k`` = 210.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

VARIANTS = ("FULL", "DP_SVM", "DP_HS", "DP_PYR_HS", "BASELINE")


class ConfigError(Exception):
    pass


@dataclass
class PipelineConfig:
    dataset_root: str = "data"
    work_dir: str = "artifacts"
    variant: str = "FULL"
    svm_c: float = 2048.0
    rbf_gamma: float = 2.0
    kernel: str = "rbf"
    fire_threshold: float = -1.5
    top_k: int = 210
    notify_tau: float = 0.0
    seed: int = 7
    workers: int = 1
    mining_rounds: int = 4
    mining_per_image: int = 25
    bow_vocab_size: int = 200
    ocr_adapter: str = "synthetic"
    text_scorer: str = "gradient"
    al_selection: str = "uncertainty"
    al_learning_size: int = 12
    al_testing_size: int = 24
    al_step: int = 4
    al_runs: int = 3

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"invalid value for key 'variant': {self.variant!r} "
                              f"(expected one of {', '.join(VARIANTS)})")
        if self.kernel not in ("rbf", "linear"):
            raise ConfigError(f"invalid value for key 'kernel': {self.kernel!r}")
        if self.ocr_adapter != "synthetic":
            raise ConfigError(f"invalid value for key 'ocr_adapter': "
                              f"{self.ocr_adapter!r} (only 'synthetic' ships)")
        if self.text_scorer != "gradient":
            raise ConfigError(f"invalid value for key 'text_scorer': "
                              f"{self.text_scorer!r} (only 'gradient' ships)")
        if self.al_selection not in ("uncertainty", "margin", "random"):
            raise ConfigError(f"invalid value for key 'al_selection': "
                              f"{self.al_selection!r}")
        for key in ("svm_c", "rbf_gamma", "fire_threshold", "notify_tau"):
            v = getattr(self, key)
            if not isinstance(v, (int, float)) or v != v or v in (float("inf"), float("-inf")):
                raise ConfigError(f"key '{key}' must be finite, got {v!r}")
        for key in ("top_k", "workers", "mining_rounds", "mining_per_image",
                    "bow_vocab_size", "al_step", "al_runs"):
            if getattr(self, key) < 1:
                raise ConfigError(f"key '{key}' must be >= 1")

    def variant_settings(self, variant: str | None = None) -> tuple[str, str]:
        """(feature_mode, decision rule) for a named system variant."""
        v = variant or self.variant
        mapping = {
            "FULL": ("pyramid", "svm"),
            "DP_SVM": ("whole", "svm"),
            "DP_HS": ("whole", "hs"),
            "DP_PYR_HS": ("pyramid", "hs"),
            "BASELINE": ("bow", "svm"),
        }
        if v not in mapping:
            raise ConfigError(f"invalid value for key 'variant': {v!r}")
        return mapping[v]


_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELDS[key].type
    raw = raw.strip().strip('"').strip("'")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"invalid value for key '{key}': {raw!r}") from exc


def load_config(path: Path | str | None = None,
                env: dict[str, str] | None = None,
                overrides: dict | None = None) -> PipelineConfig:
    """Config from a key = value file, then SHELF_* env, then overrides."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key: {key}")
            values[key] = _coerce(key, raw)
    env = os.environ if env is None else env
    for key in _FIELDS:
        env_key = "SHELF_" + key.upper()
        if env_key in env:
            values[key] = _coerce(key, env[env_key])
    if overrides:
        for key, v in overrides.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key: {key}")
            if v is not None:
                values[key] = v
    cfg = PipelineConfig(**values)
    cfg.validate()
    return cfg

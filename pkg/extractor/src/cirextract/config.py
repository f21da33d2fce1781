"""Extraction configuration, loadable from a JSON file."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError

ADAPTERS = ("CIRR", "CIRCO", "FashionIQ")


@dataclass(frozen=True)
class ExtractionConfig:
    backbone: str = "hashed-64"
    captioner: str = "hashed"
    llm_model: str = "offline"
    llm_endpoint: str | None = None
    llm_api_key: str | None = None
    captions_per_image: int = 15
    captions_per_query: int | None = None   # None: same as captions_per_image
    top_p: float = 0.9
    temperature: float = 1.0
    seed: int = 0
    cache_dir: str = ".cirextract-cache"
    adapter: str = "CIRR"
    dataset_root: str = "."
    split: str = "val"
    mapper_weights: str | None = None
    template_paths: dict = field(default_factory=dict)
    emit_plain_prompt_variant: bool = False
    workers: int = 1

    def __post_init__(self) -> None:
        if self.captions_per_image < 1:
            raise ConfigError(f"captions_per_image must be >= 1, got {self.captions_per_image}")
        if self.captions_per_query is not None and self.captions_per_query < 1:
            raise ConfigError("captions_per_query must be >= 1 or null")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.adapter not in ADAPTERS:
            raise ConfigError(f"unknown adapter {self.adapter!r}; expected one of {ADAPTERS}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def query_caption_count(self) -> int:
        return self.captions_per_query or self.captions_per_image

    @classmethod
    def from_file(cls, path: str | Path) -> "ExtractionConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}  # type: ignore[attr-defined]
        unknown = set(doc) - known - {"llm_api_key_env"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        env_key = doc.pop("llm_api_key_env", None)
        cfg = cls(**doc)
        if env_key:
            cfg = replace(cfg, llm_api_key=os.environ.get(env_key))
        return cfg

"""Loading the YAML configuration document and applying command-line overrides."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .embedding import Embedder, HashingEmbedder, HttpEmbedder
from .history import ConfigError
from .pipeline import PipelineConfig

SECTIONS = ("pipeline", "history", "embedder", "llm", "attention_matrix")


def default_document() -> dict:
    text = resources.files("dhrag").joinpath("data", "default_config.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)


def _merge(base: dict, override: Mapping[str, Any]) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    """``"history.alpha=0.7"`` -> ``(["history", "alpha"], 0.7)``; values are parsed as YAML scalars."""
    if "=" not in item:
        raise ConfigError([f"override {item!r} is not of the form key=value"])
    key, raw = item.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError([f"override {item!r} has an empty key"])
    return path, yaml.safe_load(raw) if raw.strip() else None


@dataclass
class ResolvedConfig:
    pipeline: PipelineConfig
    embedder: dict
    llm: dict
    attention_matrix: str | None
    document: dict

    def make_embedder(self) -> Embedder:
        kind = self.embedder.get("kind", "native")
        if kind == "native":
            return HashingEmbedder(dim=int(self.embedder.get("dim", 512)), normalize=bool(self.embedder.get("normalize", True)))
        if kind == "http":
            if not self.embedder.get("endpoint") or not self.embedder.get("model"):
                raise ConfigError(["embedder.endpoint and embedder.model are required for kind: http"])
            return HttpEmbedder(
                endpoint=self.embedder["endpoint"],
                model=self.embedder["model"],
                dim=int(self.embedder.get("dim", 512)),
                normalize=bool(self.embedder.get("normalize", True)),
            )
        raise ConfigError([f"embedder.kind must be native or http (got {kind!r})"])


def resolve(path: str | Path | None = None, overrides: Sequence[str] = ()) -> ResolvedConfig:
    doc = default_document()
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"{path}: invalid YAML: {exc}"]) from exc
        if not isinstance(loaded, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        doc = _merge(doc, loaded)
    for item in overrides:
        keys, value = parse_override(item)
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError([f"override {item!r} descends into a non-mapping"])
        node[keys[-1]] = value
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError([f"unknown config section {name!r}" for name in unknown])
    pipeline = dict(doc.get("pipeline") or {})
    pipeline["history"] = dict(doc.get("history") or {})
    try:
        cfg = PipelineConfig.from_dict(pipeline)
        problems = cfg.violations()
    except TypeError as exc:
        raise ConfigError([str(exc)]) from exc
    if problems:
        raise ConfigError(problems)
    return ResolvedConfig(cfg, dict(doc.get("embedder") or {}), dict(doc.get("llm") or {}), doc.get("attention_matrix"), doc)

"""JSON schemas for every file the CLI reads or writes."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

from jsonschema import Draft202012Validator
from referencing import Registry, Resource

NAMES = ("config", "manifest_entry", "histogram", "shift_analysis", "metrics", "report")


@lru_cache(maxsize=None)
def _registry() -> Registry:
    pairs = []
    for name in NAMES:
        text = resources.files(__name__).joinpath(f"{name}.schema.json").read_text(encoding="utf-8")
        pairs.append((f"{name}.schema.json", Resource.from_contents(json.loads(text))))
    return Registry().with_resources(pairs)


def schema(name: str) -> dict:
    return _registry().contents(f"{name}.schema.json")


def validator(name: str) -> Draft202012Validator:
    return Draft202012Validator(schema(name), registry=_registry())


def validate(name: str, obj) -> None:
    """Raise ``jsonschema.ValidationError`` if ``obj`` does not match schema ``name``."""
    validator(name).validate(obj)

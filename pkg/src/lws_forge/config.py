"""Bundled experiment presets and JSON run-config loading.

A run config is a JSON object with a ``model`` section (a :class:`Skeleton`),
an optional ``train`` section (a :class:`TrainConfig`), and either a single
``scaling`` spec or a ``variants`` list of ``{"name", "slug", "scaling"}``.
An optional ``equalize`` section rescales every variant's FFN scalars to the
parameter count of the variant named by ``target``.
"""

from __future__ import annotations

import copy
import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .budget import Skeleton, count_params, equalize_budget
from .errors import InvalidArgumentError
from .profiles import ScalingSpec
from .trainer import TrainConfig


class UnknownPresetError(InvalidArgumentError):
    pass


@lru_cache(maxsize=None)
def _bundled() -> dict[str, dict]:
    out = {}
    for entry in resources.files("lws_forge").joinpath("presets").iterdir():
        if entry.name.endswith(".json"):
            out[entry.name[: -len(".json")]] = json.loads(entry.read_text())
    return out


def preset_names() -> list[str]:
    names = []
    for stem, doc in sorted(_bundled().items()):
        names.append(stem)
        names.extend(v["slug"] for v in doc.get("variants", []))
    return names


def load_preset(name: str) -> dict:
    """A preset file by stem (``reference``) or one of its variants by slug (``crown-18l``)."""
    presets = _bundled()
    if name in presets:
        return copy.deepcopy(presets[name])
    for doc in presets.values():
        for v in doc.get("variants", []):
            if v["slug"] == name:
                doc = copy.deepcopy(doc)
                doc["select"] = name
                return doc
    raise UnknownPresetError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")


def load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InvalidArgumentError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{path}: invalid JSON ({exc})") from None
    if "model" not in doc:
        raise InvalidArgumentError(f"{path}: config needs a 'model' section")
    return doc


def skeleton_of(doc: dict) -> Skeleton:
    return Skeleton.from_dict(doc["model"])


def train_config_of(doc: dict, **overrides) -> TrainConfig:
    fields = dict(doc.get("train", {}))
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(fields)


def variants_of(doc: dict) -> list[tuple[str, ScalingSpec]]:
    """Named specs in ``doc``, equalized when the config asks for it."""
    if "variants" in doc:
        entries = [
            (v.get("slug", v["name"]), v["name"], ScalingSpec.from_dict(v["scaling"]))
            for v in doc["variants"]
        ]
    elif "scaling" in doc:
        entries = [("run", doc.get("name", "run"), ScalingSpec.from_dict(doc["scaling"]))]
    else:
        raise InvalidArgumentError("config needs a 'scaling' spec or a 'variants' list")

    eq = doc.get("equalize")
    if eq:
        sk = skeleton_of(doc)
        target = eq["target"]
        if isinstance(target, str):
            match = [spec for slug, name, spec in entries if target in (slug, name)]
            if not match:
                raise InvalidArgumentError(f"equalize target {target!r} is not a variant")
            target = count_params(sk.resolve(match[0])).total
        tol = eq.get("tolerance", 0.01)
        entries = [(slug, name, equalize_budget(spec, sk, int(target), tol)) for slug, name, spec in entries]

    selected = doc.get("select")
    if selected:
        entries = [e for e in entries if e[0] == selected]
    return [(name, spec) for _, name, spec in entries]


def reported_counts(doc: dict) -> dict[str, dict]:
    """Published parameter counts carried by a preset, keyed by variant name."""
    return {v["name"]: v["reported"] for v in doc.get("variants", []) if "reported" in v}

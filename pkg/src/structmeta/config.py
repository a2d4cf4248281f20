"""Flat ``key = value`` configuration files.

One format serves training configs (every :class:`MetaConfig` and
:class:`HyperParams` field, plus ``profile``) and synthetic corpus specs::

    # desk run
    profile = desk
    beta = 2.0
    hidden = 32

Blank lines and ``#`` comments are ignored.  Later assignments win, and
``key=value`` overrides given on the command line are applied last.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

from .data import FamilySpec
from .meta import MetaConfig
from .model import HyperParams

PROFILES = ("desk", "full")


class ConfigError(ValueError):
    pass


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    return parse_pairs("\n".join(items), "--set")


def read_pairs(path: str | Path | None, overrides: Iterable[str] = ()) -> dict[str, str]:
    pairs = {} if path is None else parse_pairs(Path(path).read_text(encoding="utf-8"), str(path))
    pairs.update(parse_overrides(overrides))
    return pairs


def _coerce(name: str, value: str, annotation) -> typing.Any:
    kinds = typing.get_args(annotation) if isinstance(annotation, types.UnionType) else (annotation,)
    if value.lower() in ("none", "null", "") and type(None) in kinds:
        return None
    for kind in kinds:
        try:
            if kind is bool:
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(value)
            if kind is int:
                return int(value)
            if kind is float:
                return float(value)
            if kind is str:
                return value
        except ValueError:
            continue
    raise ConfigError(f"{name}: cannot read {value!r} as {annotation}")


def _field_types(cls) -> dict[str, typing.Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


@dataclass
class RunConfig:
    """Resolved training configuration; model sizes wait for the vocabulary size."""

    profile: str = "desk"
    meta: MetaConfig = field(default_factory=MetaConfig.desk)
    model: dict[str, typing.Any] = field(default_factory=dict)

    def hyperparams(self, vocab_size: int) -> HyperParams:
        if self.profile == "desk":
            return HyperParams.desk(vocab_size, **self.model)
        return HyperParams(vocab_size=vocab_size, **self.model)

    def resolved(self) -> dict[str, typing.Any]:
        """Every setting with defaults filled in (vocabulary size excluded)."""
        hp = self.hyperparams(1)
        model = {k: v for k, v in dataclasses.asdict(hp).items() if k != "vocab_size"}
        return {"profile": self.profile, **dataclasses.asdict(self.meta), **model}


def run_config(pairs: Mapping[str, str]) -> RunConfig:
    pairs = dict(pairs)
    profile = pairs.pop("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"profile: expected one of {PROFILES}, got {profile!r}")
    meta_types = _field_types(MetaConfig)
    model_types = {k: v for k, v in _field_types(HyperParams).items() if k != "vocab_size"}
    meta_kw, model_kw = {}, {}
    for key, value in pairs.items():
        if key in meta_types:
            meta_kw[key] = _coerce(key, value, meta_types[key])
        elif key in model_types:
            model_kw[key] = _coerce(key, value, model_types[key])
        else:
            raise ConfigError(f"{key}: unknown setting")
    try:
        meta = MetaConfig.desk(**meta_kw) if profile == "desk" else MetaConfig(**meta_kw)
        cfg = RunConfig(profile, meta, model_kw)
        cfg.hyperparams(1)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return cfg


def load_run_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    return run_config(read_pairs(path, overrides))


def family_spec(pairs: Mapping[str, str]) -> FamilySpec:
    """Build a :class:`FamilySpec`; ``alphabet`` is required.

    Families are given as ``family.<name> = member, member``; without any,
    the default three families are used.  ``held_out`` is a comma list.
    """
    pairs = dict(pairs)
    if "alphabet" not in pairs:
        raise ConfigError("alphabet: required field missing from corpus spec")
    families = {}
    for key in [k for k in pairs if k.startswith("family.")]:
        families[key[len("family."):]] = [m.strip() for m in pairs.pop(key).split(",") if m.strip()]
    kw: dict[str, typing.Any] = {}
    if families:
        kw["families"] = families
    if "held_out" in pairs:
        kw["held_out"] = [m.strip() for m in pairs.pop("held_out").split(",") if m.strip()]
    types_ = _field_types(FamilySpec)
    for key, value in pairs.items():
        if key not in types_ or key in ("families", "held_out"):
            raise ConfigError(f"{key}: unknown corpus spec field")
        kw[key] = _coerce(key, value, int)
    spec = FamilySpec(**kw)
    try:
        spec.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return spec


def load_family_spec(path: str | Path | None = None, overrides: Iterable[str] = ()) -> FamilySpec:
    if path is None and not overrides:
        return FamilySpec()
    pairs = read_pairs(path, overrides)
    if path is None:
        pairs.setdefault("alphabet", str(FamilySpec().alphabet))
    return family_spec(pairs)


def spec_pairs(spec: FamilySpec) -> dict[str, str]:
    """Inverse of :func:`family_spec` (used to record specs in manifests)."""
    out = {f"family.{k}": ", ".join(v) for k, v in spec.families.items()}
    for f in dataclasses.fields(FamilySpec):
        if f.name not in ("families", "held_out"):
            out[f.name] = str(getattr(spec, f.name))
    held = spec.held_out if spec.held_out is not None else sorted(spec.held_out_members())
    out["held_out"] = ", ".join(held)
    return out

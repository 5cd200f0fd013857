"""Flat key = value run configuration: parsing, validation, canonical text.

One run is fully described by a RunConfig. The file format is a single flat
namespace, one `key = value` per line, `#` starts a comment. Keys reuse the
MloConfig and ModelDims field names verbatim; synthetic-data overrides carry
a `synth_` prefix so the two `patch_size` notions cannot collide.

The canonical serializer and the parser are a fixpoint pair:
parse(serialize(parse(text))) == parse(text) for every accepted text.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

from .data import SynthSpec
from .engine import NEVER, MloConfig
from .masking import ConfigError, FixedRatio, LinearRatio
from .nn import ModelDims

ENV_SEED = "MLOMAE_SEED"


@dataclass
class RunConfig:
    """Everything a training run needs, file-format facing."""

    mlo: MloConfig = field(default_factory=MloConfig)
    dims: ModelDims = field(default_factory=ModelDims)
    synth: SynthSpec = field(default_factory=SynthSpec)
    dataset: str = "synthetic"  # "synthetic" | "cifar10:<dir>"
    augment: str = "none"
    out_dir: str = "runs/default"
    checkpoint_every: int = 0  # 0: final checkpoint only

    def validate(self) -> None:
        self.mlo.validate()
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        kind = dataset_kind(self.dataset)
        if kind == "synthetic":
            if self.synth.side != self.dims.image_side:
                raise ConfigError(
                    f"synth_side {self.synth.side} != image_side {self.dims.image_side}")
            if self.synth.channels != self.dims.channels:
                raise ConfigError(
                    f"synth_channels {self.synth.channels} != channels {self.dims.channels}")
            if self.synth.patch_size != self.dims.patch_size:
                raise ConfigError(
                    f"synth_patch_size {self.synth.patch_size} != patch_size {self.dims.patch_size}")
            if self.synth.num_classes != self.dims.num_classes:
                raise ConfigError(
                    f"synth_num_classes {self.synth.num_classes} != num_classes {self.dims.num_classes}")
        from .data import parse_augment_policy

        parse_augment_policy(self.augment)


def dataset_kind(selector: str) -> str:
    if selector == "synthetic":
        return "synthetic"
    if selector.startswith("cifar10:") and len(selector) > len("cifar10:"):
        return "cifar10"
    raise ConfigError(f"dataset must be 'synthetic' or 'cifar10:<dir>', got {selector!r}")


def cifar_path(selector: str) -> str:
    if dataset_kind(selector) != "cifar10":
        raise ConfigError(f"not a cifar10 selector: {selector!r}")
    return selector.split(":", 1)[1]


# key -> (section, value kind). Kinds drive both parsing and serialization.
_MLO_KINDS = {
    "lr_E": "float", "lr_C": "float", "lr_T": "float",
    "unroll_E": "int", "unroll_C": "int",
    "betas": "float_pair", "weight_decay": "float",
    "ratio_schedule": "schedule", "fda_eps_scale": "float",
    "t_update_every": "every", "mode": "mode", "gamma": "float",
    "total_epochs": "int", "batch_size": "int", "seed": "int",
    "oracle_mode": "bool",
}
_DIMS_KINDS = {
    "image_side": "int", "channels": "int", "patch_size": "int",
    "emb_dim": "int", "dec_dim": "int", "enc_blocks": "int",
    "dec_blocks": "int", "heads": "int", "num_classes": "int",
    "mask_hidden": "int",
}
_SYNTH_KINDS = {
    "synth_side": "int", "synth_channels": "int", "synth_patch_size": "int",
    "synth_num_classes": "int", "synth_informative": "int_list",
    "synth_amplitude": "float", "synth_noise": "float",
    "synth_samples_per_class": "int",
}
_RUN_KINDS = {
    "dataset": "str", "augment": "str", "out_dir": "str",
    "checkpoint_every": "int",
}
_ALL_KINDS = {**_MLO_KINDS, **_DIMS_KINDS, **_SYNTH_KINDS, **_RUN_KINDS}

assert set(_MLO_KINDS) == {f.name for f in fields(MloConfig)}
assert set(_DIMS_KINDS) == {f.name for f in fields(ModelDims)}
assert {k[len("synth_"):] for k in _SYNTH_KINDS} == {f.name for f in fields(SynthSpec)}


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw, 10)
    except ValueError:
        raise ConfigError(f"{key}: expected integer, got {raw!r}") from None


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected number, got {raw!r}") from None


def _parse_value(key: str, kind: str, raw: str):
    if kind == "int":
        return _parse_int(key, raw)
    if kind == "float":
        return _parse_float(key, raw)
    if kind == "bool":
        low = raw.lower()
        if low not in ("true", "false"):
            raise ConfigError(f"{key}: expected true or false, got {raw!r}")
        return low == "true"
    if kind == "str":
        return raw
    if kind == "mode":
        if raw not in ("MLO", "BLO"):
            raise ConfigError(f"{key}: expected MLO or BLO, got {raw!r}")
        return raw
    if kind == "every":
        if raw.lower() == "never":
            return NEVER
        return _parse_int(key, raw)
    if kind == "float_pair":
        parts = [p.strip() for p in raw.split(",")]
        if len(parts) != 2:
            raise ConfigError(f"{key}: expected two comma-separated numbers, got {raw!r}")
        return (_parse_float(key, parts[0]), _parse_float(key, parts[1]))
    if kind == "int_list":
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}")
        return tuple(_parse_int(key, p) for p in parts)
    if kind == "schedule":
        return parse_schedule(key, raw)
    raise AssertionError(f"unhandled kind {kind}")


def parse_schedule(key: str, raw: str) -> FixedRatio | LinearRatio:
    parts = raw.split(":")
    if parts[0] == "fixed" and len(parts) == 2:
        return FixedRatio(_parse_float(key, parts[1]))
    if parts[0] == "linear" and len(parts) == 4:
        return LinearRatio(_parse_float(key, parts[1]), _parse_float(key, parts[2]),
                           _parse_int(key, parts[3]))
    raise ConfigError(
        f"{key}: expected fixed:<r> or linear:<start>:<end>:<steps>, got {raw!r}")


def _format_value(kind: str, value) -> str:
    if kind == "int":
        return str(value)
    if kind == "float":
        return repr(float(value))
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("str", "mode"):
        return str(value)
    if kind == "every":
        return "never" if value >= NEVER else str(value)
    if kind == "float_pair":
        return f"{value[0]!r},{value[1]!r}"
    if kind == "int_list":
        return ",".join(str(v) for v in value)
    if kind == "schedule":
        if isinstance(value, FixedRatio):
            return f"fixed:{value.ratio!r}"
        if isinstance(value, LinearRatio):
            return f"linear:{value.start!r}:{value.end!r}:{value.total_steps}"
        raise ConfigError(f"unknown schedule type {type(value).__name__}")
    raise AssertionError(f"unhandled kind {kind}")


def parse_run_config(text: str) -> RunConfig:
    """Parse flat key = value text. Errors carry the offending line number."""
    seen: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _ALL_KINDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if not raw:
            raise ConfigError(f"line {lineno}: {key} has empty value")
        try:
            seen[key] = _parse_value(key, _ALL_KINDS[key], raw)
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    return build_run_config(seen)


def build_run_config(overrides: dict[str, object]) -> RunConfig:
    """Assemble a validated RunConfig from a flat key -> value dict."""
    mlo_kw = {k: v for k, v in overrides.items() if k in _MLO_KINDS}
    dims_kw = {k: v for k, v in overrides.items() if k in _DIMS_KINDS}
    synth_kw = {k[len("synth_"):]: v for k, v in overrides.items() if k in _SYNTH_KINDS}
    run_kw = {k: v for k, v in overrides.items() if k in _RUN_KINDS}
    unknown = set(overrides) - set(_ALL_KINDS)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    rc = RunConfig(mlo=MloConfig(**mlo_kw), dims=ModelDims(**dims_kw),
                   synth=SynthSpec(**synth_kw), **run_kw)
    rc.validate()
    return rc


_SECTIONS = (
    ("optimization", _MLO_KINDS),
    ("model", _DIMS_KINDS),
    ("data", {**_RUN_KINDS, **_SYNTH_KINDS}),
)


def serialize_run_config(rc: RunConfig) -> str:
    """Canonical text form; stable key order, round-trips through the parser."""
    out = []
    for title, kinds in _SECTIONS:
        out.append(f"# {title}")
        for key, kind in kinds.items():
            if key in _MLO_KINDS:
                value = getattr(rc.mlo, key)
            elif key in _DIMS_KINDS:
                value = getattr(rc.dims, key)
            elif key in _SYNTH_KINDS:
                value = getattr(rc.synth, key[len("synth_"):])
            else:
                value = getattr(rc, key)
            out.append(f"{key} = {_format_value(kind, value)}")
        out.append("")
    return "\n".join(out)


def load_run_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_run_config(fh.read())


def env_seed_override() -> int | None:
    """MLOMAE_SEED beats the config file seed when set."""
    raw = os.environ.get(ENV_SEED)
    if raw is None or raw == "":
        return None
    try:
        return int(raw, 10)
    except ValueError:
        raise ConfigError(f"{ENV_SEED}: expected integer, got {raw!r}") from None

"""Training checkpoints over the MLOM tensor container.

A checkpoint is self-describing enough to rebuild the four models (dims are
stored numerically) and to resume bit-identically (optimizer moments, step
counters, stream-consumption counters). The run's MloConfig is not stored;
resume re-reads it from the config file and the seed is cross-checked.

Key layout inside the container:
    param.<role>.<name>        parameter tensors, role in {E, D, C, T}
    opt.<role>.m.<name>        AdamW first moment
    opt.<role>.v.<name>        AdamW second moment
    opt.<role>.t.<name>        per-parameter step counter, scalar
    meta.core                  [seed, outer_step, total_steps, consumed_u,
                                consumed_tr, consumed_val, mask_ratio]
    meta.dims                  ModelDims fields in declaration order
    meta.synth.core            synthetic-data scalars (absent for cifar runs)
    meta.synth.informative     informative patch set (absent for cifar runs)

save -> load -> save is byte identical: every array round-trips as float64
and the writer sorts keys itself.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .container import read_container, write_container
from .data import SynthSpec
from .engine import MloConfig, TrainState, _sched_pos, init_train_state
from .masking import ConfigError, mask_ratio_at
from .nn import ModelDims

ROLES = ("E", "D", "C", "T")

_DIMS_FIELDS = tuple(f.name for f in fields(ModelDims))
_SYNTH_SCALARS = ("side", "channels", "patch_size", "num_classes",
                  "amplitude", "noise", "samples_per_class")
_CORE_FIELDS = ("seed", "outer_step", "total_steps",
                "consumed_u", "consumed_tr", "consumed_val")


@dataclass
class CheckpointData:
    version: int
    seed: int
    outer_step: int
    total_steps: int
    consumed_u: int
    consumed_tr: int
    consumed_val: int
    mask_ratio: float
    dims: ModelDims
    synth: SynthSpec | None
    # role -> name -> array
    params: dict[str, dict[str, np.ndarray]]
    # role -> name -> (m, v, t)
    opt: dict[str, dict[str, tuple[np.ndarray, np.ndarray, int]]]


def _role_members(state: TrainState):
    yield "E", state.E, state.opt_E
    yield "D", state.D, state.opt_D
    yield "C", state.C, state.opt_C
    yield "T", state.T, state.opt_T


def save_checkpoint(path: str, state: TrainState, synth: SynthSpec | None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for role, pset, opt in _role_members(state):
        for name, p in pset.items():
            tensors[f"param.{role}.{name}"] = p.data
            st = opt.states[name]
            tensors[f"opt.{role}.m.{name}"] = st.m
            tensors[f"opt.{role}.v.{name}"] = st.v
            tensors[f"opt.{role}.t.{name}"] = np.asarray(float(st.t))
    ratio = mask_ratio_at(_sched_pos(state), state.cfg.ratio_schedule)
    core = [float(getattr(state, f)) if f != "seed" else float(state.cfg.seed)
            for f in _CORE_FIELDS]
    tensors["meta.core"] = np.asarray(core + [ratio])
    tensors["meta.dims"] = np.asarray([float(getattr(state.dims, f)) for f in _DIMS_FIELDS])
    if synth is not None:
        tensors["meta.synth.core"] = np.asarray(
            [float(getattr(synth, f)) for f in _SYNTH_SCALARS])
        tensors["meta.synth.informative"] = np.asarray(
            [float(i) for i in synth.informative])
    write_container(path, tensors)


def load_checkpoint(path: str) -> CheckpointData:
    version, tensors = read_container(path)
    for required in ("meta.core", "meta.dims"):
        if required not in tensors:
            raise ConfigError(f"checkpoint missing {required}")
    core = tensors["meta.core"]
    if core.shape != (len(_CORE_FIELDS) + 1,):
        raise ConfigError(f"meta.core has shape {core.shape}")
    dims_vec = tensors["meta.dims"]
    if dims_vec.shape != (len(_DIMS_FIELDS),):
        raise ConfigError(f"meta.dims has shape {dims_vec.shape}")
    dims = ModelDims(**{f: int(v) for f, v in zip(_DIMS_FIELDS, dims_vec)})

    synth = None
    if "meta.synth.core" in tensors:
        sc = tensors["meta.synth.core"]
        if sc.shape != (len(_SYNTH_SCALARS),):
            raise ConfigError(f"meta.synth.core has shape {sc.shape}")
        kw = {}
        for f, v in zip(_SYNTH_SCALARS, sc):
            kw[f] = float(v) if f in ("amplitude", "noise") else int(v)
        kw["informative"] = tuple(
            int(i) for i in tensors.get("meta.synth.informative", np.asarray([])))
        synth = SynthSpec(**kw)

    params: dict[str, dict[str, np.ndarray]] = {r: {} for r in ROLES}
    opt_m: dict[str, dict[str, np.ndarray]] = {r: {} for r in ROLES}
    opt_v: dict[str, dict[str, np.ndarray]] = {r: {} for r in ROLES}
    opt_t: dict[str, dict[str, int]] = {r: {} for r in ROLES}
    for key, value in tensors.items():
        if key.startswith("meta."):
            continue
        parts = key.split(".", 2)
        if parts[0] == "param":
            if len(parts) != 3 or parts[1] not in ROLES:
                raise ConfigError(f"malformed checkpoint key {key!r}")
            params[parts[1]][parts[2]] = value
        elif parts[0] == "opt":
            sub = parts[2].split(".", 1)
            if len(parts) != 3 or parts[1] not in ROLES or len(sub) != 2:
                raise ConfigError(f"malformed checkpoint key {key!r}")
            slot, name = sub
            if slot == "m":
                opt_m[parts[1]][name] = value
            elif slot == "v":
                opt_v[parts[1]][name] = value
            elif slot == "t":
                opt_t[parts[1]][name] = int(value.reshape(-1)[0])
            else:
                raise ConfigError(f"malformed checkpoint key {key!r}")
        else:
            raise ConfigError(f"malformed checkpoint key {key!r}")

    opt: dict[str, dict[str, tuple[np.ndarray, np.ndarray, int]]] = {}
    for role in ROLES:
        if set(params[role]) != set(opt_m[role]) or set(params[role]) != set(opt_t[role]):
            raise ConfigError(f"checkpoint role {role} has mismatched param/opt keys")
        opt[role] = {n: (opt_m[role][n], opt_v[role][n], opt_t[role][n])
                     for n in params[role]}
    return CheckpointData(
        version=version, seed=int(core[0]), outer_step=int(core[1]),
        total_steps=int(core[2]), consumed_u=int(core[3]),
        consumed_tr=int(core[4]), consumed_val=int(core[5]),
        mask_ratio=float(core[6]), dims=dims, synth=synth,
        params=params, opt=opt)


def restore_train_state(ck: CheckpointData, cfg: MloConfig) -> TrainState:
    """Rebuild a TrainState that continues the checkpointed run bit-identically."""
    if cfg.seed != ck.seed:
        raise ConfigError(f"config seed {cfg.seed} != checkpoint seed {ck.seed}")
    state = init_train_state(ck.dims, cfg, total_steps=ck.total_steps)
    for role, pset, opt in _role_members(state):
        have = {n for n, _ in pset.items()}
        if have != set(ck.params[role]):
            raise ConfigError(f"checkpoint role {role} params do not match model shape")
        pset.load_values(ck.params[role])
        for name, (m, v, t) in ck.opt[role].items():
            st = opt.states[name]
            if m.shape != st.m.shape:
                raise ConfigError(f"opt.{role}.m.{name} has shape {m.shape}")
            st.m = m.copy()
            st.v = v.copy()
            st.t = t
    state.outer_step = ck.outer_step
    state.consumed_u = ck.consumed_u
    state.consumed_tr = ck.consumed_tr
    state.consumed_val = ck.consumed_val
    return state

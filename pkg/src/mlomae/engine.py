"""Three-level training engine.

Outer loop per step: stage 1 trains encoder+decoder on the probability-weighted
masked reconstruction; stage 2 trains the head on frozen features; stage 3
updates the masking network with an approximate hypergradient of the held-out
classification loss. The hypergradient follows the one-step unrolled chain
rule, with every Jacobian-vector product replaced by a bi-directional finite
difference (fda_jvp); the top-k selection itself is treated as constant, so T
feels gradients only through the loss weights.

A BLO variant collapses the first two levels into one joint update with a
gamma-weighted sum of both losses; its upper level reuses the same FDA
machinery (the C' cotangent drops out exactly because the reconstruction term
never touches C).

oracle_mode switches the inner updates to plain SGD with constant lrs so the
whole-pipeline finite-difference oracle matches the derivation exactly.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetBundle, augment, batches
from .errors import ConfigError, NumericAbort, StateError
from .masking import (FixedRatio, LinearRatio, MaskSelection, mask_ratio_at,
                      select_mask, weighted_recon_loss)
from .nn import (ModelDims, ParamSet, classify_logits, decoder_forward,
                 encoder_forward, init_head, init_models, masking_net_forward,
                 patchify)
from .optim import SetOptimizer, cosine_lr
from .tensor import (GradMap, Tape, Tensor, add, add_bias, concat_rows,
                     cross_entropy_logits, matmul, reshape, scale)

MODES = ("MLO", "BLO")
NEVER = 10 ** 9  # t_update_every value that never fires within a run


@dataclass(frozen=True)
class MloConfig:
    # lr_T sits just under a sharp cliff: at ~2e-3 the early uniform up-push
    # rails the per-patch sigmoids before the informative/uninformative split
    # emerges, and a railed logit gets no further gradient. batch 8 doubles
    # the masking-net updates per data pass, which is what lets the split
    # finish before the validation head saturates and the signal fades.
    lr_E: float = 3e-3
    lr_C: float = 6e-3
    lr_T: float = 1.2e-3
    unroll_E: int = 2
    unroll_C: int = 2
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    ratio_schedule: object = field(default_factory=lambda: FixedRatio(0.75))
    fda_eps_scale: float = 0.01
    t_update_every: int = 1
    mode: str = "MLO"
    gamma: float = 1.0
    total_epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    oracle_mode: bool = False

    def validate(self) -> None:
        for name in ("lr_E", "lr_C", "lr_T"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.unroll_E < 1 or self.unroll_C < 1:
            raise ConfigError("unroll_E and unroll_C must be >= 1")
        b1, b2 = self.betas
        if not (0.0 < b1 < 1.0 and 0.0 < b2 < 1.0):
            raise ConfigError(f"betas must lie in (0, 1), got {self.betas}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not isinstance(self.ratio_schedule, (FixedRatio, LinearRatio)):
            raise ConfigError(f"bad ratio schedule {self.ratio_schedule!r}")
        if self.fda_eps_scale <= 0:
            raise ConfigError("fda_eps_scale must be > 0")
        if self.t_update_every < 1:
            raise ConfigError("t_update_every must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "BLO" and self.gamma <= 0:
            raise ConfigError(f"BLO mode requires gamma > 0, got {self.gamma}")
        if self.total_epochs < 0 or self.batch_size < 1:
            raise ConfigError("total_epochs >= 0 and batch_size >= 1 required")


@dataclass
class Stage1Context:
    """Everything stage 3 needs to re-evaluate grad_T L_rec at a perturbed E."""

    grids: list[np.ndarray]
    sels: list[MaskSelection]
    ratio: float
    eta_eff: float
    loss_value: float


@dataclass
class Stage2Context:
    grids: list[np.ndarray]
    labels: np.ndarray
    eta_eff: float
    c_base: dict[str, np.ndarray]  # C values before the last inner step
    loss_value: float


@dataclass
class HypergradReport:
    grad_T: GradMap
    direct_term: GradMap  # identically zero: the val loss never consumes T
    e_path_term: GradMap
    c_path_term: GradMap
    fda_eps_used: float


@dataclass
class MetricsRow:
    step: int
    epoch: int
    recon_loss: float
    train_cls_loss: float
    val_cls_loss: float
    val_accuracy: float
    mask_ratio: float
    lr_E: float
    lr_C: float
    lr_T: float
    wallclock_ms: float


@dataclass
class TrainState:
    dims: ModelDims
    cfg: MloConfig
    E: ParamSet
    D: ParamSet
    C: ParamSet
    T: ParamSet
    opt_E: SetOptimizer
    opt_D: SetOptimizer
    opt_C: SetOptimizer
    opt_T: SetOptimizer
    outer_step: int = 0  # 1-based index of the step being run; 0 before training
    total_steps: int = 1
    consumed_u: int = 0
    consumed_tr: int = 0
    consumed_val: int = 0
    s1_ctx: Stage1Context | None = None
    s2_ctx: Stage2Context | None = None


def init_train_state(dims: ModelDims, cfg: MloConfig, total_steps: int = 1) -> TrainState:
    cfg.validate()
    e, d, c, t = init_models(dims, cfg.seed)
    mk = lambda ps: SetOptimizer(ps, cfg.betas, cfg.weight_decay, plain_sgd=cfg.oracle_mode)
    return TrainState(dims=dims, cfg=cfg, E=e, D=d, C=c, T=t,
                      opt_E=mk(e), opt_D=mk(d), opt_C=mk(c), opt_T=mk(t),
                      total_steps=max(1, total_steps))


def _sched_pos(state: TrainState) -> int:
    return min(max(state.outer_step - 1, 0), state.total_steps)


def _eff_lr(state: TrainState, base: float) -> float:
    if state.cfg.oracle_mode:
        return base
    return cosine_lr(_sched_pos(state), state.total_steps, base, 0.0)


def _require_finite(value: float, step: int, what: str) -> float:
    if not math.isfinite(value):
        raise NumericAbort(step, what)
    return value


# ---------------------------------------------------------------------------
# batch losses


def recon_loss_forward(e_set: ParamSet, d_set: ParamSet, t_set: ParamSet,
                       grids: list[np.ndarray], dims: ModelDims,
                       ratio: float | None = None,
                       sels: list[MaskSelection] | None = None):
    """Mean over the batch of the weighted reconstruction loss.

    When sels is given the stored selections are held fixed (stage 3 re-uses
    the stage-1 masks); otherwise each image's mask is selected from the live
    probabilities at `ratio`.
    """
    if not grids:
        raise ConfigError("empty batch")
    totals = []
    out_sels: list[MaskSelection] = []
    for i, grid_np in enumerate(grids):
        grid = Tensor(grid_np)
        probs = masking_net_forward(t_set, grid, dims)
        sel = sels[i] if sels is not None else select_mask(probs, ratio)
        out_sels.append(sel)
        tokens = encoder_forward(e_set, grid, sel.visible_idx, dims)
        pred = decoder_forward(d_set, tokens, sel.visible_idx, sel.masked_idx, dims)
        totals.append(weighted_recon_loss(sel, pred, grid_np, probs).total)
    loss = totals[0]
    for t in totals[1:]:
        loss = add(loss, t)
    return scale(loss, 1.0 / len(totals)), out_sels


def batch_cls_logits(e_set: ParamSet, c_set: ParamSet, grids: list[np.ndarray],
                     dims: ModelDims) -> Tensor:
    rows = [reshape(classify_logits(e_set, c_set, Tensor(g), dims), (1, dims.num_classes))
            for g in grids]
    return rows[0] if len(rows) == 1 else concat_rows(rows)


def batch_cls_loss(e_set: ParamSet, c_set: ParamSet, grids: list[np.ndarray],
                   labels, dims: ModelDims) -> Tensor:
    return cross_entropy_logits(batch_cls_logits(e_set, c_set, grids, dims), labels)


def evaluate_split(e_set: ParamSet, c_set: ParamSet, grids: list[np.ndarray],
                   labels, dims: ModelDims) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) without recording a tape."""
    labels = np.asarray(labels, dtype=np.int64)
    logits = batch_cls_logits(e_set, c_set, grids, dims).data
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(len(labels)), labels]))
    acc = float(np.mean(logits.argmax(axis=1) == labels))
    return loss, acc


# ---------------------------------------------------------------------------
# stages


def stage1_update(state: TrainState, grids: list[np.ndarray]) -> Stage1Context:
    """unroll_E reconstruction steps on one batch with T frozen."""
    cfg, dims = state.cfg, state.dims
    ratio = mask_ratio_at(_sched_pos(state), cfg.ratio_schedule)
    lr = _eff_lr(state, cfg.lr_E)
    params = state.E.tensors() + state.D.tensors()
    sels: list[MaskSelection] = []
    loss_value = math.nan
    for _ in range(cfg.unroll_E):
        with Tape() as tape:
            loss, sels = recon_loss_forward(state.E, state.D, state.T, grids, dims, ratio=ratio)
        loss_value = _require_finite(loss.item(), state.outer_step, "recon_loss")
        grads = tape.backward(loss, params=params)
        state.opt_E.step(grads, lr)
        state.opt_D.step(grads, lr)
    ctx = Stage1Context(grids=grids, sels=sels, ratio=ratio, eta_eff=lr, loss_value=loss_value)
    state.s1_ctx = ctx
    return ctx


def stage2_update(state: TrainState, grids: list[np.ndarray], labels) -> Stage2Context:
    """unroll_C head-only classification steps on one batch with E frozen."""
    cfg, dims = state.cfg, state.dims
    labels = np.asarray(labels, dtype=np.int64)
    if not grids:
        raise ConfigError("empty batch")
    lr = _eff_lr(state, cfg.lr_C)
    c_base = state.C.snapshot()
    loss_value = math.nan
    for _ in range(cfg.unroll_C):
        c_base = state.C.snapshot()  # value before the LAST inner step
        with Tape() as tape:
            loss = batch_cls_loss(state.E, state.C, grids, labels, dims)
        loss_value = _require_finite(loss.item(), state.outer_step, "train_cls_loss")
        grads = tape.backward(loss, params=state.C.tensors())
        state.opt_C.step(grads, lr)
    ctx = Stage2Context(grids=grids, labels=labels, eta_eff=lr, c_base=c_base,
                        loss_value=loss_value)
    state.s2_ctx = ctx
    return ctx


def fda_jvp(loss_grad_fn, base_params: dict[str, Tensor], direction: GradMap,
            eps_scale: float, base_values: dict[str, np.ndarray] | None = None
            ) -> tuple[GradMap, float]:
    """Bi-directional finite-difference JVP.

    Perturbs base_params to base +/- eps*direction with eps = eps_scale/||v||
    (global L2 norm), calls loss_grad_fn() at both points, and returns the
    central difference. Live parameter values are restored bit-exactly. A zero
    direction short-circuits to an empty (all-zero) GradMap with eps 0.
    """
    norm = math.sqrt(sum(float(np.dot(direction[p].reshape(-1), direction[p].reshape(-1)))
                         for p in base_params.values()))
    if norm == 0.0:
        return GradMap(), 0.0
    eps = eps_scale / norm
    saved = {k: p.data for k, p in base_params.items()}
    base = base_values if base_values is not None else saved
    try:
        for k, p in base_params.items():
            p.data = base[k] + eps * direction[p]
        g_plus = loss_grad_fn()
        for k, p in base_params.items():
            p.data = base[k] - eps * direction[p]
        g_minus = loss_grad_fn()
    finally:
        for k, p in base_params.items():
            p.data = saved[k]
    out = GradMap()
    inv = 1.0 / (2.0 * eps)
    for t, gp in g_plus.items():
        out.set(t, (gp - g_minus[t]) * inv)
    return out, eps


def _restrict(gmap: GradMap, params: ParamSet) -> GradMap:
    out = GradMap()
    for p in params.tensors():
        out.set(p, gmap[p])
    return out


def _zeros_map(params: ParamSet) -> GradMap:
    out = GradMap()
    for p in params.tensors():
        out.set(p, np.zeros_like(p.data))
    return out


def stage3_hypergrad(state: TrainState, val_grids: list[np.ndarray], val_labels,
                     cpath_sign: float = 1.0) -> HypergradReport:
    """Masking-network hypergradient; applies the T update when the step is due.

    Order: (1) one validation backward gives v_E and w_C; (2) the C-path
    cotangent is pulled back to encoder space with an FDA around the
    pre-update C; (3) v = v_E + u; (4) one FDA around the post-update E', on
    the retained stage-1 batch and mask selection, gives grad_T; a second FDA
    with direction v_E alone splits the report into e/c path terms whose sum
    is exactly grad_T. The direct term is identically zero. cpath_sign is a
    test hook used by the gradient-check command to demonstrate that the
    oracle catches a sign error on the C path.
    """
    cfg, dims = state.cfg, state.dims
    s1, s2 = state.s1_ctx, state.s2_ctx
    if s1 is None or s2 is None:
        raise StateError("stage3_hypergrad requires stage1 and stage2 contexts")
    val_labels = np.asarray(val_labels, dtype=np.int64)

    with Tape() as tape:
        val_loss = batch_cls_loss(state.E, state.C, val_grids, val_labels, dims)
    _require_finite(val_loss.item(), state.outer_step, "val_cls_loss")
    g_val = tape.backward(val_loss, params=state.E.tensors() + state.C.tensors())
    v_e = _restrict(g_val, state.E)
    w_c = _restrict(g_val, state.C)

    def train_cls_grad_wrt_E() -> GradMap:
        with Tape() as t:
            loss = batch_cls_loss(state.E, state.C, s2.grids, s2.labels, dims)
        return t.backward(loss, params=state.E.tensors())

    raw_u, _ = fda_jvp(train_cls_grad_wrt_E, state.C.params, w_c,
                       cfg.fda_eps_scale, base_values=s2.c_base)
    u = raw_u.scaled(-s2.eta_eff * cpath_sign)

    v = GradMap()
    for p in state.E.tensors():
        v.set(p, v_e[p] + u[p])

    def recon_grad_wrt_T() -> GradMap:
        with Tape() as t:
            loss, _ = recon_loss_forward(state.E, state.D, state.T, s1.grids,
                                         dims, sels=s1.sels)
        return t.backward(loss, params=state.T.tensors())

    raw_total, eps_used = fda_jvp(recon_grad_wrt_T, state.E.params, v, cfg.fda_eps_scale)
    grad_t = raw_total.scaled(-s1.eta_eff)
    if grad_t.norm() == 0.0 and not grad_t.items():
        grad_t = _zeros_map(state.T)

    if u.norm() == 0.0:
        e_path = grad_t
        c_path = _zeros_map(state.T)
    else:
        raw_e, _ = fda_jvp(recon_grad_wrt_T, state.E.params, v_e, cfg.fda_eps_scale)
        e_path = raw_e.scaled(-s1.eta_eff)
        if not e_path.items():
            e_path = _zeros_map(state.T)
        c_path = grad_t + e_path.scaled(-1.0)

    # report grad_T as the literal sum of its terms so the additivity
    # invariant holds bit-exactly, not just to rounding
    direct = _zeros_map(state.T)
    total = GradMap()
    for p in state.T.tensors():
        total.set(p, direct[p] + e_path[p] + c_path[p])
    report = HypergradReport(grad_T=total, direct_term=direct,
                             e_path_term=e_path, c_path_term=c_path,
                             fda_eps_used=eps_used)
    if state.outer_step % cfg.t_update_every == 0:
        state.opt_T.step(report.grad_T, _eff_lr(state, cfg.lr_T))
    return report


def blo_step(state: TrainState, u_grids: list[np.ndarray],
             tr_grids: list[np.ndarray], tr_labels,
             val_grids: list[np.ndarray], val_labels) -> dict:
    """Joint (E, D, C) update on L_cls + gamma * L_rec, then the T update.

    The upper level takes cotangents from the validation loss at the
    post-update parameters; only the E' cotangent survives because the
    reconstruction term is the sole path from T and it never touches C or the
    classification loss.
    """
    cfg, dims = state.cfg, state.dims
    if cfg.gamma <= 0:
        raise ConfigError(f"BLO requires gamma > 0, got {cfg.gamma}")
    tr_labels = np.asarray(tr_labels, dtype=np.int64)
    ratio = mask_ratio_at(_sched_pos(state), cfg.ratio_schedule)
    lr_e = _eff_lr(state, cfg.lr_E)
    lr_c = _eff_lr(state, cfg.lr_C)

    with Tape() as tape:
        recon, sels = recon_loss_forward(state.E, state.D, state.T, u_grids, dims, ratio=ratio)
        cls = batch_cls_loss(state.E, state.C, tr_grids, tr_labels, dims)
        joint = add(cls, scale(recon, cfg.gamma))
    recon_value = _require_finite(recon.item(), state.outer_step, "recon_loss")
    cls_value = _require_finite(cls.item(), state.outer_step, "train_cls_loss")
    grads = tape.backward(joint, params=state.E.tensors() + state.D.tensors() + state.C.tensors())
    state.opt_E.step(grads, lr_e)
    state.opt_D.step(grads, lr_e)
    state.opt_C.step(grads, lr_c)

    if state.outer_step % cfg.t_update_every == 0:
        with Tape() as tape:
            val_loss = batch_cls_loss(state.E, state.C, val_grids, val_labels, dims)
        _require_finite(val_loss.item(), state.outer_step, "val_cls_loss")
        g_val = tape.backward(val_loss, params=state.E.tensors())
        v_e = _restrict(g_val, state.E)

        def recon_grad_wrt_T() -> GradMap:
            with Tape() as t:
                loss, _ = recon_loss_forward(state.E, state.D, state.T, u_grids,
                                             dims, sels=sels)
                loss = scale(loss, cfg.gamma)
            return t.backward(loss, params=state.T.tensors())

        raw, _ = fda_jvp(recon_grad_wrt_T, state.E.params, v_e, cfg.fda_eps_scale)
        state.opt_T.step(raw.scaled(-lr_e), _eff_lr(state, cfg.lr_T))

    return {"recon_loss": recon_value, "train_cls_loss": cls_value, "ratio": ratio,
            "lr_E": lr_e, "lr_C": lr_c}


# ---------------------------------------------------------------------------
# training loop


class _BatchStream:
    """Stateless-resumable stream of index batches over n items."""

    def __init__(self, n: int, batch_size: int, seed: int, consumed: int = 0):
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self.consumed = consumed
        self.per_epoch = math.ceil(n / batch_size)
        self._epoch_cache: tuple[int, list[list[int]]] | None = None

    def next(self) -> tuple[int, list[int]]:
        epoch, pos = divmod(self.consumed, self.per_epoch)
        if self._epoch_cache is None or self._epoch_cache[0] != epoch:
            self._epoch_cache = (epoch, batches(list(range(self.n)), self.batch_size,
                                                self.seed, epoch))
        self.consumed += 1
        return epoch, self._epoch_cache[1][pos]


def _grids_for(images: list[np.ndarray], dims: ModelDims) -> list[np.ndarray]:
    return [patchify(img, dims.patch_size) for img in images]


def mlo_train(bundle: DatasetBundle, dims: ModelDims, cfg: MloConfig,
              on_step=None, state: TrainState | None = None,
              augment_policy: str = "none") -> tuple[TrainState, list[MetricsRow]]:
    """Run the outer loop for cfg.total_epochs passes over D_u.

    Returns the final state and the per-step metrics history. `on_step` is
    called with each MetricsRow as it is produced (the CLI streams these to
    the CSV and takes checkpoints). Passing a restored `state` resumes
    bit-identically: all shuffling is derived from (seed, stream, epoch), so
    stream positions are plain counters.
    """
    cfg.validate()
    if not bundle.d_tr or not bundle.d_val:
        raise ConfigError("bundle splits must be nonempty")
    if bundle.num_classes != dims.num_classes:
        raise ConfigError(
            f"bundle has {bundle.num_classes} classes but dims.num_classes={dims.num_classes}")

    grids_u = _grids_for(bundle.d_u, dims)
    grids_tr = _grids_for([im.pixels for im in bundle.d_tr], dims)
    labels_tr = np.array([im.label for im in bundle.d_tr], dtype=np.int64)
    grids_val = _grids_for([im.pixels for im in bundle.d_val], dims)
    labels_val = np.array([im.label for im in bundle.d_val], dtype=np.int64)

    per_epoch = math.ceil(len(grids_u) / cfg.batch_size)
    total_steps = cfg.total_epochs * per_epoch
    if state is None:
        state = init_train_state(dims, cfg, total_steps=max(1, total_steps))
    else:
        state.total_steps = max(1, total_steps)
    stream_u = _BatchStream(len(grids_u), cfg.batch_size, cfg.seed * 4 + 0, state.consumed_u)
    stream_tr = _BatchStream(len(grids_tr), cfg.batch_size, cfg.seed * 4 + 1, state.consumed_tr)
    stream_val = _BatchStream(len(grids_val), cfg.batch_size, cfg.seed * 4 + 2, state.consumed_val)

    history: list[MetricsRow] = []
    while state.outer_step < total_steps:
        t0 = time.perf_counter()
        state.outer_step += 1
        epoch, u_idx = stream_u.next()
        state.consumed_u = stream_u.consumed
        u_batch = _step_grids(grids_u, u_idx, bundle, dims, cfg, augment_policy,
                              epoch, state.consumed_u, unlabeled=True)

        if cfg.mode == "MLO":
            _, tr_idx = stream_tr.next()
            state.consumed_tr = stream_tr.consumed
            s1 = stage1_update(state, u_batch)
            s2 = stage2_update(state, [grids_tr[i] for i in tr_idx], labels_tr[tr_idx])
            recon_loss, cls_loss = s1.loss_value, s2.loss_value
            ratio = s1.ratio
            lr_e, lr_c = s1.eta_eff, s2.eta_eff
            if state.outer_step % cfg.t_update_every == 0:
                _, val_idx = stream_val.next()
                state.consumed_val = stream_val.consumed
                stage3_hypergrad(state, [grids_val[i] for i in val_idx], labels_val[val_idx])
        else:
            _, tr_idx = stream_tr.next()
            state.consumed_tr = stream_tr.consumed
            due = state.outer_step % cfg.t_update_every == 0
            if due:
                _, val_idx = stream_val.next()
                state.consumed_val = stream_val.consumed
                val_g = [grids_val[i] for i in val_idx]
                val_l = labels_val[val_idx]
            else:
                val_g, val_l = [grids_val[0]], labels_val[:1]
            info = blo_step(state, u_batch, [grids_tr[i] for i in tr_idx],
                            labels_tr[tr_idx], val_g, val_l)
            recon_loss, cls_loss = info["recon_loss"], info["train_cls_loss"]
            ratio = info["ratio"]
            lr_e, lr_c = info["lr_E"], info["lr_C"]

        val_loss, val_acc = evaluate_split(state.E, state.C, grids_val, labels_val, dims)
        _require_finite(val_loss, state.outer_step, "val_cls_loss")
        row = MetricsRow(step=state.outer_step, epoch=epoch,
                         recon_loss=recon_loss, train_cls_loss=cls_loss,
                         val_cls_loss=val_loss, val_accuracy=val_acc,
                         mask_ratio=ratio, lr_E=lr_e, lr_C=lr_c,
                         lr_T=_eff_lr(state, cfg.lr_T),
                         wallclock_ms=(time.perf_counter() - t0) * 1000.0)
        history.append(row)
        if on_step is not None:
            on_step(state, row)
    return state, history


def _step_grids(grids_u, u_idx, bundle, dims, cfg, policy, epoch, consumed, unlabeled):
    """Batch grids, with per-(seed, epoch, batch) derived augmentation if enabled."""
    if policy == "none":
        return [grids_u[i] for i in u_idx]
    rng = np.random.default_rng([cfg.seed, 0xA46, epoch, consumed])
    out = []
    for i in u_idx:
        img = bundle.d_u[i] if unlabeled else bundle.d_tr[i].pixels
        out.append(patchify(augment(img, rng, policy), dims.patch_size))
    return out


# ---------------------------------------------------------------------------
# linear probe


def pooled_features(e_set: ParamSet, grids: list[np.ndarray], dims: ModelDims) -> np.ndarray:
    """Mean-pooled encoder tokens per image, full visibility, no tape."""
    all_idx = np.arange(dims.num_patches, dtype=np.int64)
    feats = np.empty((len(grids), dims.emb_dim))
    for i, g in enumerate(grids):
        feats[i] = encoder_forward(e_set, Tensor(g), all_idx, dims).data.mean(axis=0)
    return feats


def probe_head(e_set: ParamSet, dims: ModelDims, bundle: DatasetBundle, seed: int,
               steps: int = 600, batch_size: int = 64, lr: float = 5e-3) -> float:
    """Freeze E, train a fresh head on cached features, return val accuracy."""
    tr_feats = pooled_features(e_set, _grids_for([im.pixels for im in bundle.d_tr], dims), dims)
    tr_labels = np.array([im.label for im in bundle.d_tr], dtype=np.int64)
    val_feats = pooled_features(e_set, _grids_for([im.pixels for im in bundle.d_val], dims), dims)
    val_labels = np.array([im.label for im in bundle.d_val], dtype=np.int64)

    head = init_head(dims, np.random.default_rng([seed, 0x9806]))
    opt = SetOptimizer(head, (0.9, 0.95), 0.0)
    n = len(tr_feats)
    stream = _BatchStream(n, batch_size, seed * 4 + 3)
    for step in range(steps):
        _, idx = stream.next()
        with Tape() as tape:
            logits = add_bias(matmul(Tensor(tr_feats[idx]), head["W"]), head["b"])
            loss = cross_entropy_logits(logits, tr_labels[idx])
        grads = tape.backward(loss, params=head.tensors())
        opt.step(grads, cosine_lr(step, steps, lr, 0.0))
    logits = val_feats @ head["W"].data + head["b"].data[None, :]
    return float(np.mean(logits.argmax(axis=1) == val_labels))


def mean_sigma_split(state: TrainState, grids: list[np.ndarray],
                     informative: tuple[int, ...]) -> tuple[float, float]:
    """Mean masking probability over informative vs other patches, over images."""
    s = set(informative)
    n = state.dims.num_patches
    others = [i for i in range(n) if i not in s]
    inf_idx = sorted(s)
    probs = np.stack([
        masking_net_forward(state.T, Tensor(g), state.dims).data for g in grids])
    return float(probs[:, inf_idx].mean()), float(probs[:, others].mean())

"""Gradient-fidelity oracles, shared by the test suite and `mlomae gradcheck`.

Four layers of evidence, from cheap to expensive: per-op central-difference
checks, a scalar bilevel toy with a closed-form hypergradient, a dense
double-finite-difference oracle for the FDA JVP, and a whole-pipeline oracle
that compares stage3_hypergrad against brute-force central differences of the
entire stage1 -> stage2 -> validation pipeline, coordinate by coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .engine import (MloConfig, NEVER, fda_jvp, init_train_state,
                     batch_cls_loss, stage1_update, stage2_update,
                     stage3_hypergrad)
from .masking import FixedRatio
from .nn import ModelDims
from .tensor import (GradMap, Tape, Tensor, add, add_bias, concat_cols,
                     concat_rows, cross_entropy_logits, gather_rows, grad_check,
                     layer_norm, matmul, mul, relu, reshape, scale, sigmoid,
                     slice_cols, softmax_rows, sub, tile_rows, transpose)

OP_TOLERANCE = 1e-6


def _away_from_kinks(rng, shape, margin=0.2):
    """Uniform values bounded away from zero so relu checks avoid the kink."""
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def op_grad_checks(seed: int = 0) -> list[tuple[str, float]]:
    """(name, max relative error) for every differentiable op."""
    rng = np.random.default_rng([seed, 0x09C])
    r34 = rng.standard_normal((3, 4))
    r43 = rng.standard_normal((4, 3))
    r4 = rng.standard_normal(4)
    r3 = rng.standard_normal(3)
    r24 = rng.standard_normal((2, 4))
    r35 = rng.standard_normal((3, 5))
    r5 = rng.standard_normal(5)
    labels = np.array([2, 0, 3])

    def param(shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    def weighted(t: Tensor, w) -> Tensor:
        return mul(t, Tensor(w)).sum()

    cases = [
        ("add", lambda x: weighted(add(x, Tensor(r34)), r34 + 1.0), param((3, 4))),
        ("add_scalar_broadcast", lambda x: weighted(add(Tensor(r34), x), r34 - 0.5), param((1,))),
        ("sub", lambda x: weighted(sub(Tensor(r34), x), r34 * 2.0), param((3, 4))),
        ("mul", lambda x: weighted(mul(x, Tensor(r34)), r34 + 0.3), param((3, 4))),
        ("mul_scalar_broadcast", lambda x: weighted(mul(Tensor(r34), x), r34), param((1,))),
        ("scale", lambda x: weighted(scale(x, -1.7), r34), param((3, 4))),
        ("matmul_lhs", lambda x: weighted(matmul(x, Tensor(r43)), np.ones((3, 3))), param((3, 4))),
        ("matmul_rhs", lambda x: weighted(matmul(Tensor(r34), x), np.ones((3, 3))), param((4, 3))),
        ("transpose", lambda x: weighted(transpose(x), r43), param((3, 4))),
        ("add_bias_input", lambda x: weighted(add_bias(x, Tensor(r4)), r34), param((3, 4))),
        ("add_bias_bias", lambda x: weighted(add_bias(Tensor(r34), x), r34), param((4,))),
        ("relu", lambda x: weighted(relu(x), r34),
         Tensor(_away_from_kinks(rng, (3, 4)), requires_grad=True)),
        ("sigmoid", lambda x: weighted(sigmoid(x), r34), param((3, 4))),
        ("softmax_rows", lambda x: weighted(softmax_rows(x), r34), param((3, 4))),
        ("layer_norm_x", lambda x: weighted(layer_norm(x, Tensor(np.ones(4) * 1.3), Tensor(r4)), r34),
         param((3, 4))),
        ("layer_norm_gamma", lambda x: weighted(layer_norm(Tensor(r34), x, Tensor(r4)), r34),
         param((4,))),
        ("layer_norm_beta", lambda x: weighted(layer_norm(Tensor(r34), Tensor(r4), x), r34),
         param((4,))),
        ("sum_all", lambda x: x.sum(), param((3, 4))),
        ("sum_axis0", lambda x: weighted(x.sum(axis=0), r4), param((3, 4))),
        ("mean_all", lambda x: x.mean(), param((3, 4))),
        ("mean_axis1", lambda x: weighted(x.mean(axis=1), r3), param((3, 4))),
        ("gather_rows", lambda x: weighted(gather_rows(x, np.array([2, 0, 2])), np.ones((3, 4))),
         param((3, 4))),
        ("slice_cols", lambda x: weighted(slice_cols(x, 1, 4), r34[:, 1:4]), param((3, 5))),
        ("concat_rows", lambda x: weighted(concat_rows([x, Tensor(r24)]), np.vstack([r34, r24])),
         param((3, 4))),
        ("concat_cols", lambda x: weighted(concat_cols([Tensor(r34), x]), np.hstack([r34, r34])),
         param((3, 4))),
        ("tile_rows", lambda x: weighted(tile_rows(x, 3), r34), param((1, 4))),
        ("reshape", lambda x: weighted(reshape(x, (4, 3)), r43), param((3, 4))),
        ("cross_entropy_logits", lambda x: cross_entropy_logits(x, labels), param((3, 4))),
        ("mlp_composite", lambda x: cross_entropy_logits(
            add_bias(matmul(sigmoid(matmul(x, Tensor(r43))), Tensor(r35)), Tensor(r5)),
            np.array([1, 4, 0])), param((3, 4))),
    ]
    return [(name, grad_check(f, x)) for name, f, x in cases]


# ---------------------------------------------------------------------------
# scalar bilevel toy


def bilevel_toy_hypergrad(t_value: float, eta: float = 1.0, e0: float = 0.0,
                          eps_scale: float = 0.01) -> float:
    """Hypergradient of the scalar quadratic bilevel toy via the FDA machinery.

    Lower level 0.5*(e - t)^2 takes one plain gradient step from e0; the upper
    level is 0.5*e'^2. Closed form at eta=1, e0=0: dL_val/dt = t. The same
    recipe as stage3: validation cotangent, then one FDA around e' scaled by
    -eta. No C-path exists here, so the c term is exactly zero.
    """
    e = Tensor(np.array([e0]), requires_grad=True, name="toy.e")
    t = Tensor(np.array([t_value]), requires_grad=True, name="toy.t")

    def inner_loss() -> Tensor:
        d = sub(e, t)
        return scale(mul(d, d), 0.5)

    with Tape() as tape:
        loss = inner_loss()
    g_e = tape.backward(loss, params=[e])
    e.data = e.data - eta * g_e[e]  # e' in place

    with Tape() as tape:
        val = scale(mul(e, e), 0.5)
    v_map = tape.backward(val, params=[e])

    def inner_grad_wrt_t() -> GradMap:
        with Tape() as tp:
            loss_t = inner_loss()
        return tp.backward(loss_t, params=[t])

    raw, _ = fda_jvp(inner_grad_wrt_t, {"e": e}, v_map, eps_scale)
    return float(raw.scaled(-eta)[t][0])


def bilevel_toy_fd(t_value: float, eta: float = 1.0, e0: float = 0.0,
                   h: float = 1e-6) -> float:
    """Brute-force d/dt of the same toy pipeline, for cross-checking."""

    def pipeline(tv: float) -> float:
        e = e0 - eta * (e0 - tv)
        return 0.5 * e * e

    return (pipeline(t_value + h) - pipeline(t_value - h)) / (2.0 * h)


# ---------------------------------------------------------------------------
# FDA JVP vs dense double finite differences


def fda_vs_double_fd(seed: int = 0, h: float = 1e-3, eps_scale: float = 0.01) -> float:
    """Relative L2 error of fda_jvp against the dense mixed Hessian.

    Model: x -> sigmoid(x W1 + b1) W2 + b2 -> weighted sum, 26 parameters in
    two groups. The oracle fills H[i, j] = d2 L / dA_i dB_j with four loss
    evaluations per entry and compares H^T w against the FDA result for the
    JVP of grad_A L along w in B-space.
    """
    rng = np.random.default_rng([seed, 0xFDA])
    x = Tensor(rng.standard_normal((3, 3)))
    w1 = Tensor(rng.standard_normal((3, 4)) * 0.7, requires_grad=True, name="W1")
    b1 = Tensor(rng.standard_normal(4) * 0.3, requires_grad=True, name="b1")
    w2 = Tensor(rng.standard_normal((4, 2)) * 0.7, requires_grad=True, name="W2")
    b2 = Tensor(rng.standard_normal(2) * 0.3, requires_grad=True, name="b2")
    rw = rng.standard_normal((3, 2))
    group_a = [w1, b1]
    group_b = [w2, b2]

    def loss_tensor() -> Tensor:
        hsig = sigmoid(add_bias(matmul(x, w1), b1))
        out = add_bias(matmul(hsig, w2), b2)
        return mul(out, Tensor(rw)).sum()

    def loss_value() -> float:
        return loss_tensor().item()

    def grad_a() -> GradMap:
        with Tape() as tape:
            l = loss_tensor()
        return tape.backward(l, params=group_a)

    direction = GradMap()
    w_vecs = {id(p): rng.standard_normal(p.shape) for p in group_b}
    for p in group_b:
        direction.set(p, w_vecs[id(p)])

    na = sum(p.size for p in group_a)
    nb = sum(p.size for p in group_b)
    hess = np.zeros((na, nb))
    a_flat_index = []
    for p in group_a:
        a_flat_index.extend((p, k) for k in range(p.size))
    b_flat_index = []
    for p in group_b:
        b_flat_index.extend((p, k) for k in range(p.size))

    def _bump(p: Tensor, k: int, delta: float):
        p.data.flat[k] += delta

    for i, (pa, ka) in enumerate(a_flat_index):
        for j, (pb, kb) in enumerate(b_flat_index):
            vals = []
            for sa, sb in ((h, h), (h, -h), (-h, h), (-h, -h)):
                _bump(pa, ka, sa)
                _bump(pb, kb, sb)
                vals.append(loss_value())
                _bump(pa, ka, -sa)
                _bump(pb, kb, -sb)
            hess[i, j] = (vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * h * h)

    w_flat = np.concatenate([w_vecs[id(p)].reshape(-1) for p in group_b])
    expected = hess @ w_flat

    got_map, _ = fda_jvp(grad_a, {p.name: p for p in group_b}, direction, eps_scale)
    got = np.concatenate([got_map[p].reshape(-1) for p in group_a])
    return float(np.linalg.norm(got - expected) / max(np.linalg.norm(expected), 1e-12))


# ---------------------------------------------------------------------------
# whole-pipeline hypergradient oracle


ORACLE_DIMS = ModelDims(image_side=4, channels=1, patch_size=2, emb_dim=4,
                        dec_dim=4, enc_blocks=1, dec_blocks=1, heads=1,
                        num_classes=3, mask_hidden=6)

# lr_E is deliberately tiny: the E-path FDA evaluates the mixed Hessian at the
# post-update E', so its drift from the FD truth (which lives at E0) scales
# with the step size. lr_C is large so the C-path carries a visible share of
# the hypergradient and a sign flip there breaks the tolerance.
ORACLE_CFG = MloConfig(lr_E=2e-5, lr_C=2e-1, lr_T=1e-2, unroll_E=1, unroll_C=1,
                       ratio_schedule=FixedRatio(0.5), fda_eps_scale=1e-3,
                       t_update_every=NEVER, oracle_mode=True, total_epochs=1,
                       batch_size=6)


@dataclass
class OracleResult:
    cosine: float
    rel_l2: float
    engine: np.ndarray
    fd: np.ndarray
    boundary_gap: float  # min prob gap at the top-k cut over the stage-1 batch
    sel_flips: int  # FD evals whose mask selection differed from base (want 0)


def _oracle_batches(seed: int, dims: ModelDims, n: int = 6):
    rng = np.random.default_rng([seed, 0x0AC1E])
    mk = lambda: [rng.uniform(0.0, 1.0, size=(dims.num_patches, dims.patch_pixels))
                  for _ in range(n)]
    gu, gt, gv = mk(), mk(), mk()
    lt = rng.integers(0, dims.num_classes, size=n)
    lv = rng.integers(0, dims.num_classes, size=n)
    return gu, gt, lt, gv, lv


def _t_vector(t_set) -> np.ndarray:
    return np.concatenate([t_set[k].data.reshape(-1) for k in sorted(t_set.params)])


def _set_t_vector(t_set, vec: np.ndarray) -> None:
    pos = 0
    for k in sorted(t_set.params):
        p = t_set[k]
        p.data = np.ascontiguousarray(vec[pos:pos + p.size].reshape(p.shape))
        pos += p.size


def pipeline_oracle(seed: int, cpath_sign: float = 1.0, h: float = 1e-4,
                    dims: ModelDims = ORACLE_DIMS, cfg: MloConfig = ORACLE_CFG
                    ) -> OracleResult:
    """stage3_hypergrad vs per-coordinate central FD of the whole pipeline."""
    from .nn import masking_net_forward

    cfg = replace(cfg, seed=seed)
    gu, gt, lt, gv, lv = _oracle_batches(seed, dims)

    def run_pipeline(t_vec: np.ndarray | None):
        state = init_train_state(dims, cfg, total_steps=1)
        state.outer_step = 1
        if t_vec is not None:
            _set_t_vector(state.T, t_vec)
        s1 = stage1_update(state, gu)
        stage2_update(state, gt, lt)
        return state, tuple(tuple(sel.masked_idx) for sel in s1.sels)

    state, base_sig = run_pipeline(None)
    base_vec = _t_vector(state.T)
    report = stage3_hypergrad(state, gv, lv, cpath_sign=cpath_sign)
    engine_vec = np.concatenate(
        [report.grad_T[state.T[k]].reshape(-1) for k in sorted(state.T.params)])

    # how far the top-k cut sits from a tie; FD nudges of size ~h must not flip it
    gap = math.inf
    n = dims.num_patches
    num_masked = n - math.floor(n * (1.0 - cfg.ratio_schedule.ratio))
    for g in gu:
        probs = np.sort(masking_net_forward(state.T, Tensor(g), dims).data)[::-1]
        gap = min(gap, float(probs[num_masked - 1] - probs[num_masked]))

    fd = np.empty_like(base_vec)
    flips = 0
    for k in range(base_vec.size):
        up = base_vec.copy()
        up[k] += h
        s, sig_p = run_pipeline(up)
        f_plus = batch_cls_loss(s.E, s.C, gv, lv, dims).item()
        dn = base_vec.copy()
        dn[k] -= h
        s, sig_m = run_pipeline(dn)
        f_minus = batch_cls_loss(s.E, s.C, gv, lv, dims).item()
        fd[k] = (f_plus - f_minus) / (2.0 * h)
        if sig_p != base_sig or sig_m != base_sig:
            flips += 1  # FD crossed a top-k boundary: that coordinate is junk

    cos = float(np.dot(engine_vec, fd) /
                max(np.linalg.norm(engine_vec) * np.linalg.norm(fd), 1e-300))
    rel = float(np.linalg.norm(engine_vec - fd) / max(np.linalg.norm(fd), 1e-300))
    return OracleResult(cosine=cos, rel_l2=rel, engine=engine_vec, fd=fd,
                        boundary_gap=gap, sel_flips=flips)


# frozen generic seeds: no dead relu layer in the masking net (seed 6 has one,
# which makes every probability exactly 0.5 and ties the top-k cut) and no
# top-k boundary within FD reach, so the pipeline is differentiable where the
# oracle probes it; all three also give the c-path a large enough share that
# a sign flip there fails the tolerance by an order of magnitude
PIPELINE_ORACLE_SEEDS = (1, 4, 5)


def run_all(verbose_print=None, cpath_sign: float = 1.0) -> list[tuple[str, float, float, bool]]:
    """(check name, value, tolerance-or-bound, ok) rows for the CLI."""
    rows: list[tuple[str, float, float, bool]] = []
    for name, err in op_grad_checks():
        rows.append((f"op:{name}", err, OP_TOLERANCE, err <= OP_TOLERANCE))
    for t in (-0.5, 0.3, 1.0):
        got = bilevel_toy_hypergrad(t)
        rows.append((f"bilevel_toy t={t} hypergradient={got:.9f}", abs(got - t), 1e-6,
                     abs(got - t) <= 1e-6))
    err = fda_vs_double_fd()
    rows.append(("fda_vs_double_fd", err, 1e-3, err <= 1e-3))
    for seed in PIPELINE_ORACLE_SEEDS:
        res = pipeline_oracle(seed, cpath_sign=cpath_sign)
        ok = res.cosine >= 0.99 and res.rel_l2 <= 5e-2
        rows.append((f"pipeline_oracle seed={seed} cos", res.cosine, 0.99, res.cosine >= 0.99))
        rows.append((f"pipeline_oracle seed={seed} rel_l2", res.rel_l2, 5e-2, res.rel_l2 <= 5e-2))
        if verbose_print is not None:
            verbose_print(f"  seed {seed}: boundary gap {res.boundary_gap:.4f}, ok={ok}")
    return rows

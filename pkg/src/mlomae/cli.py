"""Command line entry points: train, gradcheck, probe, visualize.

Exit codes: 0 success, 1 bad configuration, 2 I/O or file-format trouble,
3 a numerical check failed, 4 the run aborted on a non-finite loss.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import checks
from .checkpoint import CheckpointData, load_checkpoint, restore_train_state, save_checkpoint
from .config import (RunConfig, cifar_path, dataset_kind, env_seed_override,
                     load_run_config, serialize_run_config)
from .data import DatasetBundle, cifar10_read, split_80_20, synth_generate
from .engine import MetricsRow, TrainState, init_train_state, mlo_train, probe_head
from .errors import ConfigError, DataFormatError, NumericAbort
from .masking import select_mask
from .nn import ModelDims, ParamSet, init_models, masking_net_forward
from .tensor import Tensor

CSV_HEADER = ("step,epoch,recon_loss,train_cls_loss,val_cls_loss,"
              "val_accuracy,mask_ratio,lr_E,lr_C,lr_T,wallclock_ms")
LOCK_NAME = ".lock"


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_line(row: MetricsRow, strict: bool) -> str:
    wall = 0.0 if strict else row.wallclock_ms
    return (f"{row.step},{row.epoch},{_fmt(row.recon_loss)},{_fmt(row.train_cls_loss)},"
            f"{_fmt(row.val_cls_loss)},{_fmt(row.val_accuracy)},{_fmt(row.mask_ratio)},"
            f"{_fmt(row.lr_E)},{_fmt(row.lr_C)},{_fmt(row.lr_T)},{_fmt(wall)}")


def build_bundle(rc: RunConfig, seed: int) -> DatasetBundle:
    kind = dataset_kind(rc.dataset)
    if kind == "synthetic":
        return synth_generate(rc.synth, seed)
    images = cifar10_read(cifar_path(rc.dataset))
    d_tr, d_val = split_80_20(images, seed)
    k = max(im.label for im in images) + 1
    return DatasetBundle(d_tr=d_tr, d_val=d_val, d_u=[im.pixels for im in d_tr],
                         num_classes=k, split_seed=seed)


class OutputLock:
    """One live run per output directory; stale locks must be removed by hand."""

    def __init__(self, out_dir: str):
        self.path = os.path.join(out_dir, LOCK_NAME)
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OSError(f"{self.path} exists: another run owns this directory "
                          "(remove the lockfile if that run is dead)") from None
        os.write(self.fd, f"pid {os.getpid()}\n".encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            os.unlink(self.path)
        return False


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    env_seed = env_seed_override()
    if env_seed is not None:
        rc.mlo = replace(rc.mlo, seed=env_seed)
    rc.validate()
    cfg = rc.mlo
    os.makedirs(rc.out_dir, exist_ok=True)

    with OutputLock(rc.out_dir):
        with open(os.path.join(rc.out_dir, "config_resolved.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(serialize_run_config(rc))

        bundle = build_bundle(rc, cfg.seed)
        synth = rc.synth if dataset_kind(rc.dataset) == "synthetic" else None

        state: TrainState | None = None
        metrics_path = os.path.join(rc.out_dir, "metrics.csv")
        append = False
        if args.resume:
            ck = load_checkpoint(args.resume)
            if ck.dims != rc.dims:
                raise ConfigError("checkpoint model dims do not match the config")
            state = restore_train_state(ck, cfg)
            append = os.path.exists(metrics_path)

        with open(metrics_path, "a" if append else "w", encoding="utf-8") as metrics:
            if not append:
                metrics.write(CSV_HEADER + "\n")
                metrics.flush()

            def on_step(st: TrainState, row: MetricsRow) -> None:
                metrics.write(metrics_line(row, args.strict) + "\n")
                metrics.flush()
                if rc.checkpoint_every > 0 and row.step % rc.checkpoint_every == 0:
                    save_checkpoint(
                        os.path.join(rc.out_dir, f"ckpt_step{row.step}.mlom"), st, synth)

            if cfg.total_epochs == 0 and state is None:
                # nothing to run; still leave a loadable model behind
                state = init_train_state(rc.dims, cfg)
                final_state = state
            else:
                final_state, _ = mlo_train(bundle, rc.dims, cfg, on_step=on_step,
                                           state=state, augment_policy=rc.augment)
        save_checkpoint(os.path.join(rc.out_dir, "ckpt_final.mlom"), final_state, synth)
    return 0


def cmd_gradcheck(args) -> int:
    sign = -1.0 if args.flip_cpath_sign else 1.0
    rows = checks.run_all(verbose_print=print if args.verbose else None,
                          cpath_sign=sign)
    failed = 0
    for name, value, bound, ok in rows:
        status = "ok" if ok else "FAIL"
        print(f"{status:4s} {name}: value={value:.3e} bound={bound:.3e}")
        failed += 0 if ok else 1
    print(f"{len(rows) - failed}/{len(rows)} checks passed")
    return 0 if failed == 0 else 3


def _encoder_from_checkpoint(ck: CheckpointData) -> tuple[ParamSet, ParamSet]:
    e_set, _, _, t_set = init_models(ck.dims, ck.seed)
    e_set.load_values(ck.params["E"])
    t_set.load_values(ck.params["T"])
    return e_set, t_set


def _bundle_for_selector(selector: str, ck: CheckpointData, seed: int) -> DatasetBundle:
    kind = dataset_kind(selector)
    if kind == "synthetic":
        if ck.synth is None:
            raise ConfigError("checkpoint has no synthetic-data record; "
                              "pass the cifar10:<dir> selector it was trained on")
        return synth_generate(ck.synth, seed)
    images = cifar10_read(cifar_path(selector))
    d_tr, d_val = split_80_20(images, seed)
    k = max(im.label for im in images) + 1
    return DatasetBundle(d_tr=d_tr, d_val=d_val, d_u=[im.pixels for im in d_tr],
                         num_classes=k, split_seed=seed)


def cmd_probe(args) -> int:
    ck = load_checkpoint(args.ckpt)
    seed = env_seed_override()
    if seed is None:
        seed = ck.seed
    bundle = _bundle_for_selector(args.data, ck, ck.seed)
    e_set, _ = _encoder_from_checkpoint(ck)
    acc = probe_head(e_set, ck.dims, bundle, seed)
    print(f"probe_accuracy = {_fmt(acc)}")
    return 0


def write_pgm(path: str, img: np.ndarray) -> None:
    """Binary (P5) grayscale, maxval 255."""
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.clip(img, 0, 255).astype(np.uint8).tobytes(order="C"))


def _block_image(values: np.ndarray, dims: ModelDims) -> np.ndarray:
    """Expand one value per patch into the full pixel grid."""
    g = dims.image_side // dims.patch_size
    out = np.empty((dims.image_side, dims.image_side))
    for p, v in enumerate(values):
        py, px = divmod(p, g)
        out[py * dims.patch_size:(py + 1) * dims.patch_size,
            px * dims.patch_size:(px + 1) * dims.patch_size] = v
    return out


def cmd_visualize(args) -> int:
    ck = load_checkpoint(args.ckpt)
    selector = args.data if args.data else "synthetic"
    bundle = _bundle_for_selector(selector, ck, ck.seed)
    _, t_set = _encoder_from_checkpoint(ck)
    dims = ck.dims
    os.makedirs(args.out, exist_ok=True)

    from .engine import _grids_for

    images = bundle.d_val[:args.count]
    grids = _grids_for([im.pixels for im in images], dims)
    for i, g in enumerate(grids):
        probs = masking_net_forward(t_set, Tensor(g), dims).data
        sigma_map = _block_image(np.round(255.0 * probs), dims)
        write_pgm(os.path.join(args.out, f"sigma_{i:02d}.pgm"), sigma_map)
        sel = select_mask(probs, ck.mask_ratio)
        overlay = np.zeros(dims.num_patches)
        overlay[sel.visible_idx] = 255.0
        write_pgm(os.path.join(args.out, f"mask_{i:02d}.pgm"),
                  _block_image(overlay, dims))
    print(f"wrote {2 * len(grids)} maps to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mlomae",
                                 description="masked-autoencoder pretraining with a "
                                             "learned, validation-guided masking policy")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the three-stage training loop")
    p.add_argument("--config", required=True, help="flat key = value run file")
    p.add_argument("--strict", action="store_true",
                   help="zero the wallclock column so reruns are byte-identical")
    p.add_argument("--resume", default=None, metavar="CKPT",
                   help="continue bit-identically from a checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("gradcheck", help="run the gradient and hypergradient oracles")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--flip-cpath-sign", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("probe", help="train a fresh linear probe on a frozen encoder")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="synthetic | cifar10:<dir>")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("visualize", help="write per-patch keep-probability maps as PGM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="needed for cifar-trained checkpoints")
    p.add_argument("--count", type=int, default=4)
    p.set_defaults(fn=cmd_visualize)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except DataFormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Synthetic generator ground truth, ingestion determinism, batching."""

import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlomae.data import (LabeledImage, SynthSpec, augment, batches,
                         bundle_load, bundle_save, cifar10_read,
                         parse_augment_policy, split_80_20, synth_generate)
from mlomae.errors import ConfigError
from mlomae.nn import ParamSet, init_head
from mlomae.optim import SetOptimizer
from mlomae.tensor import GradMap, Tape, Tensor, add_bias, backward, cross_entropy_logits, matmul


def test_synth_generation_is_deterministic():
    spec = SynthSpec(samples_per_class=5)
    a, b = synth_generate(spec, 11), synth_generate(spec, 11)
    for x, y in zip(a.d_tr, b.d_tr):
        assert x.label == y.label and np.array_equal(x.pixels, y.pixels)
    c = synth_generate(spec, 12)
    assert any(not np.array_equal(x.pixels, y.pixels)
               for x, y in zip(a.d_tr, c.d_tr))


def test_split_sizes_and_coverage():
    spec = SynthSpec(samples_per_class=25)
    bundle = synth_generate(spec, 0)
    total = len(bundle.d_tr) + len(bundle.d_val)
    assert total == 4 * 25
    assert len(bundle.d_tr) == int(0.8 * total)
    assert len(bundle.d_u) == len(bundle.d_tr)
    for u, im in zip(bundle.d_u, bundle.d_tr):
        assert u is im.pixels  # unlabeled pool aliases the train images


def test_uninformative_patches_carry_no_label_signal():
    """Train a linear classifier on pixels outside the informative set; it
    must stay at chance level because those pixels are label-independent."""
    spec = SynthSpec(samples_per_class=100)
    accs = []
    for seed in (0, 1, 2):
        bundle = synth_generate(spec, seed)
        s = set(bundle.informative_set)
        keep = [p for p in range(spec.num_patches) if p not in s]

        def flat(images):
            from mlomae.nn import patchify
            rows = [patchify(im.pixels, spec.patch_size)[keep].reshape(-1)
                    for im in images]
            return np.stack(rows)

        xtr, xva = flat(bundle.d_tr), flat(bundle.d_val)
        ytr = np.array([im.label for im in bundle.d_tr])
        yva = np.array([im.label for im in bundle.d_val])
        w = Tensor(np.zeros((xtr.shape[1], spec.num_classes)), requires_grad=True, name="w")
        b = Tensor(np.zeros(spec.num_classes), requires_grad=True, name="b")
        opt = SetOptimizer(ParamSet("P", {"w": w, "b": b}), (0.9, 0.95), 0.0)
        rng = np.random.default_rng(seed)
        for _ in range(150):
            idx = rng.choice(len(xtr), size=64, replace=False)
            with Tape() as tape:
                loss = cross_entropy_logits(
                    add_bias(matmul(Tensor(xtr[idx]), w), b), ytr[idx])
            opt.step(backward(loss, params=[w, b], tape=tape), 5e-3)
        logits = xva @ w.data + b.data
        accs.append(float(np.mean(logits.argmax(axis=1) == yva)))
    k = spec.num_classes
    assert max(accs) <= 1.0 / k + 0.05, accs


def test_informative_patches_do_carry_signal():
    # sanity companion: the same probe on informative pixels is far above chance
    spec = SynthSpec(samples_per_class=100)
    bundle = synth_generate(spec, 0)
    from mlomae.nn import patchify
    keep = list(bundle.informative_set)
    xtr = np.stack([patchify(im.pixels, spec.patch_size)[keep].reshape(-1)
                    for im in bundle.d_tr])
    ytr = np.array([im.label for im in bundle.d_tr])
    xva = np.stack([patchify(im.pixels, spec.patch_size)[keep].reshape(-1)
                    for im in bundle.d_val])
    yva = np.array([im.label for im in bundle.d_val])
    w = Tensor(np.zeros((xtr.shape[1], spec.num_classes)), requires_grad=True, name="w")
    b = Tensor(np.zeros(spec.num_classes), requires_grad=True, name="b")
    opt = SetOptimizer(ParamSet("P", {"w": w, "b": b}), (0.9, 0.95), 0.0)
    rng = np.random.default_rng(0)
    for _ in range(150):
        idx = rng.choice(len(xtr), size=64, replace=False)
        with Tape() as tape:
            loss = cross_entropy_logits(add_bias(matmul(Tensor(xtr[idx]), w), b), ytr[idx])
        opt.step(backward(loss, params=[w, b], tape=tape), 5e-3)
    acc = float(np.mean((xva @ w.data + b.data).argmax(axis=1) == yva))
    assert acc >= 0.9, acc


def test_cifar10_reader_bit_exact(tmp_path):
    # two records in the standard 3073-byte layout
    rng = np.random.default_rng(5)
    raw = bytearray()
    labels = [3, 7]
    pixel_blocks = []
    for lab in labels:
        block = rng.integers(0, 256, size=3072, dtype=np.uint8)
        pixel_blocks.append(block)
        raw.append(lab)
        raw.extend(block.tobytes())
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(bytes(raw))

    images = cifar10_read(str(path))
    again = cifar10_read(str(path))
    assert len(images) == 2
    for im, im2, lab, block in zip(images, again, labels, pixel_blocks):
        assert im.label == lab == im2.label
        assert np.array_equal(im.pixels, im2.pixels)
        assert im.pixels.shape == (3, 32, 32)
        expected = block.reshape(3, 32, 32).astype(np.float64) / 255.0
        assert np.array_equal(im.pixels, expected)


def test_cifar10_reader_rejects_truncated_file(tmp_path):
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(b"\x01" + b"\x00" * 100)
    from mlomae.errors import DataFormatError
    with pytest.raises(DataFormatError):
        cifar10_read(str(path))


def test_augment_preserves_range_and_shape():
    rng = np.random.default_rng(9)
    img = rng.uniform(size=(3, 8, 8))
    for policy in ("none", "flip", "flip+crop:2"):
        out = augment(img, np.random.default_rng(1), policy)
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.array_equal(augment(img, np.random.default_rng(1), "none"), img)


def test_augment_policy_parsing():
    assert parse_augment_policy("none") == (False, 0)
    assert parse_augment_policy("flip") == (True, 0)
    assert parse_augment_policy("flip+crop:3") == (True, 3)
    with pytest.raises(ConfigError):
        parse_augment_policy("zoom")
    with pytest.raises(ConfigError):
        parse_augment_policy("flip+crop:-1")


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 40), st.integers(1, 9), st.integers(0, 50), st.integers(0, 3))
def test_batches_partition_each_epoch(n, bs, seed, epoch):
    items = list(range(n))
    out = batches(items, bs, seed, epoch)
    assert [len(b) for b in out] == [bs] * (n // bs) + ([n % bs] if n % bs else [])
    flat = [i for b in out for i in b]
    assert sorted(flat) == items
    assert batches(items, bs, seed, epoch) == out  # deterministic


def test_batches_reshuffle_between_epochs():
    items = list(range(40))
    e0 = [i for b in batches(items, 7, 0, 0) for i in b]
    e1 = [i for b in batches(items, 7, 0, 1) for i in b]
    assert e0 != e1


def test_bundle_save_load_roundtrip(tmp_path):
    spec = SynthSpec(samples_per_class=4)
    bundle = synth_generate(spec, 2)
    path = str(tmp_path / "bundle.mlom")
    bundle_save(path, bundle)
    loaded = bundle_load(path)
    assert loaded.num_classes == bundle.num_classes
    assert loaded.informative_set == bundle.informative_set
    assert len(loaded.d_tr) == len(bundle.d_tr)
    for a, b in zip(bundle.d_tr, loaded.d_tr):
        assert a.label == b.label and np.array_equal(a.pixels, b.pixels)
    for a, b in zip(bundle.d_val, loaded.d_val):
        assert a.label == b.label and np.array_equal(a.pixels, b.pixels)


def test_split_80_20_disjoint_and_seeded():
    images = [LabeledImage(pixels=np.full((1, 2, 2), i / 50), label=i % 3)
              for i in range(50)]
    tr1, va1 = split_80_20(images, 7)
    tr2, va2 = split_80_20(images, 7)
    assert len(tr1) == 40 and len(va1) == 10
    assert [im.label for im in tr1] == [im.label for im in tr2]
    ids = {id(im) for im in tr1} | {id(im) for im in va1}
    assert len(ids) == 50  # every image lands in exactly one split

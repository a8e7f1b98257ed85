#!/usr/bin/env python3
"""
Phase 3 Test Script for the PPG Stroke Early-Warning Pipeline
Tests the NumPy ResNet-1D (forward, reverse-mode gradients, checkpoints)
and the training protocol (Adam, patient folds, cross-validation)
"""

import math
import os
import sys
import tempfile

import numpy as np

# Add src directory to path
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), 'src'))

from evaluation import roc_auc
from labeling import LabeledDataset, LabeledWindow, LabelParams, Zone
from resnet1d import (ArchSpec, BlockSpec, ModelCheckpoint, ResNet1D, ShapeError, fit_standardizer,
                      standardize, weighted_ce)
from training import (AdamState, FoldTrainer, TrainConfig, adam_step, apply_checkpoint, patient_folds,
                      shuffle_labels, train_cv)

SMALL_ARCH = ArchSpec(in_channels=3, length=8, stem_channels=4, stem_kernel=3,
                      blocks=(BlockSpec(4, 3), BlockSpec(6, 3, 2)))
STEP = 1e-4


def naive_conv(x, w, b, stride):
    """Direct zero-padded 'same' convolution, one output sample at a time"""
    batch, cin, length = x.shape
    cout, _, kernel = w.shape
    pad = kernel // 2
    padded = np.zeros((batch, cin, length + 2 * pad))
    padded[:, :, pad:pad + length] = x
    starts = list(range(0, length, stride))
    out = np.zeros((batch, cout, len(starts)))
    for n in range(batch):
        for o in range(cout):
            for t, s in enumerate(starts):
                total = 0.0 if b is None else b[o]
                for c in range(cin):
                    for j in range(kernel):
                        total += w[o, c, j] * padded[n, c, s + j]
                out[n, o, t] = total
    return out


def gradient_errors(net, params, x, labels, lambda_pos=3.0):
    """Relative error of every analytic gradient coordinate against central differences"""
    _, grad = net.loss_and_grad(params, x, labels, lambda_pos, 'train', None)

    def loss(p):
        return weighted_ce(net.forward(p, x, 'train', None), labels, lambda_pos)

    errors = np.zeros(net.n_params)
    for i in range(net.n_params):
        plus, minus = params.copy(), params.copy()
        plus[i] += STEP
        minus[i] -= STEP
        numeric = (loss(plus) - loss(minus)) / (2 * STEP)
        errors[i] = abs(grad[i] - numeric) / max(abs(grad[i]), abs(numeric), 1e-2)
    return errors


def synthetic_dataset(n_pos=15, n_neg=15, per_patient=30, shift=1.5, seed=0, L=10):
    """
    Windows of four noise channels; warning windows lift channel f0

    Positive patients carry 10 Normal then 20 Warning windows; negatives
    only Normal ones.
    """
    rng = np.random.default_rng(seed)
    windows = []
    for i in range(n_pos + n_neg):
        patient_id = f"{'P' if i < n_pos else 'N'}{i:03d}"
        for j in range(per_patient):
            label = int(i < n_pos and j >= per_patient // 3)
            features = rng.standard_normal((L, 4))
            features[:, 0] += shift * label
            zone = Zone.WARNING if label else Zone.NORMAL
            windows.append(LabeledWindow(patient_id, float(-480 + 10 * j), label, features, zone, 'S0'))
    return LabeledDataset(windows, ('f0', 'f1', 'f2', 'f3'), L, L, LabelParams())


def test_conv_oracle():
    """Vectorized convolution matches the direct loop for stride 1 and 2"""
    print("🧱 Testing Convolution Against Direct Loops")
    print("=" * 40)

    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 9))
    w = rng.standard_normal((4, 3, 5))
    b = rng.standard_normal(4)
    for stride in (1, 2):
        out, _ = ResNet1D._conv(x, w, b, stride, None, 'conv')
        np.testing.assert_allclose(out, naive_conv(x, w, b, stride), atol=1e-12)
        print(f"✅ stride {stride}: output {out.shape}")
    return True


def test_forward_contract():
    """Shapes, batch independence in eval mode and shape errors"""
    print("\n📐 Testing Forward Contract")
    print("=" * 40)

    net = ResNet1D(SMALL_ARCH)
    params = net.init_params(7)
    stats = net.init_stats()
    x = np.random.default_rng(2).standard_normal((5, 3, 8))

    logits = net.forward(params, x, 'eval', stats)
    assert logits.shape == (5, 2)
    np.testing.assert_allclose(net.forward(params, x[:2], 'eval', stats), logits[:2], atol=1e-12)
    assert np.array_equal(params, net.init_params(7)), "init must be deterministic"
    assert not np.array_equal(params, net.init_params(8))
    print(f"✅ {net.n_params} parameters, {net.n_stats} running statistics")

    failures = [
        lambda: net.forward(params, x[:, :2], 'eval', stats),
        lambda: net.forward(params[:-1], x, 'eval', stats),
        lambda: ResNet1D(ArchSpec(in_channels=3, stem_kernel=4)),
    ]
    for failure in failures:
        try:
            failure()
        except ShapeError:
            pass
        else:
            raise AssertionError("expected a ShapeError")
    print("✅ Wrong channels, wrong parameter count and even kernels rejected")
    return True


def test_gradient_check():
    """Reverse-mode gradients agree with central differences on every coordinate"""
    print("\n🧮 Testing Gradient Fidelity")
    print("=" * 40)

    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 3, 8))
    labels = np.array([0, 1, 1, 0])

    # keep every normalized activation away from the ReLU kink
    net = ResNet1D(SMALL_ARCH)
    params = net.init_params(11)
    for name, view in net.views(params).items():
        if name.endswith('.gamma'):
            view[...] = rng.uniform(0.5, 0.8, view.shape)
        elif name.endswith('.beta'):
            view[...] = rng.uniform(4.0, 5.0, view.shape)
    errors = gradient_errors(net, params, x, labels)
    assert errors.size >= 200
    assert errors.max() < 1e-4, f"max relative error {errors.max():.2e}"
    print(f"✅ Normalized net: {errors.size} coordinates, max relative error {errors.max():.2e}")

    plain = ResNet1D(ArchSpec(in_channels=3, length=8, stem_channels=4, stem_kernel=3,
                              blocks=(BlockSpec(4, 3), BlockSpec(6, 3, 2)), use_norm=False))
    params = plain.init_params(12)
    for name, view in plain.views(params).items():
        if name.startswith('head'):
            continue
        if name.endswith('.w'):
            view[...] = 0.25 * np.abs(view)
        elif name.endswith('.b'):
            view[...] = rng.uniform(0.1, 0.5, view.shape)
    errors = gradient_errors(plain, params, np.abs(x) + 0.1, labels)
    assert errors.max() < 1e-4, f"max relative error {errors.max():.2e}"
    print(f"✅ Un-normalized net: {errors.size} coordinates, max relative error {errors.max():.2e}")
    return True


def test_weighted_cross_entropy():
    """Class-weighted loss against a per-sample loop"""
    print("\n⚖️  Testing Weighted Cross-Entropy")
    print("=" * 40)

    rng = np.random.default_rng(4)
    logits = 3.0 * rng.standard_normal((6, 2))
    labels = np.array([1, 0, 0, 1, 1, 0])
    loss, dlogits = weighted_ce(logits, labels, 3.0, with_grad=True)

    expected = 0.0
    for row, label in zip(logits, labels):
        log_norm = math.log(math.exp(row[0]) + math.exp(row[1]))
        expected += (3.0 if label == 1 else 1.0) * (log_norm - row[label])
    np.testing.assert_allclose(loss, expected / 6, rtol=1e-12)

    for i in range(6):
        for j in range(2):
            plus, minus = logits.copy(), logits.copy()
            plus[i, j] += STEP
            minus[i, j] -= STEP
            numeric = (weighted_ce(plus, labels, 3.0) - weighted_ce(minus, labels, 3.0)) / (2 * STEP)
            np.testing.assert_allclose(dlogits[i, j], numeric, atol=1e-8)
    assert weighted_ce(logits, labels, 1.0) < loss
    print(f"✅ Loss {loss:.4f} matches; positives weighted x3")
    return True


def test_running_statistics():
    """Train mode moves running statistics by momentum 0.1 unless told not to"""
    print("\n📊 Testing Running Statistics")
    print("=" * 40)

    net = ResNet1D(SMALL_ARCH)
    params = net.init_params(5)
    x = np.random.default_rng(6).standard_normal((8, 3, 8))
    stem, _ = ResNet1D._conv(x, net.views(params)['stem.conv.w'], None, 1, None, 'stem.conv')
    n = stem.shape[0] * stem.shape[2]

    frozen = net.init_stats()
    net.forward(params, x, 'train', frozen, update_stats=False)
    assert np.array_equal(frozen, net.init_stats())

    stats = net.init_stats()
    net.forward(params, x, 'train', stats)
    views = net.stat_views(stats)
    np.testing.assert_allclose(views['stem.bn.running_mean'], 0.1 * stem.mean(axis=(0, 2)), atol=1e-12)
    np.testing.assert_allclose(views['stem.bn.running_var'],
                               0.9 + 0.1 * stem.var(axis=(0, 2)) * n / (n - 1), atol=1e-12)
    print("✅ Momentum update with unbiased variance")
    return True


def test_checkpoint_roundtrip():
    """Binary checkpoint reproduces parameters and predictions; damage is detected"""
    print("\n💾 Testing Checkpoints")
    print("=" * 40)

    net = ResNet1D(SMALL_ARCH)
    checkpoint = ModelCheckpoint(
        arch=SMALL_ARCH, params=net.init_params(9), stats=net.init_stats(), features=['f0', 'f1', 'f2'],
        column_version='1', label_params={'T_w': 360.0}, seed=9, epoch=4, val_macro_f1=0.75,
        input_mean=[0.0, 1.0, 2.0], input_std=[1.0, 2.0, 0.5], fold=2,
        train_patients=['P1', 'P2'], val_patients=['P3'])
    x = np.random.default_rng(8).standard_normal((3, 3, 8))

    with tempfile.TemporaryDirectory() as tmp:
        path = checkpoint.save(os.path.join(tmp, 'fold2.ckpt'))
        loaded = ModelCheckpoint.load(path)
        assert np.array_equal(loaded.params, checkpoint.params)
        assert loaded.header() == checkpoint.header()
        np.testing.assert_array_equal(loaded.predict_proba(x), checkpoint.predict_proba(x))
        print(f"✅ {os.path.getsize(path)} bytes, identical predictions after reload")

        with open(path, 'rb') as f:
            blob = f.read()
        with open(path, 'wb') as f:
            f.write(blob[:-8])
        try:
            ModelCheckpoint.load(path)
        except ShapeError as e:
            assert 'declares' in str(e)
            print("✅ Truncated checkpoint rejected")
        else:
            raise AssertionError("truncated checkpoint should fail")

        checkpoint.version = 99
        checkpoint.save(path)
        try:
            ModelCheckpoint.load(path)
        except ShapeError as e:
            assert 'unsupported checkpoint version' in str(e)
        else:
            raise AssertionError("unknown version should fail")
    return True


def test_standardizer():
    """Per-feature z-scores clipped to ±10; constant features keep unit SD"""
    print("\n📏 Testing Input Standardization")
    print("=" * 40)

    x = np.zeros((4, 2, 5))
    x[:, 0] = np.arange(20.0).reshape(4, 5)
    x[:, 1] = 3.0
    mean, std = fit_standardizer(x)
    np.testing.assert_allclose(mean, [9.5, 3.0])
    assert std[1] == 1.0

    outlier = x.copy()
    outlier[0, 0, 0] = 1e6
    z = standardize(outlier, mean, std)
    assert z[0, 0, 0] == 10.0 and np.all(z[:, 1] == 0.0)
    print("✅ Constant feature keeps unit SD, outlier clipped at +10")
    return True


def test_adam_step():
    """Decoupled decay first, then the bias-corrected Adam delta"""
    print("\n🏃 Testing Adam Update")
    print("=" * 40)

    cfg = TrainConfig(lr=0.01, weight_decay=0.1)
    params = np.array([1.0, -2.0, 0.5])
    mask = np.array([1.0, 1.0, 0.0])
    state = AdamState.zeros(3)
    grads_seq = [np.array([0.3, -0.1, 2.0]), np.array([0.1, 0.2, -1.0]), np.array([-0.4, 0.0, 0.5])]

    expected = params.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for t, grads in enumerate(grads_seq, start=1):
        params, state = adam_step(params, grads, state, cfg, mask)
        for i in range(3):
            m[i] = 0.9 * m[i] + 0.1 * grads[i]
            v[i] = 0.999 * v[i] + 0.001 * grads[i] ** 2
            decayed = expected[i] - (0.01 * 0.1 * expected[i] if mask[i] else 0.0)
            m_hat = m[i] / (1 - 0.9 ** t)
            v_hat = v[i] / (1 - 0.999 ** t)
            expected[i] = decayed - 0.01 * m_hat / (math.sqrt(v_hat) + 1e-8)
        np.testing.assert_allclose(params, expected, rtol=1e-12, atol=1e-15)
    assert state.t == 3
    print(f"✅ Three steps match the reference: {np.round(params, 6)}")
    return True


def test_patient_folds():
    """Disjoint, covering and stratified on has_warning"""
    print("\n🗂️  Testing Patient Folds")
    print("=" * 40)

    patients = [(f"P{i:02d}", i < 7) for i in range(23)]
    folds = patient_folds(patients, 5, seed=3)

    members = [p for fold in folds for p in fold]
    assert sorted(members) == sorted(p for p, _ in patients) and len(set(members)) == 23
    positives = [sum(p in {q for q, w in patients if w} for p in fold) for fold in folds]
    sizes = [len(fold) for fold in folds]
    assert max(positives) - min(positives) <= 1, f"positives per fold {positives}"
    assert max(sizes) - min(sizes) <= 1, f"fold sizes {sizes}"
    assert patient_folds(patients, 5, seed=3) == folds
    assert patient_folds(patients, 5, seed=4) != folds
    print(f"✅ Sizes {sizes}, positives {positives}")

    try:
        patient_folds(patients[:3], 5)
    except ValueError as e:
        assert 'fewer patients than folds' in str(e)
    else:
        raise AssertionError("3 patients cannot fill 5 folds")
    return True


def test_fold_leakage():
    """No patient's windows reach both sides of any split, over 1000 random cohorts"""
    print("\n🔒 Testing Fold Leakage")
    print("=" * 40)

    rng = np.random.default_rng(17)
    for trial in range(1000):
        n = int(rng.integers(2, 40))
        k = int(rng.integers(2, min(n, 10) + 1))
        patients = [(f"P{i:03d}", bool(rng.random() < 0.4)) for i in range(n)]
        windows = [(p, j) for p, _ in patients for j in range(int(rng.integers(1, 6)))]
        folds = patient_folds(patients, k, seed=trial)

        assert len(folds) == k
        assert sorted(p for fold in folds for p in fold) == sorted(p for p, _ in patients)
        for i, fold in enumerate(folds):
            test = [w for w in windows if w[0] in fold]
            train = [w for w in windows if w[0] not in fold]
            assert len(test) + len(train) == len(windows)
            for p, _ in test:
                assert all(q != p for q, _ in train), f"trial {trial}: {p} on both sides of fold {i}"
            for other in folds[i + 1:]:
                assert not set(fold) & set(other)
    print("✅ 1000 cohorts: folds partition patients, no window leaks across a split")
    return True


def test_overfit_and_determinism():
    """A separable toy problem is learned, and reruns are bit-identical"""
    print("\n🎯 Testing Fold Training")
    print("=" * 40)

    rng = np.random.default_rng(10)
    y = np.tile([0, 1], 32)
    x = rng.standard_normal((64, 3, 8))
    x[:, 0] += np.where(y == 1, 1.0, -1.0)[:, None]
    cfg = TrainConfig(lr=1e-2, epochs=30, batch=16, seed=4)

    epochs_seen = []
    trainer = FoldTrainer(SMALL_ARCH, cfg)
    trainer.set_progress_callback(lambda current, total: epochs_seen.append(current))
    best = trainer.fit(x, y, x, y)
    assert epochs_seen == list(range(1, 31))
    assert best['val_macro_f1'] >= 0.95, f"val macro-F1 {best['val_macro_f1']:.3f}"
    assert len(best['history']) == 30
    print(f"✅ Best epoch {best['epoch']}, macro-F1 {best['val_macro_f1']:.3f}")

    short = TrainConfig(lr=1e-2, epochs=3, batch=16, seed=4)
    first = FoldTrainer(SMALL_ARCH, short, fold=1).fit(x, y, x, y)
    second = FoldTrainer(SMALL_ARCH, short, fold=1).fit(x, y, x, y)
    assert np.array_equal(first['params'], second['params'])
    assert np.array_equal(first['stats'], second['stats'])
    other = FoldTrainer(SMALL_ARCH, short, fold=2).fit(x, y, x, y)
    assert not np.array_equal(first['params'], other['params'])
    print("✅ Same seed and fold give identical parameters")
    return True


def test_cross_validation():
    """Patient-level CV learns an injected shift; checkpoints apply to new data"""
    print("\n🔬 Testing Cross-Validation")
    print("=" * 40)

    dataset = synthetic_dataset()
    arch = ArchSpec(in_channels=1, length=10, stem_channels=8, stem_kernel=3,
                    blocks=(BlockSpec(8, 3), BlockSpec(16, 3, 2)))
    cfg = TrainConfig(lr=1e-2, epochs=8, batch=32, seed=0, folds=5)
    result = train_cv(dataset, arch, cfg)

    assert len(result.checkpoints) == 5 and len(result.fold_table) == 5
    held_out = [p for fold in result.folds for p in fold]
    assert sorted(held_out) == sorted(dataset.patients())
    for checkpoint, fold in zip(result.checkpoints, result.folds):
        assert 'f0' in checkpoint.features
        assert not set(checkpoint.train_patients) & set(fold)
        assert checkpoint.arch.in_channels == len(checkpoint.features)
    mean_auc = float(result.fold_table['auc'].mean())
    assert mean_auc >= 0.9, f"mean fold AUC {mean_auc:.3f}"
    print(f"✅ Mean fold AUC {mean_auc:.3f}, macro-F1 {result.fold_table['macro_f1'].mean():.3f}")

    fresh = synthetic_dataset(n_pos=3, n_neg=3, seed=99)
    scores = apply_checkpoint(result.checkpoints[0], fresh)
    assert scores.shape == (len(fresh),) and np.all((scores >= 0) & (scores <= 1))
    assert roc_auc(scores, fresh.y) >= 0.9
    print(f"✅ Frozen fold-0 model on fresh patients: AUC {roc_auc(scores, fresh.y):.3f}")

    try:
        apply_checkpoint(result.checkpoints[0], fresh.select_columns(['f1', 'f2']))
    except ValueError as e:
        assert 'lacks checkpoint features' in str(e)
    else:
        raise AssertionError("missing feature columns should fail")

    negatives = fresh.subset([p for p in fresh.patients() if p.startswith('N')])
    try:
        train_cv(negatives, arch, cfg)
    except ValueError as e:
        assert 'degenerate' in str(e)
    else:
        raise AssertionError("single-class dataset should fail")
    return True


def test_permutation_null():
    """Training on shuffled labels cannot produce signal"""
    print("\n🎲 Testing Permutation Null")
    print("=" * 40)

    dataset = shuffle_labels(synthetic_dataset(), seed=21)
    assert dataset.y.sum() == synthetic_dataset().y.sum()
    arch = ArchSpec(in_channels=1, length=10, stem_channels=8, stem_kernel=3,
                    blocks=(BlockSpec(8, 3), BlockSpec(16, 3, 2)))
    cfg = TrainConfig(lr=1e-2, epochs=8, batch=32, seed=0, folds=5)
    # keep every feature so stage 1 cannot empty the selection on pure noise
    result = train_cv(dataset, arch, cfg, d_min=0.0)

    mean_auc = float(result.fold_table['auc'].mean())
    assert 0.4 <= mean_auc <= 0.6, f"shuffled-label AUC {mean_auc:.3f}"
    print(f"✅ Shuffled-label mean fold AUC {mean_auc:.3f}")
    return True


TESTS = [
    ("Convolution Oracle", test_conv_oracle),
    ("Forward Contract", test_forward_contract),
    ("Gradient Fidelity", test_gradient_check),
    ("Weighted Cross-Entropy", test_weighted_cross_entropy),
    ("Running Statistics", test_running_statistics),
    ("Checkpoints", test_checkpoint_roundtrip),
    ("Standardization", test_standardizer),
    ("Adam Update", test_adam_step),
    ("Patient Folds", test_patient_folds),
    ("Fold Leakage", test_fold_leakage),
    ("Fold Training", test_overfit_and_determinism),
    ("Cross-Validation", test_cross_validation),
    ("Permutation Null", test_permutation_null),
]


def main():
    """Run all Phase 3 tests"""
    print("🚀 PPG Stroke Early-Warning - Phase 3 Tests")
    print("=" * 50)

    results = []
    for name, test in TESTS:
        try:
            results.append((name, bool(test())))
        except Exception as e:
            print(f"❌ {name} failed: {type(e).__name__}: {e}")
            results.append((name, False))

    print("\n📋 Test Summary")
    print("=" * 40)
    all_passed = True
    for test_name, passed in results:
        status = "✅ PASSED" if passed else "❌ FAILED"
        print(f"  {test_name:25} {status}")
        all_passed = all_passed and passed

    print(f"\n🎯 Overall Result: {'✅ ALL TESTS PASSED' if all_passed else '❌ SOME TESTS FAILED'}")
    return all_passed


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import chisquare

from avvp import tensor as tn
from avvp.data import SynthConfig, generate_synthetic
from avvp.errors import DimensionError
from avvp.model import MMT, ModelConfig, PredictionSet
from avvp.objectives import (
    LossBreakdown,
    WeakLabels,
    bce,
    capc_loss,
    classification_loss,
    sample_cross_audios,
    sample_cross_indices,
    total_loss,
)
from avvp.train import batch_loss

TINY = ModelConfig(T=4, C=3, d=8, d_a=5, d_v=5)


def _preds(pa, pv, pvid):
    z = tn.Tensor(np.zeros((1, 1)))
    return PredictionSet(z, z, tn.Tensor(np.asarray(pa, float)), tn.Tensor(np.asarray(pv, float)), tn.Tensor(np.asarray(pvid, float)))


def test_bce_perfect_prediction():
    assert bce(np.array([1.0, 0.0]), np.array([1, 0])).item() <= 1e-6


def test_bce_half():
    assert math.isclose(bce(np.array([0.5]), np.array([1])).item(), math.log(2), rel_tol=1e-12)


def test_bce_symmetry():
    rng = np.random.default_rng(0)
    p, y = rng.uniform(0.01, 0.99, 7), rng.integers(0, 2, 7)
    assert math.isclose(bce(p, y).item(), bce(1 - p, 1 - y).item(), rel_tol=1e-12)


def test_bce_shape_mismatch():
    with pytest.raises(DimensionError):
        bce(np.array([0.5, 0.5]), np.array([1]))


def test_classification_loss_examples():
    y = np.array([1.0, 0.0, 1.0])
    lb = classification_loss(_preds(y, y, y), WeakLabels.from_union(y))
    assert lb.l_cls_total.item() < 1e-5
    lb = classification_loss(_preds([0.5], [0.5], [0.5]), WeakLabels.from_union([1]))
    assert math.isclose(lb.l_cls_total.item(), 3 * math.log(2), rel_tol=1e-12)
    assert math.isclose(lb.l_cls_total.item(), lb.l_cls_a.item() + lb.l_cls_v.item() + lb.l_cls_video.item(), abs_tol=1e-9)


def test_classification_loss_monotone_toward_target():
    rng = np.random.default_rng(1)
    for _ in range(200):
        Y = rng.integers(0, 2, 4).astype(float)
        pa, pv, pvid = rng.uniform(0.01, 0.99, (3, 4))
        labels = WeakLabels.from_union(Y)
        before = classification_loss(_preds(pa, pv, pvid), labels).l_cls_total.item()
        step = rng.uniform(0, 1)
        closer = pa + step * (Y - pa)
        after = classification_loss(_preds(closer, pv, pvid), labels).l_cls_total.item()
        assert after <= before + 1e-12


def test_classification_loss_class_permutation():
    rng = np.random.default_rng(2)
    pa, pv, pvid = rng.uniform(0.01, 0.99, (3, 5))
    Y = np.array([1, 0, 1, 1, 0], float)
    Ya, Yv = np.array([1, 0, 0, 1, 0], float), np.array([0, 0, 1, 1, 0], float)
    perm = rng.permutation(5)
    base = classification_loss(_preds(pa, pv, pvid), WeakLabels(Y, Ya, Yv)).l_cls_total.item()
    moved = classification_loss(_preds(pa[perm], pv[perm], pvid[perm]), WeakLabels(Y[perm], Ya[perm], Yv[perm]))
    assert math.isclose(base, moved.l_cls_total.item(), rel_tol=1e-12)


def test_weak_labels_union():
    labels = WeakLabels(np.array([1, 1, 0]), np.array([1, 0, 0]), np.array([0, 1, 0]))
    assert labels.check_union()
    assert not WeakLabels(np.array([1, 1, 0]), np.array([1, 0, 0]), np.array([0, 0, 0])).check_union()


def test_capc_examples():
    assert capc_loss(np.array([0.2, 0.7]), [np.array([0.2, 0.7])]).item() == 0.0
    assert capc_loss(np.array([1.0, 0.0]), [np.array([0.0, 1.0])]).item() == 2.0
    orig, r = np.array([0.3, 0.9, 0.1]), np.array([0.5, 0.2, 0.4])
    assert math.isclose(capc_loss(orig, [r]).item(), capc_loss(orig, [r, r]).item(), rel_tol=1e-15)


def test_capc_requires_pairs_and_batches():
    with pytest.raises(ValueError):
        capc_loss(np.array([0.5]), [])
    orig = np.array([[1.0, 0.0], [0.5, 0.5]])
    rand = np.array([[0.0, 1.0], [0.5, 0.5]])
    assert capc_loss(orig, [rand]).item() == 1.0  # mean of 2.0 and 0.0


def test_capc_gradient_reaches_both_arguments():
    a = tn.parameter(np.array([0.2, 0.8]))
    b = tn.parameter(np.array([0.6, 0.1]))
    tn.backward(capc_loss(a, [b]))
    assert np.allclose(a.grad, 2 * (a.data - b.data))
    assert np.allclose(b.grad, 2 * (b.data - a.data))


def _breakdown(l_cls, l_ccr):
    t = lambda v: tn.Tensor(np.array(v))
    return LossBreakdown(t(0.0), t(0.0), t(l_cls), t(l_cls), t(l_ccr))


def test_total_loss_examples():
    assert total_loss(_breakdown(1.0, 0.4), 0.0).item() == 1.0
    assert math.isclose(total_loss(_breakdown(1.0, 0.4), 0.5).item(), 1.2, rel_tol=1e-12)
    d = total_loss(_breakdown(1.0, 0.4), 0.75).item() - total_loss(_breakdown(1.0, 0.4), 0.25).item()
    assert math.isclose(d / 0.5, 0.4, rel_tol=1e-12)
    assert total_loss(_breakdown(1.0, 0.4)).item() == pytest.approx(1.2)
    with pytest.raises(ValueError):
        total_loss(_breakdown(1.0, 0.4), -1.0)


def test_cross_pairing_forced_and_deterministic():
    idx = sample_cross_indices(2, 1, np.random.default_rng(0))
    assert idx.tolist() == [[1], [0]]
    a = sample_cross_indices(10, 3, np.random.default_rng(5))
    b = sample_cross_indices(10, 3, np.random.default_rng(5))
    assert np.array_equal(a, b)
    for i, row in enumerate(a):
        assert i not in row and len(set(row)) == 3


def test_cross_pairing_errors():
    with pytest.raises(ValueError):
        sample_cross_indices(1, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_cross_indices(3, 3, np.random.default_rng(0))


def test_cross_pairing_uniformity():
    # each row's pick, as an offset (j - i) mod B, is uniform over 1..B-1,
    # so pooling rows gives 10,000 draws from 157 batches
    B = 64
    rng = np.random.default_rng(0)
    counts = np.zeros(B)
    rows = np.arange(B)[:, None]
    draws = 0
    while draws < 10_000:
        idx = sample_cross_indices(B, 1, rng)
        np.add.at(counts, (idx - rows).ravel() % B, 1)
        draws += B
    assert counts[0] == 0
    p = 1 / (B - 1)
    sigma = math.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts[1:] - draws * p) <= 3 * sigma)
    assert chisquare(counts[1:]).pvalue > 1e-3


def test_sample_cross_audios_returns_foreign_audio():
    ds = generate_synthetic(SynthConfig(num_videos=5, C=4, d_a=3, d_v=3, seed=1))
    out = sample_cross_audios(ds.samples, 2, np.random.default_rng(0))
    for s, foreign in zip(ds.samples, out):
        assert len(foreign) == 2
        assert all(f is not s.audio_feats for f in foreign)


def _tiny_batch(n=3, seed=0):
    return generate_synthetic(SynthConfig(num_videos=n, T=4, C=3, d_a=5, d_v=5, seed=seed)).samples


@pytest.mark.parametrize("variant", ["full", "han"])
def test_end_to_end_grad_check_with_capc(variant):
    cfg = replace(TINY, variant=variant)
    model = MMT(cfg, seed=3)
    batch = _tiny_batch()
    labels = {s.id: (s.Y, s.Y) for s in batch}

    def f():
        loss, _ = batch_loss(model, batch, labels, 0.5, 1, np.random.default_rng(7))
        return loss

    report = tn.grad_check(f, model.params, max_entries=4, rng=np.random.default_rng(0))
    assert report.passed, report
    assert report.n_checked >= 4 * len(model.params) - 20


def test_loss_breakdown_invariants():
    model = MMT(TINY, seed=4)
    batch = _tiny_batch(4, seed=2)
    labels = {s.id: (s.Y, s.Y) for s in batch}
    _, lb = batch_loss(model, batch, labels, 0.5, 2, np.random.default_rng(0))
    v = lb.values()
    assert v["l_ccr"] >= 0
    assert math.isclose(v["l_cls_total"], v["l_cls_a"] + v["l_cls_v"] + v["l_cls_video"], abs_tol=1e-9)
    assert math.isclose(v["l_total"], v["l_cls_total"] + 0.5 * v["l_ccr"], abs_tol=1e-9)

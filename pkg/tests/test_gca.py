import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from classaware_seg.gca import GlobalClassAware, PreClassifier, global_class_centers, preclassify
from classaware_seg.lca import local_class_centers, split
from classaware_seg.oracles import finite_diff_grad, oracle_class_centers

from .conftest import to64

finite = st.floats(-5, 5, allow_nan=False, width=64)


def test_preclassify_shape():
    clf = PreClassifier(8, 3)
    assert preclassify(torch.rand(2, 8, 2, 2), clf).shape == (2, 3, 2, 2)


def test_preclassify_zero_weights_give_bias():
    clf = PreClassifier(8, 3)
    with torch.no_grad():
        clf.weight.zero_()
        clf.bias.copy_(torch.tensor([0.5, -1.0, 2.0]))
    out = clf(torch.randn(1, 8, 3, 3))
    assert torch.equal(out, torch.tensor([0.5, -1.0, 2.0]).view(1, 3, 1, 1).expand(1, 3, 3, 3))


def test_preclassify_rejects_single_class():
    with pytest.raises(ValueError):
        PreClassifier(4, 1)


def test_preclassify_gradient(rng):
    clf = PreClassifier(4, 3).double()
    x0 = rng.normal(size=(1, 4, 2, 2))
    x = to64(x0).requires_grad_()
    (g,) = torch.autograd.grad(clf(x).mean(), x)
    with torch.no_grad():
        numeric = finite_diff_grad(lambda a: clf(to64(a)).mean().item(), x0)
    assert np.abs(g.numpy() - numeric).max() / np.abs(numeric).max() < 1e-4


def test_uniform_logits_give_spatial_mean(rng):
    feat = to64(rng.normal(size=(2, 5, 3, 4)))
    centers = global_class_centers(feat, torch.zeros(2, 3, 3, 4, dtype=torch.float64))
    mean = feat.mean(dim=(2, 3))
    for k in range(3):
        torch.testing.assert_close(centers[:, k], mean, rtol=0, atol=1e-12)


def test_saturated_logits_pick_a_pixel(rng):
    feat = to64(rng.normal(size=(1, 4, 3, 3)))
    logits = torch.zeros(1, 2, 3, 3, dtype=torch.float64)
    logits[0, 0, 1, 2] = 1e4
    logits[0, 1, 0, 0] = 1e4
    centers = global_class_centers(feat, logits)
    torch.testing.assert_close(centers[0, 0], feat[0, :, 1, 2])
    torch.testing.assert_close(centers[0, 1], feat[0, :, 0, 0])


def test_hand_case_matches_brute_force():
    feat = np.array([[[1.0, 2.0], [3.0, 4.0]], [[0.0, -1.0], [2.0, 5.0]]])
    logits = np.array([[[0.0, 1.0], [2.0, -1.0]], [[3.0, 0.0], [0.0, 0.0]]])
    expected = oracle_class_centers(feat, logits)
    got = global_class_centers(to64(feat)[None], to64(logits)[None])[0]
    np.testing.assert_allclose(got.numpy(), expected, rtol=0, atol=1e-12)


def test_module_returns_centers_and_logits():
    gca = GlobalClassAware(6, 4)
    centers, logits = gca(torch.rand(2, 6, 2, 2))
    assert centers.shape == (2, 4, 6) and logits.shape == (2, 4, 2, 2)


def test_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        global_class_centers(torch.rand(1, 3, 4, 4), torch.rand(1, 2, 4, 3))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 3, 4), elements=finite), arrays(np.float64, (2, 3, 4), elements=finite),
       st.randoms(use_true_random=False))
def test_center_properties(feat, logits, rnd):
    f, d = to64(feat)[None], to64(logits)[None]
    centers = global_class_centers(f, d)[0].numpy()
    weights = d.flatten(2).softmax(-1)
    assert np.allclose(weights.sum(-1).numpy(), 1, atol=1e-6)
    flat = feat.reshape(3, -1)
    assert (centers >= flat.min(1) - 1e-9).all() and (centers <= flat.max(1) + 1e-9).all()
    perm = list(range(12))
    rnd.shuffle(perm)
    fp = f.flatten(2)[..., perm].reshape(1, 3, 3, 4)
    dp = d.flatten(2)[..., perm].reshape(1, 2, 3, 4)
    np.testing.assert_allclose(global_class_centers(fp, dp)[0].numpy(), centers, atol=1e-12)


def test_single_window_local_equals_global(rng):
    feat, logits = to64(rng.normal(size=(2, 4, 4, 6))), to64(rng.normal(size=(2, 3, 4, 6)))
    win, win_logits, _ = split(feat, logits, 1, 1)
    torch.testing.assert_close(local_class_centers(win, win_logits), global_class_centers(feat, logits))


def test_center_gradient_both_inputs(rng):
    f0, d0 = rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(1, 3, 2, 2))
    readout = to64(rng.normal(size=(1, 3, 2)))

    def scalar(f, d):
        return (global_class_centers(f, d) * readout).sum()

    f, d = to64(f0).requires_grad_(), to64(d0).requires_grad_()
    gf, gd = torch.autograd.grad(scalar(f, d), (f, d))
    nf = finite_diff_grad(lambda a: scalar(to64(a), to64(d0)).item(), f0)
    nd = finite_diff_grad(lambda a: scalar(to64(f0), to64(a)).item(), d0)
    assert np.abs(gf.numpy() - nf).max() / np.abs(nf).max() < 1e-4
    assert np.abs(gd.numpy() - nd).max() / np.abs(nd).max() < 1e-4

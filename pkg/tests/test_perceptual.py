import numpy as np
import pytest
import torch

from ctstyleseg.data import one_hot
from ctstyleseg.perceptual import (
    LossError,
    LossSpec,
    content_loss,
    extract_features,
    finite_diff_check,
    gram,
    layer_masks,
    masked_gram,
    small_backbone,
    style_loss,
    total_loss,
    vgg19,
)

D = torch.float64


def brute_gram(F):
    F = np.asarray(F, np.float64)
    n = F.shape[0]
    flat = F.reshape(n, -1)
    G = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            s = 0.0
            for p in range(flat.shape[1]):
                s += flat[i, p] * flat[j, p]
            G[i, j] = s
    return G


def rand_masks(rng, n_labels, side):
    return torch.as_tensor(one_hot(rng.integers(0, n_labels, (side, side)), n_labels))


@pytest.fixture(scope="module")
def bb64():
    return small_backbone(0, dtype=D)


def test_gram_examples():
    assert gram(torch.ones(1, 2, 2)).tolist() == [[4.0]]
    F = torch.tensor([[[1.0, 0.0]], [[0.0, 1.0]]])
    assert torch.equal(gram(F), torch.eye(2))
    rng = np.random.default_rng(1)
    F = rng.standard_normal((3, 5, 4))
    np.testing.assert_allclose(gram(torch.as_tensor(F)).numpy(), brute_gram(F), rtol=1e-6)


def test_gram_batched_matches_unbatched():
    F = torch.randn(4, 6, 5, 5, dtype=D)
    G = gram(F)
    for b in range(4):
        assert torch.allclose(G[b], gram(F[b]))


def test_masked_gram_examples():
    rng = np.random.default_rng(2)
    F = torch.as_tensor(rng.standard_normal((4, 6, 6)))
    assert torch.allclose(masked_gram(F, torch.ones(6, 6)), gram(F))
    assert torch.count_nonzero(masked_gram(F, torch.zeros(6, 6))) == 0
    half = torch.as_tensor(rng.random((6, 6)) < 0.5)
    zeroed = F.numpy() * half.numpy()[None]
    np.testing.assert_allclose(masked_gram(F, half).numpy(), brute_gram(zeroed), rtol=1e-6)
    with pytest.raises(LossError):
        masked_gram(F, torch.ones(3, 3))


def test_masked_gram_definition_equivalence():
    rng = np.random.default_rng(3)
    for _ in range(10):
        F = torch.as_tensor(rng.standard_normal((5, 7, 7)))
        m = torch.as_tensor(rng.random((7, 7)) < 0.4)
        assert torch.allclose(gram(F * m), masked_gram(F, m), rtol=0, atol=1e-12)


def test_gram_symmetric_psd():
    rng = np.random.default_rng(4)
    for _ in range(20):
        F = torch.as_tensor(rng.standard_normal((6, 4, 5)) * rng.uniform(0.1, 10))
        G = gram(F)
        assert torch.equal(G, G.T)
        ev = np.linalg.eigvalsh(G.numpy())
        assert ev.min() >= -1e-8 * np.linalg.norm(G.numpy())


def _stack(rng, shape):
    return {"l": torch.as_tensor(rng.standard_normal(shape))}


def test_content_loss_hand_example():
    spec = LossSpec(("l",), ("l",))
    R = {"l": torch.tensor([[[1.0, 2.0], [3.0, 4.0]]], dtype=D)}
    O = {"l": torch.zeros(1, 2, 2, dtype=D)}
    masks = {"l": torch.ones(1, 2, 2)}
    assert float(content_loss(R, O, masks, spec)) == pytest.approx(3.75, abs=1e-12)
    assert float(content_loss(R, R, masks, spec)) == 0.0


def test_content_loss_matches_brute_force():
    rng = np.random.default_rng(5)
    spec = LossSpec(("l",), ("l",))
    for _ in range(5):
        R, O = _stack(rng, (3, 6, 6)), _stack(rng, (3, 6, 6))
        labels = rng.integers(0, 3, (6, 6))
        masks = {"l": torch.as_tensor(one_hot(labels, 3))}
        expect = 0.0
        n, m = 3, 36
        for sg in range(3):
            for c in range(n):
                for i in range(6):
                    for j in range(6):
                        if labels[i, j] == sg:
                            d = float(R["l"][c, i, j] - O["l"][c, i, j])
                            expect += d * d / (2 * n * m)
        got = float(content_loss(R, O, masks, spec))
        assert got == pytest.approx(expect, rel=1e-6)


def test_style_loss_single_segment_matches_unmasked_oracle():
    rng = np.random.default_rng(6)
    spec = LossSpec(("l",), ("l",), segment_ids=(0,))
    for _ in range(5):
        R, S = _stack(rng, (4, 5, 5)), _stack(rng, (4, 5, 5))
        full = {"l": torch.ones(1, 5, 5)}
        GR, GS = brute_gram(R["l"]), brute_gram(S["l"])
        expect = ((GR - GS) ** 2).sum() / (4 * 4**2 * 25**2)
        assert float(style_loss(R, S, full, full, spec)) == pytest.approx(expect, rel=1e-5)


def test_style_loss_identical_is_zero_and_disjoint_additive():
    rng = np.random.default_rng(7)
    R = _stack(rng, (4, 6, 6))
    m = {"l": rand_masks(rng, 3, 6)}
    spec = LossSpec(("l",), ("l",))
    assert float(style_loss(R, R, m, m, spec)) == 0.0
    S = _stack(rng, (4, 6, 6))
    ms = {"l": rand_masks(rng, 3, 6)}
    whole = float(style_loss(R, S, m, ms, LossSpec(("l",), ("l",), segment_ids=(1, 2))))
    parts = sum(float(style_loss(R, S, m, ms, LossSpec(("l",), ("l",), segment_ids=(k,))))
                for k in (1, 2))
    assert whole == pytest.approx(parts, abs=1e-15)


def test_empty_segment_contributes_nothing():
    rng = np.random.default_rng(8)
    R, S = _stack(rng, (3, 4, 4)), _stack(rng, (3, 4, 4))
    mr = torch.zeros(2, 4, 4)
    mr[0] = 1
    ms = torch.zeros(2, 4, 4)
    ms[1] = 1
    for norm in ("literal", "masked_count"):
        spec = LossSpec(("l",), ("l",), normalization=norm)
        assert float(style_loss(R, S, {"l": mr}, {"l": ms}, spec)) == 0.0


def test_masked_count_normalization_is_area_invariant():
    # constant features over areas of different size give identical normalized Grams
    spec = LossSpec(("l",), ("l",), normalization="masked_count", segment_ids=(1,))
    R = {"l": torch.ones(2, 8, 8, dtype=D)}
    mr = torch.zeros(2, 8, 8)
    mr[1, :2] = 1
    mr[0] = 1 - mr[1]
    ms = torch.zeros(2, 8, 8)
    ms[1, :6] = 1
    ms[0] = 1 - ms[1]
    assert float(style_loss(R, R, {"l": mr}, {"l": ms}, spec)) == pytest.approx(0.0, abs=1e-15)
    lit = LossSpec(("l",), ("l",), segment_ids=(1,))
    assert float(style_loss(R, R, {"l": mr}, {"l": ms}, lit)) > 0


def test_loss_errors():
    spec = LossSpec(("l",), ("l",))
    R = {"l": torch.zeros(2, 4, 4)}
    with pytest.raises(LossError):
        style_loss(R, {}, {"l": torch.ones(1, 4, 4)}, {"l": torch.ones(1, 4, 4)}, spec)
    with pytest.raises(LossError):
        style_loss(R, R, {"l": torch.ones(1, 2, 2)}, {"l": torch.ones(1, 4, 4)}, spec)
    with pytest.raises(LossError):
        content_loss(R, {"l": torch.zeros(2, 2, 2)}, {"l": torch.ones(1, 4, 4)}, spec)
    with pytest.raises(LossError):
        LossSpec((), ("l",))
    with pytest.raises(LossError):
        LossSpec(style_weight=-1.0)


def test_vgg_shapes_and_determinism():
    net = vgg19()
    x = torch.rand(64, 64)
    f = extract_features(net, x, ["conv1_1"])
    assert tuple(f["conv1_1"].shape) == (64, 64, 64)
    f32 = extract_features(net, torch.rand(32, 32), ["relu3_1"])
    assert net.info("relu3_1").factor == 4
    assert tuple(f32["relu3_1"].shape[-2:]) == (8, 8)
    a = extract_features(net, x, ["relu2_1"])["relu2_1"]
    b = extract_features(vgg19(), x, ["relu2_1"])["relu2_1"]
    assert torch.equal(a, b)
    assert net.dims("relu5_1", 64) == (512, 16)
    with pytest.raises(LossError):
        extract_features(net, x, ["conv9_9"])
    with pytest.raises(LossError):
        extract_features(net, x * 3, ["conv1_1"])


def test_backbone_is_frozen():
    net = small_backbone(0)
    assert all(not p.requires_grad for p in net.parameters())
    net.train()
    assert not net.training
    for name in net.order:
        f = net.info(name).factor
        assert f & (f - 1) == 0


def _total_case(seed, side=16, n_labels=3):
    rng = np.random.default_rng(seed)
    g = torch.Generator().manual_seed(seed)
    xs = [torch.rand(side, side, generator=g, dtype=D) for _ in range(3)]
    return xs, rand_masks(rng, n_labels, side), rand_masks(rng, n_labels, side)


SPEC = LossSpec(("relu1_1", "relu2_1"), ("relu2_1",), style_weight=1e3)


def test_total_loss_combination(bb64):
    (xr, xo, xs), mo, ms = _total_case(0)
    lc_only = total_loss(bb64, xr, xo, xs, mo, ms, LossSpec(SPEC.style_layers,
                                                             SPEC.content_layers, 0.0, 2.0))
    R = bb64(xr, ["relu1_1", "relu2_1"])
    O = bb64(xo, ["relu2_1"])
    S = bb64(xs, ["relu1_1", "relu2_1"])
    lm_o = layer_masks(mo, bb64, ["relu1_1", "relu2_1"])
    lm_s = layer_masks(ms, bb64, ["relu1_1", "relu2_1"])
    lc = content_loss(R, O, lm_o, SPEC)
    ls = style_loss(R, S, lm_o, lm_s, SPEC)
    assert float(lc_only) == pytest.approx(2.0 * float(lc), rel=1e-12)
    both = total_loss(bb64, xr, xo, xs, mo, ms, LossSpec(SPEC.style_layers,
                                                          SPEC.content_layers, 1.0, 1.0))
    assert float(both) == pytest.approx(float(lc) + float(ls), abs=1e-6)
    zero = total_loss(bb64, xs, xo, xs, ms, ms, LossSpec(SPEC.style_layers,
                                                          SPEC.content_layers, 1.0, 0.0))
    assert float(zero) == 0.0


def test_total_loss_invariant_to_label_permutation(bb64):
    (xr, xo, xs), mo, ms = _total_case(1, n_labels=4)
    perm = [2, 0, 3, 1]
    a = total_loss(bb64, xr, xo, xs, mo, ms, SPEC)
    b = total_loss(bb64, xr, xo, xs, mo[perm], ms[perm], SPEC)
    assert float(a) == pytest.approx(float(b), rel=1e-12)


def test_total_loss_gradient_available(bb64):
    (xr, xo, xs), mo, ms = _total_case(2)
    xr = xr.clone().requires_grad_(True)
    total_loss(bb64, xr, xo, xs, mo, ms, SPEC).backward()
    assert xr.grad is not None and xr.grad.shape == xr.shape
    assert torch.isfinite(xr.grad).all() and xr.grad.abs().sum() > 0


def test_finite_diff_check():
    x = torch.rand(8, 8, dtype=D)
    assert finite_diff_check(lambda v: (v**2).sum(), x, 1e-3, 20) < 1e-8
    with pytest.raises(ValueError):
        finite_diff_check(lambda v: (v**2).sum(), x, 0.0, 5)


def test_total_loss_gradient_matches_finite_differences(bb64):
    (xr, xo, xs), mo, ms = _total_case(3)
    err = finite_diff_check(lambda v: total_loss(bb64, v, xo, xs, mo, ms, SPEC), xr, 1e-3, 10)
    assert err < 1e-3

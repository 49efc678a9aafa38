"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the verdict lines are printed
even without ``-s``).  Set ``CTSTYLESEG_ACCEPT_DIR`` to keep the end-to-end
experiment outputs between runs; the stage cache then makes reruns cheap.
"""

import itertools
import os
import shutil
import time

import numpy as np
import pytest
import torch

from ctstyleseg.augment import AugmentationPlan, StyleBank, augment_dataset, expanded_size
from ctstyleseg.data import (
    AnnotatedSample,
    IntensityGrid,
    LabelSchema,
    SegMap,
    load_manifest,
    one_hot,
    write_dataset,
)
from ctstyleseg.generator import GeneratorConfig, generate, train_style_generator
from ctstyleseg.metrics import compare_reports, confusion, dice, pixel_accuracy
from ctstyleseg.perceptual import (
    LossSpec,
    content_loss,
    extract_features,
    finite_diff_check,
    gram,
    layer_masks,
    small_backbone,
    style_loss,
    total_loss,
    vgg19,
)
from ctstyleseg.phantom import DOMAIN_A, PhantomSpec, TextureDomain, generate_phantom
from ctstyleseg.pipeline import desk_config, run_experiment, verify_artifacts
from ctstyleseg.unet import TrainConfig, UNetConfig, build_unet, predict, train_unet

D = torch.float64


@pytest.fixture
def verdict(capsys):
    def emit(n, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {title}"
                  + (f" | {detail}" if detail else ""))
        assert ok, f"criterion {n} failed: {detail}"
    return emit


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


# --------------------------------------------------------------------------
# 1. loss oracles


def gatys_oracle(F, S):
    """Unmasked single-layer Gram loss written directly from its definition with numpy."""
    n = F.shape[0]
    m = F.shape[1] * F.shape[2]
    a, b = F.reshape(n, m), S.reshape(n, m)
    return float(np.sum((a @ a.T - b @ b.T) ** 2) / (4.0 * n**2 * m**2))


def test_criterion_1_loss_oracles(verdict):
    t0 = time.perf_counter()
    bb = small_backbone(0, dtype=D)
    rng = np.random.default_rng(100)
    spec = LossSpec(("relu1_1",), ("relu2_1",), segment_ids=(0,))
    full = {"relu1_1": torch.ones(1, 16, 16, dtype=D)}
    worst_style = 0.0
    for _ in range(20):
        x, y = (torch.as_tensor(rng.random((16, 16))) for _ in range(2))
        R = extract_features(bb, x, ["relu1_1"])
        S = extract_features(bb, y, ["relu1_1"])
        got = float(style_loss(R, S, full, full, spec))
        worst_style = max(worst_style, _rel(got, gatys_oracle(R["relu1_1"].numpy(),
                                                              S["relu1_1"].numpy())))

    worst_content = 0.0
    cspec = LossSpec(("relu2_1",), ("relu2_1",))
    for _ in range(20):
        x, o = (torch.as_tensor(rng.random((16, 16))) for _ in range(2))
        labels = rng.integers(0, 4, (16, 16))
        R = extract_features(bb, x, ["relu2_1"])["relu2_1"].numpy()
        O = extract_features(bb, o, ["relu2_1"])["relu2_1"].numpy()
        lm = layer_masks(torch.as_tensor(one_hot(labels, 4)), bb, ["relu2_1"])
        got = float(content_loss({"relu2_1": torch.as_tensor(R)}, {"relu2_1": torch.as_tensor(O)},
                                 lm, cspec))
        n, h, w = R.shape
        sub = labels[::2, ::2]  # relu2_1 sits after one 2x pooling
        expect = 0.0
        for sg in range(4):
            for c in range(n):
                for i in range(h):
                    for j in range(w):
                        if sub[i, j] == sg:
                            expect += (R[c, i, j] - O[c, i, j]) ** 2 / (2.0 * n * h * w)
        worst_content = max(worst_content, _rel(got, expect))
    secs = time.perf_counter() - t0
    verdict(1, "loss oracles", worst_style < 1e-5 and worst_content < 1e-6 and secs < 60,
            f"style rel err {worst_style:.2e} (<1e-5), content rel err {worst_content:.2e} "
            f"(<1e-6), {secs:.1f}s")


# --------------------------------------------------------------------------
# 2. gradient check


def test_criterion_2_gradient_check(verdict):
    t0 = time.perf_counter()
    bb = small_backbone(0, dtype=D)
    spec = LossSpec(("relu1_1", "relu2_1"), ("relu2_1",), style_weight=1e3)
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        g = torch.Generator().manual_seed(seed)
        xr, xo, xs = (torch.rand(16, 16, generator=g, dtype=D) for _ in range(3))
        mo = torch.as_tensor(one_hot(rng.integers(0, 3, (16, 16)), 3))
        ms = torch.as_tensor(one_hot(rng.integers(0, 3, (16, 16)), 3))
        err = finite_diff_check(lambda v: total_loss(bb, v, xo, xs, mo, ms, spec), xr,
                                eps=1e-3, trials=10, seed=seed)
        worst = max(worst, err)
    secs = time.perf_counter() - t0
    verdict(2, "gradient check", worst < 1e-3 and secs < 120,
            f"max rel err {worst:.2e} (<1e-3) over 5 seeds x 10 probes, {secs:.1f}s")


# --------------------------------------------------------------------------
# 3. segment additivity


def test_criterion_3_segment_additivity(verdict):
    rng = np.random.default_rng(3)
    bb = small_backbone(1, dtype=D)
    layers = ("relu1_1", "relu2_1")
    worst = 0.0
    for _ in range(50):
        k = int(rng.integers(2, 7))
        x, o, s = (torch.as_tensor(rng.random((16, 16))) for _ in range(3))
        mo = torch.as_tensor(one_hot(rng.integers(0, k, (16, 16)), k))
        ms = torch.as_tensor(one_hot(rng.integers(0, k, (16, 16)), k))
        R, O, S = (bb(v, layers) for v in (x, o, s))
        lo, ls_ = layer_masks(mo, bb, layers), layer_masks(ms, bb, layers)
        ids = rng.permutation(k)
        cut = int(rng.integers(1, k))
        parts = [tuple(sorted(ids[:cut].tolist())), tuple(sorted(ids[cut:].tolist()))]
        for norm in ("literal", "masked_count"):
            def f(seg):
                sp = LossSpec(layers, layers, segment_ids=seg, normalization=norm)
                return (float(style_loss(R, S, lo, ls_, sp)), float(content_loss(R, O, lo, sp)))
            whole = f(tuple(range(k)))
            a, b = f(parts[0]), f(parts[1])
            worst = max(worst, abs(whole[0] - a[0] - b[0]), abs(whole[1] - a[1] - b[1]))
    verdict(3, "segment additivity", worst <= 1e-10,
            f"max |L(SG) - L(SG1) - L(SG2)| = {worst:.2e} (<=1e-10) over 50 cases")


# --------------------------------------------------------------------------
# 4. Gram properties


def test_criterion_4_gram_properties(verdict):
    rng = np.random.default_rng(4)
    symmetric, worst = True, -np.inf
    for _ in range(50):
        shape = (int(rng.integers(1, 17)), int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        F = torch.as_tensor(rng.standard_normal(shape) * rng.uniform(1e-3, 1e3))
        G = gram(F)
        symmetric &= bool(torch.equal(G, G.T))
        ev = np.linalg.eigvalsh(G.numpy()).min()
        worst = max(worst, -ev / np.linalg.norm(G.numpy()))
    verdict(4, "Gram symmetry and PSD", symmetric and worst <= 1e-8,
            f"symmetric={symmetric}, max(-lambda_min/||G||)={worst:.2e} (<=1e-8), 50 blocks")


# --------------------------------------------------------------------------
# 5. augmentation cardinality


class ConstantStyle:
    def __init__(self, style_id, level):
        self.style_id = style_id
        self.level = level

    def generate(self, segmap, seed):
        return IntensityGrid(np.clip(segmap.labels / 10.0 + self.level, 0, 1))


def test_criterion_5_augmentation_cardinality(verdict, tmp_path):
    rng = np.random.default_rng(5)
    bad = []
    for m, n in itertools.product(range(1, 6), range(0, 5)):
        samples = [AnnotatedSample(f"s{i}", IntensityGrid(rng.random((8, 8))),
                                   SegMap(rng.integers(0, 7, (8, 8))), DOMAIN_A, "train")
                   for i in range(m)]
        src = write_dataset(samples, tmp_path / f"src_{m}_{n}", LabelSchema())
        bank = StyleBank([ConstantStyle(f"st{j}", 0.05 * j) for j in range(n)])
        out = augment_dataset(AugmentationPlan(src, bank, tmp_path / f"out_{m}_{n}", seed=m))
        ok = len(out) == m * (n + 1) == expanded_size(m, n)
        for ref in out.samples:
            src_ref = src.get(ref.meta["source_id"])
            ok &= (out.root / ref.mask).read_bytes() == (src.root / src_ref.mask).read_bytes()
        if not ok:
            bad.append((m, n))
    paper = expanded_size(700, 6)
    verdict(5, "augmentation cardinality m*(n+1)", not bad and paper == 4900,
            f"25 (m,n) cases, failures {bad}; 700*(6+1) = {paper}")


# --------------------------------------------------------------------------
# 6. U-Net contracts


def test_criterion_6_unet_contracts(verdict, tmp_path):
    t0 = time.perf_counter()
    cfg = UNetConfig(side=64, depth=3, base_width=16)
    spec = PhantomSpec(side=64)
    samples = [generate_phantom(spec, s, DOMAIN_A) for s in range(8)]
    _, probs = predict(build_unet(cfg, 0), samples[0].image)
    sm_err = float(np.abs(probs.sum(0) - 1).max())
    tc = TrainConfig(epochs=200, batch_size=8, lr=2e-3, seed=0)
    a, log_a = train_unet(samples, tc, cfg)
    b, _ = train_unet(samples, tc, cfg)
    bitwise = a.save(tmp_path / "a.pt").read_bytes() == b.save(tmp_path / "b.pt").read_bytes()
    cm = sum((confusion(predict(a, s.image)[0], s.mask) for s in samples[1:]),
             confusion(predict(a, samples[0].image)[0], samples[0].mask))
    acc = pixel_accuracy(cm)
    secs = time.perf_counter() - t0
    verdict(6, "U-Net contracts",
            sm_err <= 1e-5 and acc >= 0.99 and bitwise and secs < 300,
            f"softmax err {sm_err:.1e}, overfit train acc {acc:.4f} (>=0.99, last epoch "
            f"{log_a.records[-1].accuracy:.4f}), bitwise-identical={bitwise}, {secs:.0f}s")


# --------------------------------------------------------------------------
# 7. metrics oracle


def test_criterion_7_metrics_oracle(verdict):
    rng = np.random.default_rng(7)
    exact = True
    for _ in range(20):
        t, p = rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8))
        cm = confusion(p, t, 4)
        hits = sum(int(a == b) for a, b in zip(p.ravel(), t.ravel()))
        exact &= pixel_accuracy(cm) == hits / 64
        for c in range(4):
            inter = sum(1 for a, b in zip(p.ravel(), t.ravel()) if a == c and b == c)
            area = int(np.sum(p == c)) + int(np.sum(t == c))
            exact &= dice(cm, c) == (None if area == 0 else 2 * inter / area)
    cmp = compare_reports(0.931, 0.957)
    verdict(7, "metrics oracle", exact and abs(cmp.delta - 0.026) < 1e-12 and cmp.improved,
            f"20 random 8x8 recounts exact={exact}; (0.931, 0.957) -> delta {cmp.delta:.3f}")


# --------------------------------------------------------------------------
# 8. end-to-end desk experiment


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = os.environ.get("CTSTYLESEG_ACCEPT_DIR")
    root = tmp_path_factory.mktemp("desk") if not root else __import__("pathlib").Path(root)
    t0 = time.perf_counter()
    main = run_experiment(desk_config(), root / "main")
    main_secs = time.perf_counter() - t0
    # the control reuses the cached phantoms and baseline U-Net of the main run
    control_dir = root / "control"
    if not control_dir.exists():
        shutil.copytree(root / "main", control_dir)
    control = run_experiment(desk_config({"style.n_styles": 0}), control_dir)
    return root, main, control, main_secs


def test_criterion_8a_accuracy_gain(verdict, desk_run):
    root, main, _, secs = desk_run
    ok_files = verify_artifacts(main, root / "main") == []
    ok_audit = main.audit["expanded"] == main.audit["expected"] == 40 * (3 + 1)
    verdict("8a", "end-to-end accuracy gain", main.delta >= 0.01 and ok_files and ok_audit,
            f"baseline {main.baseline.pixel_accuracy:.4f}, augmented "
            f"{main.augmented.pixel_accuracy:.4f}, delta {100 * main.delta:+.2f} pt (>=1.0); "
            f"augmented train set {main.audit['expanded']} = 40*(3+1); "
            f"artifacts verified={ok_files}; first run {secs / 60:.1f} min")


def test_criterion_8b_dice_improves_for_half(verdict, desk_run):
    _, main, _, _ = desk_run
    fg = list(main.baseline.schema.names[1:])
    better = [n for n in fg if (main.dice_delta[n] or 0.0) > 0]
    detail = ", ".join(f"{n} {main.dice_delta[n]:+.3f}" if main.dice_delta[n] is not None
                       else f"{n} n/a" for n in fg)
    verdict("8b", "end-to-end Dice improves for at least half the foreground classes",
            2 * len(better) >= len(fg), f"{len(better)}/{len(fg)} improved [{detail}]")


def test_criterion_8c_no_style_control(verdict, desk_run):
    _, _, control, _ = desk_run
    seeds = desk_config().seeds
    verdict("8c", "end-to-end control without styles",
            abs(control.delta) < 0.01 and control.audit["expanded"] == 40,
            f"same 40 training images, U-Net seed {seeds['unet_baseline']}: "
            f"{control.baseline.pixel_accuracy:.4f}, seed {seeds['unet_augmented']}: "
            f"{control.augmented.pixel_accuracy:.4f}, delta {100 * control.delta:+.2f} pt (|.|<1.0)")


# --------------------------------------------------------------------------
# 9. texture specificity


def test_criterion_9_texture_specificity(verdict):
    side = 64
    smooth = TextureDomain(noise_std=0.06, corr_len=4.0)
    grainy = TextureDomain(noise_std=0.12, corr_len=0.7, streak_amp=0.05)
    spec = PhantomSpec(side=side, domains={DOMAIN_A: PhantomSpec().domains[DOMAIN_A],
                                           "grainy": grainy, "smooth": smooth})
    content = [generate_phantom(spec, s, DOMAIN_A) for s in range(16)]
    held_out = [generate_phantom(spec, 1000 + s, DOMAIN_A) for s in range(8)]
    style_a = generate_phantom(spec, 500, "grainy", "style", "style_grainy")
    style_b = generate_phantom(spec, 501, "smooth", "style", "style_smooth")
    bb = vgg19(width_scale=0.25)
    loss = LossSpec(style_weight=1.0, normalization="masked_count")
    gcfg = GeneratorConfig(side=side, base_width=16)
    gens = {}
    for name, style in (("A", style_a), ("B", style_b)):
        gens[name], _ = train_style_generator(content, style, loss, bb, gcfg, epochs=10,
                                              lr=5e-4, seed=21, batch_size=1)

    S = bb(torch.as_tensor(style_a.image.values.copy()), loss.style_layers)
    ms = layer_masks(torch.as_tensor(one_hot(style_a.mask, 7)), bb, loss.style_layers)
    means = {}
    for name, g in gens.items():
        vals = []
        for i, c in enumerate(held_out):
            out = torch.as_tensor(generate(g, c.mask, seed=i).values.copy())
            R = bb(out, loss.style_layers)
            mr = layer_masks(torch.as_tensor(one_hot(c.mask, 7)), bb, loss.style_layers)
            vals.append(float(style_loss(R, S, mr, ms, loss)))
        means[name] = float(np.mean(vals))
    verdict(9, "texture specificity", means["A"] < means["B"],
            f"mean style loss vs style A over 8 content maps: generator A {means['A']:.4g}, "
            f"generator B {means['B']:.4g}")

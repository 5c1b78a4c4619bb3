import math

import numpy as np
import pytest
import torch

import oracles
from gimlab import synthgen as sg
from gimlab import tracer as tr


def small_tracer(zero_head=False, hidden=8, layers=15, seed=0):
    torch.manual_seed(seed)
    return tr.ShadowTracer(tr.TracerConfig(num_layers=layers, hidden=hidden), zero_head=zero_head)


# ---------------------------------------------------------------- architecture


def test_architecture_matches_config():
    model = tr.ShadowTracer()
    convs = [m for m in model.body if isinstance(m, torch.nn.Conv2d)]
    bns = [m for m in model.body if isinstance(m, torch.nn.BatchNorm2d)]
    assert len(convs) == 15 and len(bns) == 13
    assert convs[0].in_channels == 3 and convs[-1].out_channels == 1
    assert all(c.kernel_size == (3, 3) for c in convs)
    assert all(c.out_channels == 64 for c in convs[:-1])
    assert model.receptive_field == 31
    assert all(torch.isfinite(p).all() for p in model.parameters())


def test_zero_head_gives_zero_trace():
    model = small_tracer(zero_head=True)
    img = np.random.default_rng(0).uniform(size=(40, 48, 3))
    out = tr.trace_forward(model, img)
    assert out.shape == (40, 48)
    assert not out.any()


def test_trace_forward_shape_and_determinism():
    model = small_tracer()
    img = np.random.default_rng(1).uniform(size=(33, 45, 3))
    a, b = tr.trace_forward(model, img), tr.trace_forward(model, img)
    assert a.shape == (33, 45) and np.array_equal(a, b)


def test_trace_forward_errors():
    model = small_tracer()
    with pytest.raises(tr.TracerError):
        tr.trace_forward(model, np.zeros((30, 64, 3)))
    with pytest.raises(tr.TracerError):
        tr.trace_forward(model, np.full((32, 32, 3), 1.5))


def test_receptive_field_locality():
    model = small_tracer().eval()
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(64, 64, 3))
    base = tr.trace_forward(model, img)
    p = (32, 32)
    changed = img.copy()
    yy, xx = np.mgrid[0:64, 0:64]
    far = np.maximum(np.abs(yy - p[0]), np.abs(xx - p[1])) > 15
    changed[far] = rng.uniform(size=(far.sum(), 3))
    after = tr.trace_forward(model, changed)
    assert after[p] == base[p]
    near = changed.copy()
    near[p[0] + 2, p[1] - 1] = 1 - near[p[0] + 2, p[1] - 1]
    assert tr.trace_forward(model, near)[p] != after[p]


def test_full_image_matches_windowed_computation():
    model = small_tracer().eval()
    img = np.random.default_rng(3).uniform(size=(96, 96, 3))
    full = tr.trace_forward(model, img)
    halo = 15
    y0, x0, s = 35, 30, 20
    window = img[y0 - halo:y0 + s + halo, x0 - halo:x0 + s + halo]
    local = tr.trace_forward(model, window)[halo:halo + s, halo:halo + s]
    assert np.abs(local - full[y0:y0 + s, x0:x0 + s]).max() < 1e-5


# ---------------------------------------------------------------- loss


def test_loss_examples():
    t = torch.randn(2, 1, 5, 5)
    assert float(tr.tracer_loss(t, t.clone())) == 0.0
    ones = torch.zeros(1, 1, 2, 2)
    assert float(tr.tracer_loss(ones + 1, ones)) == pytest.approx(2.0)
    with pytest.raises(tr.TracerError):
        tr.tracer_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3))


def test_loss_matches_loop_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        shape = (int(rng.integers(1, 4)), 1, int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        p = rng.standard_normal(shape)
        t = rng.standard_normal(shape)
        ours = float(tr.tracer_loss(torch.from_numpy(p), torch.from_numpy(t)))
        assert ours == pytest.approx(oracles.tracer_loss(p, t), rel=1e-6)


def test_loss_gradient_finite_differences():
    model = small_tracer(hidden=4, layers=4).double().eval()
    x = torch.rand(2, 3, 12, 12, dtype=torch.float64)
    y = torch.randn(2, 1, 12, 12, dtype=torch.float64) * 0.1
    w = model.body[2].weight  # a hidden conv: (4, 4, 3, 3)
    loss = tr.tracer_loss(model(x), y)
    (grad,) = torch.autograd.grad(loss, w)
    eps = 1e-6
    for i in range(4):
        for j in range(4):
            idx = (i, j, 1, 1)
            with torch.no_grad():
                orig = w[idx].item()
                w[idx] = orig + eps
                up = float(tr.tracer_loss(model(x), y))
                w[idx] = orig - eps
                down = float(tr.tracer_loss(model(x), y))
                w[idx] = orig
            fd = (up - down) / (2 * eps)
            assert abs(fd - grad[idx].item()) <= 1e-3 * max(abs(fd), 1e-8) + 1e-9


# ---------------------------------------------------------------- patches


def test_sample_patches_contract(tiny_dataset):
    train = tiny_dataset.select(split="train")
    a = tr.sample_patches(train, 40, 16, 7)
    b = tr.sample_patches(train, 40, 16, 7)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.targets, b.targets)
    assert a.images.shape == (16, 40, 40, 3) and a.targets.shape == (16, 40, 40, 1)
    assert set(a.labels) == {0, 1}
    for img, tgt, lab in zip(a.images, a.targets, a.labels):
        if lab == 0:
            assert not tgt.any()
        else:
            assert tgt.any()
    with pytest.raises(tr.TracerError):
        tr.sample_patches(train, 65, 2, 0)
    with pytest.raises(tr.TracerError):
        tr.sample_patches(train.select(split="nope"), 32, 2, 0)


def test_patch_outside_mask_has_zero_target(tiny_dataset):
    entry = tiny_dataset.select(split="train", label=1).entries[0]
    rec = tr.load_pair(tiny_dataset, entry)
    ys, xs = np.nonzero(rec.mask == 0)
    # any pre-degradation crop that avoids the mask carries a zero target
    for y, x in zip(ys[:50], xs[:50]):
        assert not rec.trace[y, x].any()


@pytest.mark.parametrize("degrade_prob", [0.0, 1.0])
def test_augmented_target_is_clean_blended_trace(tiny_dataset, degrade_prob):
    train = tiny_dataset.select(split="train")
    pairs = [tr.load_pair(train, e) for e in train.select(label=1).entries]
    # 64x64 patches of 64x64 images: the crop is the whole image
    batch = tr.sample_patches(train, 64, 8, 3, augment=True, mask_fraction=1.0, degrade_prob=degrade_prob)
    for img, tgt in zip(batch.images, batch.targets):
        tgt = tgt[..., 0]
        found = False
        for rec in pairs:
            base = rec.trace.mean(axis=-1)
            alpha = float((tgt * base).sum() / (base * base).sum())
            if 0.5 - 1e-9 <= alpha <= 1 + 1e-9 and np.allclose(tgt, alpha * base, atol=1e-9):
                found = True
                if degrade_prob == 0.0:
                    assert np.allclose(img.mean(axis=-1) - rec.original.mean(axis=-1), tgt, atol=1e-6)
                break
        assert found


# ---------------------------------------------------------------- training


def test_one_step_changes_parameters(tiny_dataset):
    hp = tr.TracerHyperparams(iterations=1, batch_size=4, patch_size=32, zero_head=False, log_every=1)
    torch.manual_seed(0)
    before = tr.ShadowTracer(tr.TracerConfig(hidden=8)).state_dict()
    w = tr.train_tracer(tiny_dataset.select(split="train"), hp, tr.TracerConfig(hidden=8))
    after = w.model.state_dict()
    assert any(not torch.equal(before[k], after[k]) for k in before if before[k].dtype.is_floating_point)
    assert len(w.history) == 1 and math.isfinite(w.final_train_loss)


def test_training_deterministic(tiny_dataset):
    hp = tr.TracerHyperparams(iterations=3, batch_size=4, patch_size=32, log_every=3)
    cfg = tr.TracerConfig(hidden=8)
    val = tiny_dataset.select(split="test")
    a = tr.train_tracer(tiny_dataset.select(split="train"), hp, cfg, val)
    b = tr.train_tracer(tiny_dataset.select(split="train"), hp, cfg, val)
    assert a.history == b.history
    assert a.fingerprint == b.fingerprint


def test_training_needs_both_classes(tiny_dataset):
    with pytest.raises(tr.TracerError):
        tr.train_tracer(tiny_dataset.select(label=1), tr.TracerHyperparams(iterations=1))


def test_divergence_aborts(tiny_dataset, monkeypatch):
    real = tr.sample_patches

    def poisoned(*args, **kw):
        batch = real(*args, **kw)
        batch.targets[0, 0, 0, 0] = np.inf
        return batch

    monkeypatch.setattr(tr, "sample_patches", poisoned)
    hp = tr.TracerHyperparams(iterations=5, batch_size=2, patch_size=32)
    with pytest.raises(tr.TracerDivergence):
        tr.train_tracer(tiny_dataset.select(split="train"), hp, tr.TracerConfig(hidden=4))


def test_checkpoint_roundtrip(tmp_path, tiny_dataset):
    hp = tr.TracerHyperparams(iterations=1, batch_size=2, patch_size=32)
    w = tr.train_tracer(tiny_dataset.select(split="train"), hp, tr.TracerConfig(hidden=4))
    path = tmp_path / "t.pt"
    tr.save_tracer(w, path)
    back = tr.load_tracer(path, expected_fingerprint=w.fingerprint)
    img = np.random.default_rng(0).uniform(size=(32, 32, 3))
    assert np.array_equal(tr.trace_forward(back.model, img), tr.trace_forward(w.model, img))
    with pytest.raises(tr.TracerError):
        tr.load_tracer(path, expected_fingerprint="0" * 16)
    torch.save({"format": "other"}, tmp_path / "bad.pt")
    with pytest.raises(tr.TracerError):
        tr.load_tracer(tmp_path / "bad.pt")


# ---------------------------------------------------------------- learning on family (a)

LEARN_HP = tr.TracerHyperparams(iterations=500, batch_size=16, patch_size=40, degrade_prob=0.5,
                                log_every=250, seed=0)
LEARN_CFG = tr.TracerConfig(hidden=32)


@pytest.fixture(scope="module")
def repaint_tracer(repaint_dataset):
    return tr.train_tracer(repaint_dataset.select(split="train"), LEARN_HP, LEARN_CFG)


def test_trained_tracer_beats_zero_predictor(repaint_tracer, repaint_dataset):
    held = tr.sample_patches(repaint_dataset.select(split="test"), LEARN_HP.patch_size, 256, 99,
                             augment=True, degrade_prob=LEARN_HP.degrade_prob)
    zero_loss = float(tr.tracer_loss(torch.zeros(held.targets.shape), torch.from_numpy(held.targets)))
    loss = tr.evaluate_loss(repaint_tracer.model, held)
    assert loss < zero_loss


def test_trained_tracer_highlights_masks(repaint_tracer, repaint_dataset):
    test = repaint_dataset.select(split="test")
    inside, authentic = [], []
    for e in test.select(label=1).entries[:100]:
        img = sg.load_rgb(test.resolve(e.image))
        m = sg.load_mask(test.resolve(e.mask)).astype(bool)
        inside.append(np.abs(tr.trace_forward(repaint_tracer.model, img))[m].mean())
    for e in test.select(label=0).entries[:100]:
        authentic.append(np.abs(tr.trace_forward(repaint_tracer.model, sg.load_rgb(test.resolve(e.image)))).mean())
    assert np.mean(inside) > np.mean(authentic)

import math

import numpy as np
import pytest
import torch

import oracles
from gimlab import tracer as tr
from gimlab.model.gimformer import (
    CheckpointError,
    GIMFormer,
    ModelConfig,
    build_model,
    load_model,
    model_loss,
    save_model,
)
from gimlab.model.train import ImageSet, TrainHyperparams, TrainingError, setting_manifest, train_model


def tiny_cfg(**kw):
    base = dict(dims=(8, 16, 16, 16), depths=(1, 1, 1, 1), heads=(1, 1, 1, 1), decoder_dim=8, head_dim=8)
    base.update(kw)
    return ModelConfig.ablated(kw.pop("ablate", ()), **base) if "ablate" in kw else ModelConfig(**base)


def tiny_tracer():
    torch.manual_seed(0)
    return tr.ShadowTracer(tr.TracerConfig(num_layers=3, hidden=4))


# ---------------------------------------------------------------- encoder


@pytest.mark.parametrize("size", [64, 512])
def test_stage_sizes(size):
    torch.manual_seed(0)
    model = GIMFormer(tiny_cfg(), tiny_tracer()).eval()
    with torch.no_grad():
        feats = model.encode(torch.rand(1, 3, size, size))
    assert [f.shape[-1] for f in feats] == [size // 4, size // 8, size // 16, size // 32]
    assert [f.shape[1] for f in feats] == [8, 16, 16, 16]


def test_rejects_non_multiple_of_32():
    model = GIMFormer(tiny_cfg(), tiny_tracer()).eval()
    with pytest.raises(ValueError):
        model(torch.rand(1, 3, 48, 64))


def test_trace_branch_reaches_deepest_stage():
    torch.manual_seed(1)
    model = GIMFormer(tiny_cfg(), tiny_tracer()).eval()
    img = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        a = model.encode(img, torch.zeros(1, 1, 64, 64))[3]
        b = model.encode(img, torch.randn(1, 1, 64, 64) * 0.05)[3]
    assert (a - b).abs().max() > 0


def test_tracer_ablation_ignores_trace():
    torch.manual_seed(2)
    model = GIMFormer(tiny_cfg(use_tracer=False)).eval()
    img = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        a = model(img).mask_logits
        b = model(img, torch.randn(1, 1, 64, 64)).mask_logits
    assert torch.equal(a, b)
    assert model.tracer is None and len(model.encoder.tr_embed) == 0


def test_frozen_tracer_gets_no_gradient():
    model = build_model(tiny_cfg(), tracer_weights())
    out = model.train()(torch.rand(2, 3, 64, 64))
    (out.mask_logits.mean() + out.label_logit.mean()).backward()
    assert all(p.grad is None for p in model.tracer.parameters())
    assert not model.tracer.training


# ---------------------------------------------------------------- decoder and head


def zero_heads(model):
    with torch.no_grad():
        torch.nn.init.zeros_(model.decoder.pred.weight)
        torch.nn.init.zeros_(model.decoder.pred.bias)
        torch.nn.init.zeros_(model.cls_head.mlp[-1].weight)
        torch.nn.init.zeros_(model.cls_head.mlp[-1].bias)
    return model


def test_decode_shapes():
    model = GIMFormer(tiny_cfg(), tiny_tracer()).eval()
    with torch.no_grad():
        out = model(torch.rand(3, 3, 64, 96))
    assert out.mask_logits.shape == (3, 64, 96)
    assert out.label_logit.shape == (3,)
    with pytest.raises(ValueError):
        model.decode(out.features[:3], (64, 96))


def test_zero_features_zero_heads_give_zero_logits():
    model = zero_heads(GIMFormer(tiny_cfg(), tiny_tracer())).eval()
    feats = [torch.zeros(2, d, 16 // 2**i, 16 // 2**i) for i, d in enumerate(model.cfg.dims)]
    with torch.no_grad():
        out = model.decode(feats, (64, 64))
    assert not out.mask_logits.any() and not out.label_logit.any()


def test_batch_permutation_equivariance():
    torch.manual_seed(3)
    model = GIMFormer(tiny_cfg(), tiny_tracer()).eval()
    img = torch.rand(4, 3, 64, 64)
    perm = torch.tensor([2, 0, 3, 1])
    with torch.no_grad():
        a = model(img)
        b = model(img[perm])
    assert torch.allclose(a.mask_logits[perm], b.mask_logits, atol=1e-5)
    assert torch.allclose(a.label_logit[perm], b.label_logit, atol=1e-5)


# ---------------------------------------------------------------- loss


def test_loss_examples():
    label = torch.tensor([1.0, 0.0])
    mask = torch.zeros(2, 4, 4)
    mask[0, :2] = 1
    confident = model_loss(label, torch.tensor([20.0, -20.0]), mask, 40 * mask - 20)
    assert float(confident) < 1e-6
    neutral = model_loss(label, torch.zeros(2), mask, torch.zeros(2, 4, 4))
    assert float(neutral) == pytest.approx(2 * math.log(2), abs=1e-6)


def test_loss_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        b, h, w = (int(v) for v in rng.integers(1, 5, size=3))
        label = rng.integers(0, 2, size=b).astype(np.float64)
        mask = rng.integers(0, 2, size=(b, h, w)).astype(np.float64)
        zl = rng.normal(scale=5, size=b)
        zm = rng.normal(scale=5, size=(b, h, w))
        ours = float(model_loss(*(torch.from_numpy(a) for a in (label, zl, mask, zm))))
        assert ours == pytest.approx(oracles.model_loss(label, zl, mask, zm), rel=1e-9)


def test_loss_rejects_non_binary_and_shapes():
    with pytest.raises(ValueError):
        model_loss(torch.tensor([0.5]), torch.zeros(1), torch.zeros(1, 2, 2), torch.zeros(1, 2, 2))
    with pytest.raises(ValueError):
        model_loss(torch.tensor([1.0]), torch.zeros(1), torch.full((1, 2, 2), 2.0), torch.zeros(1, 2, 2))
    with pytest.raises(ValueError):
        model_loss(torch.tensor([1.0]), torch.zeros(1), torch.zeros(1, 2, 2), torch.zeros(1, 2, 3))


def test_loss_gradient_on_logits():
    z = torch.tensor([0.3, -1.2], dtype=torch.float64, requires_grad=True)
    m = torch.zeros(2, 2, 2, dtype=torch.float64, requires_grad=True)
    loss = model_loss(torch.tensor([1.0, 0.0], dtype=torch.float64), z, torch.ones(2, 2, 2, dtype=torch.float64), m)
    loss.backward()
    expected = (torch.sigmoid(z.detach()) - torch.tensor([1.0, 0.0], dtype=torch.float64)) / 2
    assert torch.allclose(z.grad, expected)
    assert torch.allclose(m.grad, torch.full_like(m, -0.5 / 8))


# ---------------------------------------------------------------- configs and checkpoints


def test_ablation_changes_fingerprint():
    prints = {ModelConfig.ablated(a).fingerprint() for a in ((), ("mwam",), ("fsb",), ("tracer",), ("fsb", "mwam"))}
    assert len(prints) == 5
    with pytest.raises(ValueError):
        ModelConfig.ablated(("decoder",))


def test_checkpoint_roundtrip_and_mismatch(tmp_path):
    torch.manual_seed(4)
    model = GIMFormer(tiny_cfg(), tiny_tracer()).eval()
    path = tmp_path / "m.pt"
    save_model(model, path, "f" * 16, {"setting": "mix"})
    back, blob = load_model(path, tiny_cfg())
    img = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(back(img).mask_logits, model(img).mask_logits)
    assert blob["extra"] == {"setting": "mix"}
    with pytest.raises(CheckpointError):
        load_model(path, tiny_cfg(use_mwam=False))
    torch.save({"format": "nope"}, tmp_path / "x.pt")
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "x.pt")


def test_build_model_requires_tracer():
    with pytest.raises(CheckpointError):
        build_model(tiny_cfg(), None)
    assert build_model(tiny_cfg(use_tracer=False), None).tracer is None


# ---------------------------------------------------------------- training


FAST_HP = TrainHyperparams(epochs=1, batch_size=4, lr=1e-3, monitor_size=64)


def tracer_weights():
    return tr.TracerWeights(tiny_tracer(), "t" * 16)


def test_one_epoch_reduces_loss(repaint_dataset):
    hp = TrainHyperparams(epochs=1, batch_size=8, lr=5e-4, monitor_size=64)
    res = train_model(repaint_dataset, tracer_weights(), hp, tiny_cfg())
    assert math.isfinite(res.init_loss)
    assert res.history[0]["monitor_loss"] < res.init_loss


def test_training_is_deterministic(tiny_dataset):
    data = ImageSet.from_manifest(setting_manifest(tiny_dataset, "mix"))
    a = train_model(tiny_dataset, tracer_weights(), FAST_HP, tiny_cfg(), data=data)
    b = train_model(tiny_dataset, tracer_weights(), FAST_HP, tiny_cfg(), data=data)
    assert a.history == b.history and a.fingerprint == b.fingerprint
    img = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(a.model(img).mask_logits, b.model(img).mask_logits)


def test_cross_setting_trains_on_one_family(tiny_dataset):
    sub = setting_manifest(tiny_dataset, "cross")
    assert {e.subset for e in sub.entries} == {"SD-like"}
    assert {e.split for e in sub.entries} == {"train"}


def test_image_size_mismatch(tiny_dataset):
    with pytest.raises(TrainingError):
        train_model(tiny_dataset, tracer_weights(), FAST_HP, tiny_cfg(img_size=128))

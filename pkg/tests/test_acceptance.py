"""Acceptance suite: one test per criterion, summarized at the end of the run."""

import time

import numpy as np
import pytest

from radiofm import tensor as T
from radiofm.evaluation import (majority_baseline, recon_accuracy, recon_curve, resource_grid,
                                threshold_of)
from radiofm.heads import SegmentationHead, SensingHead, combined_params
from radiofm.losses import loss_label_smooth_ce, loss_msm, loss_seg
from radiofm.synth import gen_sd, hsd_dataset, rrd_spectrograms, split_indices
from radiofm.training import (finetune_segment, finetune_sense, load_model, pretrain,
                              save_model)
from radiofm.vit import (ENCODER_PREFIX, MaskPlan, MsmModel, adapt_patch_embed_channels,
                         count_params, mask_plans, patchify, preset, sample_mask, unpatchify,
                         visible_count)

from conftest import checksums, tiny_pipeline

criterion = pytest.mark.criterion


@pytest.fixture(scope="module")
def pretrained():
    t0 = time.perf_counter()
    X, _ = rrd_spectrograms(256, seed=0, shape=(64, 64))
    cfg = preset("vit-tiny", img_hw=(64, 64), patch_size=8)
    model = MsmModel(cfg, seed=0)
    result = pretrain(model, X, 0.75, steps=500, seed=0)
    return X, cfg, model, result, time.perf_counter() - t0


@criterion(1, "preset parameter counts")
def test_preset_parameter_counts():
    for name, enc_target in (("vit-s", 38e6), ("vit-m", 85e6), ("vit-l", 302e6)):
        enc, dec = count_params(preset(name))
        print(f"{name}: encoder {enc} decoder {dec}")
        assert abs(enc / enc_target - 1) <= 0.05, name
        if name != "vit-s":
            assert abs(dec / 26e6 - 1) <= 0.15, name


@criterion(2, "finite-difference gradient check")
def test_gradient_check():
    t0 = time.perf_counter()
    cfg = preset("vit-tiny", img_hw=(16, 16), patch_size=4)
    model = MsmModel(cfg, seed=0)
    rng = np.random.default_rng(0)
    X = rng.standard_normal((2, 1, 16, 16))
    plans = mask_plans(2, cfg.num_patches, 0.75, 0)

    def msm():
        recon, target = model.forward(X, plans)
        return loss_msm(recon, target, plans)

    sense = SensingHead(cfg.enc_embed_dim, 6, seed=1)
    labels = np.array([1, 4])
    seg = SegmentationHead(cfg, 3, seed=2)
    masks = rng.integers(0, 3, (2, 16, 16))
    cases = {
        "msm": (msm, model.params),
        "sense": (lambda: loss_label_smooth_ce(sense(model.encoder_features(X)), labels, 0.1),
                  combined_params(model.params, sense.params)),
        "segment": (lambda: loss_seg(seg(model.encoder_features(X)), masks, 0.1),
                    combined_params(model.params, seg.params)),
    }
    for name, (fn, params) in cases.items():
        err = T.grad_check(fn, params)
        print(f"{name}: max relative error {err:.2e}")
        assert err < 1e-4, name
    assert time.perf_counter() - t0 < 30


@criterion(3, "masked reconstruction loss oracle")
def test_msm_loss_oracle():
    target = np.random.default_rng(0).standard_normal((1, 4, 4))
    plan = MaskPlan(0.5, np.array([0, 2]), np.array([1, 3]))
    recon = T.Tensor(target + 1.0, requires_grad=True)
    loss = loss_msm(recon, target, [plan])
    assert abs(loss.item() - 2.0) <= 1e-12
    loss.backward()
    moved = target + 1.0
    moved[0, [0, 2]] += np.random.default_rng(1).standard_normal((2, 4)) * 10
    recon2 = T.Tensor(moved, requires_grad=True)
    loss2 = loss_msm(recon2, target, [plan])
    loss2.backward()
    assert loss2.item() == loss.item()
    assert np.array_equal(recon.grad, recon2.grad)


@criterion(4, "label-smoothed cross-entropy oracles")
def test_ce_oracles():
    for c in (6, 3):
        probs = np.full((4, c), 1.0 / c)
        labels = np.arange(4) % c
        assert abs(loss_label_smooth_ce(probs, labels, 0.1).item() - np.log(c)) <= 1e-6
        seg = np.full((2, 3, 3, c), 1.0 / c)
        assert abs(loss_seg(seg, np.zeros((2, 3, 3), int), 0.1).item() - np.log(c)) <= 1e-6
    hand = loss_label_smooth_ce(np.array([[0.5, 0.25, 0.25]]), [0], 0.3).item()
    assert abs(hand - 0.83178) <= 1e-5


@criterion(5, "threshold and resource-grid metric")
def test_grid_metric():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((224, 224)) * 2 - 1
    assert abs(threshold_of(x) - (x.mean() + 0.5 * x.std())) <= 1e-12
    assert resource_grid(x).occupancy.shape == (56, 56)
    assert recon_accuracy(x, x) == 1.0
    accs, preds = [], []
    for _ in range(100):
        o, r = rng.standard_normal((64, 64)), rng.standard_normal((64, 64))
        delta = threshold_of(o)
        p = resource_grid(o, threshold=delta).occupied_fraction
        q = resource_grid(r, threshold=delta).occupied_fraction
        preds.append(p * q + (1 - p) * (1 - q))
        accs.append(recon_accuracy(o, r))
    print(f"random recon accuracy {np.mean(accs):.4f} vs predicted {np.mean(preds):.4f}")
    assert abs(np.mean(accs) - np.mean(preds)) <= 0.05


@criterion(6, "masking pipeline contracts")
def test_pipeline_contracts():
    cfg = preset("vit-tiny")
    model = MsmModel(cfg, seed=0)
    x = np.random.default_rng(0).standard_normal((1, 1, 224, 224))
    for gamma, expected in ((0.70, 59), (0.75, 49), (0.80, 39)):
        assert visible_count(196, gamma) == expected
        model.forward(x, mask_plans(1, 196, gamma, seed=0))
        assert model.last_encoder_tokens == expected
    imgs = np.random.default_rng(1).standard_normal((3, 3, 224, 224))
    assert unpatchify(patchify(imgs, 16)).tobytes() == imgs.tobytes()
    rng = np.random.default_rng(2)
    full = np.arange(196)
    for i in range(10000):
        plan = sample_mask(196, (0.70, 0.75, 0.80)[i % 3], rng)
        both = np.sort(np.concatenate([plan.visible_idx, plan.masked_idx]))
        assert np.array_equal(both, full)


@criterion(7, "desk-scale pretraining trainability")
def test_trainability(pretrained):
    X, cfg, model, result, elapsed = pretrained
    losses = result.losses
    ratio = losses[-50:].mean() / losses[:50].mean()
    print(f"last/first 50-step mean loss ratio {ratio:.4f}, {elapsed:.1f}s")
    assert ratio <= 0.5
    assert elapsed < 600
    again = pretrain(MsmModel(cfg, seed=0), X, 0.75, steps=500, seed=0)
    assert again.losses.tobytes() == losses.tobytes()


@criterion(8, "reconstruction accuracy versus mask ratio")
def test_recon_curve_shape(pretrained):
    X, cfg, model, _, _ = pretrained
    trained = recon_curve(model, X[:32])
    untrained = recon_curve(MsmModel(cfg, seed=0), X[:32])
    print("trained  ", [round(a, 3) for _, a in trained])
    print("untrained", [round(a, 3) for _, a in untrained])
    acc = [a for _, a in trained]
    assert all(b <= a + 0.02 for a, b in zip(acc, acc[1:]))
    for (g, a), (_, b) in zip(trained, untrained):
        if g >= 0.5:
            assert a > b, g


@criterion(9, "frozen-encoder finetuning")
def test_frozen_finetune(pretrained, tmp_path):
    _, _, model, result, _ = pretrained
    save_model(tmp_path / "base.rfm", model, result.optimizer)
    base, _, _ = load_model(tmp_path / "base.rfm")
    digest = base.params.digest(ENCODER_PREFIX)

    H, y, _ = hsd_dataset(50, seed=1, out_shape=(64, 64))
    sp = split_indices(len(y), 1)
    tr, te = np.concatenate([sp["train"], sp["val"]]), sp["test"]
    sense = finetune_sense(base, H[tr], y[tr], H[te], y[te], steps=300, seed=0)
    ys = np.random.default_rng(5).permutation(y)
    shuffled = finetune_sense(base, H[tr], ys[tr], H[te], ys[te], steps=300, seed=0)

    S, _ = gen_sd(80, seed=2, shape=(64, 64))
    Xs = np.stack([s.spectrogram for s in S])
    Ms = np.stack([s.label_mask for s in S])
    seg = finetune_segment(base, Xs[:64], Ms[:64], Xs[64:], Ms[64:], steps=300, seed=0)
    baseline = majority_baseline(Ms[64:], 3)
    print(f"sense {sense.accuracy:.3f}, shuffled {shuffled.accuracy:.3f}, "
          f"segment {seg.accuracy:.3f} vs majority {baseline:.3f}")

    ckpt = base.params.state_dict()
    for res in (sense, shuffled, seg):
        assert res.encoder_unchanged
        # the encoder used for training equals the checkpoint, up to channel tiling
        for name, value in res.encoder.params.state_dict().items():
            if not name.startswith(ENCODER_PREFIX):
                continue
            ref = ckpt[name]
            if name == "encoder.patch_embed.weight":
                ref = adapt_patch_embed_channels(ref, res.encoder.cfg.in_channels)
            assert value.tobytes() == ref.tobytes(), name
    assert base.params.digest(ENCODER_PREFIX) == digest
    assert seg.encoder.params.digest(ENCODER_PREFIX) == digest
    assert sense.accuracy >= 0.95
    assert abs(shuffled.accuracy - 1 / 6) <= 0.1
    assert seg.accuracy > baseline


@criterion(10, "command-line determinism sweep")
def test_determinism_sweep(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    codes_a, codes_b = tiny_pipeline(a), tiny_pipeline(b)
    assert all(c == 0 for c in codes_a.values()), codes_a
    assert codes_a == codes_b
    ca, cb = checksums(a), checksums(b)
    print(f"{len(ca)} files compared")
    assert len(ca) > 30 and ca == cb

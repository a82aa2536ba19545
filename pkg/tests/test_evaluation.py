"""Verification-side metrics, the attack suite and protocol helpers."""

import numpy as np
import pytest
import torch
from scipy import ndimage

from fieldmark.decoder import BitDecoder, bit_accuracy, decode_logits
from fieldmark.evaluation import (
    accuracy_ttest,
    attack_suite,
    chance_level,
    cross_id_matrix,
    decode_accuracy,
    default_attacks,
    evaluate_bit_accuracy,
    image_metrics,
    multiwm_sweep,
    residual_triptych,
)
from fieldmark.config import TrainConfig
from fieldmark.messages import generate_message_registry
from fieldmark.model import SceneModel
from fieldmark.rendering import render_image
from fieldmark.scenes import make_toy_scene
from fieldmark.training import model_spec_from_config


@pytest.fixture(scope="module")
def scene():
    return make_toy_scene(num_train=2, num_test=2, resolution=32)


def micro_cfg(**kw):
    base = dict(
        resolution=(12, 12, 12), density_rank=2, appearance_rank=4,
        appearance_dim=6, watermark_rank=2, num_ids=4, view_freqs=1,
        hidden_dim=16, num_watermarks=2, message_bits=4, min_hamming=1,
        pretrain_iters=0, phase1_iters=1, phase2_iters=1,
        ray_batch=256, samples_per_ray=8, patch_size=8,
        weight_threshold=0.0, checkpoint_every=0, augment=False,
        train_decoder_phase2=False, seed=5,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def model(scene):
    gen = torch.Generator().manual_seed(21)
    return SceneModel(model_spec_from_config(scene, micro_cfg()), generator=gen)


@pytest.fixture(scope="module")
def decoder():
    torch.manual_seed(4)
    dec = BitDecoder(4, channels=8, num_blocks=2)
    dec.eval()
    return dec


@pytest.fixture(scope="module")
def registry():
    return generate_message_registry(2, 4, 1, np.random.default_rng(0))


@pytest.fixture(scope="module")
def opts(scene):
    return dict(near=scene.near, far=scene.far, num_samples=8,
                white_background=True, weight_threshold=0.0)


def gradient_image(h=64, w=64):
    x = np.linspace(0, 1, w, dtype=np.float32)
    y = np.linspace(0, 1, h, dtype=np.float32)[:, None]
    return np.stack([np.broadcast_to(x, (h, w)),
                     np.broadcast_to(y, (h, w)),
                     np.full((h, w), 0.5, dtype=np.float32)], axis=-1)


# ---------------------------------------------------------------------------
# metrics

def test_image_metrics_identical_inputs():
    img = gradient_image()
    out = image_metrics(img, img)
    assert out["psnr"] == 99.0
    assert out["ssim"] == pytest.approx(1.0, abs=1e-6)


def test_image_metrics_known_mse():
    ref = np.full((32, 32, 3), 0.5, dtype=np.float64)
    out = image_metrics(ref + 0.1, ref)
    assert out["psnr"] == pytest.approx(20.0, abs=1e-6)
    with pytest.raises(ValueError, match="shape mismatch"):
        image_metrics(ref, ref[:16])


def test_decode_accuracy_agrees_with_thresholded_logits(decoder):
    img = gradient_image(32, 32)
    logits = decode_logits(decoder, img).numpy()
    hard = (logits > 0).astype(np.uint8)
    assert decode_accuracy(decoder, img, hard) == 1.0
    assert decode_accuracy(decoder, img, 1 - hard) == 0.0


# ---------------------------------------------------------------------------
# accuracy protocols

def test_evaluate_bit_accuracy_layout(scene, model, decoder, registry, opts):
    views = scene.views("test")
    out = evaluate_bit_accuracy(model, decoder, views, registry,
                                render_options=opts)
    assert len(out["rows"]) == registry.num_messages * len(views)
    assert out["per_set"] == [out["mean"]]
    assert out["std"] == 0.0
    assert 0.0 <= out["mean"] <= 1.0
    row = out["rows"][0]
    assert set(row) == {"set", "wm_id", "view", "bit_acc"}
    # deterministic end to end
    again = evaluate_bit_accuracy(model, decoder, views, registry,
                                  render_options=opts)
    assert again["rows"] == out["rows"]


def test_evaluate_bit_accuracy_multiset_needs_rng(scene, model, decoder,
                                                  registry, opts):
    with pytest.raises(ValueError, match="needs an rng"):
        evaluate_bit_accuracy(model, decoder, scene.views("test"), registry,
                              render_options=opts, message_sets=2)


def test_evaluate_bit_accuracy_refit_protocol(scene, model, decoder, registry,
                                              opts):
    views = scene.views("test")[:1]
    seen = []

    def refit(reg):
        seen.append(reg)
        return model

    out = evaluate_bit_accuracy(model, decoder, views, registry,
                                render_options=opts, message_sets=3,
                                refit=refit, rng=np.random.default_rng(9))
    assert len(seen) == 2  # set 0 reuses the caller's registry
    for reg in seen:
        assert reg.num_messages == registry.num_messages
        assert reg.num_bits == registry.num_bits
        assert reg.min_distance == registry.min_distance
    assert len(out["per_set"]) == 3
    assert {r["set"] for r in out["rows"]} == {0, 1, 2}


def test_cross_id_matrix_matches_manual_row(scene, model, decoder, registry,
                                            opts):
    views = scene.views("test")
    mat = cross_id_matrix(model, decoder, views, registry, render_options=opts)
    n = registry.num_messages
    assert mat.shape == (n, n)
    assert np.all((0.0 <= mat) & (mat <= 1.0))
    per_view = []
    for _, cam in views:
        with torch.no_grad():
            img = render_image(model, cam, 0, **opts)
        logits = decode_logits(decoder, img)
        per_view.append([bit_accuracy(registry.message_for(j), logits)
                         for j in range(n)])
    assert np.allclose(mat[0], np.mean(per_view, axis=0))


# ---------------------------------------------------------------------------
# attacks

def test_default_attack_names():
    attacks = default_attacks()
    assert set(attacks) == {
        "none", "jpeg80", "jpeg50", "jpeg30", "crop70", "crop50", "resize50",
        "blur_sigma1", "blur_sigma2", "noise02", "noise05", "brighten", "darken",
    }
    img = gradient_image()
    assert attacks["none"](img, np.random.default_rng(0)) is img


def test_jpeg_attack_quality_ordering():
    img = gradient_image()
    rng = np.random.default_rng(0)
    attacks = default_attacks()
    out80 = attacks["jpeg80"](img, rng)
    out30 = attacks["jpeg30"](img, rng)
    assert out80.shape == img.shape and out80.dtype == np.float32
    assert 0.0 <= out80.min() and out80.max() <= 1.0
    mse80 = float(np.mean((out80 - img) ** 2))
    mse30 = float(np.mean((out30 - img) ** 2))
    assert 0 < mse80 < mse30


def test_geometry_attacks_change_size():
    img = gradient_image(64, 64)
    rng = np.random.default_rng(0)
    attacks = default_attacks()
    assert attacks["crop50"](img, rng).shape == (32, 32, 3)
    assert attacks["crop70"](img, rng).shape == (45, 45, 3)
    assert attacks["resize50"](img, rng).shape == (32, 32, 3)
    # floor keeps crops decodable on small inputs
    tiny = gradient_image(12, 12)
    assert attacks["crop50"](tiny, rng).shape == (8, 8, 3)


def test_blur_attack_matches_scipy():
    img = gradient_image(32, 32)
    out = default_attacks()["blur_sigma1"](img, np.random.default_rng(0))
    ref = np.stack([ndimage.gaussian_filter(img[..., c], 1.0) for c in range(3)],
                   axis=-1)
    assert np.allclose(out, np.clip(ref, 0, 1))


def test_noise_attack_statistics():
    img = np.full((64, 64, 3), 0.5, dtype=np.float32)
    out = default_attacks()["noise05"](img, np.random.default_rng(3))
    resid = out - img
    assert abs(float(resid.std()) - 0.05) < 0.005
    assert abs(float(resid.mean())) < 0.005
    assert out.dtype == np.float32


def test_brightness_attacks():
    img = gradient_image()
    rng = np.random.default_rng(0)
    bright = default_attacks()["brighten"](img, rng)
    dark = default_attacks()["darken"](img, rng)
    assert np.allclose(bright, np.clip(img * 1.1, 0, 1))
    assert np.allclose(dark, img * 0.9)


def test_attack_suite_rows(scene, model, decoder, registry, opts):
    views = scene.views("test")
    subset = {k: v for k, v in default_attacks().items()
              if k in ("none", "jpeg50", "noise05")}
    rows = attack_suite(model, decoder, views, registry, render_options=opts,
                        attacks=subset, seed=7)
    assert [r["attack"] for r in rows] == ["none", "jpeg50", "noise05"]
    for row in rows:
        assert row["n"] == registry.num_messages * len(views)
        assert 0.0 <= row["bit_acc"] <= 1.0
    clean = evaluate_bit_accuracy(model, decoder, views, registry,
                                  render_options=opts)
    assert rows[0]["bit_acc"] == pytest.approx(clean["mean"])
    again = attack_suite(model, decoder, views, registry, render_options=opts,
                         attacks=subset, seed=7)
    assert again == rows


def test_attack_suite_full_set_runs_on_larger_views(decoder, registry):
    # crop50/resize50 need >= 64px inputs for the decoder's low-pass band
    scene = make_toy_scene(num_train=1, num_test=1, resolution=64)
    cfg = micro_cfg()
    gen = torch.Generator().manual_seed(2)
    model = SceneModel(model_spec_from_config(scene, cfg), generator=gen)
    opts = dict(near=scene.near, far=scene.far, num_samples=8,
                white_background=True, weight_threshold=0.0)
    rows = attack_suite(model, decoder, scene.views("test"), registry,
                        render_options=opts)
    assert len(rows) == 13


# ---------------------------------------------------------------------------
# sweeps and statistics

def test_multiwm_sweep(scene, decoder):
    cfg = micro_cfg()
    gen = torch.Generator().manual_seed(8)
    base = SceneModel(model_spec_from_config(scene, cfg), generator=gen)
    rows = multiwm_sweep(scene, cfg, decoder, [1, 2], base_model=base)
    assert [r["num_watermarks"] for r in rows] == [1, 2]
    for row in rows:
        assert set(row) == {"num_watermarks", "bit_acc", "psnr", "ssim"}
        assert 0.0 <= row["bit_acc"] <= 1.0
        assert row["psnr"] > 0
    with pytest.raises(ValueError, match="must be >= 1"):
        multiwm_sweep(scene, cfg, decoder, [0], base_model=base)


def test_accuracy_ttest():
    high = [0.92, 0.94, 0.91, 0.93, 0.95]
    low = [0.61, 0.63, 0.60, 0.62, 0.59]
    out = accuracy_ttest(high, low)
    assert out["t"] > 0
    assert out["p"] < 1e-6
    close_a = [0.50, 0.52, 0.48, 0.51]
    close_b = [0.49, 0.51, 0.53, 0.48]
    assert accuracy_ttest(close_a, close_b)["p"] > 0.1


def test_residual_triptych():
    ref = gradient_image(16, 16)
    out = residual_triptych(ref, ref, gain=5.0)
    assert out.shape == (16, 48, 3)
    assert np.allclose(out[:, :16], ref)
    assert np.allclose(out[:, 16:32], ref)
    assert np.allclose(out[:, 32:], 0.5)  # zero residual maps to mid-gray
    shifted = residual_triptych(ref, np.clip(ref + 0.01, 0, 1), gain=5.0)
    assert shifted[:, 32:].max() > 0.5
    with pytest.raises(ValueError, match="shapes differ"):
        residual_triptych(ref, ref[:8])


def test_chance_level_replicates_manual_loop(decoder):
    rng = np.random.default_rng(11)
    images = [rng.random((32, 32, 3)).astype(np.float32) for _ in range(3)]
    out = chance_level(decoder, images, trials=100, rng=np.random.default_rng(5))
    logits = [decode_logits(decoder, img).numpy() for img in images]
    replay = np.random.default_rng(5)
    accs = []
    for _ in range(100):
        lg = logits[int(replay.integers(0, len(logits)))]
        msg = replay.integers(0, 2, size=lg.shape[0])
        accs.append(((lg > 0).astype(int) == msg).mean())
    assert out.mean == pytest.approx(float(np.mean(accs)))
    assert out.std == pytest.approx(float(np.std(accs)))
    assert out.trials == 100
    assert 0.2 <= out.mean <= 0.8

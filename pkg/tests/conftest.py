"""Session fixtures for the heavy end-to-end tests.

Everything here is sized for a single CPU core: a 100x100 orbit scene, a
64^3 grid, and a narrow decoder corpus.  The full chain (scene pretrain,
decoder pretrain, five embedding runs) is built once per session and takes
on the order of an hour.  Unit test files never touch these fixtures, so
`pytest tests/test_<module>.py` stays fast.

Set FIELDMARK_TEST_CACHE to a writable directory to reuse the artifacts
across sessions while iterating.  The cache key covers the recipes below but
not the library code itself, so wipe the directory after touching model,
rendering or training internals.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from fieldmark import checkpoint as ckpt
from fieldmark.config import DecoderPretrainConfig, TrainConfig
from fieldmark.decoder import fit_whitening, pretrain_decoder
from fieldmark.rendering import render_image
from fieldmark.scenes import generate_texture_corpus, make_toy_scene
from fieldmark.training import RenderOptions, TrainResult, pretrain_scene, run_training

torch.set_num_threads(1)

SCENE_VIEWS = dict(num_train=10, num_test=4, resolution=100)

# Scene-scale recipe shared by every embedding run.  Grid and network sizes
# are the largest that keep one pretrain under ~3 minutes on one core.
ACCEPT_CFG = dict(
    resolution=(64, 64, 64),
    density_rank=8,
    appearance_rank=24,
    appearance_dim=27,
    watermark_rank=8,
    num_ids=64,
    view_freqs=2,
    hidden_dim=64,
    num_watermarks=1,
    message_bits=8,
    min_hamming=2,
    pretrain_iters=800,
    phase1_iters=20,
    phase2_iters=160,
    lr_grids=0.005,
    lambda_rgb=0.5,
    ray_batch=2048,
    samples_per_ray=64,
    patch_size=50,
    weight_threshold=1e-4,
    stratified=True,
    augment=False,
    train_decoder_phase2=True,
    checkpoint_every=0,
    log_every=50,
    seed=0,
)

# Decoder pretraining: 8 bits saturates held-out accuracy (~1.0 by step
# 5000) on the mixed corpus; 16 bits converges much more slowly and needs a
# weaker image anchor so the throwaway encoder can make stronger marks.
# target_accuracy here is only a degenerate-run floor, not the acceptance
# threshold.
DECODER8 = dict(
    num_bits=8, steps=9000, batch_size=32, tile=32, lr=2e-3,
    image_weight=0.15, noise=False, holdout=32, min_corpus=200,
    target_accuracy=0.90, eval_every=500, seed=0,
)
DECODER16 = dict(DECODER8, num_bits=16, steps=20000, image_weight=0.05,
                 target_accuracy=0.65)

WHITEN_TILE = 64
WHITEN_FIT = 16000


def _cache_path(name: str, key: dict):
    root = os.environ.get("FIELDMARK_TEST_CACHE")
    if not root:
        return None
    digest = hashlib.sha256(
        json.dumps(key, sort_keys=True, default=repr).encode()).hexdigest()[:16]
    d = Path(root)
    d.mkdir(parents=True, exist_ok=True)
    return d / f"{name}-{digest}.fmk"


@pytest.fixture(scope="session")
def toy_scene():
    return make_toy_scene(**SCENE_VIEWS)


@pytest.fixture(scope="session")
def accept_cfg():
    return TrainConfig(**ACCEPT_CFG)


@pytest.fixture(scope="session")
def render_opts(toy_scene, accept_cfg):
    return RenderOptions.from_config(toy_scene, accept_cfg).kwargs()


def _pretrained_base(scene, cfg):
    path = _cache_path("base", {"cfg": cfg.to_dict(), "scene": SCENE_VIEWS})
    if path is not None and path.exists():
        model, _ = ckpt.load_scene_model(path)
        return model
    model = pretrain_scene(scene, cfg)
    if path is not None:
        ckpt.save_scene_model(path, model, config=cfg.to_dict(),
                              scene_meta=scene.meta())
    return model


@pytest.fixture(scope="session")
def base_model(toy_scene, accept_cfg):
    return _pretrained_base(toy_scene, accept_cfg)


@pytest.fixture(scope="session")
def base_model_r2(toy_scene, accept_cfg):
    return _pretrained_base(toy_scene, accept_cfg.replace(watermark_rank=2))


def _render_views(model, views, opts, wm_id=None):
    out = []
    for _, cam in views:
        with torch.no_grad():
            out.append(render_image(model, cam, wm_id, **opts).numpy())
    return out


@pytest.fixture(scope="session")
def clean_train_renders(base_model, toy_scene, render_opts):
    return _render_views(base_model, toy_scene.views("train"), render_opts)


@pytest.fixture(scope="session")
def clean_test_renders(base_model, toy_scene, render_opts):
    return _render_views(base_model, toy_scene.views("test"), render_opts)


@pytest.fixture(scope="session")
def decoder_corpus(clean_train_renders):
    # half procedural textures, half tiles of what the decoder will actually
    # see at verification time
    rng = np.random.default_rng(11)
    corpus = list(generate_texture_corpus(200, 64, rng))
    corpus.extend([r.astype(np.float64) for r in clean_train_renders] * 16)
    rng.shuffle(corpus)
    return corpus


def _pretrained_decoder(corpus, recipe):
    path = _cache_path("decoder", recipe)
    if path is not None and path.exists():
        dec, _ = ckpt.load_decoder(path)
        return dec
    dec = pretrain_decoder(corpus, DecoderPretrainConfig(**recipe))
    if path is not None:
        ckpt.save_decoder(path, dec)
    return dec


@pytest.fixture(scope="session")
def decoder8(decoder_corpus):
    return _pretrained_decoder(decoder_corpus, DECODER8)


@pytest.fixture(scope="session")
def decoder16(decoder_corpus):
    return _pretrained_decoder(decoder_corpus, DECODER16)


def _whitened(decoder):
    # the fit set is ~0.8 GB of tiles; build it locally so nothing retains it
    from helpers import noise_tiles

    tiles = noise_tiles(WHITEN_FIT, WHITEN_TILE, np.random.default_rng(31))
    dec, _ = fit_whitening(decoder, tiles)
    return dec


@pytest.fixture(scope="session")
def decoder8_white(decoder8):
    return _whitened(decoder8)


@pytest.fixture(scope="session")
def decoder16_white(decoder16):
    return _whitened(decoder16)


def _embed_run(scene, cfg, decoder, base, tag) -> TrainResult:
    key = {"cfg": cfg.to_dict(), "tag": tag}
    mpath = _cache_path(f"run-{tag}-model", key)
    dpath = _cache_path(f"run-{tag}-decoder", key)
    if mpath is not None and mpath.exists() and dpath.exists():
        model, manifest = ckpt.load_scene_model(mpath)
        dec, _ = ckpt.load_decoder(dpath)
        return TrainResult(model, ckpt.registry_from_manifest(manifest), dec)
    # run_training fine-tunes the decoder in place during phase 2; embedding
    # runs must not contaminate the shared pretrained fixture
    result = run_training(scene, cfg, copy.deepcopy(decoder), base_model=base)
    if mpath is not None:
        ckpt.save_scene_model(mpath, result.model, registry=result.registry,
                              config=cfg.to_dict(), scene_meta=scene.meta())
        ckpt.save_decoder(dpath, result.decoder)
    return result


@pytest.fixture(scope="session")
def embed_single(toy_scene, accept_cfg, decoder8_white, base_model):
    return _embed_run(toy_scene, accept_cfg, decoder8_white, base_model, "single")


@pytest.fixture(scope="session")
def embed_single_aug(toy_scene, accept_cfg, decoder8_white, base_model):
    cfg = accept_cfg.replace(augment=True)
    return _embed_run(toy_scene, cfg, decoder8_white, base_model, "aug")


@pytest.fixture(scope="session")
def embed_rank2(toy_scene, accept_cfg, decoder8_white, base_model_r2):
    cfg = accept_cfg.replace(watermark_rank=2)
    return _embed_run(toy_scene, cfg, decoder8_white, base_model_r2, "rank2")


MULTI_CFG = dict(num_watermarks=4, message_bits=16, min_hamming=6,
                 phase1_iters=120, phase2_iters=280)


@pytest.fixture(scope="session")
def embed_multi4(toy_scene, accept_cfg, decoder16_white, base_model):
    cfg = accept_cfg.replace(**MULTI_CFG)
    return _embed_run(toy_scene, cfg, decoder16_white, base_model, "multi4")


# A registry of 16 messages with pairwise distance 6 in 16 bits is a hard draw
# for rejection sampling, so the sweep relaxes the spacing floor; the sweep
# criterion compares counts against each other, not against the spacing.
SWEEP_CFG = dict(MULTI_CFG, min_hamming=4)
SWEEP_COUNTS = (2, 16)


@pytest.fixture(scope="session")
def sweep_rows(toy_scene, accept_cfg, decoder16_white, base_model):
    from fieldmark.evaluation import multiwm_sweep

    cfg = accept_cfg.replace(**SWEEP_CFG)
    path = _cache_path("sweep", {"cfg": cfg.to_dict(), "counts": SWEEP_COUNTS})
    if path is not None and path.exists():
        return json.loads(path.read_text())
    rows = multiwm_sweep(toy_scene, cfg, decoder16_white, SWEEP_COUNTS,
                         base_model=base_model)
    if path is not None:
        path.write_text(json.dumps(rows))
    return rows

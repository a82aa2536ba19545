"""Verification-side evaluation: bit accuracy, image quality, attacks, sweeps.

Attacks here are the verifier's view of the world and deliberately avoid the
differentiable training-time implementations: JPEG goes through an actual
codec, blur through scipy, resampling through PIL.  Decoding pads attacked
images to the wavelet stride, so size-changing attacks (crop, resize) work
without special cases.
"""

from __future__ import annotations

import copy
import io
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage, stats

from .config import TrainConfig
from .decoder import BitDecoder, bit_accuracy, decode_logits
from .losses import psnr as psnr_metric
from .losses import ssim as ssim_metric
from .messages import MessageRegistry, generate_message_registry
from .model import SceneModel
from .rendering import Camera, render_image
from .scenes import Scene

log = logging.getLogger(__name__)


def image_metrics(rendered, reference) -> Dict[str, float]:
    """PSNR (dB, capped at 99 for identical inputs) and structural similarity."""
    r = torch.as_tensor(np.asarray(rendered), dtype=torch.float64)
    g = torch.as_tensor(np.asarray(reference), dtype=torch.float64)
    if r.shape != g.shape:
        raise ValueError(f"shape mismatch: {tuple(r.shape)} vs {tuple(g.shape)}")
    return {"psnr": psnr_metric(r, g), "ssim": float(ssim_metric(r, g))}


def decode_accuracy(decoder: BitDecoder, image, message: np.ndarray) -> float:
    return bit_accuracy(message, decode_logits(decoder, image))


# ---------------------------------------------------------------------------
# bit accuracy over views and message sets

def evaluate_bit_accuracy(
    model: SceneModel,
    decoder: BitDecoder,
    views: Sequence,
    registry: MessageRegistry,
    *,
    render_options: dict,
    message_sets: int = 1,
    refit: Optional[Callable[[MessageRegistry], SceneModel]] = None,
    rng: Optional[np.random.Generator] = None,
) -> dict:
    """Mean/std of per-view bit accuracy for every registered ID.

    With ``message_sets > 1`` the protocol repeats with freshly generated
    registries; ``refit`` embeds each new registry and returns the model to
    score (without it, extra sets only make sense for chance-level baselines).
    """
    if message_sets > 1 and rng is None:
        raise ValueError("message_sets > 1 needs an rng to draw fresh registries")
    per_set: List[float] = []
    rows: List[dict] = []
    for s in range(message_sets):
        if s == 0:
            reg, m = registry, model
        else:
            reg = generate_message_registry(
                registry.num_messages, registry.num_bits, registry.min_distance, rng)
            m = refit(reg) if refit is not None else model
        accs = []
        for wm_id in range(reg.num_messages):
            msg = reg.message_for(wm_id)
            for v, (_, cam) in enumerate(views):
                with torch.no_grad():
                    img = render_image(m, cam, wm_id, **render_options)
                acc = bit_accuracy(msg, decode_logits(decoder, img))
                rows.append({"set": s, "wm_id": wm_id, "view": v, "bit_acc": acc})
                accs.append(acc)
        per_set.append(float(np.mean(accs)))
    return {
        "mean": float(np.mean(per_set)),
        "std": float(np.std(per_set)),
        "per_set": per_set,
        "rows": rows,
    }


def cross_id_matrix(
    model: SceneModel,
    decoder: BitDecoder,
    views: Sequence,
    registry: MessageRegistry,
    *,
    render_options: dict,
) -> np.ndarray:
    """entry [i, j]: render with ID i, score against message j (view-averaged)."""
    n = registry.num_messages
    out = np.zeros((n, n))
    for i in range(n):
        per_view = []
        for _, cam in views:
            with torch.no_grad():
                img = render_image(model, cam, i, **render_options)
            logits = decode_logits(decoder, img)
            per_view.append([bit_accuracy(registry.message_for(j), logits)
                             for j in range(n)])
        out[i] = np.mean(per_view, axis=0)
    return out


# ---------------------------------------------------------------------------
# attack suite (codec/scipy/PIL reference implementations)

Attack = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def _jpeg(quality: int) -> Attack:
    def attack(img, _rng):
        data = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(data).save(buf, format="JPEG", quality=quality)
        buf.seek(0)
        return np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
    return attack


def _center_crop(keep: float) -> Attack:
    def attack(img, _rng):
        h, w = img.shape[:2]
        ch, cw = max(8, int(round(h * keep))), max(8, int(round(w * keep)))
        r0, c0 = (h - ch) // 2, (w - cw) // 2
        return img[r0 : r0 + ch, c0 : c0 + cw]
    return attack


def _resize(scale: float) -> Attack:
    def attack(img, _rng):
        h, w = img.shape[:2]
        nh, nw = max(8, int(round(h * scale))), max(8, int(round(w * scale)))
        data = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
        out = Image.fromarray(data).resize((nw, nh), Image.BILINEAR)
        return np.asarray(out, dtype=np.float32) / 255.0
    return attack


def _gaussian_blur(sigma: float) -> Attack:
    def attack(img, _rng):
        out = np.stack([ndimage.gaussian_filter(img[..., c], sigma) for c in range(3)],
                       axis=-1)
        return np.clip(out, 0, 1)
    return attack


def _gaussian_noise(std: float) -> Attack:
    def attack(img, rng):
        return np.clip(img + rng.normal(scale=std, size=img.shape), 0, 1).astype(np.float32)
    return attack


def _brightness(factor: float) -> Attack:
    def attack(img, _rng):
        return np.clip(img * factor, 0, 1)
    return attack


def default_attacks() -> Dict[str, Attack]:
    return {
        "none": lambda img, _rng: img,
        "jpeg80": _jpeg(80),
        "jpeg50": _jpeg(50),
        "jpeg30": _jpeg(30),
        "crop70": _center_crop(0.7),
        "crop50": _center_crop(0.5),
        "resize50": _resize(0.5),
        "blur_sigma1": _gaussian_blur(1.0),
        "blur_sigma2": _gaussian_blur(2.0),
        "noise02": _gaussian_noise(0.02),
        "noise05": _gaussian_noise(0.05),
        "brighten": _brightness(1.1),
        "darken": _brightness(0.9),
    }


def attack_suite(
    model: SceneModel,
    decoder: BitDecoder,
    views: Sequence,
    registry: MessageRegistry,
    *,
    render_options: dict,
    attacks: Optional[Dict[str, Attack]] = None,
    seed: int = 0,
) -> List[dict]:
    """Bit accuracy per attack, averaged over IDs and views."""
    attacks = attacks if attacks is not None else default_attacks()
    renders = {}
    for wm_id in range(registry.num_messages):
        for v, (_, cam) in enumerate(views):
            with torch.no_grad():
                renders[(wm_id, v)] = render_image(
                    model, cam, wm_id, **render_options).numpy()
    rows = []
    for name, attack in attacks.items():
        rng = np.random.default_rng(seed)  # same noise per attack row
        accs = []
        for wm_id in range(registry.num_messages):
            msg = registry.message_for(wm_id)
            for v in range(len(views)):
                attacked = attack(renders[(wm_id, v)], rng)
                accs.append(bit_accuracy(msg, decode_logits(decoder, attacked)))
        rows.append({"attack": name, "bit_acc": float(np.mean(accs)),
                     "n": len(accs)})
        log.info("attack %-12s bit accuracy %.4f", name, rows[-1]["bit_acc"])
    return rows


# ---------------------------------------------------------------------------
# capacity sweep

def multiwm_sweep(
    scene: Scene,
    cfg: TrainConfig,
    decoder: BitDecoder,
    counts: Sequence[int],
    *,
    base_model: Optional[SceneModel] = None,
    split: str = "test",
) -> List[dict]:
    """Re-embed with varying watermark counts; report accuracy and quality.

    A shared pretrained model can be supplied so the scene fit is reused and
    the sweep only pays for the embedding phases.
    """
    from .training import RenderOptions, run_training

    rows = []
    views = scene.views(split)
    opts = RenderOptions.from_config(scene, cfg).kwargs()
    for n in counts:
        if n < 1:
            raise ValueError(f"watermark counts must be >= 1, got {n}")
        run_cfg = cfg.replace(num_watermarks=n)
        # phase 2 may fine-tune the decoder in place; keep the counts independent
        result = run_training(scene, run_cfg, copy.deepcopy(decoder),
                              base_model=base_model)
        acc = evaluate_bit_accuracy(
            result.model, result.decoder, views, result.registry, render_options=opts)
        quality = []
        for gt, cam in views:
            with torch.no_grad():
                img = render_image(result.model, cam, 0, **opts)
            quality.append(image_metrics(img, gt))
        rows.append({
            "num_watermarks": n,
            "bit_acc": acc["mean"],
            "psnr": float(np.mean([q["psnr"] for q in quality])),
            "ssim": float(np.mean([q["ssim"] for q in quality])),
        })
        log.info("sweep n=%d: acc %.4f psnr %.2f", n, rows[-1]["bit_acc"],
                 rows[-1]["psnr"])
    return rows


def accuracy_ttest(a: Sequence[float], b: Sequence[float]) -> dict:
    """Welch two-sample comparison of per-view accuracy samples."""
    t, p = stats.ttest_ind(list(a), list(b), equal_var=False)
    return {"t": float(t), "p": float(p)}


# ---------------------------------------------------------------------------
# qualitative report helpers

def residual_triptych(reference: np.ndarray, rendered: np.ndarray,
                      gain: float = 5.0) -> np.ndarray:
    """[reference | rendered | amplified residual] in one image row."""
    reference = np.asarray(reference, dtype=np.float32)
    rendered = np.asarray(rendered, dtype=np.float32)
    if reference.shape != rendered.shape:
        raise ValueError("reference and rendered shapes differ")
    residual = np.clip(0.5 + gain * (rendered - reference), 0, 1)
    return np.concatenate([reference, rendered, residual], axis=1)


@dataclass
class ChanceLevelResult:
    mean: float
    std: float
    trials: int


def chance_level(
    decoder: BitDecoder,
    images: Sequence[np.ndarray],
    trials: int,
    rng: np.random.Generator,
) -> ChanceLevelResult:
    """Accuracy of random messages against unwatermarked images.

    Draws (image, fresh random message) pairs; a healthy whitened decoder sits
    at one half.
    """
    logits = [decode_logits(decoder, img).numpy() for img in images]
    accs = np.empty(trials)
    for t in range(trials):
        lg = logits[int(rng.integers(0, len(logits)))]
        msg = rng.integers(0, 2, size=lg.shape[0])
        accs[t] = ((lg > 0).astype(int) == msg).mean()
    return ChanceLevelResult(float(accs.mean()), float(accs.std()), trials)

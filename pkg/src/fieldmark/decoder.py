"""Watermark bit decoder: extraction network, whitening, and pretraining.

The decoder is a small convolutional network that maps the (scaled) two-level
wavelet low-pass band of an image to one logit per message bit.  It is
pretrained jointly with a throwaway residual encoder on an ordinary image
corpus, then frozen and reused across scenes; per-bit logit statistics on
clean images are whitened and folded into the final linear layer so raw
decoder outputs are already decorrelated and centered.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import AugmentationSpec, apply_pipeline, sample_pipeline
from .config import DecoderPretrainConfig
from .wavelet import ll2, pad_to_multiple

log = logging.getLogger(__name__)


class DecoderPretrainError(RuntimeError):
    """Raised when pretraining cannot reach the required held-out accuracy."""


def _conv_bn_relu(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class BitDecoder(nn.Module):
    """Conv stack -> per-bit channel projection -> global average -> linear.

    Whitening state lives in buffers so it serializes with the weights; the
    linear layer already contains the folded transform once ``whitened`` is
    set, and the stored statistics exist only for audit.
    """

    def __init__(self, num_bits: int, channels: int = 64, num_blocks: int = 7):
        super().__init__()
        if num_bits < 1:
            raise ValueError(f"num_bits must be >= 1, got {num_bits}")
        self.num_bits = num_bits
        blocks = [_conv_bn_relu(3, channels)]
        blocks += [_conv_bn_relu(channels, channels) for _ in range(num_blocks - 1)]
        self.blocks = nn.Sequential(*blocks)
        self.project = nn.Conv2d(channels, num_bits, kernel_size=3, padding=1)
        self.linear = nn.Linear(num_bits, num_bits)
        self.register_buffer("whitened", torch.zeros((), dtype=torch.bool))
        self.register_buffer("whiten_mean", torch.zeros(num_bits))
        self.register_buffer("whiten_cov", torch.eye(num_bits))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, 3, h, w) -> logits (B, num_bits)."""
        if x.shape[-2] < 8 or x.shape[-1] < 8:
            raise ValueError(f"decoder input must be at least 8x8, got {tuple(x.shape)}")
        h = self.project(self.blocks(x))
        return self.linear(h.mean(dim=(-2, -1)))


def freeze_batchnorm(decoder: BitDecoder) -> None:
    """Pin normalization layers to inference statistics for downstream training."""
    for m in decoder.modules():
        if isinstance(m, nn.BatchNorm2d):
            m.eval()
            m.weight.requires_grad_(True)  # affine part still trainable


def decoder_input(image: torch.Tensor) -> torch.Tensor:
    """Rendered/attacked image (..., H, W, 3) in [0,1] -> decoder tensor (B, 3, h, w).

    Pads to a multiple of 4 when needed and rescales the two-level low-pass
    band back to image range.
    """
    if image.ndim == 3:
        image = image.unsqueeze(0)
    image = pad_to_multiple(image, 4)
    band = ll2(image) / 4.0
    return band.permute(0, 3, 1, 2)


def extract_logits(decoder: BitDecoder, image: torch.Tensor) -> torch.Tensor:
    """Differentiable path from an image to per-bit logits (training use)."""
    return decoder(decoder_input(image))


def decode_logits(decoder: BitDecoder, image) -> torch.Tensor:
    """Inference-mode logits for one image, (num_bits,)."""
    if isinstance(image, np.ndarray):
        image = torch.as_tensor(image, dtype=next(decoder.parameters()).dtype)
    was_training = decoder.training
    decoder.eval()
    try:
        with torch.no_grad():
            out = extract_logits(decoder, image)
    finally:
        decoder.train(was_training)
    return out[0] if out.shape[0] == 1 and image.ndim == 3 else out


def decode_bits(decoder: BitDecoder, image) -> np.ndarray:
    """Hard bit estimates in {0, 1}, shape (num_bits,)."""
    return (decode_logits(decoder, image) > 0).cpu().numpy().astype(np.uint8)


def bit_accuracy(message: np.ndarray, logits) -> float:
    """Fraction of bits whose logit sign matches the message."""
    message = np.asarray(message).reshape(-1)
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    logits = np.asarray(logits).reshape(-1)
    if message.shape != logits.shape:
        raise ValueError(f"length mismatch: {message.shape[0]} bits vs {logits.shape[0]} logits")
    return float(((logits > 0).astype(np.uint8) == message.astype(np.uint8)).mean())


# ---------------------------------------------------------------------------
# whitening

@dataclass(frozen=True)
class WhiteningTransform:
    mean: np.ndarray      # (L,)
    matrix: np.ndarray    # (L, L), inverse square root of the ridge covariance
    covariance: np.ndarray

    @property
    def num_bits(self) -> int:
        return self.mean.shape[0]


def compute_whitening(logits: np.ndarray, ridge: float = 1e-6) -> WhiteningTransform:
    """Whitening transform from clean-image logits (N, L)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError(f"expected (N, L) logits, got {logits.shape}")
    n, l = logits.shape
    if n < 10 * l:
        raise ValueError(f"need at least {10 * l} samples to whiten {l} bits, got {n}")
    mean = logits.mean(axis=0)
    centered = logits - mean
    cov = centered.T @ centered / n
    evals, evecs = np.linalg.eigh(cov + ridge * np.eye(l))
    if evals.min() <= 1e-12:
        raise ValueError("logit covariance is numerically singular even after ridging")
    inv_sqrt = (evecs * (evals ** -0.5)) @ evecs.T
    return WhiteningTransform(mean, inv_sqrt, cov)


def fold_whitening(decoder: BitDecoder, transform: WhiteningTransform) -> BitDecoder:
    """New decoder whose final linear layer bakes in the whitening transform.

    logits' = W (A x + b - mu)  with A, b the original linear layer.
    """
    if decoder.whitened.item():
        raise ValueError("decoder is already whitened; fold once only")
    if transform.num_bits != decoder.num_bits:
        raise ValueError("whitening dimensionality does not match the decoder")
    out = copy.deepcopy(decoder)
    dtype = out.linear.weight.dtype
    wp = torch.as_tensor(transform.matrix, dtype=dtype)
    mu = torch.as_tensor(transform.mean, dtype=dtype)
    with torch.no_grad():
        out.linear.weight.copy_(wp @ decoder.linear.weight)
        out.linear.bias.copy_(wp @ (decoder.linear.bias - mu))
        out.whiten_mean.copy_(mu)
        out.whiten_cov.copy_(torch.as_tensor(transform.covariance, dtype=dtype))
        out.whitened.fill_(True)
    return out


def fit_whitening(
    decoder: BitDecoder,
    images: Sequence,
    ridge: float = 1e-6,
    batch_size: int = 32,
) -> Tuple[BitDecoder, WhiteningTransform]:
    """Fit logit statistics on clean images and return the folded decoder."""
    logits = collect_logits(decoder, images, batch_size)
    transform = compute_whitening(logits, ridge)
    return fold_whitening(decoder, transform), transform


def collect_logits(decoder: BitDecoder, images: Sequence, batch_size: int = 32) -> np.ndarray:
    """Inference-mode logits for a set of equally sized images, (N, L) float64."""
    rows: List[np.ndarray] = []
    dtype = next(decoder.parameters()).dtype
    was_training = decoder.training
    decoder.eval()
    try:
        with torch.no_grad():
            for s in range(0, len(images), batch_size):
                batch = torch.stack([
                    torch.as_tensor(np.asarray(im), dtype=dtype) for im in images[s : s + batch_size]])
                rows.append(extract_logits(decoder, batch).double().cpu().numpy())
    finally:
        decoder.train(was_training)
    return np.concatenate(rows, axis=0)


# ---------------------------------------------------------------------------
# joint pretraining (the encoder is scaffolding and is discarded)

class _ResidualEncoder(nn.Module):
    """Adds a message-conditioned residual to the cover image."""

    def __init__(self, num_bits: int, channels: int = 32):
        super().__init__()
        self.pre = nn.Sequential(
            _conv_bn_relu(3, channels),
            _conv_bn_relu(channels, channels),
            _conv_bn_relu(channels, channels),
        )
        self.post = nn.Sequential(
            _conv_bn_relu(channels + num_bits + 3, channels),
            nn.Conv2d(channels, 3, kernel_size=1),
        )

    def forward(self, image: torch.Tensor, message: torch.Tensor) -> torch.Tensor:
        b, _, h, w = image.shape
        m = message[:, :, None, None].expand(b, message.shape[1], h, w)
        feat = self.pre(image)
        delta = self.post(torch.cat([feat, m, image], dim=1))
        return (image + delta).clamp(0.0, 1.0)


def _random_tiles(
    images: Sequence[np.ndarray], tile: int, count: int, rng: np.random.Generator
) -> torch.Tensor:
    out = np.empty((count, tile, tile, 3), dtype=np.float32)
    idx = rng.integers(0, len(images), size=count)
    for i, k in enumerate(idx):
        im = images[k]
        h, w = im.shape[:2]
        if h < tile or w < tile:
            raise ValueError(f"corpus image {k} is {h}x{w}, smaller than tile {tile}")
        r = int(rng.integers(0, h - tile + 1))
        c = int(rng.integers(0, w - tile + 1))
        out[i] = im[r : r + tile, c : c + tile]
    return torch.as_tensor(out)


def holdout_accuracy(
    decoder: BitDecoder,
    encoder: _ResidualEncoder,
    tiles: torch.Tensor,
    messages: torch.Tensor,
) -> float:
    """Noiseless encode-decode bit accuracy on fixed tiles."""
    was = decoder.training
    decoder.eval()
    encoder.eval()
    with torch.no_grad():
        enc = encoder(tiles.permute(0, 3, 1, 2), messages)
        logits = extract_logits(decoder, enc.permute(0, 2, 3, 1))
        acc = ((logits > 0).float() == messages).float().mean().item()
    decoder.train(was)
    encoder.train(was)
    return acc


def pretrain_decoder(
    corpus: Sequence[np.ndarray],
    config: DecoderPretrainConfig,
    noise_pool: Optional[Sequence[AugmentationSpec]] = None,
) -> BitDecoder:
    """Train a decoder against a throwaway residual encoder on an image corpus.

    corpus: float images in [0, 1], each at least ``config.tile`` on both axes.
    Raises DecoderPretrainError if the final noiseless held-out accuracy stays
    below ``config.target_accuracy``.
    """
    if len(corpus) < config.min_corpus:
        raise ValueError(
            f"corpus of {len(corpus)} images is below the minimum of {config.min_corpus}")
    rng = np.random.default_rng(config.seed)
    torch_gen = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)  # layer init draws from the global stream

    n_hold = min(config.holdout, max(4, len(corpus) // 8))
    hold_images = [corpus[i] for i in range(len(corpus) - n_hold, len(corpus))]
    fit_images = [corpus[i] for i in range(len(corpus) - n_hold)]

    decoder = BitDecoder(config.num_bits)
    encoder = _ResidualEncoder(config.num_bits)
    opt = torch.optim.Adam(
        list(decoder.parameters()) + list(encoder.parameters()), lr=config.lr)

    hold_tiles = _random_tiles(hold_images, config.tile, 4 * n_hold, rng)
    hold_msgs = torch.bernoulli(
        torch.full((hold_tiles.shape[0], config.num_bits), 0.5), generator=torch_gen)

    decoder.train()
    encoder.train()
    best_acc = 0.0
    for step in range(config.steps):
        tiles = _random_tiles(fit_images, config.tile, config.batch_size, rng)
        msgs = torch.bernoulli(
            torch.full((config.batch_size, config.num_bits), 0.5), generator=torch_gen)
        enc = encoder(tiles.permute(0, 3, 1, 2), msgs)
        enc_img = enc.permute(0, 2, 3, 1)
        if noise_pool is not None and config.noise:
            pipeline = sample_pipeline(
                noise_pool, rng, config.noise_count, config.noise_probability)
            enc_img = apply_pipeline(pipeline, enc_img)
        logits = extract_logits(decoder, enc_img)
        msg_loss = F.binary_cross_entropy_with_logits(logits, msgs)
        img_loss = ((enc - tiles.permute(0, 3, 1, 2)) ** 2).mean()
        loss = msg_loss + config.image_weight * img_loss
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (step + 1) % config.eval_every == 0 or step + 1 == config.steps:
            acc = holdout_accuracy(decoder, encoder, hold_tiles, hold_msgs)
            best_acc = max(best_acc, acc)
            log.info("decoder pretrain step %d: loss %.4f, held-out acc %.4f",
                     step + 1, loss.item(), acc)

    final_acc = holdout_accuracy(decoder, encoder, hold_tiles, hold_msgs)
    if final_acc < config.target_accuracy:
        raise DecoderPretrainError(
            f"held-out bit accuracy {final_acc:.3f} below the required "
            f"{config.target_accuracy:.2f} after {config.steps} steps")
    decoder.eval()
    return decoder

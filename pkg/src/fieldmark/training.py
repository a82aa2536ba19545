"""Scene pretraining and the two-phase watermark embedding loop.

Stage order: (1) fit the clean radiance field with ray-batch photometric loss,
(2) full-image steps that push decoded bits toward each ID's message while a
perceptual term guards the render, decoder frozen, (3) patch-deferred steps
that add photometric, smoothness and structural terms, optionally unfreezing
the decoder and corrupting the render before decoding.

All randomness flows through two explicit streams (a torch generator for ray,
jitter, message-ID and bit draws; a numpy generator for registry generation
and augmentation parameters), both serialized into mid-run checkpoints, so a
resumed run reproduces the original step for step.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .augment import apply_pipeline, default_pool, sample_pipeline
from .config import TrainConfig
from .decoder import BitDecoder, bit_accuracy, extract_logits
from .losses import make_perceptual_loss, psnr, ssim, total_variation
from .messages import MessageRegistry, generate_message_registry
from .model import ModelSpec, SceneModel
from .rendering import deferred_render_backward, generate_rays, render_image, render_ray_batch
from .scenes import Scene

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "L_secret", "L_percept", "L_RGB", "L_TV", "L_SSIM",
               "bit_acc", "psnr")


class TrainingDivergedError(RuntimeError):
    """Raised when a loss goes non-finite; checkpoints on disk stay untouched."""


def model_spec_from_config(scene: Scene, cfg: TrainConfig) -> ModelSpec:
    return ModelSpec(
        bounds=(tuple(scene.bounds[0]), tuple(scene.bounds[1])),
        resolution=cfg.resolution,
        density_rank=cfg.density_rank,
        appearance_rank=cfg.appearance_rank,
        appearance_dim=cfg.appearance_dim,
        watermark_rank=cfg.watermark_rank,
        num_ids=cfg.num_ids,
        hidden_dim=cfg.hidden_dim,
        view_freqs=cfg.view_freqs,
    )


def build_optimizer(model: SceneModel, cfg: TrainConfig, scope: str) -> torch.optim.Adam:
    """Two parameter groups: grid factors fast, everything networked slow."""
    if scope == "scene":
        grids = [p for g in (model.density, model.appearance)
                 for p in list(g.planes.parameters()) + list(g.lines.parameters())]
        network = list(model.appearance.basis.parameters()) + list(model.color.parameters())
    elif scope == "all":
        grids = list(model.grid_parameters())
        network = list(model.network_parameters())
    else:
        raise ValueError(f"unknown optimizer scope {scope!r}")
    return torch.optim.Adam(
        [{"params": grids, "lr": cfg.lr_grids},
         {"params": network, "lr": cfg.lr_network}],
        betas=cfg.adam_betas)


def apply_lr_decay(optim: torch.optim.Optimizer, base_lrs: List[float],
                   step: int, total: int, target: float) -> None:
    if total <= 1:
        return
    factor = target ** (step / max(total - 1, 1))
    for group, base in zip(optim.param_groups, base_lrs):
        group["lr"] = base * factor


@dataclass
class RenderOptions:
    near: float
    far: float
    num_samples: int
    white_background: bool
    weight_threshold: float

    @classmethod
    def from_config(cls, scene: Scene, cfg: TrainConfig) -> "RenderOptions":
        return cls(
            near=cfg.near if cfg.near is not None else scene.near,
            far=cfg.far if cfg.far is not None else scene.far,
            num_samples=cfg.samples_per_ray,
            white_background=cfg.white_background,
            weight_threshold=cfg.weight_threshold,
        )

    def kwargs(self) -> dict:
        return {"near": self.near, "far": self.far, "num_samples": self.num_samples,
                "white_background": self.white_background,
                "weight_threshold": self.weight_threshold}


def _check_finite(value: torch.Tensor, what: str, iteration: int) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDivergedError(
            f"{what} became non-finite at iteration {iteration}; "
            "lower the learning rates or loss weights")


class _RayPool:
    """All training rays and their target colors, flattened for batch draws."""

    def __init__(self, scene: Scene, dtype: torch.dtype):
        origins, dirs, colors = [], [], []
        for img, cam in scene.views("train"):
            o, d = generate_rays(cam, dtype=dtype)
            origins.append(o)
            dirs.append(d)
            colors.append(torch.as_tensor(img, dtype=dtype).reshape(-1, 3))
        self.origins = torch.cat(origins)
        self.dirs = torch.cat(dirs)
        self.colors = torch.cat(colors)

    def draw(self, count: int, gen: torch.Generator):
        idx = torch.randint(0, self.origins.shape[0], (count,), generator=gen)
        return self.origins[idx], self.dirs[idx], self.colors[idx]


def pretrain_scene(scene: Scene, cfg: TrainConfig, **kwargs) -> SceneModel:
    """Stage 1 only: fit density/appearance to the clean views with ray batches."""
    result = run_training(
        scene, cfg.replace(phase1_iters=0, phase2_iters=0), None, **kwargs)
    return result.model


def _phase_losses_template() -> Dict[str, float]:
    return {k: None for k in ("L_secret", "L_percept", "L_RGB", "L_TV", "L_SSIM",
                              "bit_acc", "psnr")}


def phase1_step(
    model: SceneModel,
    decoder: BitDecoder,
    view,
    registry: MessageRegistry,
    cfg: TrainConfig,
    optim: torch.optim.Adam,
    torch_gen: torch.Generator,
    opts: RenderOptions,
    perceptual,
    iteration: int,
) -> Dict[str, float]:
    """Full-image message embedding; the decoder must already be frozen."""
    gt, cam = view
    wm_id = int(torch.randint(0, registry.num_messages, (1,), generator=torch_gen))
    jitter = (torch.rand(cam.height * cam.width, opts.num_samples, generator=torch_gen)
              if cfg.stratified else None)
    image = render_image(model, cam, wm_id, jitter=jitter, chunk=cfg.ray_batch,
                         **opts.kwargs())
    gt_t = torch.as_tensor(gt, dtype=image.dtype)
    message = torch.as_tensor(registry.message_for(wm_id), dtype=image.dtype)
    logits = extract_logits(decoder, image)[0]
    l_secret = F.binary_cross_entropy_with_logits(logits, message)
    l_percept = perceptual(image, gt_t)
    loss = cfg.lambda_message * l_secret + cfg.lambda_percept * l_percept
    _check_finite(loss, "phase-1 loss", iteration)
    optim.zero_grad()
    loss.backward()
    optim.step()

    row = _phase_losses_template()
    with torch.no_grad():
        row.update({
            "L_secret": float(l_secret), "L_percept": float(l_percept),
            "L_RGB": float(F.mse_loss(image, gt_t)),
            "L_TV": float(total_variation(image)),
            "L_SSIM": float(1.0 - ssim(image, gt_t)),
            "bit_acc": bit_accuracy(registry.message_for(wm_id), logits),
            "psnr": psnr(image, gt_t),
        })
    return row


def phase2_step(
    model: SceneModel,
    decoder: BitDecoder,
    view,
    registry: MessageRegistry,
    cfg: TrainConfig,
    optims: List[torch.optim.Optimizer],
    torch_gen: torch.Generator,
    np_rng: np.random.Generator,
    opts: RenderOptions,
    perceptual,
    aug_pool,
    iteration: int,
) -> Dict[str, float]:
    """Patch-deferred step with photometric, smoothness and structural terms."""
    gt, cam = view
    wm_id = int(torch.randint(0, registry.num_messages, (1,), generator=torch_gen))
    jitter = (torch.rand(cam.height * cam.width, opts.num_samples, generator=torch_gen)
              if cfg.stratified else None)
    message_np = registry.message_for(wm_id)
    transforms = (sample_pipeline(aug_pool, np_rng, cfg.augment_count,
                                  cfg.augment_probability)
                  if (cfg.augment and cfg.keep_message_terms_phase2) else [])
    record: Dict[str, float] = _phase_losses_template()

    def image_loss(image: torch.Tensor) -> torch.Tensor:
        gt_t = torch.as_tensor(gt, dtype=image.dtype)
        l_rgb = F.mse_loss(image, gt_t)
        l_tv = total_variation(image)
        l_ssim = 1.0 - ssim(image, gt_t)
        loss = cfg.lambda_rgb * l_rgb + cfg.lambda_tv * l_tv + cfg.lambda_ssim * l_ssim
        record.update({"L_RGB": float(l_rgb.detach()), "L_TV": float(l_tv.detach()),
                       "L_SSIM": float(l_ssim.detach())})
        if cfg.keep_message_terms_phase2:
            attacked = apply_pipeline(transforms, image)
            logits = extract_logits(decoder, attacked)[0]
            message = torch.as_tensor(message_np, dtype=image.dtype)
            l_secret = F.binary_cross_entropy_with_logits(logits, message)
            l_percept = perceptual(image, gt_t)
            loss = loss + cfg.lambda_message * l_secret + cfg.lambda_percept * l_percept
            record.update({
                "L_secret": float(l_secret.detach()), "L_percept": float(l_percept.detach()),
                "bit_acc": bit_accuracy(message_np, logits.detach()),
            })
        return loss

    for optim in optims:
        optim.zero_grad()
    loss, image = deferred_render_backward(
        model, cam, wm_id, image_loss,
        patch_size=cfg.patch_size, jitter=jitter, **opts.kwargs())
    _check_finite(loss, "phase-2 loss", iteration)
    for optim in optims:
        optim.step()
    record["psnr"] = psnr(image, torch.as_tensor(gt, dtype=image.dtype))
    return record


@dataclass
class TrainResult:
    model: SceneModel
    registry: MessageRegistry
    decoder: Optional[BitDecoder]
    log_rows: List[dict] = dc_field(default_factory=list)
    checkpoint_path: Optional[Path] = None
    log_path: Optional[Path] = None


class _LogWriter:
    def __init__(self, path: Optional[Path]):
        self.rows: List[dict] = []
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", newline="")
            self._csv = csv.DictWriter(self._fh, fieldnames=LOG_COLUMNS)
            self._csv.writeheader()
        else:
            self._fh = None

    def write(self, iteration: int, row: dict) -> None:
        full = {k: "" for k in LOG_COLUMNS}
        full["iteration"] = iteration
        for key, value in row.items():
            if key in full and value is not None:
                full[key] = value
        self.rows.append(full)
        if self._fh is not None:
            self._csv.writerow(full)
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _stage_table(cfg: TrainConfig, skip_pretrain: bool) -> List[Tuple[str, int]]:
    stages = [] if skip_pretrain else [("pretrain", cfg.pretrain_iters)]
    return stages + [("phase1", cfg.phase1_iters), ("phase2", cfg.phase2_iters)]


def run_training(
    scene: Scene,
    cfg: TrainConfig,
    decoder: Optional[BitDecoder] = None,
    *,
    registry: Optional[MessageRegistry] = None,
    base_model: Optional[SceneModel] = None,
    out_dir=None,
    checkpoint_name: str = "model.fmk",
    resume_from=None,
) -> TrainResult:
    """Run all stages, stream the loss log, checkpoint periodically.

    ``base_model`` skips scene pretraining and embeds into a copy of the given
    model.  ``resume_from`` continues a mid-run state checkpoint produced by an
    earlier call with the same config.
    """
    if (cfg.phase1_iters or cfg.phase2_iters) and decoder is None:
        raise ValueError("watermark embedding phases need a pretrained bit decoder")
    if decoder is not None and decoder.num_bits != cfg.message_bits:
        raise ValueError(
            f"decoder extracts {decoder.num_bits} bits but the config asks for "
            f"{cfg.message_bits}")

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / checkpoint_name if out_dir is not None else None
    state_path = out_dir / "train_state.fmk" if out_dir is not None else None

    torch_gen = torch.Generator().manual_seed(cfg.seed)
    np_rng = np.random.default_rng(cfg.seed + 1)
    torch.manual_seed(cfg.seed)

    skip_pretrain = base_model is not None
    stages = _stage_table(cfg, skip_pretrain)

    resume_manifest = None
    if resume_from is not None:
        arrays, resume_manifest = ckpt.load_archive(resume_from)
        spec = ModelSpec.from_dict(resume_manifest["model_spec"])
        model = SceneModel(spec)
        ckpt.load_model_arrays(model, arrays)
        registry = ckpt.registry_from_manifest(resume_manifest)
        ckpt.restore_rng_state(arrays, resume_manifest["rng"], torch_gen, np_rng)
        if decoder is not None and resume_manifest.get("decoder_state"):
            # the decoder may have been fine-tuned before the checkpoint; the
            # caller's copy is the pretrained one and would silently diverge
            state = {k[len("decoder."):]: torch.as_tensor(v).clone()
                     for k, v in arrays.items() if k.startswith("decoder.")}
            decoder.load_state_dict(state)
    elif base_model is not None:
        model = base_model.clone()
    else:
        model = SceneModel(model_spec_from_config(scene, cfg), generator=torch_gen)

    if registry is None:
        registry = generate_message_registry(
            cfg.num_watermarks, cfg.message_bits, cfg.effective_min_hamming, np_rng)
    if registry.num_messages > model.spec.num_ids:
        raise ValueError("registry holds more messages than the embedder has IDs")

    if decoder is not None:
        decoder.eval()  # normalization statistics stay pinned from pretraining
        for p in decoder.parameters():
            p.requires_grad_(False)

    opts = RenderOptions.from_config(scene, cfg)
    perceptual = make_perceptual_loss(cfg.perceptual)
    aug_pool = default_pool()
    train_views = scene.views("train")
    writer = _LogWriter(out_dir / "training_log.csv" if out_dir is not None else None)

    resume_stage, resume_step = None, 0
    if resume_manifest is not None:
        resume_stage = resume_manifest["stage"]
        resume_step = int(resume_manifest["stage_step"])
        if resume_stage not in [s for s, _ in stages]:
            raise ckpt.CheckpointError(
                f"checkpoint stage {resume_stage!r} not in this run's stages")

    global_step = 0
    seen_resume_stage = resume_stage is None

    def scene_meta():
        return scene.meta()

    def save_state(stage: str, stage_step: int, optims: Dict[str, torch.optim.Optimizer]):
        if state_path is None:
            return
        arrays = ckpt.model_arrays(model)
        manifest = {
            "kind": "train_state",
            "model_spec": model.spec.to_dict(),
            "registry": registry.to_manifest(),
            "config": cfg.to_dict(),
            "stage": stage,
            "stage_step": stage_step,
            "global_step": global_step,
            "optim_meta": {},
            "scene": scene_meta(),
        }
        rng_arrays, rng_meta = ckpt.rng_state_arrays(torch_gen, np_rng)
        arrays.update(rng_arrays)
        manifest["rng"] = rng_meta
        if decoder is not None:
            for key, value in decoder.state_dict().items():
                arrays[f"decoder.{key}"] = value.detach().cpu().numpy().copy()
            manifest["decoder_state"] = True
        for name, optim in optims.items():
            oarr, ometa = ckpt.optimizer_arrays(name, optim)
            arrays.update(oarr)
            manifest["optim_meta"][name] = ometa
        ckpt.save_archive(state_path, arrays, manifest)

    def maybe_restore_optims(stage: str, optims: Dict[str, torch.optim.Optimizer]):
        if resume_manifest is None or resume_manifest["stage"] != stage:
            return
        arrays, _ = ckpt.load_archive(resume_from)
        for name, optim in optims.items():
            if name in resume_manifest["optim_meta"]:
                ckpt.load_optimizer_arrays(name, optim, arrays,
                                           resume_manifest["optim_meta"][name])

    try:
        for stage, n_steps in stages:
            if not seen_resume_stage and stage != resume_stage:
                global_step += n_steps
                continue
            start = 0
            if not seen_resume_stage and stage == resume_stage:
                start = resume_step
                global_step += start
                seen_resume_stage = True

            if stage == "pretrain":
                optim = build_optimizer(model, cfg, scope="scene")
                maybe_restore_optims(stage, {"scene": optim})
                base_lrs = [cfg.lr_grids, cfg.lr_network]
                pool = _RayPool(scene, next(model.parameters()).dtype)
                for step in range(start, n_steps):
                    apply_lr_decay(optim, base_lrs, step, n_steps, cfg.lr_decay_target)
                    o, d, gt = pool.draw(cfg.ray_batch, torch_gen)
                    jitter = (torch.rand(o.shape[0], opts.num_samples, generator=torch_gen)
                              if cfg.stratified else None)
                    rgb = render_ray_batch(model, o, d, wm_id=None, jitter=jitter,
                                           **opts.kwargs())
                    loss = F.mse_loss(rgb, gt)
                    _check_finite(loss, "photometric loss", global_step)
                    optim.zero_grad()
                    loss.backward()
                    optim.step()
                    mse = float(loss.detach())
                    writer.write(global_step, {
                        "L_RGB": mse,
                        "psnr": 10.0 * np.log10(1.0 / mse) if mse > 0 else 99.0})
                    global_step += 1
                    if cfg.checkpoint_every and global_step % cfg.checkpoint_every == 0:
                        save_state(stage, step + 1, {"scene": optim})

            elif stage in ("phase1", "phase2"):
                if n_steps == 0:
                    continue
                optim = build_optimizer(model, cfg, scope="all")
                optims: Dict[str, torch.optim.Optimizer] = {"model": optim}
                train_decoder = stage == "phase2" and cfg.train_decoder_phase2
                if train_decoder:
                    for p in decoder.parameters():
                        p.requires_grad_(True)
                    optims["decoder"] = torch.optim.Adam(
                        decoder.parameters(), lr=cfg.lr_network, betas=cfg.adam_betas)
                maybe_restore_optims(stage, optims)
                base_lrs = [cfg.lr_grids, cfg.lr_network]
                for step in range(start, n_steps):
                    apply_lr_decay(optim, base_lrs, step, n_steps, cfg.lr_decay_target)
                    view_idx = int(torch.randint(0, len(train_views), (1,),
                                                 generator=torch_gen))
                    view = train_views[view_idx]
                    if stage == "phase1":
                        row = phase1_step(model, decoder, view, registry, cfg, optim,
                                          torch_gen, opts, perceptual, global_step)
                    else:
                        row = phase2_step(model, decoder, view, registry, cfg,
                                          list(optims.values()), torch_gen, np_rng,
                                          opts, perceptual, aug_pool, global_step)
                    writer.write(global_step, row)
                    global_step += 1
                    if cfg.checkpoint_every and global_step % cfg.checkpoint_every == 0:
                        save_state(stage, step + 1, optims)
                if train_decoder:
                    for p in decoder.parameters():
                        p.requires_grad_(False)
    finally:
        writer.close()

    if ckpt_path is not None:
        ckpt.save_scene_model(
            ckpt_path, model, registry=registry, config=cfg.to_dict(),
            iteration=global_step, scene_meta=scene_meta())
    return TrainResult(model, registry, decoder, writer.rows, ckpt_path,
                       writer.path)

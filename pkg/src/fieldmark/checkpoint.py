"""Checkpoint archives.

One checkpoint is a single zip holding ``manifest.json`` plus one ``.npy``
entry per named float array.  Entries are written in sorted order with fixed
timestamps, so identical state produces identical bytes, and files appear
under their final name only after a complete write (temp file + rename).

Grid factors are stored one array per rank under
``{grid}.{mode}.{plane|line}.{rank}``; the shared appearance basis under
``appearance.basis``; embedder, modulator and color head under ``emb.*``,
``mod.*`` and ``color_mlp.*``.  The message registry travels in the manifest
of the model that embeds it.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from .grids import MODE_NAMES
from .messages import MessageRegistry
from .model import ModelSpec, SceneModel

SCHEMA_VERSION = 1

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    """Raised for unreadable, mismatched or future-schema archives."""


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_archive(path, arrays: Dict[str, np.ndarray], manifest: dict) -> None:
    manifest = dict(manifest)
    manifest.setdefault("schema_version", SCHEMA_VERSION)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_FIXED_DATE)
        zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True))
        for name in sorted(arrays):
            arr_buf = io.BytesIO()
            np.save(arr_buf, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_FIXED_DATE)
            zf.writestr(info, arr_buf.getvalue())
    atomic_write_bytes(path, buf.getvalue())


def load_archive(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            arrays = {}
            for name in zf.namelist():
                if name.startswith("arrays/") and name.endswith(".npy"):
                    arrays[name[len("arrays/") : -len(".npy")]] = np.load(
                        io.BytesIO(zf.read(name)))
    except (zipfile.BadZipFile, KeyError, ValueError) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    version = manifest.get("schema_version")
    if not isinstance(version, int) or version > SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has schema version {version!r}; "
            f"this build reads up to {SCHEMA_VERSION}")
    return arrays, manifest


# ---------------------------------------------------------------------------
# scene models

def model_arrays(model: SceneModel) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for gname in ("density", "appearance", "watermark"):
        grid = getattr(model, gname)
        for m, mode in enumerate(MODE_NAMES):
            planes = grid.planes[m].detach().cpu().numpy()
            lines = grid.lines[m].detach().cpu().numpy()
            for r in range(grid.rank):
                out[f"{gname}.{mode}.plane.{r}"] = planes[r]
                out[f"{gname}.{mode}.line.{r}"] = lines[r]
    out["appearance.basis"] = model.appearance.basis.weight.detach().cpu().numpy()
    for prefix, module in (("emb", model.embedder), ("mod", model.modulator),
                           ("color_mlp", model.color)):
        for key, value in module.state_dict().items():
            out[f"{prefix}.{key}"] = value.detach().cpu().numpy()
    return out


def load_model_arrays(model: SceneModel, arrays: Dict[str, np.ndarray]) -> None:
    with torch.no_grad():
        for gname in ("density", "appearance", "watermark"):
            grid = getattr(model, gname)
            for m, mode in enumerate(MODE_NAMES):
                try:
                    planes = np.stack([arrays[f"{gname}.{mode}.plane.{r}"]
                                       for r in range(grid.rank)])
                    lines = np.stack([arrays[f"{gname}.{mode}.line.{r}"]
                                      for r in range(grid.rank)])
                except KeyError as e:
                    raise CheckpointError(f"missing grid array {e}") from None
                grid.planes[m].copy_(torch.as_tensor(planes))
                grid.lines[m].copy_(torch.as_tensor(lines))
        model.appearance.basis.weight.copy_(torch.as_tensor(arrays["appearance.basis"]))
        for prefix, module in (("emb", model.embedder), ("mod", model.modulator),
                               ("color_mlp", model.color)):
            state = {}
            for key in module.state_dict():
                name = f"{prefix}.{key}"
                if name not in arrays:
                    raise CheckpointError(f"missing array {name}")
                state[key] = torch.as_tensor(arrays[name])
            module.load_state_dict(state)


def save_scene_model(
    path,
    model: SceneModel,
    *,
    registry: Optional[MessageRegistry] = None,
    config: Optional[dict] = None,
    iteration: int = 0,
    scene_meta: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> None:
    manifest = {
        "kind": "scene_model",
        "model_spec": model.spec.to_dict(),
        "iteration": int(iteration),
        "registry": registry.to_manifest() if registry is not None else None,
        "config": config,
        "scene": scene_meta,
    }
    if extra:
        manifest.update(extra)
    save_archive(path, model_arrays(model), manifest)


def load_scene_model(path) -> Tuple[SceneModel, dict]:
    arrays, manifest = load_archive(path)
    if manifest.get("kind") != "scene_model":
        raise CheckpointError(f"{path} is not a scene model checkpoint")
    spec = ModelSpec.from_dict(manifest["model_spec"])
    model = SceneModel(spec)
    load_model_arrays(model, arrays)
    return model, manifest


def registry_from_manifest(manifest: dict) -> Optional[MessageRegistry]:
    reg = manifest.get("registry")
    return MessageRegistry.from_manifest(reg) if reg else None


# ---------------------------------------------------------------------------
# decoders

def save_decoder(path, decoder, extra: Optional[dict] = None) -> None:
    arrays = {f"decoder.{k}": v.detach().cpu().numpy()
              for k, v in decoder.state_dict().items()}
    manifest = {
        "kind": "bit_decoder",
        "num_bits": decoder.num_bits,
        "channels": decoder.blocks[0][0].out_channels,
        "num_blocks": len(decoder.blocks),
        "whitened": bool(decoder.whitened.item()),
    }
    if extra:
        manifest.update(extra)
    save_archive(path, arrays, manifest)


def load_decoder(path):
    from .decoder import BitDecoder

    arrays, manifest = load_archive(path)
    if manifest.get("kind") != "bit_decoder":
        raise CheckpointError(f"{path} is not a decoder checkpoint")
    decoder = BitDecoder(
        int(manifest["num_bits"]),
        channels=int(manifest.get("channels", 64)),
        num_blocks=int(manifest.get("num_blocks", 7)))
    state = {}
    for key, value in decoder.state_dict().items():
        name = f"decoder.{key}"
        if name not in arrays:
            raise CheckpointError(f"missing array {name}")
        state[key] = torch.as_tensor(arrays[name]).to(value.dtype).view(value.shape)
    decoder.load_state_dict(state)
    decoder.eval()
    return decoder, manifest


# ---------------------------------------------------------------------------
# mid-run training state (model + optimizers + RNG streams)

def optimizer_arrays(name: str, optim: torch.optim.Optimizer) -> Tuple[Dict[str, np.ndarray], dict]:
    arrays: Dict[str, np.ndarray] = {}
    state = optim.state_dict()
    for pid, pstate in state["state"].items():
        for key, value in pstate.items():
            if isinstance(value, torch.Tensor):
                # copy: .numpy() aliases live optimizer memory
                arrays[f"optim.{name}.{pid}.{key}"] = value.detach().cpu().numpy().copy()
            else:
                arrays[f"optim.{name}.{pid}.{key}"] = np.asarray(value)
    meta = {"param_groups": state["param_groups"],
            "state_keys": {str(pid): sorted(ps) for pid, ps in state["state"].items()}}
    return arrays, meta


def load_optimizer_arrays(
    name: str, optim: torch.optim.Optimizer, arrays: Dict[str, np.ndarray], meta: dict
) -> None:
    state = {"param_groups": meta["param_groups"], "state": {}}
    for pid_str, keys in meta["state_keys"].items():
        pid = int(pid_str)
        pstate = {}
        for key in keys:
            arr = arrays[f"optim.{name}.{pid}.{key}"]
            pstate[key] = torch.as_tensor(arr).clone()
        state["state"][pid] = pstate
    optim.load_state_dict(state)


def rng_state_arrays(torch_gen: torch.Generator, np_rng: np.random.Generator):
    arrays = {"rng.torch": torch_gen.get_state().numpy()}
    meta = {"numpy": json.loads(json.dumps(np_rng.bit_generator.state))}
    return arrays, meta


def restore_rng_state(arrays, meta, torch_gen: torch.Generator, np_rng: np.random.Generator):
    torch_gen.set_state(torch.as_tensor(arrays["rng.torch"]))
    np_rng.bit_generator.state = meta["numpy"]

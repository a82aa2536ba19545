"""Scene containers, synthetic test scenes, and image/dataset IO.

A scene is a set of posed views split into train/val/test plus the world
bounds and marching range.  Synthetic scenes are built from a handful of
analytic primitives and rendered by an exact ray tracer, so geometry-level
oracles (hit masks, silhouettes) are available to tests; the same primitives
drive the procedural texture corpus used for decoder pretraining.

Dataset folders follow the common JSON layout: ``transforms_<split>.json``
with ``camera_angle_x`` and per-frame ``file_path``/``transform_matrix``; the
focal length is ``0.5 * width / tan(0.5 * camera_angle_x)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .checkpoint import atomic_write_bytes
from .rendering import Camera

View = Tuple[np.ndarray, Camera]  # (H, W, 3) float image in [0, 1] plus its camera


@dataclass
class Scene:
    splits: Dict[str, List[View]]
    bounds: np.ndarray  # (2, 3) world min/max
    near: float
    far: float
    background: str = "white"
    primitives: Optional[dict] = None  # analytic description when synthetic

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        if not (self.bounds[1] > self.bounds[0]).all():
            raise ValueError("scene bounds max must exceed min on every axis")
        if self.far <= self.near or self.near <= 0:
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")

    def views(self, split: str) -> List[View]:
        if split not in self.splits:
            raise ValueError(f"scene has no split {split!r}; available: {sorted(self.splits)}")
        return self.splits[split]

    def meta(self) -> dict:
        """JSON-ready description (cameras only, no pixels) for checkpoints."""
        return {
            "bounds": self.bounds.tolist(),
            "near": self.near,
            "far": self.far,
            "background": self.background,
            "cameras": {
                split: [{
                    "width": cam.width, "height": cam.height, "focal": cam.focal,
                    "cam_to_world": cam.cam_to_world.reshape(-1).tolist(),
                } for _, cam in views]
                for split, views in self.splits.items()
            },
        }


def cameras_from_meta(meta: dict, split: str) -> List[Camera]:
    cams = meta["cameras"].get(split)
    if cams is None:
        raise ValueError(f"checkpoint has no cameras for split {split!r}")
    return [Camera(c["width"], c["height"], c["focal"],
                   np.asarray(c["cam_to_world"]).reshape(4, 4)) for c in cams]


# ---------------------------------------------------------------------------
# cameras on a viewing hemisphere

def look_at(position: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    position = np.asarray(position, dtype=np.float64)
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    true_up = np.cross(right, forward)
    mat = np.eye(4)
    mat[:3, 0] = right
    mat[:3, 1] = true_up
    mat[:3, 2] = -forward  # camera looks along its own -z
    mat[:3, 3] = position
    return mat


def orbit_camera(
    azimuth_deg: float, elevation_deg: float, radius: float,
    width: int, height: int, fov_x_deg: float,
) -> Camera:
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    pos = np.array([
        radius * math.cos(el) * math.cos(az),
        radius * math.cos(el) * math.sin(az),
        radius * math.sin(el),
    ])
    focal = 0.5 * width / math.tan(0.5 * math.radians(fov_x_deg))
    return Camera(width, height, focal, look_at(pos, np.zeros(3)))


# ---------------------------------------------------------------------------
# analytic primitives and the exact ray tracer

_LIGHT = np.array([0.38, 0.21, 0.90])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


def default_primitives() -> dict:
    """A matte box with a sphere resting on it; everything inside |x| < 0.9."""
    return {
        "objects": [
            {"type": "box", "min": [-0.55, -0.55, -0.4], "max": [0.55, 0.55, 0.2],
             "color": [0.82, 0.22, 0.16]},
            {"type": "sphere", "center": [0.0, 0.0, 0.5], "radius": 0.3,
             "color": [0.18, 0.38, 0.78]},
        ],
        "bounds": [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]],
    }


def _intersect_box(origins, dirs, lo, hi):
    """Slab test.  Returns (t_hit, normal) with t_hit = inf on miss."""
    inv = 1.0 / np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    t_enter = tmin.max(axis=-1)
    t_exit = tmax.min(axis=-1)
    hit = (t_enter <= t_exit) & (t_exit > 1e-6)
    t_hit = np.where(hit & (t_enter > 1e-6), t_enter, np.inf)
    axis = tmin.argmax(axis=-1)
    normal = np.zeros_like(origins)
    rows = np.arange(origins.shape[0])
    normal[rows, axis] = -np.sign(dirs[rows, axis])
    return t_hit, normal


def _intersect_sphere(origins, dirs, center, radius):
    oc = origins - center
    b = (oc * dirs).sum(axis=-1)
    c = (oc * oc).sum(axis=-1) - radius ** 2
    disc = b * b - c
    ok = disc >= 0
    sqrt_disc = np.sqrt(np.where(ok, disc, 0.0))
    t = -b - sqrt_disc
    t = np.where(ok & (t > 1e-6), t, np.inf)
    t_safe = np.where(np.isfinite(t), t, 0.0)
    pts = origins + t_safe[..., None] * dirs
    normal = pts - center
    norms = np.linalg.norm(normal, axis=-1, keepdims=True)
    normal = normal / np.where(norms > 0, norms, 1.0)
    return t, normal


def trace_rays(primitives: dict, origins: np.ndarray, dirs: np.ndarray):
    """(colors (N, 3), t_hit (N,)): exact nearest-hit Lambertian shading."""
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    color = np.ones((n, 3))
    for obj in primitives["objects"]:
        if obj["type"] == "box":
            t, normal = _intersect_box(origins, dirs,
                                       np.asarray(obj["min"]), np.asarray(obj["max"]))
        elif obj["type"] == "sphere":
            t, normal = _intersect_sphere(origins, dirs,
                                          np.asarray(obj["center"]), float(obj["radius"]))
        else:
            raise ValueError(f"unknown primitive type {obj['type']!r}")
        closer = t < best_t
        if closer.any():
            lambert = 0.62 + 0.38 * np.abs((normal * _LIGHT).sum(axis=-1))
            shaded = np.asarray(obj["color"])[None, :] * lambert[:, None]
            color[closer] = shaded[closer]
            best_t = np.where(closer, t, best_t)
    return np.clip(color, 0.0, 1.0), best_t


def render_reference_view(primitives: dict, camera: Camera) -> np.ndarray:
    from .rendering import generate_rays

    origins, dirs = generate_rays(camera)
    color, _ = trace_rays(primitives, origins.numpy().astype(np.float64),
                          dirs.numpy().astype(np.float64))
    return color.reshape(camera.height, camera.width, 3).astype(np.float32)


def hit_mask(primitives: dict, camera: Camera) -> np.ndarray:
    """(H, W) bool: which pixel rays hit any primitive.  Exact, for oracles."""
    from .rendering import generate_rays

    origins, dirs = generate_rays(camera)
    _, t = trace_rays(primitives, origins.numpy().astype(np.float64),
                      dirs.numpy().astype(np.float64))
    return np.isfinite(t).reshape(camera.height, camera.width)


def make_toy_scene(
    num_train: int = 10,
    num_test: int = 4,
    resolution: int = 100,
    primitives: Optional[dict] = None,
    fov_x_deg: float = 42.0,
    radius: float = 3.1,
) -> Scene:
    """Synthetic scene with exact reference renders on a viewing orbit."""
    prims = primitives or default_primitives()
    bounds = np.asarray(prims["bounds"], dtype=np.float64)
    half_diag = float(np.linalg.norm(bounds[1] - bounds[0]) / 2)
    obj_radius = min(half_diag, 1.45)
    near = max(0.05, radius - obj_radius)
    far = radius + obj_radius

    def make(n, offset, elevations):
        views = []
        for i in range(n):
            cam = orbit_camera(offset + 360.0 * i / n, elevations[i % len(elevations)],
                               radius, resolution, resolution, fov_x_deg)
            views.append((render_reference_view(prims, cam), cam))
        return views

    splits = {
        "train": make(num_train, 0.0, (28.0, 46.0)),
        "val": make(max(1, num_test // 2), 360.0 / (2 * num_train), (37.0,)),
        "test": make(num_test, 360.0 / (2 * num_test) + 9.0, (33.0, 51.0)),
    }
    return Scene(splits, bounds, near, far, primitives=prims)


# ---------------------------------------------------------------------------
# procedural texture corpus (decoder pretraining food)

def generate_texture_corpus(
    count: int, size: int, rng: np.random.Generator
) -> List[np.ndarray]:
    """Varied smooth/structured color images in [0, 1], (size, size, 3) each."""
    xs, ys = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size))
    out = []
    for _ in range(count):
        kind = rng.integers(0, 4)
        img = np.zeros((size, size, 3))
        if kind == 0:  # oriented sinusoid mix
            for c in range(3):
                f1, f2 = rng.uniform(1, 9, size=2)
                th = rng.uniform(0, np.pi)
                ph = rng.uniform(0, 2 * np.pi, size=2)
                img[..., c] = (np.sin(2 * np.pi * f1 * (xs * np.cos(th) + ys * np.sin(th)) + ph[0])
                               + np.sin(2 * np.pi * f2 * (xs * np.sin(th) - ys * np.cos(th)) + ph[1]))
        elif kind == 1:  # smooth random field
            low = rng.normal(size=(6, 6, 3))
            img = np.stack([np.kron(low[..., c], np.ones((size // 6 + 1, size // 6 + 1)))[:size, :size]
                            for c in range(3)], axis=-1)
            img = _box_smooth(img, max(3, size // 12))
        elif kind == 2:  # color gradient + disks
            g0, g1 = rng.uniform(0, 1, size=(2, 3))
            img = g0[None, None, :] * (1 - xs)[..., None] + g1[None, None, :] * xs[..., None]
            for _ in range(int(rng.integers(2, 7))):
                cx, cy = rng.uniform(0.1, 0.9, size=2)
                r = rng.uniform(0.05, 0.25)
                inside = (xs - cx) ** 2 + (ys - cy) ** 2 < r ** 2
                img[inside] = rng.uniform(0, 1, size=3)
        else:  # checker with jittered tones
            period = int(rng.integers(4, max(5, size // 4)))
            checker = ((xs * size // period).astype(int) + (ys * size // period).astype(int)) % 2
            tone_a, tone_b = rng.uniform(0, 1, size=(2, 3))
            img = np.where(checker[..., None] > 0, tone_a, tone_b)
            img = img + rng.normal(scale=0.03, size=img.shape)
        lo, hi = img.min(), img.max()
        if hi > lo:
            img = (img - lo) / (hi - lo)
        out.append(img.astype(np.float32))
    return out


def _box_smooth(img: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    csum = padded.cumsum(axis=0).cumsum(axis=1)
    csum = np.pad(csum, ((1, 0), (1, 0), (0, 0)))
    h, w = img.shape[:2]
    out = (csum[k : k + h, k : k + w] - csum[:h, k : k + w]
           - csum[k : k + h, :w] + csum[:h, :w]) / (k * k)
    return out


# ---------------------------------------------------------------------------
# image and dataset files

def save_png(path, image: np.ndarray) -> None:
    """Quantize [0, 1] float to 8 bits and write atomically."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3), got {image.shape}")
    data = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    import io as _io

    buf = _io.BytesIO()
    Image.fromarray(data).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA" if im.mode == "RGBA" else "RGB"),
                         dtype=np.float32) / 255.0
    if arr.shape[-1] == 4:  # composite onto white
        rgb, alpha = arr[..., :3], arr[..., 3:]
        arr = rgb * alpha + (1.0 - alpha)
    return arr


def load_image_folder(folder, min_count: int = 1) -> List[np.ndarray]:
    folder = Path(folder)
    if not folder.is_dir():
        raise FileNotFoundError(f"image folder not found: {folder}")
    paths = sorted(p for p in folder.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if len(paths) < min_count:
        raise ValueError(f"{folder} holds {len(paths)} images, need at least {min_count}")
    return [load_png(p) for p in paths]


def _downscale(image: np.ndarray, factor: int) -> np.ndarray:
    h, w = image.shape[:2]
    if factor == 1:
        return image
    if h % factor or w % factor:
        raise ValueError(f"cannot downscale {h}x{w} by {factor}")
    return image.reshape(h // factor, factor, w // factor, factor, -1).mean(axis=(1, 3))


def load_scene(
    root,
    *,
    downscale: int = 1,
    bounds=((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5)),
    near: float = 2.0,
    far: float = 6.0,
    splits: Sequence[str] = ("train", "val", "test"),
) -> Scene:
    """Read a transforms-JSON dataset folder into a Scene."""
    root = Path(root)
    loaded: Dict[str, List[View]] = {}
    for split in splits:
        meta_path = root / f"transforms_{split}.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"missing {meta_path}")
        meta = json.loads(meta_path.read_text())
        for key in ("camera_angle_x", "frames"):
            if key not in meta:
                raise ValueError(f"{meta_path} lacks required field {key!r}")
        views: List[View] = []
        for frame in meta["frames"]:
            for key in ("file_path", "transform_matrix"):
                if key not in frame:
                    raise ValueError(f"{meta_path}: frame lacks required field {key!r}")
            img_path = root / frame["file_path"]
            if img_path.suffix == "":
                img_path = img_path.with_suffix(".png")
            if not img_path.exists():
                raise FileNotFoundError(f"missing image {img_path}")
            img = load_png(img_path)
            img = _downscale(img, downscale)
            h, w = img.shape[:2]
            focal = 0.5 * w / math.tan(0.5 * float(meta["camera_angle_x"]))
            cam = Camera(w, h, focal, np.asarray(frame["transform_matrix"], dtype=np.float64))
            views.append((img.astype(np.float32), cam))
        if not views:
            raise ValueError(f"{meta_path} lists no frames")
        loaded[split] = views
    return Scene(loaded, np.asarray(bounds), near, far)


def save_scene(scene: Scene, root) -> None:
    """Write a Scene back out as a transforms-JSON folder (fixtures, round trips)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split, views in scene.splits.items():
        frames = []
        for i, (img, cam) in enumerate(views):
            rel = f"{split}/r_{i}"
            save_png(root / f"{rel}.png", img)
            frames.append({"file_path": rel,
                           "transform_matrix": cam.cam_to_world.tolist()})
        cam0 = views[0][1]
        angle_x = 2.0 * math.atan(0.5 * cam0.width / cam0.focal)
        payload = {"camera_angle_x": angle_x, "frames": frames}
        (root / f"transforms_{split}.json").write_text(json.dumps(payload, indent=2))

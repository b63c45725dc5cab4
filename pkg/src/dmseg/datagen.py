"""Synthetic small-lesion phantoms and the preprocessing chain.

A phantom is a large ellipsoidal "organ" with a few small bright ellipsoidal
lesions inside it and Gaussian noise on top. Only lesions are foreground, so
the foreground fraction stays small by construction.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from dmseg.errors import InvalidArgumentError, ShapeError
from dmseg.volume import Volume, write_rvol

log = logging.getLogger(__name__)

MAX_LESION_FRACTION = 0.05


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (16, 16, 16)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    organ_radius_frac: tuple[float, float] = (0.36, 0.46)  # of each axis length
    lesion_count: tuple[int, int] = (1, 3)
    lesion_radius: tuple[float, float] = (1.2, 2.8)
    background_mean: float = -100.0
    organ_mean: float = 60.0
    lesion_mean: float = 110.0
    lesion_mean_jitter: float = 10.0
    noise_std: float = 22.0
    max_retries: int = 50
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.organ_radius_frac = tuple(self.organ_radius_frac)
        self.lesion_count = tuple(int(c) for c in self.lesion_count)
        self.lesion_radius = tuple(float(r) for r in self.lesion_radius)
        if len(self.shape) != 3 or min(self.shape) < 4:
            raise InvalidArgumentError(f"phantom shape must be 3D with sides >= 4, got {self.shape}")
        if self.lesion_radius[0] < 1.0 or self.lesion_radius[1] < self.lesion_radius[0]:
            raise InvalidArgumentError("lesion radii must satisfy 1 <= min <= max")
        if self.lesion_count[0] < 0 or self.lesion_count[1] < self.lesion_count[0]:
            raise InvalidArgumentError("lesion count range must satisfy 0 <= min <= max")
        if self.noise_std < 0:
            raise InvalidArgumentError("noise_std must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _ellipsoid(shape, center, radii) -> np.ndarray:
    zz, yy, xx = np.indices(shape, dtype=np.float64)
    r = ((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 + ((xx - center[2]) / radii[2]) ** 2
    return r <= 1.0


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, Volume]:
    """Return ``(image, mask)``; mask labels are 0 background and 1 lesion."""
    rng = np.random.default_rng(spec.seed)
    shape = np.array(spec.shape, dtype=float)
    center = (shape - 1) / 2 + rng.uniform(-0.5, 0.5, 3)
    radii = shape * rng.uniform(*spec.organ_radius_frac, size=3)
    organ = _ellipsoid(spec.shape, center, radii)

    lesions = np.zeros(spec.shape, dtype=bool)
    lesion_means = np.zeros(spec.shape)
    wanted = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    budget = MAX_LESION_FRACTION * organ.size
    placed = 0
    for _ in range(wanted):
        for _attempt in range(spec.max_retries):
            l_radii = rng.uniform(*spec.lesion_radius, size=3)
            l_center = rng.uniform(l_radii, shape - 1 - l_radii)
            blob = _ellipsoid(spec.shape, l_center, l_radii)
            if not blob.any() or (blob & ~organ).any():
                continue
            if (blob & lesions).any() or lesions.sum() + blob.sum() > budget:
                continue
            # keep lesions separated so each stays its own component
            if (ndimage.binary_dilation(blob, iterations=1) & lesions).any():
                continue
            lesions |= blob
            lesion_means[blob] = spec.lesion_mean + rng.uniform(-1, 1) * spec.lesion_mean_jitter
            placed += 1
            break
        else:
            log.warning("could not place lesion %d after %d retries; keeping %d", placed + 1,
                        spec.max_retries, placed)
            break

    image = np.full(spec.shape, spec.background_mean)
    image[organ] = spec.organ_mean
    image[lesions] = lesion_means[lesions]
    image += rng.normal(0.0, spec.noise_std, size=spec.shape)
    return (Volume(image.astype(np.float32), spec.spacing),
            Volume(lesions.astype(np.uint8), spec.spacing))


def generate_dataset(spec: PhantomSpec, count: int, seed: int | None = None) -> list[tuple[Volume, Volume]]:
    """``count`` phantoms, phantom ``i`` drawn from the seed sequence ``[seed, i]``."""
    base = spec.seed if seed is None else seed
    out = []
    for i in range(count):
        child = int(np.random.SeedSequence([base, i]).generate_state(1)[0])
        out.append(generate_phantom(PhantomSpec(**{**spec.to_dict(), "seed": child})))
    return out


def window_transform(image, w_min: float, w_max: float):
    """Clamp to ``[w_min, w_max]`` and map linearly onto ``[0, 1]``."""
    if not w_min < w_max:
        raise InvalidArgumentError(f"invalid window [{w_min}, {w_max}]")
    data = image.data if isinstance(image, Volume) else np.asarray(image)
    out = ((np.clip(data, w_min, w_max) - w_min) / (w_max - w_min)).astype(np.float32)
    return Volume(out, image.spacing) if isinstance(image, Volume) else out


def resample_spacing(volume: Volume, target_spacing, is_mask: bool | None = None) -> Volume:
    """Resample to ``target_spacing``: trilinear for images, nearest for masks."""
    target = tuple(float(t) for t in np.broadcast_to(target_spacing, 3))
    if not all(t > 0 for t in target):
        raise InvalidArgumentError(f"target spacing must be positive, got {target}")
    if is_mask is None:
        is_mask = volume.data.dtype == np.uint8
    if target == tuple(volume.spacing):
        return Volume(volume.data.copy(), target)
    out_shape = tuple(int(round(n * s / t)) for n, s, t in zip(volume.shape, volume.spacing, target))
    if min(out_shape) < 1:
        raise ShapeError(f"resampling to {target} gives degenerate shape {out_shape}")
    factors = [o / n for o, n in zip(out_shape, volume.shape)]
    src = volume.data if is_mask else volume.data.astype(np.float64)
    data = ndimage.zoom(src, factors, order=0 if is_mask else 1, mode="nearest")
    data = data.astype(np.uint8) if is_mask else data.astype(np.float32)
    return Volume(data, target)


@dataclass
class Crop:
    image: np.ndarray
    mask: np.ndarray
    origin: tuple[int, int, int]
    empty_mask: bool = False


def _tile_starts(lo: int, hi: int, size: int, step: int, limit: int) -> list[int]:
    """Starts of windows of ``size`` covering ``[lo, hi)``, clipped to ``[0, limit - size]``."""
    span = hi - lo
    if span <= size:
        start = min(max(lo - (size - span) // 2, 0), limit - size)
        return [start]
    starts = list(range(lo, hi - size + 1, step))
    if starts[-1] + size < hi:
        starts.append(hi - size)
    return starts


def extract_subvolumes(image, mask, crop_shape, policy: str = "effective-range", margin: int = 4,
                       overlap=None) -> list[Crop]:
    """Cut fixed-size sub-images.

    ``effective-range`` restricts tiling to the mask bounding box grown by
    ``margin``; ``grid`` tiles the whole volume. Tiles step by
    ``crop - overlap`` (default overlap: half a crop) and the last tile is
    shifted back so the range is covered to its end.
    """
    img = image.data if isinstance(image, Volume) else np.asarray(image)
    msk = mask.data if isinstance(mask, Volume) else np.asarray(mask)
    crop = tuple(int(c) for c in crop_shape)
    if img.shape != msk.shape:
        raise ShapeError("image and mask shapes differ")
    if any(c > n or c < 1 for c, n in zip(crop, img.shape)):
        raise ShapeError(f"crop {crop} does not fit volume {img.shape}")
    if overlap is None:
        overlap = tuple(c // 2 for c in crop)
    overlap = tuple(int(o) for o in np.broadcast_to(overlap, 3))
    if any(o < 0 or o >= c for o, c in zip(overlap, crop)):
        raise InvalidArgumentError("overlap must lie in [0, crop)")

    if policy == "grid":
        lo, hi = (0, 0, 0), img.shape
    elif policy == "effective-range":
        fg = np.argwhere(msk > 0)
        if fg.size == 0:
            origin = tuple((n - c) // 2 for n, c in zip(img.shape, crop))
            sl = tuple(slice(o, o + c) for o, c in zip(origin, crop))
            return [Crop(img[sl].copy(), msk[sl].copy(), origin, empty_mask=True)]
        lo = tuple(max(int(v) - margin, 0) for v in fg.min(axis=0))
        hi = tuple(min(int(v) + 1 + margin, n) for v, n in zip(fg.max(axis=0), img.shape))
    else:
        raise InvalidArgumentError(f"unknown crop policy {policy!r}")

    axes = [_tile_starts(lo[a], hi[a], crop[a], crop[a] - overlap[a], img.shape[a]) for a in range(3)]
    crops = []
    for z in axes[0]:
        for y in axes[1]:
            for x in axes[2]:
                sl = (slice(z, z + crop[0]), slice(y, y + crop[1]), slice(x, x + crop[2]))
                crops.append(Crop(img[sl].copy(), msk[sl].copy(), (z, y, x)))
    return crops


def dataset_hash(pairs) -> str:
    h = hashlib.sha256()
    for image, mask in pairs:
        for arr in (image, mask):
            data = arr.data if isinstance(arr, Volume) else np.asarray(arr)
            h.update(np.ascontiguousarray(data).tobytes())
    return h.hexdigest()


def write_dataset(out_dir, pairs, spec: PhantomSpec, seed: int, extra: dict | None = None) -> dict:
    """Write ``image_XXXX.rvol`` / ``mask_XXXX.rvol`` pairs and ``dataset.json``."""
    os.makedirs(out_dir, exist_ok=True)
    cases = []
    for i, (image, mask) in enumerate(pairs):
        img_name, mask_name = f"image_{i:04d}.rvol", f"mask_{i:04d}.rvol"
        write_rvol(os.path.join(out_dir, img_name), image)
        write_rvol(os.path.join(out_dir, mask_name), mask)
        cases.append({"id": f"{i:04d}", "image": img_name, "mask": mask_name,
                      "lesion_voxels": int(mask.data.sum())})
    manifest = {
        "format": "dmseg-dataset",
        "version": 1,
        "seed": seed,
        "count": len(pairs),
        "phantom_spec": spec.to_dict(),
        "sha256": dataset_hash(pairs),
        "cases": cases,
        **(extra or {}),
    }
    with open(os.path.join(out_dir, "dataset.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def read_dataset(path) -> tuple[list[tuple[Volume, Volume]], dict]:
    from dmseg.volume import read_rvol

    root = path if os.path.isdir(path) else os.path.dirname(path)
    manifest_path = os.path.join(path, "dataset.json") if os.path.isdir(path) else path
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    pairs = [(read_rvol(os.path.join(root, c["image"])), read_rvol(os.path.join(root, c["mask"])))
             for c in manifest["cases"]]
    return pairs, manifest

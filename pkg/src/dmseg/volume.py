"""Dense 3D volumes, label masks, connectivity and the RVOL file format.

Arrays are indexed ``(z, y, x)`` in C order, so the flat payload is z-major.
Masks are plain ``uint8`` arrays; :class:`Volume` adds spacing metadata for
I/O and for the spacing-aware operations (resampling, surface metrics).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from dmseg.errors import InvalidArgumentError, ShapeError

RVOL_MAGIC = "RVOL"
RVOL_VERSION = 1
_RVOL_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}

# 6-neighbour offsets, used for the inner-boundary test
_FACE_OFFSETS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"volume must be a non-empty 3D array, got shape {self.data.shape}")
        if self.data.dtype not in (np.float32, np.uint8):
            if np.issubdtype(self.data.dtype, np.floating):
                self.data = self.data.astype(np.float32)
            else:
                raise InvalidArgumentError(f"unsupported volume dtype {self.data.dtype}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise InvalidArgumentError(f"spacing must be three positive finite values, got {self.spacing}")
        self.spacing = spacing

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def dtype_tag(self) -> str:
        return "u8" if self.data.dtype == np.uint8 else "f32"


@dataclass
class ComponentLabeling:
    labels: np.ndarray  # uint32, 0 = not in any component
    count: int
    voxel_counts: list[int] = field(default_factory=list)


def check_mask(mask: np.ndarray, num_classes: int = 2) -> np.ndarray:
    """Validate a label mask and return it as a uint8 array."""
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ShapeError(f"mask must be 3D, got shape {mask.shape}")
    if num_classes < 1 or num_classes > 256:
        raise InvalidArgumentError(f"num_classes must be in [1, 256], got {num_classes}")
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise InvalidArgumentError(f"mask values must lie in [0, {num_classes}), got max {mask.max()}")
    return mask.astype(np.uint8, copy=False)


def _check_class(class_id: int, num_classes: int) -> None:
    if not 0 <= class_id < num_classes:
        raise InvalidArgumentError(f"class_id {class_id} out of range for {num_classes} classes")


def connected_components(mask, class_id: int = 1, connectivity: int = 26, num_classes: int = 2) -> ComponentLabeling:
    """Label the connected components of ``mask == class_id``.

    Labels are renumbered so that ids follow the first voxel of each
    component in a z-major scan.
    """
    mask = check_mask(mask, num_classes)
    _check_class(class_id, num_classes)
    if connectivity == 6:
        structure = ndimage.generate_binary_structure(3, 1)
    elif connectivity == 26:
        structure = ndimage.generate_binary_structure(3, 3)
    else:
        raise InvalidArgumentError(f"connectivity must be 6 or 26, got {connectivity}")

    raw, count = ndimage.label(mask == class_id, structure=structure)
    if count == 0:
        return ComponentLabeling(np.zeros(mask.shape, np.uint32), 0, [])

    flat = raw.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    remap = np.zeros(count + 1, np.uint32)
    remap[ids[np.argsort(first)]] = np.arange(1, count + 1, dtype=np.uint32)
    labels = remap[raw]
    voxel_counts = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return ComponentLabeling(labels, int(count), [int(c) for c in voxel_counts])


def boundary_mask(mask, class_id: int = 1, num_classes: int = 2) -> np.ndarray:
    """Boolean volume of class voxels that have a differing-class 6-neighbour.

    Neighbours outside the image are ignored, so the image border alone never
    makes a voxel part of the boundary.
    """
    mask = check_mask(mask, num_classes)
    _check_class(class_id, num_classes)
    inside = mask == class_id
    touches_other = np.zeros_like(inside)
    for axis in range(3):
        n = mask.shape[axis]
        if n < 2:
            continue
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, n - 1)
        hi[axis] = slice(1, n)
        lo, hi = tuple(lo), tuple(hi)
        differs = mask[lo] != mask[hi]
        touches_other[lo] |= differs
        touches_other[hi] |= differs
    return inside & touches_other


def boundary_voxels(mask, class_id: int = 1, num_classes: int = 2) -> np.ndarray:
    """Boundary set as a ``(K, 3)`` int array of ``(z, y, x)`` in z-major order."""
    return np.argwhere(boundary_mask(mask, class_id, num_classes))


def one_hot(mask, num_classes: int = 2) -> np.ndarray:
    """Lift a label mask to a ``(num_classes, nz, ny, nx)`` float32 stack."""
    mask = check_mask(mask, num_classes)
    return (mask[None] == np.arange(num_classes, dtype=np.uint8)[:, None, None, None]).astype(np.float32)


# ---------------------------------------------------------------------------
# RVOL v1 I/O
# ---------------------------------------------------------------------------

def write_rvol(path, volume: Volume | np.ndarray) -> None:
    if not isinstance(volume, Volume):
        volume = Volume(volume)
    tag = volume.dtype_tag
    header = {
        "magic": RVOL_MAGIC,
        "version": RVOL_VERSION,
        "dtype": tag,
        "shape": [int(s) for s in volume.shape],
        "spacing": [float(s) for s in volume.spacing],
        "order": "z-major",
    }
    payload = np.ascontiguousarray(volume.data, dtype=_RVOL_DTYPES[tag]).tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload)


def read_rvol(path) -> Volume:
    with open(path, "rb") as fh:
        blob = fh.read()
    newline = blob.find(b"\n")
    if newline < 0:
        raise InvalidArgumentError(f"{os.fspath(path)}: missing RVOL header line")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidArgumentError(f"{os.fspath(path)}: malformed RVOL header") from exc
    if header.get("magic") != RVOL_MAGIC or header.get("version") != RVOL_VERSION:
        raise InvalidArgumentError(f"{os.fspath(path)}: not an RVOL v1 file")
    if header.get("order", "z-major") != "z-major":
        raise InvalidArgumentError(f"{os.fspath(path)}: unsupported order {header['order']!r}")
    dtype = _RVOL_DTYPES.get(header.get("dtype"))
    if dtype is None:
        raise InvalidArgumentError(f"{os.fspath(path)}: unsupported dtype {header.get('dtype')!r}")
    shape = tuple(int(s) for s in header["shape"])
    payload = blob[newline + 1:]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise InvalidArgumentError(
            f"{os.fspath(path)}: payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return Volume(data.astype(dtype.newbyteorder("="), copy=True), tuple(header["spacing"]))

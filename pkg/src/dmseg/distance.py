"""Exact Euclidean distance transforms and the O/I/NI/SNI distance maps.

The transform is the separable lower-envelope algorithm of Felzenszwalb and
Huttenlocher: one exact 1-D squared-distance pass per axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from dmseg.errors import InvalidArgumentError, NoBoundaryError, UnsupportedVariantError
from dmseg.volume import Volume, boundary_mask, check_mask, connected_components, read_rvol, write_rvol

VARIANTS = ("odm", "idm", "nidm", "snidm")

CLASS_ABSENT = "class-absent"
CLASS_FILLS_IMAGE = "class-fills-image"


@dataclass
class DistanceMap:
    values: np.ndarray
    variant: str
    source_class: int
    per_component_max: dict[int, float] = field(default_factory=dict)
    # 6-connected background components, SNIDM only
    background_component_max: dict[int, float] = field(default_factory=dict)
    flag: str | None = None

    def sidecar(self) -> dict:
        out = {
            "variant": self.variant,
            "source_class": self.source_class,
            "per_component_max": {str(k): v for k, v in self.per_component_max.items()},
        }
        if self.background_component_max:
            out["background_component_max"] = {str(k): v for k, v in self.background_component_max.items()}
        if self.flag:
            out["flag"] = self.flag
        return out


def _envelope_1d(f: list[float], weight: float) -> list[float]:
    """Exact ``min_q weight*(p-q)**2 + f[q]`` for every p (inf entries are skipped)."""
    n = len(f)
    sites = [q for q in range(n) if f[q] != np.inf]
    if not sites:
        return f
    # v: parabola apexes of the envelope; z[k] is where parabola k starts to win
    v = [sites[0]]
    z = [-np.inf, np.inf]
    for q in sites[1:]:
        fq = f[q] + weight * q * q
        while True:
            r = v[-1]
            s = (fq - (f[r] + weight * r * r)) / (2.0 * weight * (q - r))
            if s > z[-2]:
                break
            # z[0] is -inf, so the first parabola is never popped
            v.pop()
            z.pop()
        v.append(q)
        z[-1] = s
        z.append(np.inf)
    out = [0.0] * n
    k = 0
    for p in range(n):
        while z[k + 1] < p:
            k += 1
        d = p - v[k]
        out[p] = weight * d * d + f[v[k]]
    return out


def squared_distance_to_seeds(seeds: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Squared Euclidean distance from every voxel to the nearest seed voxel.

    ``spacing`` scales each axis, so the result is in squared physical units.
    Without any seed every value is ``inf``.
    """
    seeds = np.asarray(seeds, dtype=bool)
    out = np.where(seeds, 0.0, np.inf)
    if not seeds.any():
        return out
    for axis, step in enumerate(spacing):
        weight = float(step) ** 2
        moved = np.moveaxis(out, axis, -1)
        lines = moved.reshape(-1, moved.shape[-1])
        result = np.empty_like(lines)
        for i, line in enumerate(lines):
            if np.isinf(line).all():
                result[i] = line
            else:
                result[i] = _envelope_1d(line.tolist(), weight)
        out = np.moveaxis(result.reshape(moved.shape), -1, axis)
    return np.ascontiguousarray(out)


def _component_maxima(dist: np.ndarray, labels: np.ndarray, count: int) -> np.ndarray:
    maxima = np.zeros(count + 1)
    np.maximum.at(maxima, labels.ravel(), dist.ravel())
    maxima[0] = 0.0
    return maxima


def edt_exact(mask, class_id: int = 1, num_classes: int = 2) -> DistanceMap:
    """Original distance map: distance of every voxel to the class boundary set.

    Raises :class:`NoBoundaryError` when the boundary set is empty.
    """
    mask = check_mask(mask, num_classes)
    border = boundary_mask(mask, class_id, num_classes)
    if not border.any():
        raise NoBoundaryError(f"class {class_id} has no boundary voxels")
    dist = np.sqrt(squared_distance_to_seeds(border))
    comps = connected_components(mask, class_id, 26, num_classes)
    maxima = _component_maxima(dist, comps.labels, comps.count)
    return DistanceMap(
        values=dist,  # float64: exact distances, cast only by derived maps
        variant="odm",
        source_class=class_id,
        per_component_max={i: float(maxima[i]) for i in range(1, comps.count + 1)},
    )


def _normalized_inverse(dist: np.ndarray, labels: np.ndarray, maxima: np.ndarray) -> np.ndarray:
    m = maxima[labels]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(m > 0, (m + 1.0 - dist) / np.where(m > 0, m, 1.0), 1.0)
    return np.where(labels > 0, out, 0.0)


def to_variant(odm: DistanceMap, mask, variant: str, num_classes: int = 2) -> DistanceMap:
    """Derive an inverse, normalized-inverse or signed distance map from an O-DM."""
    if odm.variant != "odm":
        raise InvalidArgumentError(f"to_variant expects an odm input, got {odm.variant!r}")
    variant = variant.lower()
    if variant not in ("idm", "nidm", "snidm"):
        raise InvalidArgumentError(f"unknown target variant {variant!r}")
    mask = check_mask(mask, num_classes)
    if mask.shape != odm.values.shape:
        raise InvalidArgumentError("mask and distance map shapes differ")

    cls = odm.source_class
    dist = odm.values.astype(np.float64)
    comps = connected_components(mask, cls, 26, num_classes)
    maxima = np.zeros(comps.count + 1)
    for k, m in odm.per_component_max.items():
        maxima[k] = m

    if variant == "idm":
        values = np.where(comps.labels > 0, maxima[comps.labels] + 1.0 - dist, 0.0)
        return DistanceMap(values.astype(np.float32), "idm", cls, dict(odm.per_component_max))

    values = _normalized_inverse(dist, comps.labels, maxima)
    if variant == "nidm":
        return DistanceMap(values.astype(np.float32), "nidm", cls, dict(odm.per_component_max))

    # Background side: the same construction on the complement, its own boundary and 6-connectivity.
    complement = (mask != cls).astype(np.uint8)
    bg_border = boundary_mask(complement, 1)
    bg_dist = np.sqrt(squared_distance_to_seeds(bg_border))
    bg = connected_components(complement, 1, 6)
    bg_maxima = _component_maxima(bg_dist, bg.labels, bg.count)
    values = values - _normalized_inverse(bg_dist, bg.labels, bg_maxima)
    return DistanceMap(
        values.astype(np.float32), "snidm", cls, dict(odm.per_component_max),
        background_component_max={i: float(bg_maxima[i]) for i in range(1, bg.count + 1)},
    )


def distance_map(mask, class_id: int = 1, variant: str = "nidm", num_classes: int = 2) -> DistanceMap:
    """One distance map of any variant.

    A class that is absent yields zeros; a class that fills the image has no
    boundary, so its map is flat (1 for inverse variants, 0 for the O-DM).
    Both cases are reported through ``flag`` instead of raising.
    """
    variant = variant.lower()
    if variant not in VARIANTS:
        raise InvalidArgumentError(f"unknown variant {variant!r}")
    mask = check_mask(mask, num_classes)
    present = mask == class_id
    if not present.any():
        return DistanceMap(np.zeros(mask.shape, np.float32), variant, class_id, flag=CLASS_ABSENT)
    if present.all():
        fill = 0.0 if variant == "odm" else 1.0
        return DistanceMap(np.full(mask.shape, fill, np.float32), variant, class_id, flag=CLASS_FILLS_IMAGE)
    odm = edt_exact(mask, class_id, num_classes)
    return odm if variant == "odm" else to_variant(odm, mask, variant, num_classes)


def per_class_dm(mask, num_classes: int = 2, variant: str = "nidm") -> list[DistanceMap]:
    return [distance_map(mask, c, variant, num_classes) for c in range(num_classes)]


def per_class_nidm(mask, num_classes: int = 2) -> list[DistanceMap]:
    """NI-DM per class; channel ``c`` treats class-``c`` voxels as foreground."""
    return per_class_dm(mask, num_classes, "nidm")


def stack(maps: list[DistanceMap]) -> np.ndarray:
    return np.stack([m.values for m in maps]).astype(np.float32)


def dm_to_mask(dm: DistanceMap, threshold: float = 0.05) -> np.ndarray:
    """Binarize a NIDM (``value > threshold``) or SNIDM (``value > 0``)."""
    if dm.variant == "nidm":
        return (dm.values > threshold).astype(np.uint8)
    if dm.variant == "snidm":
        return (dm.values > 0).astype(np.uint8)
    raise UnsupportedVariantError(f"cannot binarize a {dm.variant!r} map")


def save_distance_map(path, dm: DistanceMap, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write the map as an f32 RVOL plus a ``<path>.json`` sidecar."""
    write_rvol(path, Volume(dm.values.astype(np.float32), spacing))
    with open(f"{path}.json", "w") as fh:
        json.dump(dm.sidecar(), fh, indent=2, sort_keys=True)


def load_distance_map(path) -> DistanceMap:
    vol = read_rvol(path)
    with open(f"{path}.json") as fh:
        meta = json.load(fh)
    return DistanceMap(
        values=vol.data,
        variant=meta["variant"],
        source_class=int(meta["source_class"]),
        per_component_max={int(k): float(v) for k, v in meta.get("per_component_max", {}).items()},
        background_component_max={int(k): float(v) for k, v in meta.get("background_component_max", {}).items()},
        flag=meta.get("flag"),
    )

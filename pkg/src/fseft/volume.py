"""
Volumetric data model and the deterministic CT preprocessing pipeline.

A :class:`Volume` holds a single scalar grid, a :class:`LabelMask` holds one
binary channel per class on the same grid. Both carry voxel spacing (mm) and
an axis-code triple (``"RAS"``-style, each letter names the direction the
array axis increases towards).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from nibabel import orientations as nio
from scipy import ndimage

from .errors import InvalidArgument, InvalidOrientation, InvalidShape

DEFAULT_ORIENTATION = "RAS"

_AXIS_PAIRS = {"R": "L", "L": "R", "A": "P", "P": "A", "S": "I", "I": "S"}


def _check_codes(codes) -> tuple[str, str, str]:
    codes = tuple(str(c).upper() for c in codes)
    if len(codes) != 3 or any(c not in _AXIS_PAIRS for c in codes):
        raise InvalidOrientation(f"invalid axis codes {codes!r}")
    # each anatomical axis must appear exactly once (R/L, A/P, S/I)
    groups = {frozenset((c, _AXIS_PAIRS[c])) for c in codes}
    if len(groups) != 3:
        raise InvalidOrientation(f"axis codes {codes!r} repeat an anatomical axis")
    return codes


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 for s in spacing):
        raise InvalidArgument(f"spacing must be three positive values, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume:
    """A 3D intensity grid with spacing and orientation metadata."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: tuple[str, str, str] = tuple(DEFAULT_ORIENTATION)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise InvalidShape(f"volume data must be rank 3, got shape {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "orientation", _check_codes(self.orientation))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data) -> "Volume":
        return replace(self, data=data)


@dataclass(frozen=True)
class LabelMask:
    """Per-class binary masks, shape ``(C, X, Y, Z)``."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: tuple[str, str, str] = tuple(DEFAULT_ORIENTATION)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise InvalidShape(f"label mask must be (C, X, Y, Z), got shape {data.shape}")
        if data.dtype != np.uint8:
            if not np.isin(data, (0, 1)).all():
                raise InvalidArgument("label mask values must be in {0, 1}")
            data = data.astype(np.uint8)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "orientation", _check_codes(self.orientation))

    @property
    def n_classes(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def channel(self, c: int) -> "LabelMask":
        return replace(self, data=self.data[c : c + 1])

    def with_data(self, data) -> "LabelMask":
        return replace(self, data=data)


Grid = Union[Volume, LabelMask]


def _spatial_axes(v: Grid) -> tuple[int, int, int]:
    return (1, 2, 3) if isinstance(v, LabelMask) else (0, 1, 2)


# ---------------------------------------------------------------------------
# orientation
# ---------------------------------------------------------------------------


def reorient(v: Grid, target: Sequence[str] | str = DEFAULT_ORIENTATION) -> Grid:
    """Flip/permute the array so its axes follow ``target`` codes.

    Physical content is unchanged; spacing is permuted with the axes.
    """
    target = _check_codes(target)
    src = _check_codes(v.orientation)
    if src == target:
        return replace(v, data=v.data.copy())
    ornt = nio.ornt_transform(nio.axcodes2ornt(src), nio.axcodes2ornt(target))
    # ornt[i] = (output axis for input axis i, flip)
    data = v.data
    offset = 1 if isinstance(v, LabelMask) else 0
    for i, (_, flip) in enumerate(ornt):
        if flip == -1:
            data = np.flip(data, axis=i + offset)
    perm = [0] * 3
    for i, (out_axis, _) in enumerate(ornt):
        perm[int(out_axis)] = i
    axes = ([0] if offset else []) + [p + offset for p in perm]
    data = np.ascontiguousarray(np.transpose(data, axes))
    spacing = tuple(v.spacing[p] for p in perm)
    return replace(v, data=data, spacing=spacing, orientation=target)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _round_half_away(x: float) -> int:
    return int(np.sign(x) * np.floor(abs(x) + 0.5))


def resampled_shape(shape, spacing, target_spacing: float) -> tuple[int, int, int]:
    return tuple(
        max(1, _round_half_away(n * s / target_spacing)) for n, s in zip(shape, spacing)
    )


def _resample_array(arr: np.ndarray, spacing, target: float, out_shape, order: int):
    # voxel-centre alignment: output centre (j + .5) t maps to input index (j + .5) t / s - .5
    scale = np.array([target / s for s in spacing])
    offset = 0.5 * scale - 0.5
    work = arr if np.issubdtype(arr.dtype, np.floating) else arr.astype(np.float32)
    out = ndimage.affine_transform(
        work, np.diag(scale), offset=offset, output_shape=out_shape, order=order, mode="nearest"
    )
    return out.astype(arr.dtype, copy=False)


def resample_isotropic(v: Grid, target_spacing: float = 1.5) -> Grid:
    """Resample to ``target_spacing`` mm on every axis.

    Intensities use trilinear interpolation, label masks nearest neighbour so
    the output only contains values already present in the input.
    """
    if not target_spacing > 0:
        raise InvalidArgument(f"target spacing must be positive, got {target_spacing}")
    out_shape = resampled_shape(v.spatial_shape, v.spacing, target_spacing)
    iso = (float(target_spacing),) * 3
    if isinstance(v, LabelMask):
        chans = [
            _resample_array(ch, v.spacing, target_spacing, out_shape, order=0)
            for ch in v.data
        ]
        data = np.stack(chans).astype(np.uint8) if chans else np.zeros((0, *out_shape), np.uint8)
        return replace(v, data=data, spacing=iso)
    data = _resample_array(v.data, v.spacing, target_spacing, out_shape, order=1)
    return replace(v, data=data, spacing=iso)


# ---------------------------------------------------------------------------
# intensity + patches
# ---------------------------------------------------------------------------


def clip_scale_intensity(v: Volume, lo: float = -175.0, hi: float = 250.0) -> Volume:
    """Clamp to ``[lo, hi]`` and map linearly onto ``[0, 1]``."""
    if not lo < hi:
        raise InvalidArgument(f"need lo < hi, got lo={lo}, hi={hi}")
    data = np.asarray(v.data)
    dtype = data.dtype if np.issubdtype(data.dtype, np.floating) else np.float32
    out = (np.clip(data, lo, hi).astype(dtype) - dtype.type(lo)) / dtype.type(hi - lo)
    return replace(v, data=out)


def extract_patch(v: Grid, origin: Sequence[int], size: Sequence[int]) -> Grid:
    """Crop ``size`` voxels starting at ``origin``; out-of-bounds voxels are zero."""
    origin = tuple(int(o) for o in origin)
    size = tuple(int(s) for s in size)
    if len(origin) != 3 or len(size) != 3 or min(size) < 1:
        raise InvalidArgument(f"bad patch geometry origin={origin} size={size}")
    shape = v.spatial_shape
    lead = v.data.shape[:1] if isinstance(v, LabelMask) else ()
    out = np.zeros(lead + size, dtype=v.data.dtype)
    src, dst = [], []
    for o, s, n in zip(origin, size, shape):
        a, b = max(o, 0), min(o + s, n)
        if b <= a:
            return replace(v, data=out)
        src.append(slice(a, b))
        dst.append(slice(a - o, b - o))
    pre = (slice(None),) if lead else ()
    out[pre + tuple(dst)] = v.data[pre + tuple(src)]
    return replace(v, data=out)


def preprocess(
    v: Volume,
    mask: LabelMask | None = None,
    *,
    orientation=DEFAULT_ORIENTATION,
    target_spacing: float = 1.5,
    clip_lo: float = -175.0,
    clip_hi: float = 250.0,
):
    """Reorient, resample to isotropic spacing and window the intensities."""
    v = clip_scale_intensity(
        resample_isotropic(reorient(v, orientation), target_spacing), clip_lo, clip_hi
    )
    if mask is None:
        return v
    mask = resample_isotropic(reorient(mask, orientation), target_spacing)
    return v, mask


# ---------------------------------------------------------------------------
# IO: raw float32 blob + JSON sidecar, and NIfTI
# ---------------------------------------------------------------------------


def save_raw(v: Grid, path: os.PathLike) -> Path:
    """Write ``<path>.raw`` (little-endian float32) and ``<path>.json``."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".raw", ".json") else path
    stem.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(v.data, dtype="<f4")
    stem.with_suffix(".raw").write_bytes(arr.tobytes(order="C"))
    meta = {
        "kind": "mask" if isinstance(v, LabelMask) else "volume",
        "shape": list(arr.shape),
        "spacing": list(v.spacing),
        "orientation": "".join(v.orientation),
        "dtype": "float32",
        "byte_order": "little",
    }
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return stem.with_suffix(".raw")


def load_raw(path: os.PathLike) -> Grid:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".raw", ".json") else path
    meta = json.loads(stem.with_suffix(".json").read_text())
    arr = np.frombuffer(stem.with_suffix(".raw").read_bytes(), dtype="<f4")
    arr = arr.reshape(meta["shape"]).astype(np.float32)
    kw = dict(spacing=tuple(meta["spacing"]), orientation=tuple(meta["orientation"]))
    if meta.get("kind") == "mask":
        return LabelMask(arr.astype(np.uint8), **kw)
    return Volume(arr, **kw)


def load_nifti(path: os.PathLike) -> Volume:
    import nibabel as nib

    img = nib.load(str(path))
    data = np.asarray(img.dataobj, dtype=np.float32)
    if data.ndim == 4 and data.shape[-1] == 1:
        data = data[..., 0]
    codes = nib.aff2axcodes(img.affine)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return Volume(data, spacing=spacing, orientation=codes)


def save_nifti(v: Volume, path: os.PathLike) -> None:
    import nibabel as nib

    ornt = nio.axcodes2ornt(v.orientation)
    affine = np.eye(4)
    affine[:3, :3] = 0.0
    for i, (world_axis, sign) in enumerate(ornt):
        affine[int(world_axis), i] = sign * v.spacing[i]
    nib.save(nib.Nifti1Image(np.asarray(v.data, dtype=np.float32), affine), str(path))

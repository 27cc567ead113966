"""Sliding-window prediction, post-processing and the DSC metric."""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch
from scipy import ndimage

from ..errors import InvalidArgument, InvalidShape
from ..volume import LabelMask, Volume

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


def tile_origins(dim: int, patch: int, overlap: float) -> list[int]:
    """Start indices along one axis; the last tile is flush with the far edge."""
    if dim <= patch:
        return [0]
    stride = max(1, int(round(patch * (1.0 - overlap))))
    starts = list(range(0, dim - patch + 1, stride))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)
    return starts


def _predictor(model) -> Callable:
    if hasattr(model, "predict_proba"):
        return model.predict_proba
    return model


def sliding_window_predict(model, volume, patch_size=(32, 32, 32), overlap: float = 0.5) -> torch.Tensor:
    """Full-volume probability map from overlapping patch predictions.

    ``model`` maps a ``(1, 1, *patch)`` tensor to probabilities of shape
    ``(1, C, *patch)`` (an object with ``predict_proba`` is called through
    it). Overlaps are averaged uniformly. Volumes smaller than a patch are
    zero-padded. Works under autograd, so a loss on the returned map
    backpropagates into ``model``. Returns ``(C, X, Y, Z)``.
    """
    if not 0.0 <= overlap <= 0.75:
        raise InvalidArgument(f"overlap must be in [0, 0.75], got {overlap}")
    if isinstance(patch_size, int):
        patch_size = (patch_size,) * 3
    patch_size = tuple(int(p) for p in patch_size)
    if isinstance(volume, Volume):
        x = torch.from_numpy(np.ascontiguousarray(volume.data))
    else:
        x = torch.as_tensor(volume)
    if x.dim() == 4:
        x = x[0]
    if x.dim() != 3:
        raise InvalidShape(f"expected a 3D volume, got shape {tuple(x.shape)}")
    predict = _predictor(model)
    if isinstance(model, torch.nn.Module):
        p = next(model.parameters(), None)
        if p is not None:
            x = x.to(p.dtype)

    shape = tuple(x.shape)
    padded = tuple(max(n, p) for n, p in zip(shape, patch_size))
    if padded != shape:
        pad = []
        for n, p in reversed(list(zip(shape, padded))):
            pad += [0, p - n]
        x = torch.nn.functional.pad(x, pad)

    starts = [tile_origins(n, p, overlap) for n, p in zip(padded, patch_size)]
    out = None
    count = torch.zeros(padded, dtype=x.dtype)
    for i in starts[0]:
        for j in starts[1]:
            for k in starts[2]:
                sl = (slice(i, i + patch_size[0]), slice(j, j + patch_size[1]), slice(k, k + patch_size[2]))
                pred = predict(x[sl][None, None])[0]
                if out is None:
                    out = torch.zeros((pred.shape[0], *padded), dtype=pred.dtype)
                out[(slice(None),) + sl] = out[(slice(None),) + sl] + pred
                count[sl] += 1
    out = out / count.to(out.dtype)
    return out[(slice(None),) + tuple(slice(0, n) for n in shape)]


def binarize_and_largest_cc(probs, threshold: float = 0.5) -> LabelMask:
    """Threshold then keep the largest 26-connected component.

    Ties go to the component holding the lexicographically smallest voxel.
    """
    arr = probs.detach().cpu().numpy() if isinstance(probs, torch.Tensor) else np.asarray(probs)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise InvalidShape("expected a single-channel probability map")
        arr = arr[0]
    binary = arr > threshold
    labels, n = ndimage.label(binary, structure=CONNECTIVITY_26)
    if n <= 1:
        return LabelMask(binary.astype(np.uint8)[None])
    flat = labels.ravel()
    sizes = np.bincount(flat)[1:]
    best = np.flatnonzero(sizes == sizes.max()) + 1
    if best.size > 1:
        _, first = np.unique(flat, return_index=True)  # first raster index per label (0 = background)
        best = best[np.argmin(first[best])]
    else:
        best = best[0]
    return LabelMask((labels == best).astype(np.uint8)[None])


def dice_score(pred, gt) -> float:
    """``2|P & G| / (|P| + |G|)``, 1.0 when both are empty."""
    p = np.asarray(getattr(pred, "data", pred)).astype(bool)
    g = np.asarray(getattr(gt, "data", gt)).astype(bool)
    if p.shape != g.shape:
        raise InvalidShape(f"prediction {p.shape} vs ground truth {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom

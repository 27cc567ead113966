"""
Deterministic synthetic CT-like phantoms.

Organs are axis-aligned ellipsoids with their own intensity distribution on a
noisy background. Every random draw comes from a ``numpy`` generator seeded by
a tuple of integers, so a given (seed, spec) always yields the same arrays no
matter which process or in which order it is generated.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, SpecInfeasible
from .volume import DEFAULT_ORIENTATION, LabelMask, Volume, preprocess

# seed-stream tags; pretraining and few-shot volumes never share a stream
_PRETRAIN_TAG = 101
_TASK_TAG = 202


@dataclass(frozen=True)
class OrganSpec:
    class_id: int
    center_range: tuple  # ((lo, hi),) * 3, fractions of (dim - 1)
    radii_range: tuple  # ((lo, hi),) * 3, fractions of dim
    intensity: tuple = (0.6, 0.02)  # mean, sigma
    name: str = ""
    allow_overlap: bool = False

    def __post_init__(self):
        cr = tuple(tuple(float(x) for x in r) for r in self.center_range)
        rr = tuple(tuple(float(x) for x in r) for r in self.radii_range)
        if len(cr) != 3 or len(rr) != 3 or any(len(r) != 2 for r in cr + rr):
            raise InvalidArgument("center_range and radii_range need three (lo, hi) pairs")
        if any(lo > hi for lo, hi in cr + rr) or any(lo <= 0 for lo, _ in rr):
            raise InvalidArgument(f"bad ranges for organ {self.class_id}")
        object.__setattr__(self, "center_range", cr)
        object.__setattr__(self, "radii_range", rr)
        object.__setattr__(self, "intensity", tuple(float(x) for x in self.intensity))

    def scaled(self, radii_scale: float = 1.0, intensity_shift: float = 0.0) -> "OrganSpec":
        rr = tuple((lo * radii_scale, hi * radii_scale) for lo, hi in self.radii_range)
        mean, sd = self.intensity
        return replace(self, radii_range=rr, intensity=(mean + intensity_shift, sd))


@dataclass(frozen=True)
class DatasetSpec:
    """One source site: its organ set, annotation vector and acquisition grid.

    ``shell_width``/``shell_intensity`` add an unlabeled capsule of tissue
    around the organs listed in ``shell_classes`` (all organs when empty;
    width 0 disables it); it is one of the knobs used to build shifted
    target domains.
    """

    name: str
    n_volumes: int
    annotation_vector: tuple
    organs: tuple
    grid_shape: tuple = (32, 32, 32)
    spacing: tuple = (1.5, 1.5, 1.5)
    noise_sigma: float = 0.05
    background: float = 0.3
    orientation: str = DEFAULT_ORIENTATION
    shell_width: float = 0.0
    shell_intensity: float = 0.0
    shell_classes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "shell_classes", tuple(int(c) for c in self.shell_classes))
        object.__setattr__(self, "annotation_vector", tuple(int(x) for x in self.annotation_vector))
        object.__setattr__(self, "organs", tuple(self.organs))
        object.__setattr__(self, "grid_shape", tuple(int(x) for x in self.grid_shape))
        object.__setattr__(self, "spacing", tuple(float(x) for x in self.spacing))
        if self.n_volumes < 1:
            raise InvalidArgument("n_volumes must be >= 1")
        if any(o.class_id >= len(self.annotation_vector) for o in self.organs):
            raise InvalidArgument("organ class id exceeds annotation vector length")

    @property
    def n_classes(self) -> int:
        return len(self.annotation_vector)

    def shifted(self, *, name=None, intensity_shift=0.0, radii_scale=1.0, **changes) -> "DatasetSpec":
        organs = tuple(o.scaled(radii_scale, intensity_shift) for o in self.organs)
        return replace(self, name=name or f"{self.name}-shifted", organs=organs, **changes)


@dataclass
class Sample:
    volume: Volume
    mask: LabelMask
    w: np.ndarray
    dataset: str
    seed: tuple


@dataclass
class FewShotTask:
    """K labeled support volumes and one query.

    ``query_gt`` is evaluation-only; adaptation code never reads it.
    """

    organ: int
    support: list  # [(Volume, LabelMask single-channel)]
    query: Volume
    query_gt: LabelMask
    support_seeds: list = field(default_factory=list)
    query_seed: tuple = ()

    def __post_init__(self):
        if self.query_seed and self.query_seed in self.support_seeds:
            raise InvalidArgument("query seed collides with a support seed")

    @property
    def K(self) -> int:
        return len(self.support)


def _rng(seed) -> np.random.Generator:
    entropy = [int(s) for s in np.atleast_1d(np.asarray(seed, dtype=np.int64))]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _extent(organ: OrganSpec, shape):
    """Worst-case voxel extent (lo, hi) per axis over all sampled centres/radii."""
    out = []
    for (clo, chi), (_, rhi), n in zip(organ.center_range, organ.radii_range, shape):
        out.append((clo * (n - 1) - rhi * n, chi * (n - 1) + rhi * n))
    return out


def check_feasible(specs: Sequence[OrganSpec], grid_shape) -> None:
    if not specs:
        raise SpecInfeasible("no organs requested")
    if any(n < 16 for n in grid_shape):
        raise SpecInfeasible(f"grid {tuple(grid_shape)} too small; each dim must be >= 16")
    for o in specs:
        for (lo, hi), n in zip(_extent(o, grid_shape), grid_shape):
            if lo < 0 or hi > n - 1:
                raise SpecInfeasible(
                    f"organ {o.class_id} can leave the grid (extent {lo:.2f}..{hi:.2f} on an axis of {n})"
                )
    for i, a in enumerate(specs):
        for b in specs[i + 1 :]:
            if a.allow_overlap or b.allow_overlap:
                continue
            ea, eb = _extent(a, grid_shape), _extent(b, grid_shape)
            if all(x[0] <= y[1] and y[0] <= x[1] for x, y in zip(ea, eb)):
                raise SpecInfeasible(f"organs {a.class_id} and {b.class_id} may overlap")


def ellipsoid_mask(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return acc <= 1.0


def generate_phantom(
    seed,
    specs: Sequence[OrganSpec],
    grid_shape=(32, 32, 32),
    spacing=(1.5, 1.5, 1.5),
    *,
    background: float = 0.3,
    noise_sigma: float = 0.05,
    n_classes: int | None = None,
    orientation: str = DEFAULT_ORIENTATION,
    shell_width: float = 0.0,
    shell_intensity: float = 0.0,
    shell_classes: Sequence[int] = (),
) -> tuple[Volume, LabelMask]:
    """One phantom volume and its full multi-label mask."""
    specs = list(specs)
    grid_shape = tuple(int(n) for n in grid_shape)
    check_feasible(specs, grid_shape)
    n_classes = n_classes or max(o.class_id for o in specs) + 1
    rng = _rng(seed)

    img = np.full(grid_shape, background, dtype=np.float64)
    labels = np.zeros((n_classes, *grid_shape), dtype=np.uint8)
    geometry = []
    for o in specs:
        center = [
            lo * (n - 1) + rng.uniform() * (hi - lo) * (n - 1)
            for (lo, hi), n in zip(o.center_range, grid_shape)
        ]
        radii = [(lo + rng.uniform() * (hi - lo)) * n for (lo, hi), n in zip(o.radii_range, grid_shape)]
        geometry.append((o, center, radii))
    if shell_width > 0:
        for o, center, radii in geometry:
            if shell_classes and o.class_id not in shell_classes:
                continue
            outer = ellipsoid_mask(grid_shape, center, [r + shell_width for r in radii])
            img[outer] = shell_intensity
    for o, center, radii in geometry:
        inside = ellipsoid_mask(grid_shape, center, radii)
        mean, sd = o.intensity
        img[inside] = mean + sd * rng.standard_normal(int(inside.sum()))
        labels[o.class_id][inside] = 1
    img += noise_sigma * rng.standard_normal(grid_shape)

    vol = Volume(img.astype(np.float32), spacing=spacing, orientation=tuple(orientation))
    mask = LabelMask(labels, spacing=spacing, orientation=tuple(orientation))
    return vol, mask


def partially_annotate(full: LabelMask, w) -> LabelMask:
    """Zero every channel whose annotation flag is 0."""
    w = np.asarray(w).ravel()
    if w.shape[0] != full.n_classes:
        raise InvalidArgument(f"annotation vector length {w.shape[0]} != {full.n_classes} channels")
    data = full.data * (w != 0).astype(np.uint8)[:, None, None, None]
    return full.with_data(data)


def _phantom_for(spec: DatasetSpec, seed, prep: dict | None):
    vol, mask = generate_phantom(
        seed,
        spec.organs,
        spec.grid_shape,
        spec.spacing,
        background=spec.background,
        noise_sigma=spec.noise_sigma,
        n_classes=spec.n_classes,
        orientation=spec.orientation,
        shell_width=spec.shell_width,
        shell_intensity=spec.shell_intensity,
        shell_classes=spec.shell_classes,
    )
    if prep is not None:
        vol, mask = preprocess(vol, mask, **prep)
    return vol, mask


def build_assembly(dataset_specs: Sequence[DatasetSpec], seed: int, prep: dict | None = None) -> list[Sample]:
    """The pretraining corpus: every volume of every dataset, in dataset order.

    Each sample carries its source dataset's annotation vector and a mask in
    which unannotated classes are zeroed.
    """
    specs = list(dataset_specs)
    if not specs:
        raise InvalidArgument("no datasets given")
    n = {s.n_classes for s in specs}
    if len(n) != 1:
        raise InvalidArgument("all datasets must share the global class count")
    if len({s.annotation_vector for s in specs}) < 2:
        warnings.warn("all datasets share one annotation vector; partial-label masking is not exercised")
    corpus = []
    for di, spec in enumerate(specs):
        w = np.asarray(spec.annotation_vector, dtype=np.int64)
        if w.sum() < 1:
            raise InvalidArgument(f"dataset {spec.name} annotates no class")
        for j in range(spec.n_volumes):
            sd = (int(seed), _PRETRAIN_TAG, di, j)
            vol, full = _phantom_for(spec, sd, prep)
            corpus.append(Sample(vol, partially_annotate(full, w), w, spec.name, sd))
    return corpus


def build_fewshot_task(
    target_spec: DatasetSpec,
    organ: int,
    K: int,
    seed: int,
    prep: dict | None = None,
    query_spec: DatasetSpec | None = None,
) -> FewShotTask:
    """K support phantoms plus one query from the target site.

    Support ``k`` uses stream ``(seed, task, 0, k)`` and the query uses
    ``(seed, task, 1, 0)``, so supports are nested across K and the query of
    a fold does not depend on K. ``query_spec`` draws the query from a
    different acquisition than the supports (same seed stream).
    """
    if K < 1:
        raise InvalidArgument("K must be >= 1")
    if not 0 <= organ < target_spec.n_classes or target_spec.annotation_vector[organ] != 1:
        raise InvalidArgument(f"organ {organ} is not annotated in {target_spec.name}")
    support, seeds = [], []
    for k in range(K):
        sd = (int(seed), _TASK_TAG, 0, k)
        vol, full = _phantom_for(target_spec, sd, prep)
        support.append((vol, full.channel(organ)))
        seeds.append(sd)
    q_seed = (int(seed), _TASK_TAG, 1, 0)
    qspec = target_spec if query_spec is None else query_spec
    if qspec.n_classes != target_spec.n_classes:
        raise InvalidArgument("query spec must share the target class set")
    qvol, qfull = _phantom_for(qspec, q_seed, prep)
    return FewShotTask(organ, support, qvol, qfull.channel(organ), seeds, q_seed)


def class_tallies(corpus: Sequence[Sample]) -> list[int]:
    """Number of samples annotating each class."""
    return [int(v) for v in np.sum([s.w for s in corpus], axis=0)]

"""Synthetic cohorts: a shared smooth template, per-subject noise, one injected lesion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Volume


@dataclass(frozen=True)
class SyntheticCohortSpec:
    dims: tuple[int, ...] = (32, 32, 32)
    n_subjects: int = 20
    smoothness: float = 2.0
    noise: float = 0.05
    # rms per-axis displacement (voxels) of each subject's smooth warp of the template
    deformation: float = 2.0
    lesion_center: tuple[int, ...] = (16, 16, 16)
    lesion_radius: float = 4.0
    lesion_shift: float = 0.4
    # intensity of a one-voxel outer shell that anchors min-max rescaling; 0 disables it
    shell: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("dims must be three positive sizes")
        if self.n_subjects < 1:
            raise ValueError("need at least one healthy subject")
        if min(self.noise, self.smoothness, self.lesion_radius, self.deformation) < 0:
            raise ValueError("noise, smoothness, deformation and lesion radius must be non-negative")
        if len(self.lesion_center) != 3:
            raise ValueError("lesion_center must be (x, y, z)")
        r = self.lesion_radius
        for c, n in zip(self.lesion_center, self.dims):
            if c - r < 0 or c + r > n - 1:
                raise ValueError(f"lesion of radius {r} at {self.lesion_center} does not fit in {self.dims}")


@dataclass
class Cohort:
    healthy: list[Volume]
    test: Volume
    truth: np.ndarray  # bool (nz, ny, nx)
    template: np.ndarray


def make_template(dims, smoothness: float, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency sinusoids plus a smoothed random field, mapped into [0.25, 0.75]."""
    nx, ny, nz = dims
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    field = np.zeros((nz, ny, nx))
    for _ in range(4):
        k = rng.uniform(0.5, 2.0, size=3) * 2 * np.pi / np.array([nx, ny, nz])
        phase = rng.uniform(0, 2 * np.pi)
        field += np.sin(k[0] * x + k[1] * y + k[2] * z + phase)
    rough = rng.standard_normal((nz, ny, nx))
    if smoothness > 0:
        rough = ndimage.gaussian_filter(rough, smoothness, mode="wrap")
    rough /= rough.std() or 1.0
    field = field / (field.std() or 1.0) + rough
    lo, hi = field.min(), field.max()
    if hi == lo:
        return np.full((nz, ny, nx), 0.5)
    return 0.25 + 0.5 * (field - lo) / (hi - lo)


def lesion_mask(dims, center, radius: float) -> np.ndarray:
    nx, ny, nz = dims
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    cx, cy, cz = center
    if radius <= 0:
        return np.zeros((nz, ny, nx), dtype=bool)
    return (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= radius**2


def warp(template: np.ndarray, amount: float, rng: np.random.Generator, smoothness: float = 4.0) -> np.ndarray:
    """Resample ``template`` through a smooth random displacement field."""
    if amount == 0:
        return template
    grid = np.indices(template.shape, dtype=np.float64)
    for axis in range(3):
        d = ndimage.gaussian_filter(rng.standard_normal(template.shape), smoothness, mode="wrap")
        grid[axis] += amount * d / (d.std() or 1.0)
    return ndimage.map_coordinates(template, grid, order=1, mode="nearest")


def generate_cohort(spec: SyntheticCohortSpec) -> Cohort:
    """Deterministic in ``spec.seed``; subject ``i`` draws from its own stream."""
    root = np.random.SeedSequence(spec.seed)
    template_seq, *subject_seqs = root.spawn(spec.n_subjects + 2)
    template = make_template(spec.dims, spec.smoothness, np.random.default_rng(template_seq))
    if spec.shell:
        border = np.ones(template.shape, dtype=bool)
        border[1:-1, 1:-1, 1:-1] = False
        template[border] = spec.shell
    full = np.ones(template.shape, dtype=bool)

    def subject(seq) -> np.ndarray:
        rng = np.random.default_rng(seq)
        anatomy = warp(template, spec.deformation, rng)
        return anatomy + spec.noise * rng.standard_normal(template.shape)

    healthy = [Volume(subject(s).astype(np.float32), full.copy()) for s in subject_seqs[:-1]]
    truth = lesion_mask(spec.dims, spec.lesion_center, spec.lesion_radius)
    test = subject(subject_seqs[-1]) + spec.lesion_shift * truth
    return Cohort(healthy, Volume(test.astype(np.float32), full.copy()), truth, template)

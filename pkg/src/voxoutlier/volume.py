"""Volumes on a shared grid, the binary container format, patches and pairs."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

MAGIC_FLOAT = b"VXW1"
MAGIC_LABEL = b"VXWC"
_HEADER = struct.Struct("<4sIIIB")
# guards against headers that would ask for absurd allocations
MAX_VOXELS = 1 << 31


class VolumeFormatError(ValueError):
    """Malformed volume file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class DegenerateRangeError(ValueError):
    pass


@dataclass(eq=False)
class Volume:
    """A 3D grid stored as ``data[z, y, x]`` so the flat layout is x-fastest.

    ``mask`` marks voxels inside the analysis region. When not given it
    defaults to the strictly positive voxels.
    """

    data: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if self.mask is None:
            self.mask = self.data > 0
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.data.shape:
                raise ValueError("mask shape does not match data shape")

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @classmethod
    def from_flat(cls, dims: Sequence[int], values, mask=None) -> "Volume":
        nx, ny, nz = dims
        data = np.asarray(values).reshape(nz, ny, nx)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool).reshape(nz, ny, nx)
        return cls(data, mask)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
            and np.array_equal(self.mask, other.mask)
        )


@dataclass(frozen=True)
class Patch:
    center: tuple[int, int, int]
    values: np.ndarray


@dataclass
class PairBatch:
    """Similar pairs stored column-wise; iterating yields ``(Patch, Patch)``."""

    first: np.ndarray
    second: np.ndarray
    centers: np.ndarray
    subjects: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.first)

    def __iter__(self) -> Iterator[tuple[Patch, Patch]]:
        for a, b, c in zip(self.first, self.second, self.centers):
            center = tuple(int(v) for v in c)
            yield Patch(center, a), Patch(center, b)


def _atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_volume(v: Volume, labels: bool = False) -> bytes:
    nx, ny, nz = v.dims
    if labels:
        payload = np.ascontiguousarray(v.data, dtype="<i4")
        magic = MAGIC_LABEL
    else:
        payload = np.ascontiguousarray(v.data, dtype="<f4")
        magic = MAGIC_FLOAT
    implicit = np.array_equal(v.mask, payload > 0)
    parts = [_HEADER.pack(magic, nx, ny, nz, 0 if implicit else 1), payload.tobytes()]
    if not implicit:
        parts.append(np.ascontiguousarray(v.mask, dtype=np.uint8).tobytes())
    return b"".join(parts)


def decode_volume(raw: bytes) -> tuple[Volume, bool]:
    """Parse container bytes. Returns the volume and whether it holds labels."""
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"header needs {_HEADER.size} bytes, file has {len(raw)}", len(raw))
    magic, nx, ny, nz, flag = _HEADER.unpack_from(raw, 0)
    if magic not in (MAGIC_FLOAT, MAGIC_LABEL):
        raise VolumeFormatError(f"bad magic {magic!r}", 0)
    if min(nx, ny, nz) == 0:
        raise VolumeFormatError(f"zero dimension in {(nx, ny, nz)}", 4)
    n = nx * ny * nz
    if n > MAX_VOXELS:
        raise VolumeFormatError(f"dimensions {(nx, ny, nz)} overflow the voxel limit", 4)
    if flag not in (0, 1):
        raise VolumeFormatError(f"mask flag must be 0 or 1, got {flag}", 16)
    offset = _HEADER.size
    labels = magic == MAGIC_LABEL
    dtype = np.dtype("<i4") if labels else np.dtype("<f4")
    expected = offset + n * dtype.itemsize + (n if flag else 0)
    if len(raw) < offset + n * dtype.itemsize:
        have = (len(raw) - offset) // dtype.itemsize
        raise VolumeFormatError(f"truncated payload: {have} of {n} values", len(raw))
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=offset)
    data = data.astype(np.int32 if labels else np.float32).reshape(nz, ny, nx)
    offset += n * dtype.itemsize
    mask = None
    if flag:
        if len(raw) < expected:
            raise VolumeFormatError(f"truncated mask: {len(raw) - offset} of {n} bytes", len(raw))
        mask = np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset).reshape(nz, ny, nx)
        if mask.max(initial=0) > 1:
            raise VolumeFormatError("mask bytes must be 0 or 1", offset)
        offset += n
    if len(raw) != offset:
        raise VolumeFormatError(f"{len(raw) - offset} trailing bytes", offset)
    return Volume(data, None if mask is None else mask.astype(bool)), labels


def save_volume(v: Volume, path, labels: bool = False) -> None:
    _atomic_write(path, encode_volume(v, labels=labels))


def load_volume(path) -> Volume:
    with open(path, "rb") as fh:
        raw = fh.read()
    return decode_volume(raw)[0]


def rescale_unit(v: Volume) -> Volume:
    """Affine min-max map of the masked intensities onto [0, 1]."""
    if not v.mask.any():
        raise ValueError("mask selects no voxels")
    vals = v.data[v.mask].astype(np.float64)
    lo, hi = vals.min(), vals.max()
    if not hi > lo:
        raise DegenerateRangeError(f"masked intensities are constant ({lo})")
    out = np.zeros(v.data.shape, dtype=np.float64)
    out[v.mask] = (vals - lo) / (hi - lo)
    return Volume(out.astype(np.float32), v.mask.copy())


def window_offsets(n: int, p: int, stride: int) -> np.ndarray:
    return np.arange(0, n - p + 1, stride)


def patch_array(v: Volume, p: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized patch extraction.

    Returns ``(centers, values)`` with centers as an (m, 3) int array of
    (x, y, z) and values as (m, p*p) float64, ordered by z, then y, then x.
    """
    nx, ny, nz = v.dims
    if p % 2 == 0:
        raise ValueError(f"patch size must be odd, got {p}")
    if p < 1 or stride < 1:
        raise ValueError("patch size and stride must be positive")
    if p > nx or p > ny:
        raise ValueError(f"patch size {p} exceeds slice dims {(nx, ny)}")
    xs = window_offsets(nx, p, stride)
    ys = window_offsets(ny, p, stride)
    half = (p - 1) // 2
    zz, yy, xx = np.meshgrid(np.arange(nz), ys, xs, indexing="ij")
    keep = v.mask[zz, yy + half, xx + half]
    zz, yy, xx = zz[keep], yy[keep], xx[keep]
    windows = np.lib.stride_tricks.sliding_window_view(v.data, (p, p), axis=(1, 2))
    values = windows[zz, yy, xx].reshape(len(zz), p * p).astype(np.float64)
    centers = np.stack([xx + half, yy + half, zz], axis=1).astype(np.int64)
    return centers, values


def extract_patches(v: Volume, p: int = 9, stride: int = 5) -> list[Patch]:
    centers, values = patch_array(v, p, stride)
    return [Patch(tuple(int(c) for c in ctr), val) for ctr, val in zip(centers, values)]


def sample_pairs(
    subject_patches: Sequence[tuple[np.ndarray, np.ndarray]] | Mapping[int, Sequence[Patch]],
    n_pairs: int,
    seed: int,
) -> PairBatch:
    """Draw similar pairs with replacement.

    A center is drawn uniformly among those held by at least two subjects,
    then two distinct subjects holding it. ``subject_patches`` is either a
    sequence of ``(centers, values)`` arrays (as from :func:`patch_array`) or a
    mapping/sequence of Patch lists.
    """
    arrays = []
    items = subject_patches.values() if isinstance(subject_patches, Mapping) else subject_patches
    for entry in items:
        if isinstance(entry, tuple) and len(entry) == 2 and isinstance(entry[0], np.ndarray):
            arrays.append(entry)
        else:
            entry = list(entry)
            if entry:
                arrays.append((np.array([q.center for q in entry], dtype=np.int64),
                               np.stack([np.asarray(q.values, dtype=np.float64) for q in entry])))
            else:
                arrays.append((np.zeros((0, 3), dtype=np.int64), np.zeros((0, 0))))

    # center -> list of (subject, row)
    holders: dict[tuple[int, int, int], list[tuple[int, int]]] = {}
    for s, (centers, _) in enumerate(arrays):
        for row, c in enumerate(centers):
            holders.setdefault((int(c[0]), int(c[1]), int(c[2])), []).append((s, row))
    shared = sorted((c for c, h in holders.items() if len(h) >= 2), key=lambda c: (c[2], c[1], c[0]))
    if not shared:
        raise ValueError("no center is shared by two subjects")

    rng = np.random.default_rng(seed)
    picks = rng.integers(len(shared), size=n_pairs)
    u = rng.random((n_pairs, 2))
    d = next(v.shape[1] for _, v in arrays if len(v))
    first = np.empty((n_pairs, d))
    second = np.empty((n_pairs, d))
    centers = np.empty((n_pairs, 3), dtype=np.int64)
    subjects = np.empty((n_pairs, 2), dtype=np.int64)
    for k, (ci, (u1, u2)) in enumerate(zip(picks, u)):
        c = shared[ci]
        h = holders[c]
        i = int(u1 * len(h))
        j = int(u2 * (len(h) - 1))
        if j >= i:
            j += 1
        (s1, r1), (s2, r2) = h[i], h[j]
        first[k] = arrays[s1][1][r1]
        second[k] = arrays[s2][1][r2]
        centers[k] = c
        subjects[k] = (s1, s2)
    return PairBatch(first, second, centers, subjects)


def corruption_mask(shape: tuple[int, int], rate: float, seed: int, key: int = 0) -> np.ndarray:
    """Boolean keep-mask for a block of rows, keyed by ``(seed, key)``.

    Row ``i`` of the block always gets the same draws for a given key, so the
    result does not depend on the order in which rows are later visited.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"corruption rate must lie in [0, 1], got {rate}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, key])))
    return rng.random(shape) >= rate


def corrupt(x: Patch, rate: float, seed: int, patch_id: int = 0) -> Patch:
    """Zero each value independently with probability ``rate``."""
    values = np.asarray(x.values, dtype=np.float64)
    keep = corruption_mask((1, values.size), rate, seed, patch_id)[0]
    return Patch(x.center, np.where(keep, values, 0.0))

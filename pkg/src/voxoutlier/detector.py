"""Per-voxel classifier bank and the cluster post-processing chain."""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import ocsvm
from .ocsvm import KernelConfig, OcSvmModel
from .volume import Volume, _atomic_write

log = logging.getLogger(__name__)

BANK_MAGIC = b"VXWB"
BANK_VERSION = 1
NO_DIGEST = bytes(32)
_BANK_HEADER = struct.Struct("<4sIdII32s")
_RECORD = struct.Struct("<IIIIIBdd")
STRUCTURE_26 = np.ones((3, 3, 3), dtype=bool)


class BankFormatError(ValueError):
    pass


@dataclass
class ClassifierBank:
    """One one-class model per voxel center, centers sorted by (z, y, x)."""

    centers: np.ndarray
    models: list[OcSvmModel]
    feature_dim: int
    nu: float
    model_digest: bytes = NO_DIGEST
    skipped: list[tuple[tuple[int, int, int], str]] = field(default_factory=list)

    def __len__(self):
        return len(self.models)

    def index(self) -> dict[tuple[int, int, int], int]:
        return {(int(x), int(y), int(z)): k for k, (x, y, z) in enumerate(self.centers)}

    def subset(self, rows) -> "ClassifierBank":
        rows = np.asarray(rows)
        rows = np.flatnonzero(rows) if rows.dtype == bool else rows.astype(np.intp)
        return ClassifierBank(self.centers[rows], [self.models[k] for k in rows],
                              self.feature_dim, self.nu, self.model_digest)


@dataclass
class DistanceMap:
    scores: np.ndarray  # (nz, ny, nx)
    valid: np.ndarray

    def to_volume(self) -> Volume:
        return Volume(np.where(self.valid, self.scores, 0.0).astype(np.float32), self.valid.copy())

    @classmethod
    def from_volume(cls, v: Volume) -> "DistanceMap":
        return cls(v.data.astype(np.float64), v.mask.copy())


@dataclass(frozen=True)
class ClusterStats:
    label: int
    size: int
    centroid: tuple[float, float, float]  # (x, y, z)
    min_score: float


@dataclass
class ClusterMap:
    labels: np.ndarray  # int32, 0 = background
    clusters: list[ClusterStats]

    def to_volume(self) -> Volume:
        return Volume(self.labels.astype(np.int32), self.labels > 0)

    @classmethod
    def from_labels(cls, labels, scores=None) -> "ClusterMap":
        """Rebuild statistics for a dense 1..k label grid (e.g. one read from disk)."""
        labels = np.asarray(labels, dtype=np.int32)
        return cls(labels, _stats(labels, int(labels.max(initial=0)), scores))


@dataclass
class DetectionReport:
    detected: bool
    n_clusters: int
    true_clusters: int
    false_positives: int
    lesion_voxels: int
    overlap_voxels: int

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in (
            ("detected", "yes" if self.detected else "no"),
            ("clusters", self.n_clusters),
            ("true_clusters", self.true_clusters),
            ("false_positives", self.false_positives),
            ("lesion_voxels", self.lesion_voxels),
            ("overlap_voxels", self.overlap_voxels),
        ))


def _sort_key(center) -> tuple[int, int, int]:
    x, y, z = center
    return int(z), int(y), int(x)


def group_by_center(encoded: Sequence[tuple[np.ndarray, np.ndarray]]) -> dict[tuple, np.ndarray]:
    """Gather per-subject ``(centers, codes)`` into center -> (n_subjects, d)."""
    rows: dict[tuple, list[np.ndarray]] = {}
    for centers, codes in encoded:
        for c, code in zip(centers, codes):
            rows.setdefault((int(c[0]), int(c[1]), int(c[2])), []).append(code)
    return {c: np.asarray(v, dtype=np.float64) for c, v in rows.items()}


def build_bank(
    encoded,
    nu: float = 0.03,
    gamma_scale: float = 0.5,
    tol: float = ocsvm.DEFAULT_TOL,
    chunk: int = 1024,
) -> ClassifierBank:
    """Train a model for every center seen in at least two subjects.

    ``encoded`` is either a mapping ``center -> (n_subjects, d)`` or a
    sequence of per-subject ``(centers, codes)`` arrays. Each center gets its
    own median-heuristic gamma. Centers with fewer than two subjects or with
    coincident features are skipped and listed in ``bank.skipped``.
    """
    by_center = encoded if isinstance(encoded, dict) else group_by_center(encoded)
    skipped = []
    dims = {m.shape[1] for m in by_center.values()}
    if len(dims) > 1:
        raise ValueError(f"inconsistent feature widths {sorted(dims)}")
    groups: dict[int, list[tuple[tuple, np.ndarray, float]]] = {}
    for center in sorted(by_center, key=_sort_key):
        X = by_center[center]
        if len(X) < 2:
            skipped.append((center, "fewer than two subjects"))
            log.warning("skipping center %s: fewer than two subjects", center)
            continue
        try:
            gamma = ocsvm.median_gamma(X, gamma_scale)
        except ocsvm.DegenerateSpreadError:
            skipped.append((center, "degenerate spread"))
            log.warning("skipping center %s: degenerate spread", center)
            continue
        groups.setdefault(len(X), []).append((center, X, gamma))
    trained: dict[tuple, OcSvmModel] = {}
    for n in sorted(groups):
        items = groups[n]
        for start in range(0, len(items), chunk):
            part = items[start:start + chunk]
            models = ocsvm.train_many(np.stack([x for _, x, _ in part]), nu,
                                      np.array([g for _, _, g in part]), tol=tol)
            for (center, _, _), model in zip(part, models):
                trained[center] = model
    if not trained:
        raise ValueError("no center could be trained; bank is empty")
    centers = sorted(trained, key=_sort_key)
    bad = sum(not trained[c].converged for c in centers)
    if bad:
        log.warning("%d of %d classifiers hit the iteration cap", bad, len(centers))
    return ClassifierBank(
        np.array(centers, dtype=np.int64),
        [trained[c] for c in centers],
        dims.pop(),
        float(nu),
        skipped=skipped,
    )


def score_subject(bank: ClassifierBank, centers: np.ndarray, codes: np.ndarray,
                  dims: tuple[int, int, int]) -> DistanceMap:
    """Score each of the subject's centers against that center's classifier."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    if codes.shape[1] != bank.feature_dim:
        raise ValueError(f"feature width {codes.shape[1]} does not match bank ({bank.feature_dim})")
    nx, ny, nz = dims
    scores = np.zeros((nz, ny, nx))
    valid = np.zeros((nz, ny, nx), dtype=bool)
    lookup = bank.index()
    hits = 0
    for c, code in zip(centers, codes):
        k = lookup.get((int(c[0]), int(c[1]), int(c[2])))
        if k is None:
            continue
        x, y, z = (int(v) for v in c)
        scores[z, y, x] = ocsvm.decision(bank.models[k], code)
        valid[z, y, x] = True
        hits += 1
    if not hits:
        raise ValueError("subject shares no center with the bank")
    return DistanceMap(scores, valid)


def quantile_threshold(scores: np.ndarray, p: float) -> float:
    """Lower-tail empirical quantile: the ceil(p*n)-th smallest score."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    ordered = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    if ordered.size == 0:
        raise ValueError("no valid scores")
    # the small slack keeps exact products such as 0.003 * 1000 from rounding up
    k = max(1, math.ceil(p * ordered.size - 1e-9))
    return float(ordered[min(k, ordered.size) - 1])


def threshold_map(d: DistanceMap, p: float) -> np.ndarray:
    """Keep valid voxels scoring at or below the subject's p-quantile."""
    t = quantile_threshold(d.scores[d.valid], p)
    return d.valid & (d.scores <= t)


def _stats(labels: np.ndarray, count: int, scores: np.ndarray | None) -> list[ClusterStats]:
    if count == 0:
        return []
    idx = np.arange(1, count + 1)
    ones = np.ones(labels.shape)
    sizes = ndimage.sum_labels(ones, labels, idx)
    centroids = ndimage.center_of_mass(ones, labels, idx)
    mins = ndimage.minimum(scores, labels, idx) if scores is not None else [math.nan] * count
    return [
        ClusterStats(int(k), int(s), (float(x), float(y), float(z)), float(mn))
        for k, s, (z, y, x), mn in zip(idx, sizes, centroids, mins)
    ]


def connected_components_26(kept: np.ndarray, scores: np.ndarray | None = None) -> ClusterMap:
    """Label 26-connected components, numbered in x-fastest scan order."""
    kept = np.asarray(kept, dtype=bool)
    raw, count = ndimage.label(kept, structure=STRUCTURE_26)
    labels = _first_encounter(raw, count)
    return ClusterMap(labels, _stats(labels, count, scores))


def _first_encounter(raw: np.ndarray, count: int) -> np.ndarray:
    flat = raw.ravel()
    if count == 0:
        return np.zeros(raw.shape, dtype=np.int32)
    seen, first = np.unique(flat, return_index=True)
    order = seen[seen > 0][np.argsort(first[seen > 0], kind="stable")]
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[order] = np.arange(1, len(order) + 1, dtype=np.int32)
    return remap[raw]


def filter_clusters(c: ClusterMap, min_size: int = 82) -> ClusterMap:
    """Drop clusters with fewer than ``min_size`` voxels and compact the labels."""
    survivors = [s for s in c.clusters if s.size >= min_size]
    remap = np.zeros(len(c.clusters) + 1, dtype=np.int32)
    out = []
    for new, s in enumerate(survivors, start=1):
        remap[s.label] = new
        out.append(ClusterStats(new, s.size, s.centroid, s.min_score))
    return ClusterMap(remap[c.labels], out)


def evaluate(c: ClusterMap, truth: np.ndarray) -> DetectionReport:
    truth = np.asarray(truth, dtype=bool)
    if truth.shape != c.labels.shape:
        raise ValueError(f"truth shape {truth.shape} does not match cluster map {c.labels.shape}")
    hit_labels = set(np.unique(c.labels[truth & (c.labels > 0)]).tolist())
    n = len(c.clusters)
    return DetectionReport(
        detected=bool(hit_labels),
        n_clusters=n,
        true_clusters=len(hit_labels),
        false_positives=n - len(hit_labels),
        lesion_voxels=int(truth.sum()),
        overlap_voxels=int((truth & (c.labels > 0)).sum()),
    )


def cluster_report(c: ClusterMap) -> str:
    lines = [f"clusters={len(c.clusters)}\n"]
    for s in c.clusters:
        x, y, z = s.centroid
        lines.append(f"cluster.{s.label}.size={s.size}\n")
        lines.append(f"cluster.{s.label}.centroid={x!r},{y!r},{z!r}\n")
        lines.append(f"cluster.{s.label}.min_score={s.min_score!r}\n")
    return "".join(lines)


def encode_bank(bank: ClassifierBank) -> bytes:
    order = sorted(range(len(bank)), key=lambda k: _sort_key(bank.centers[k]))
    parts = [_BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION, bank.nu, bank.feature_dim,
                               len(bank), bank.model_digest)]
    for k in order:
        m = bank.models[k]
        x, y, z = (int(v) for v in bank.centers[k])
        parts.append(_RECORD.pack(x, y, z, m.n_train, len(m.alphas), int(m.converged),
                                  m.kernel.gamma, m.rho))
        parts.append(np.ascontiguousarray(m.alphas, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(m.support_vectors, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_bank(raw: bytes) -> ClassifierBank:
    if raw[:4] != BANK_MAGIC:
        raise BankFormatError(f"bad magic {raw[:4]!r}")
    if len(raw) < _BANK_HEADER.size:
        raise BankFormatError("truncated bank header")
    _, version, nu, dim, count, digest = _BANK_HEADER.unpack_from(raw, 0)
    if version != BANK_VERSION:
        raise BankFormatError(f"unsupported bank version {version}")
    offset = _BANK_HEADER.size
    centers, models = [], []
    for _ in range(count):
        if offset + _RECORD.size > len(raw):
            raise BankFormatError(f"truncated record at byte {offset}")
        x, y, z, n_train, n_sv, conv, gamma, rho = _RECORD.unpack_from(raw, offset)
        offset += _RECORD.size
        need = n_sv * 8 * (1 + dim)
        if offset + need > len(raw):
            raise BankFormatError(f"truncated record payload at byte {offset}")
        alphas = np.frombuffer(raw, "<f8", n_sv, offset).astype(np.float64)
        offset += n_sv * 8
        svs = np.frombuffer(raw, "<f8", n_sv * dim, offset).astype(np.float64).reshape(n_sv, dim)
        offset += n_sv * dim * 8
        centers.append((x, y, z))
        models.append(OcSvmModel(svs, alphas, rho, KernelConfig(gamma), nu, n_train, bool(conv)))
    if offset != len(raw):
        raise BankFormatError(f"{len(raw) - offset} trailing bytes")
    return ClassifierBank(np.array(centers, dtype=np.int64).reshape(-1, 3), models, dim, nu, digest)


def save_bank(bank: ClassifierBank, path) -> None:
    _atomic_write(path, encode_bank(bank))


def load_bank(path) -> ClassifierBank:
    with open(path, "rb") as fh:
        return decode_bank(fh.read())


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()

"""End-to-end stages shared by the CLI and the acceptance runs."""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

from . import detector, network
from .config import PipelineConfig
from .detector import ClassifierBank, ClusterMap, DistanceMap
from .network import EpochRecord, SiameseModel
from .volume import PairBatch, Volume, patch_array, rescale_unit, sample_pairs

log = logging.getLogger(__name__)


def subject_patches(volumes: Sequence[Volume], p: int, stride: int) -> list[tuple[np.ndarray, np.ndarray]]:
    return [patch_array(rescale_unit(v), p, stride) for v in volumes]


def pretrain(cfg: PipelineConfig, volumes: Sequence[Volume],
             on_epoch: Callable[[int, EpochRecord], None] | None = None) -> SiameseModel:
    patches = subject_patches(volumes, cfg.patch_size, cfg.stride)
    X = np.concatenate([v for _, v in patches])
    log.info("pretraining on %d patches", len(X))
    return network.pretrain_stack(X, cfg.widths, cfg.corruption_pretrain, cfg.pretrain_sgd(),
                                  alpha=cfg.alpha, corruption_finetune=cfg.corruption_finetune,
                                  on_epoch=on_epoch)


def training_pairs(cfg: PipelineConfig, volumes: Sequence[Volume], seed_offset: int = 0) -> PairBatch:
    patches = subject_patches(volumes, cfg.patch_size, cfg.stride)
    n = cfg.n_pairs or sum(len(c) for c, _ in patches)
    return sample_pairs(patches, n, cfg.seed + seed_offset)


def finetune(cfg: PipelineConfig, model: SiameseModel, volumes: Sequence[Volume],
             on_epoch: Callable[[EpochRecord], None] | None = None) -> SiameseModel:
    pairs = training_pairs(cfg, volumes)
    log.info("fine-tuning on %d pairs", len(pairs))
    return network.finetune(model, pairs, cfg.finetune_sgd(), alpha=cfg.alpha,
                            rate=cfg.corruption_finetune, on_epoch=on_epoch)


def encode_subject(cfg: PipelineConfig, model: SiameseModel, v: Volume) -> tuple[np.ndarray, np.ndarray]:
    """Codes of every bank-grid patch of one subject: ``(centers, codes)``."""
    centers, values = patch_array(rescale_unit(v), cfg.patch_size, cfg.bank_stride)
    return centers, network.encode(model, values)


def build_bank(cfg: PipelineConfig, model: SiameseModel, volumes: Sequence[Volume]) -> ClassifierBank:
    encoded = [encode_subject(cfg, model, v) for v in volumes]
    bank = detector.build_bank(encoded, nu=cfg.nu, gamma_scale=cfg.gamma_scale, tol=cfg.svm_tol)
    bank.model_digest = detector.digest(network.encode_model(model))
    return bank


def score(cfg: PipelineConfig, bank: ClassifierBank, model: SiameseModel, v: Volume) -> DistanceMap:
    expected = detector.digest(network.encode_model(model))
    if bank.model_digest != expected:
        raise ValueError("bank was built with a different model than the one supplied")
    centers, codes = encode_subject(cfg, model, v)
    return detector.score_subject(bank, centers, codes, v.dims)


def clusters(d: DistanceMap, p_value: float, min_size: int) -> ClusterMap:
    kept = detector.threshold_map(d, p_value)
    labeled = detector.connected_components_26(kept, np.where(d.valid, d.scores, np.inf))
    return detector.filter_clusters(labeled, min_size)

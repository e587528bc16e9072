"""Pipeline configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass

from .network import SgdConfig


@dataclass(frozen=True)
class PipelineConfig:
    patch_size: int = 9
    stride: int = 5
    bank_stride: int = 1
    widths: tuple[int, ...] = (64, 32)
    corruption_pretrain: tuple[float, ...] = (0.3, 0.1)
    corruption_finetune: float = 0.1
    alpha: float = 0.66
    nu: float = 0.03
    gamma_scale: float = 0.5
    svm_tol: float = 1e-6
    p_value: float = 0.003
    min_cluster_size: int = 82
    batch_size: int = 32
    pretrain_lr: float = 0.1
    pretrain_epochs: int = 20
    finetune_lr: float = 0.01
    finetune_epochs: int = 10
    # 0 means one pair per training patch
    n_pairs: int = 0
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            problems.append("patch_size must be a positive odd integer")
        if self.stride < 1 or self.bank_stride < 1:
            problems.append("strides must be positive")
        if not self.widths or any(w < 1 for w in self.widths):
            problems.append("widths must be a nonempty list of positive sizes")
        if len(self.corruption_pretrain) != len(self.widths):
            problems.append("corruption_pretrain needs one rate per width")
        rates = (*self.corruption_pretrain, self.corruption_finetune)
        if any(not 0.0 <= r <= 1.0 for r in rates):
            problems.append("corruption rates must lie in [0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            problems.append("alpha must lie in [0, 1]")
        if not 0.0 < self.nu <= 1.0:
            problems.append("nu must lie in (0, 1]")
        if not self.gamma_scale > 0 or not self.svm_tol > 0:
            problems.append("gamma_scale and svm_tol must be positive")
        if not 0.0 < self.p_value < 1.0:
            problems.append("p_value must lie in (0, 1)")
        if self.min_cluster_size < 1 or self.batch_size < 1:
            problems.append("min_cluster_size and batch_size must be positive")
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0 or self.n_pairs < 0:
            problems.append("epoch and pair counts must be non-negative")
        if self.pretrain_lr < 0 or self.finetune_lr < 0:
            problems.append("learning rates must be non-negative")
        if problems:
            raise ValueError("; ".join(problems))

    def pretrain_sgd(self) -> SgdConfig:
        return SgdConfig(self.pretrain_lr, self.batch_size, self.pretrain_epochs, self.seed)

    def finetune_sgd(self) -> SgdConfig:
        return SgdConfig(self.finetune_lr, self.batch_size, self.finetune_epochs, self.seed)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def render(self) -> str:
        return render(self)

    def digest(self) -> str:
        return hashlib.sha256(render(self).encode()).hexdigest()


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        # repr is the shortest string that round-trips exactly
        return repr(value)
    return str(value)


def render(obj) -> str:
    """Render a flat dataclass as ``key = value`` lines in field order."""
    return "".join(f"{f.name} = {_format(getattr(obj, f.name))}\n" for f in dataclasses.fields(obj))


def _convert(text: str, hint):
    origin = typing.get_origin(hint)
    if origin is tuple:
        (inner, *_) = typing.get_args(hint)
        return tuple(_convert(t.strip(), inner) for t in text.split(",") if t.strip())
    if hint is bool:
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return hint(text)


def parse(text: str, cls=PipelineConfig):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        if key not in known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(raw.strip(), hints[key])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from None
    return cls(**values)


def load_config(path, cls=PipelineConfig):
    with open(path) as fh:
        return parse(fh.read(), cls)

"""Tied-weight stacked denoising autoencoders used as a parameter-sharing siamese pair.

Every layer is logistic. Encoding runs ``h_k = sigmoid(W_k h_{k-1} + b_enc_k)``;
decoding mirrors it with the transposed weights and a per-layer decoder bias.
Both branches of the siamese pair evaluate the same :class:`SiameseModel`,
so their gradients land in one set of arrays and are summed there.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .volume import PairBatch, Patch, _atomic_write, corruption_mask

log = logging.getLogger(__name__)

EPS = 1e-12
MODEL_MAGIC = b"VXWM"
MODEL_VERSION = 1


class DegenerateCosineError(ArithmeticError):
    pass


class ModelFormatError(ValueError):
    pass


def sigmoid(z):
    # split on sign to avoid overflow in exp
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class LayerParams:
    W: np.ndarray  # (fan_out, fan_in)
    b_enc: np.ndarray
    b_dec: np.ndarray

    @property
    def fan_in(self) -> int:
        return self.W.shape[1]

    @property
    def fan_out(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator) -> "LayerParams":
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return cls(
            rng.uniform(-bound, bound, size=(fan_out, fan_in)),
            np.zeros(fan_out),
            np.zeros(fan_in),
        )

    def copy(self) -> "LayerParams":
        return LayerParams(self.W.copy(), self.b_enc.copy(), self.b_dec.copy())

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.W, self.b_enc, self.b_dec


@dataclass
class SiameseModel:
    layers: list[LayerParams]
    alpha: float = 0.66
    corruption_finetune: float = 0.1

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.fan_out != b.fan_in:
                raise ValueError(f"layer dims do not chain: {a.fan_out} -> {b.fan_in}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def code_dim(self) -> int:
        return self.layers[-1].fan_out

    def copy(self) -> "SiameseModel":
        return SiameseModel([l.copy() for l in self.layers], self.alpha, self.corruption_finetune)

    def parameters(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer.arrays()]

    def __eq__(self, other):
        if not isinstance(other, SiameseModel):
            return NotImplemented
        return (
            self.alpha == other.alpha
            and self.corruption_finetune == other.corruption_finetune
            and len(self.layers) == len(other.layers)
            and all(
                a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in zip(self.parameters(), other.parameters())
            )
        )


@dataclass
class SgdConfig:
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    cosine: float
    mse: float

    def __str__(self):
        return f"epoch={self.epoch} loss={self.loss:.6g} cosine={self.cosine:.6g} mse={self.mse:.6g}"


def _values(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, Patch) else x, dtype=np.float64)


def _as_matrix(patches) -> np.ndarray:
    if isinstance(patches, (list, tuple)):
        return np.atleast_2d(np.asarray([_values(p) for p in patches], dtype=np.float64))
    return np.atleast_2d(_values(patches))


def _check_dim(m: SiameseModel, X: np.ndarray) -> None:
    if X.shape[-1] != m.input_dim:
        raise ValueError(f"input has {X.shape[-1]} values, model expects {m.input_dim}")


def _encode_all(layers: Sequence[LayerParams], X: np.ndarray) -> list[np.ndarray]:
    hs = [X]
    for layer in layers:
        hs.append(sigmoid(hs[-1] @ layer.W.T + layer.b_enc))
    return hs


def _decode_all(layers: Sequence[LayerParams], code: np.ndarray) -> list[np.ndarray]:
    """Returns ``[d_K, ..., d_0]`` with ``d_K`` the code itself."""
    ds = [code]
    for layer in reversed(layers):
        ds.append(sigmoid(ds[-1] @ layer.W + layer.b_dec))
    return ds


def encode(m: SiameseModel, x) -> np.ndarray:
    """Middle-layer representation; accepts one patch or a (n, d) batch."""
    X = _values(x)
    _check_dim(m, X)
    return _encode_all(m.layers, X)[-1]


def reconstruct(m: SiameseModel, x_tilde) -> np.ndarray:
    X = _values(x_tilde)
    _check_dim(m, X)
    return _decode_all(m.layers, _encode_all(m.layers, X)[-1])[-1]


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na < EPS) or np.any(nb < EPS):
        raise DegenerateCosineError("representation norm below 1e-12")
    return np.sum(a * b, axis=-1) / (na * nb), na, nb


def cosine(a, b) -> float:
    return float(_cosine_rows(np.atleast_2d(a), np.atleast_2d(b))[0][0])


def pair_loss(m: SiameseModel, x1, x2, x1_tilde, x2_tilde) -> float:
    loss, _ = _pair_terms(m, *(np.atleast_2d(_values(v)) for v in (x1, x2, x1_tilde, x2_tilde)))
    return float(loss.sum())


def _pair_terms(m, X1, X2, T1, T2):
    for X in (X1, X2, T1, T2):
        _check_dim(m, X)
    h1 = _encode_all(m.layers, T1)
    h2 = _encode_all(m.layers, T2)
    r1 = _decode_all(m.layers, h1[-1])[-1]
    r2 = _decode_all(m.layers, h2[-1])[-1]
    rec = np.sum((X1 - r1) ** 2, axis=1) + np.sum((X2 - r2) ** 2, axis=1)
    cos, _, _ = _cosine_rows(h1[-1], h2[-1])
    return m.alpha * rec - (1.0 - m.alpha) * cos, (rec, cos)


def _backprop_branch(layers, X, hs, g_code_extra, rec_weight, grads):
    """Accumulate gradients of ``rec_weight * sum ||X - xhat||^2`` plus an
    extra gradient injected at the code layer into ``grads``.

    ``hs`` is the encoder trace of the corrupted input from :func:`_encode_all`.
    """
    ds = _decode_all(layers, hs[-1])  # d_K .. d_0
    K = len(layers)
    out = ds[-1]
    g = rec_weight * 2.0 * (out - X)
    # decoder, from the output back to the code
    for step, layer in enumerate(layers):  # layer k = step + 1, output d_{k-1}
        d_out = ds[K - step]
        d_in = ds[K - step - 1]
        delta = g * d_out * (1.0 - d_out)
        gW, _, gbd = grads[step]
        gW += d_in.T @ delta
        gbd += delta.sum(axis=0)
        g = delta @ layer.W.T
    if g_code_extra is not None:
        g = g + g_code_extra
    for k in range(K - 1, -1, -1):
        h = hs[k + 1]
        delta = g * h * (1.0 - h)
        gW, gbe, _ = grads[k]
        gW += delta.T @ hs[k]
        gbe += delta.sum(axis=0)
        g = delta @ layers[k].W
    return out, hs[-1]


def _zero_grads(layers):
    return [(np.zeros_like(l.W), np.zeros_like(l.b_enc), np.zeros_like(l.b_dec)) for l in layers]


def _pair_grads(m: SiameseModel, X1, X2, T1, T2):
    """Summed loss and gradient over a batch of pairs."""
    hs1 = _encode_all(m.layers, T1)
    hs2 = _encode_all(m.layers, T2)
    code1, code2 = hs1[-1], hs2[-1]
    cos, n1, n2 = _cosine_rows(code1, code2)
    w = 1.0 - m.alpha
    # d cos / d a = b / (|a||b|) - cos * a / |a|^2
    gc1 = -w * (code2 / (n1 * n2)[:, None] - (cos / n1**2)[:, None] * code1)
    gc2 = -w * (code1 / (n1 * n2)[:, None] - (cos / n2**2)[:, None] * code2)
    grads = _zero_grads(m.layers)
    r1, _ = _backprop_branch(m.layers, X1, hs1, gc1, m.alpha, grads)
    r2, _ = _backprop_branch(m.layers, X2, hs2, gc2, m.alpha, grads)
    rec = np.sum((X1 - r1) ** 2, axis=1) + np.sum((X2 - r2) ** 2, axis=1)
    loss = m.alpha * rec - w * cos
    return loss, rec, cos, grads


def pair_loss_grad(m: SiameseModel, x1, x2, x1_tilde, x2_tilde) -> list[LayerParams]:
    """Exact gradient of the pair loss, one LayerParams-shaped entry per layer."""
    arrs = [np.atleast_2d(_values(v)) for v in (x1, x2, x1_tilde, x2_tilde)]
    for X in arrs:
        _check_dim(m, X)
    _, _, _, grads = _pair_grads(m, *arrs)
    return [LayerParams(*g) for g in grads]


def _apply(layers, grads, scale):
    for layer, g in zip(layers, grads):
        for p, gp in zip(layer.arrays(), g):
            p -= scale * gp


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def pretrain_layer(
    patches,
    fan_out: int,
    rate: float,
    sgd: SgdConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> LayerParams:
    """Train one denoising autoencoder on clean-vs-corrupted reconstruction.

    The objective per example is the summed squared error; reported ``mse``
    is that value divided by the input width. Corruption is redrawn for every
    presentation, keyed by (seed, epoch) and the example's row.
    """
    X = _as_matrix(patches)
    n, d = X.shape
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng([sgd.seed, fan_out, d])
    layer = LayerParams.init(d, fan_out, rng)
    layers = [layer]
    for epoch in range(1, sgd.epochs + 1):
        keep = corruption_mask((n, d), rate, sgd.seed, key=epoch)
        T = np.where(keep, X, 0.0)
        total = 0.0
        for idx in _batches(n, sgd.batch_size, rng):
            grads = _zero_grads(layers)
            out, _ = _backprop_branch(layers, X[idx], _encode_all(layers, T[idx]), None, 1.0, grads)
            total += float(np.sum((X[idx] - out) ** 2))
            _apply(layers, grads, sgd.learning_rate / len(idx))
        rec = EpochRecord(epoch, total / n, float("nan"), total / (n * d))
        log.debug("pretrain %d->%d %s", d, fan_out, rec)
        if on_epoch is not None:
            on_epoch(rec)
    return layer


def reconstruction_mse(layers: Sequence[LayerParams], X: np.ndarray) -> float:
    out = _decode_all(layers, _encode_all(layers, X)[-1])[-1]
    return float(np.mean((X - out) ** 2))


def pretrain_stack(
    patches,
    widths: Sequence[int] = (64, 32),
    rates: Sequence[float] = (0.3, 0.1),
    sgd: SgdConfig | None = None,
    alpha: float = 0.66,
    corruption_finetune: float = 0.1,
    on_epoch: Callable[[int, EpochRecord], None] | None = None,
) -> SiameseModel:
    """Greedy layer-wise pretraining: layer k sees the codes of layers < k."""
    sgd = sgd or SgdConfig()
    if len(widths) != len(rates):
        raise ValueError("widths and rates must have the same length")
    if not widths:
        raise ValueError("empty layer stack")
    X = _as_matrix(patches)
    layers = []
    inputs = X
    for k, (width, rate) in enumerate(zip(widths, rates)):
        cb = None if on_epoch is None else (lambda r, k=k: on_epoch(k, r))
        layer = pretrain_layer(inputs, width, rate, sgd, on_epoch=cb)
        layers.append(layer)
        inputs = _encode_all([layer], inputs)[-1]
    return SiameseModel(layers, alpha, corruption_finetune)


def finetune(
    m: SiameseModel,
    pairs: PairBatch,
    sgd: SgdConfig,
    alpha: float | None = None,
    rate: float | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> SiameseModel:
    """SGD on the pair loss. Returns a new model; ``m`` is left untouched."""
    out = m.copy()
    if alpha is not None:
        out.alpha = alpha
    if rate is not None:
        out.corruption_finetune = rate
    n = len(pairs)
    if n == 0:
        raise ValueError("no pairs to fine-tune on")
    X1, X2 = pairs.first, pairs.second
    _check_dim(out, X1)
    d = X1.shape[1]
    rng = np.random.default_rng([sgd.seed, 1])
    for epoch in range(1, sgd.epochs + 1):
        k1 = corruption_mask((n, d), out.corruption_finetune, sgd.seed, key=2 * epoch)
        k2 = corruption_mask((n, d), out.corruption_finetune, sgd.seed, key=2 * epoch + 1)
        T1 = np.where(k1, X1, 0.0)
        T2 = np.where(k2, X2, 0.0)
        tot_loss = tot_cos = tot_rec = 0.0
        for idx in _batches(n, sgd.batch_size, rng):
            loss, rec, cos, grads = _pair_grads(out, X1[idx], X2[idx], T1[idx], T2[idx])
            tot_loss += float(loss.sum())
            tot_cos += float(cos.sum())
            tot_rec += float(rec.sum())
            _apply(out.layers, grads, sgd.learning_rate / len(idx))
        rec = EpochRecord(epoch, tot_loss / n, tot_cos / n, tot_rec / (2 * n * d))
        log.debug("finetune %s", rec)
        if on_epoch is not None:
            on_epoch(rec)
    return out


def mean_pair_cosine(m: SiameseModel, pairs: PairBatch) -> float:
    cos, _, _ = _cosine_rows(encode(m, pairs.first), encode(m, pairs.second))
    return float(cos.mean())


_U32 = struct.Struct("<I")
_F64 = struct.Struct("<d")


def encode_model(m: SiameseModel) -> bytes:
    parts = [MODEL_MAGIC, _U32.pack(MODEL_VERSION), _F64.pack(m.alpha),
             _F64.pack(m.corruption_finetune), _U32.pack(len(m.layers))]
    for layer in m.layers:
        parts.append(struct.pack("<II", layer.fan_in, layer.fan_out))
    for layer in m.layers:
        for arr in layer.arrays():
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_model(raw: bytes) -> SiameseModel:
    if raw[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {raw[:4]!r}")
    try:
        version, = _U32.unpack_from(raw, 4)
        if version != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model version {version}")
        alpha, = _F64.unpack_from(raw, 8)
        rate, = _F64.unpack_from(raw, 16)
        count, = _U32.unpack_from(raw, 24)
        offset = 28
        dims = []
        for _ in range(count):
            dims.append(struct.unpack_from("<II", raw, offset))
            offset += 8
    except struct.error as exc:
        raise ModelFormatError(f"truncated model header: {exc}") from None
    layers = []
    for fan_in, fan_out in dims:
        arrays = []
        for shape in ((fan_out, fan_in), (fan_out,), (fan_in,)):
            size = int(np.prod(shape)) * 8
            if offset + size > len(raw):
                raise ModelFormatError(f"truncated parameters at byte {offset}")
            arrays.append(np.frombuffer(raw, dtype="<f8", count=size // 8, offset=offset)
                          .astype(np.float64).reshape(shape))
            offset += size
        layers.append(LayerParams(*arrays))
    if offset != len(raw):
        raise ModelFormatError(f"{len(raw) - offset} trailing bytes")
    return SiameseModel(layers, alpha, rate)


def save_model(m: SiameseModel, path) -> None:
    _atomic_write(path, encode_model(m))


def load_model(path) -> SiameseModel:
    with open(path, "rb") as fh:
        return decode_model(fh.read())

"""Bi-stream network projecting EEG features and music embeddings into a 64-D space.

EEG branch: two stacked LSTMs run over the channel axis (each channel's DE
vector is one step), additive softmax attention pools the per-channel hidden
states, and a dense layer maps the context into the common space.
Music branch: tanh MLP ending in a linear 64-D layer.
Heads: one linear+sigmoid emotion classifier shared by both modalities, and a
modality discriminator behind a gradient-reversal layer.
"""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Standardizer, make_rng

EMBED_DIM = 64
CKPT_MAGIC = b"CMAF"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelDims:
    channels: int
    features: int
    music_dim: int
    lstm_hidden: int = 32
    attention_dim: int = 32
    music_hidden: tuple[int, ...] = (128, 128)
    disc_hidden: int = 32
    embed_dim: int = EMBED_DIM


@dataclass
class LSTMParams:
    weight: Tensor  # (input + hidden) x 4*hidden, gate order i, f, g, o
    bias: Tensor

    @property
    def hidden(self) -> int:
        return self.bias.shape[0] // 4


@dataclass
class EegBranchParams:
    lstm1: LSTMParams
    lstm2: LSTMParams
    att_proj: Tensor
    att_score: Tensor
    proj_w: Tensor
    proj_b: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.lstm1.weight, self.lstm1.bias, self.lstm2.weight, self.lstm2.bias,
                self.att_proj, self.att_score, self.proj_w, self.proj_b]


@dataclass
class MusicBranchParams:
    weights: list[Tensor]
    biases: list[Tensor]

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass
class HeadParams:
    cls_w: Tensor
    cls_b: Tensor
    disc_w1: Tensor
    disc_b1: Tensor
    disc_w2: Tensor
    disc_b2: Tensor

    def classifier(self) -> list[Tensor]:
        return [self.cls_w, self.cls_b]

    def discriminator(self) -> list[Tensor]:
        return [self.disc_w1, self.disc_b1, self.disc_w2, self.disc_b2]

    def tensors(self) -> list[Tensor]:
        return self.classifier() + self.discriminator()


@dataclass
class BiStreamModel:
    dims: ModelDims
    eeg: EegBranchParams
    music: MusicBranchParams
    head: HeadParams
    eeg_transform: Standardizer | None = None
    music_transform: Standardizer | None = None

    def parameters(self) -> list[Tensor]:
        """All trainable tensors in checkpoint order."""
        return self.eeg.tensors() + self.music.tensors() + self.head.tensors()

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def restore(self, arrays: list[np.ndarray]) -> None:
        for p, a in zip(self.parameters(), arrays):
            p.data = a.copy()

    def clone(self) -> "BiStreamModel":
        return copy.deepcopy(self)

    # inference helpers on raw (unstandardized) arrays
    def embed_eeg(self, x: np.ndarray) -> np.ndarray:
        if self.eeg_transform is not None:
            x = self.eeg_transform.apply(x)
        with ad.no_grad():
            return eeg_forward(x, self.eeg)[0].data

    def embed_music(self, e: np.ndarray) -> np.ndarray:
        if self.music_transform is not None:
            e = self.music_transform.apply(e)
        with ad.no_grad():
            return music_forward(e, self.music).data

    def predict(self, u: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return classify(Tensor(u), self.head).data


# ---------------------------------------------------------------------------
# initialization


def _uniform(rng: np.random.Generator, fan_in: int, shape, name: str) -> Tensor:
    # LeCun-uniform: variance 1/fan_in
    bound = math.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def init_bound(fan_in: int) -> float:
    return math.sqrt(3.0 / fan_in)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def _lstm_init(rng, n_in: int, hidden: int, name: str) -> LSTMParams:
    w = _uniform(rng, n_in + hidden, (n_in + hidden, 4 * hidden), f"{name}.weight")
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate
    return LSTMParams(w, Tensor(b, requires_grad=True, name=f"{name}.bias"))


def init_params(dims: ModelDims, seed: int = 0) -> BiStreamModel:
    """Fresh parameters: uniform in +/- sqrt(3/fan_in), zero biases, forget-gate bias 1."""
    rng = make_rng(seed, 0x4D4F44)
    H, A, E = dims.lstm_hidden, dims.attention_dim, dims.embed_dim
    eeg = EegBranchParams(
        _lstm_init(rng, dims.features, H, "lstm1"),
        _lstm_init(rng, H, H, "lstm2"),
        _uniform(rng, H, (H, A), "att_proj"),
        _uniform(rng, A, (A, 1), "att_score"),
        _uniform(rng, H, (H, E), "eeg_proj.w"),
        _zeros((E,), "eeg_proj.b"),
    )
    widths = [dims.music_dim, *dims.music_hidden, E]
    ws, bs = [], []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        ws.append(_uniform(rng, a, (a, b), f"music{i}.w"))
        bs.append(_zeros((b,), f"music{i}.b"))
    head = HeadParams(
        _uniform(rng, E, (E, 1), "cls.w"), _zeros((1,), "cls.b"),
        _uniform(rng, E, (E, dims.disc_hidden), "disc1.w"), _zeros((dims.disc_hidden,), "disc1.b"),
        _uniform(rng, dims.disc_hidden, (dims.disc_hidden, 1), "disc2.w"), _zeros((1,), "disc2.b"),
    )
    return BiStreamModel(dims, eeg, MusicBranchParams(ws, bs), head)


# ---------------------------------------------------------------------------
# forward passes


def _dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(x, w), b)


def _lstm(steps: list[Tensor], p: LSTMParams) -> list[Tensor]:
    B = steps[0].shape[0]
    H = p.hidden
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    bias = ad.broadcast_to(p.bias, (B, 4 * H))
    out = []
    for x in steps:
        z = ad.add(ad.matmul(ad.concat([x, h], axis=1), p.weight), bias)
        hc = ad.lstm_cell(z, c)
        h = ad.take(hc, slice(0, H), axis=1)
        c = ad.take(hc, slice(H, 2 * H), axis=1)
        out.append(h)
    return out


def _as_batch(x, ndim: int) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if len(t.shape) == ndim - 1:
        return ad.reshape(t, (1, *t.shape)), True
    return t, False


def eeg_forward(x, params: EegBranchParams) -> tuple[Tensor, Tensor]:
    """Embed EEG feature matrices.

    ``x`` is (batch, channels, features) or a single (channels, features)
    matrix. Returns the (batch, 64) embedding and (batch, channels) attention
    weights (batch axis dropped for a single matrix).
    """
    x, single = _as_batch(x, 3)
    if len(x.shape) != 3:
        raise ad.ShapeError("eeg_forward", x.shape)
    B, C, F = x.shape
    n_in = params.lstm1.weight.shape[0] - params.lstm1.hidden
    if F != n_in:
        raise ad.ShapeError("eeg_forward", x.shape, (B, C, n_in))
    if x.tracked or x.requires_grad:
        steps = [ad.take(x, t, axis=1) for t in range(C)]
    else:
        steps = [Tensor(x.data[:, t]) for t in range(C)]
    h1 = _lstm(steps, params.lstm1)
    h2 = _lstm(h1, params.lstm2)
    H = params.lstm2.hidden
    hs = ad.concat([ad.reshape(h, (B, 1, H)) for h in h2], axis=1)  # B x C x H
    flat = ad.reshape(hs, (B * C, H))
    scores = ad.matmul(ad.tanh(ad.matmul(flat, params.att_proj)), params.att_score)
    alpha = ad.softmax(ad.reshape(scores, (B, C)), axis=1)
    weights = ad.broadcast_to(ad.reshape(alpha, (B, C, 1)), (B, C, H))
    context = ad.reduce_sum(ad.mul(weights, hs), axis=1)
    u = _dense(context, params.proj_w, params.proj_b)
    if single:
        return ad.reshape(u, (u.shape[1],)), ad.reshape(alpha, (C,))
    return u, alpha


def music_forward(e, params: MusicBranchParams) -> Tensor:
    e, single = _as_batch(e, 2)
    d_in = params.weights[0].shape[0]
    if len(e.shape) != 2 or e.shape[1] != d_in:
        raise ad.ShapeError("music_forward", e.shape, (e.shape[0], d_in))
    h = e
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = _dense(h, w, b)
        if i < last:
            h = ad.tanh(h)
    if single:
        return ad.reshape(h, (h.shape[1],))
    return h


def classify(u, head: HeadParams) -> Tensor:
    """Emotion probability for each row of ``u``; shape (batch,)."""
    u, _ = _as_batch(u, 2)
    logit = _dense(u, head.cls_w, head.cls_b)
    return ad.reshape(ad.sigmoid(logit), (u.shape[0],))


def discriminate(z, lambda_grl: float, head: HeadParams) -> Tensor:
    """Probability that each row of ``z`` came from the music branch."""
    z, _ = _as_batch(z, 2)
    r = ad.gradient_reversal(z, lambda_grl)
    h = ad.tanh(_dense(r, head.disc_w1, head.disc_b1))
    return ad.reshape(ad.sigmoid(_dense(h, head.disc_w2, head.disc_b2)), (z.shape[0],))


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian): magic "CMAF" | version u16 | channels u32 | features u32
# | music_dim u32 | lstm_hidden u32 | attention_dim u32 | disc_hidden u32
# | embed_dim u32 | n_music_hidden u32 | music_hidden u32 * n
# | n_blocks u32 | per block: ndim u32, dims u32 * ndim, f64 values
# | has_transform u8 | eeg mean, eeg std (channels*features f64 each)
# | music mean, music std (music_dim f64 each)
# Blocks follow BiStreamModel.parameters() order.


def save_checkpoint(path, model: BiStreamModel) -> None:
    d = model.dims
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION),
             struct.pack("<8I", d.channels, d.features, d.music_dim, d.lstm_hidden, d.attention_dim,
                         d.disc_hidden, d.embed_dim, len(d.music_hidden)),
             struct.pack(f"<{len(d.music_hidden)}I", *d.music_hidden)]
    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    for p in params:
        parts.append(struct.pack(f"<I{p.data.ndim}I", p.data.ndim, *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    has = model.eeg_transform is not None and model.music_transform is not None
    parts.append(struct.pack("<B", int(has)))
    if has:
        for tr in (model.eeg_transform, model.music_transform):
            parts.append(np.ascontiguousarray(tr.mean, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(tr.std, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> BiStreamModel:
    raw = Path(path).read_bytes()
    off = 0

    def read(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {off} (need {size} more)")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    def read_array(n):
        nonlocal off
        if off + 8 * n > len(raw):
            raise CheckpointError(f"{path}: truncated array at byte {off}")
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        return a

    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    off = 4
    (version,) = read("<H")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    ch, feat, mdim, lh, attd, dh, ed, nmh = read("<8I")
    mh = read(f"<{nmh}I")
    dims = ModelDims(ch, feat, mdim, lh, attd, tuple(mh), dh, ed)
    model = init_params(dims, 0)
    params = model.parameters()
    (n_blocks,) = read("<I")
    if n_blocks != len(params):
        raise CheckpointError(f"{path}: {n_blocks} parameter blocks, expected {len(params)}")
    for p in params:
        (ndim,) = read("<I")
        shape = read(f"<{ndim}I")
        if tuple(shape) != p.shape:
            raise CheckpointError(f"{path}: block {p.name} has shape {shape}, expected {p.shape}")
        p.data = read_array(int(np.prod(shape))).reshape(shape)
    (has,) = read("<B")
    if has:
        n = ch * feat
        model.eeg_transform = Standardizer(read_array(n).reshape(ch, feat), read_array(n).reshape(ch, feat))
        model.music_transform = Standardizer(read_array(mdim), read_array(mdim))
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return model

"""MLP denoiser, low-rank adapted students and adapter-based discriminators."""

from __future__ import annotations

import struct
from functools import lru_cache
from pathlib import Path

import numpy as np

from .autodiff import Value, add, concat, linear, mean, scale, silu

N_FREQ = 16
_FREQ_RANGE = (1.0, 200.0)


@lru_cache(maxsize=None)
def _frequencies(n_freq: int) -> np.ndarray:
    return np.geomspace(*_FREQ_RANGE, n_freq)


def time_embedding(t, n: int, n_freq: int = N_FREQ) -> np.ndarray:
    """Sinusoidal features of t, geometric frequencies; shape (n, 2 * n_freq)."""
    w = _frequencies(n_freq)
    if np.ndim(t) == 0:
        arg = float(t) * w
        return np.broadcast_to(np.concatenate([np.sin(arg), np.cos(arg)]), (n, 2 * n_freq))
    arg = np.asarray(t, dtype=np.float64).reshape(n, 1) * w[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def one_hot(cond, n: int, n_labels: int) -> np.ndarray:
    out = np.zeros((n, n_labels))
    if n_labels == 0:
        return out
    if cond is None or np.ndim(cond) == 0:
        c = 0 if cond is None else int(cond)
        if not 0 <= c < n_labels:
            raise ValueError(f"condition label {c} out of range [0, {n_labels})")
        out[:, c] = 1.0
        return out
    cond = np.asarray(cond, dtype=np.int64).reshape(n)
    if np.any(cond < 0) or np.any(cond >= n_labels):
        raise ValueError(f"condition label out of range [0, {n_labels})")
    out[np.arange(n), cond] = 1.0
    return out


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 1.0):
        self.weight = Value(gain * rng.standard_normal((n_out, n_in)) / np.sqrt(n_in), requires_grad=True)
        self.bias = Value(np.zeros(n_out), requires_grad=True)

    @property
    def shape(self) -> tuple:
        return self.weight.data.shape

    def __call__(self, x: Value) -> Value:
        return linear(x, self.weight, self.bias)

    def parameters(self) -> list:
        return [self.weight, self.bias]


class LoraAdapter:
    """Low-rank delta gamma * B @ A on a frozen base layer (B starts at zero)."""

    def __init__(self, base: Linear, rank: int, rng: np.random.Generator, scale: float | None = None):
        n_out, n_in = base.shape
        self.base = base
        self.rank = rank
        self.scale = 1.0 / rank if scale is None else scale
        self.A = Value(rng.standard_normal((rank, n_in)) / np.sqrt(n_in), requires_grad=True)
        self.B = Value(np.zeros((n_out, rank)), requires_grad=True)

    def effective_weight(self) -> np.ndarray:
        return self.base.weight.data + self.scale * (self.B.data @ self.A.data)

    def __call__(self, x: Value) -> Value:
        low = linear(linear(x, self.A), self.B)
        return add(self.base(x), scale(low, self.scale))

    def parameters(self) -> list:
        return [self.A, self.B]


class MlpDenoiser:
    """epsilon-predictor: [z, time features, one-hot label] -> hidden x depth -> d."""

    def __init__(self, dim: int = 2, n_labels: int = 1, hidden: int = 128, depth: int = 3,
                 n_freq: int = N_FREQ, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dim, self.n_labels, self.n_freq = dim, n_labels, n_freq
        widths = [dim + 2 * n_freq + n_labels] + [hidden] * depth + [dim]
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    @property
    def hidden_widths(self) -> list:
        return [layer.shape[0] for layer in self.layers[:-1]]

    def parameters(self) -> list:
        return [p for layer in self.layers for p in layer.parameters()]

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def _inputs(self, z, t, cond) -> Value:
        z = z if isinstance(z, Value) else Value(np.atleast_2d(z))
        if z.data.ndim != 2 or z.data.shape[1] != self.dim:
            raise ValueError(f"expected positions of shape (n, {self.dim}), got {z.data.shape}")
        n = z.data.shape[0]
        extra = np.concatenate([time_embedding(t, n, self.n_freq),
                                one_hot(cond, n, self.n_labels)], axis=1)
        return concat([z, Value(extra)], axis=1)

    def forward(self, z, t, cond=None, adapters: dict | None = None, features: bool = False):
        """Run the network; ``adapters`` maps layer index -> LoraAdapter.

        With ``features=True`` the last hidden activation is returned instead
        of the output layer.
        """
        adapters = adapters or {}
        h = self._inputs(z, t, cond)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            f = adapters.get(i, layer)
            if i == last:
                return h if features else f(h)
            h = silu(f(h))

    def predict(self, z, t, cond=None) -> Value:
        return self.forward(z, t, cond)

    def eps(self, z, t, cond=None) -> np.ndarray:
        return self.predict(z, t, cond).data


class LoraDenoiser:
    """Student: the teacher's frozen layers plus trainable low-rank adapters."""

    def __init__(self, base: MlpDenoiser, rank: int, seed: int = 0, layers=None):
        widths = base.hidden_widths
        if rank < 1 or rank >= min(widths):
            raise ValueError(f"LoRA rank must be in [1, {min(widths)}), got {rank}")
        rng = np.random.default_rng(seed)
        self.base = base
        self.rank = rank
        idx = range(len(base.layers)) if layers is None else layers
        self.adapters = {i: LoraAdapter(base.layers[i], rank, rng) for i in idx}

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def n_labels(self) -> int:
        return self.base.n_labels

    def parameters(self) -> list:
        return [p for i in sorted(self.adapters) for p in self.adapters[i].parameters()]

    def predict(self, z, t, cond=None) -> Value:
        return self.base.forward(z, t, cond, adapters=self.adapters)

    def eps(self, z, t, cond=None) -> np.ndarray:
        return self.predict(z, t, cond).data


def student_from_teacher(teacher: MlpDenoiser, rank: int, seed: int = 0) -> LoraDenoiser:
    return LoraDenoiser(teacher, rank, seed)


def parameter_count(params) -> int:
    return int(sum(p.data.size for p in params))


class Discriminator:
    """Conditional critic: adapted teacher backbone features + t_n embedding -> scalar.

    Several discriminators may wrap the same backbone object; only their own
    adapters and head are trainable.
    """

    def __init__(self, backbone: MlpDenoiser, rank: int = 4, head_hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.backbone = backbone
        hidden_layers = range(len(backbone.layers) - 1)
        self.adapters = {i: LoraAdapter(backbone.layers[i], rank, rng) for i in hidden_layers}
        n_feat = backbone.hidden_widths[-1] + 2 * backbone.n_freq
        self.head_in = Linear(n_feat, head_hidden, rng)
        self.head_out = Linear(head_hidden, 1, rng)
        self.head_out.weight.data = np.zeros_like(self.head_out.weight.data)

    def parameters(self) -> list:
        ps = [p for i in sorted(self.adapters) for p in self.adapters[i].parameters()]
        return ps + self.head_in.parameters() + self.head_out.parameters()

    def score(self, z, t_n: float, cond=None) -> Value:
        """Per-row realness scores, shape (n, 1)."""
        feat = self.backbone.forward(z, t_n, cond, adapters=self.adapters, features=True)
        n = feat.data.shape[0]
        x = concat([feat, Value(time_embedding(t_n, n, self.backbone.n_freq))], axis=1)
        return self.head_out(silu(self.head_in(x)))


def disc_score(D: Discriminator, z, t_n: float, cond=None) -> Value:
    """Scalar score of one position (mean over rows for a batch)."""
    return mean(D.score(z, t_n, cond))


# ----------------------------------------------------------------------------
# checkpoint file: "RAPMCKPT" | u32 version | u32 dim, n_labels, n_freq, n_layers
# | per layer u32 out, in | per layer f64 weight, f64 bias
# | u32 n_adapters | u32 rank | f64 scale | per adapter u32 layer, f64 A, f64 B

CKPT_MAGIC = b"RAPMCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model) -> bytes:
    base = model.base if isinstance(model, LoraDenoiser) else model
    adapters = model.adapters if isinstance(model, LoraDenoiser) else {}
    out = [CKPT_MAGIC, struct.pack("<5I", CKPT_VERSION, base.dim, base.n_labels,
                                   base.n_freq, len(base.layers))]
    for layer in base.layers:
        out.append(struct.pack("<2I", *layer.shape))
    for layer in base.layers:
        out.append(layer.weight.data.astype("<f8").tobytes())
        out.append(layer.bias.data.astype("<f8").tobytes())
    rank = model.rank if adapters else 0
    sc = next(iter(adapters.values())).scale if adapters else 0.0
    out.append(struct.pack("<2Id", len(adapters), rank, sc))
    for i in sorted(adapters):
        out.append(struct.pack("<I", i))
        out.append(adapters[i].A.data.astype("<f8").tobytes())
        out.append(adapters[i].B.data.astype("<f8").tobytes())
    return b"".join(out)


def save_checkpoint(path, model):
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def checkpoint_from_bytes(buf: bytes):
    r = _Reader(buf)
    if r.take(8) != CKPT_MAGIC:
        raise CheckpointError("not a RAPMCKPT file")
    version, dim, n_labels, n_freq, n_layers = r.unpack("<5I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    shapes = [r.unpack("<2I") for _ in range(n_layers)]
    model = MlpDenoiser.__new__(MlpDenoiser)
    model.dim, model.n_labels, model.n_freq = dim, n_labels, n_freq
    model.layers = []
    for shape in shapes:
        layer = Linear.__new__(Linear)
        layer.weight = Value(r.array(shape), requires_grad=True)
        layer.bias = Value(r.array((shape[0],)), requires_grad=True)
        model.layers.append(layer)
    n_adapters, rank, sc = r.unpack("<2Id")
    if not n_adapters:
        if r.pos != len(buf):
            raise CheckpointError("trailing bytes after checkpoint")
        return model
    student = LoraDenoiser.__new__(LoraDenoiser)
    student.base, student.rank, student.adapters = model.freeze(), rank, {}
    for _ in range(n_adapters):
        (i,) = r.unpack("<I")
        n_out, n_in = model.layers[i].shape
        ad = LoraAdapter.__new__(LoraAdapter)
        ad.base, ad.rank, ad.scale = model.layers[i], rank, sc
        ad.A = Value(r.array((rank, n_in)), requires_grad=True)
        ad.B = Value(r.array((n_out, rank)), requires_grad=True)
        student.adapters[i] = ad
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint")
    return student


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())

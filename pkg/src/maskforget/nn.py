"""Conditional MLP denoiser with hand-derived reverse-mode gradients.

The network predicts the noise in ``x_t`` from the concatenation
``[x_t, embed(cond), time_features(t)]`` followed by tanh hidden layers and
a linear output layer. All parameters live in one flat float64 vector;
named views into it are exposed through :class:`DenoiserParams`.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"MFCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    data_dim: int = 2
    hidden_dims: tuple[int, ...] = (64, 64)
    cond_vocab: int = 13
    cond_embed_dim: int = 8
    time_embed_dim: int = 8

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = [self.data_dim, self.cond_embed_dim, self.time_embed_dim, *self.hidden_dims]
        if not self.hidden_dims or any(int(v) < 1 for v in dims):
            raise ValueError(f"all architecture dims must be >= 1, got {self}")
        if self.cond_vocab < 2:
            raise ValueError("cond_vocab must be >= 2")

    @property
    def input_dim(self) -> int:
        return self.data_dim + self.cond_embed_dim + self.time_embed_dim

    def layout(self) -> list[tuple[str, int, tuple[int, ...]]]:
        """Ordered ``(name, offset, shape)`` entries covering the flat vector."""
        shapes: list[tuple[str, tuple[int, ...]]] = [("embed", (self.cond_vocab, self.cond_embed_dim))]
        fan_in = self.input_dim
        widths = [*self.hidden_dims, self.data_dim]
        for i, width in enumerate(widths):
            shapes.append((f"W{i}", (width, fan_in)))
            shapes.append((f"b{i}", (width,)))
            fan_in = width
        out, offset = [], 0
        for name, shape in shapes:
            out.append((name, offset, shape))
            offset += int(np.prod(shape))
        return out

    @property
    def n_params(self) -> int:
        _, offset, shape = self.layout()[-1]
        return offset + int(np.prod(shape))

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1


@dataclass
class DenoiserParams:
    """Flat parameter vector plus named views (views share memory with ``flat``)."""

    arch: Architecture
    flat: np.ndarray
    layout: list[tuple[str, int, tuple[int, ...]]] = field(init=False, repr=False)

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.arch.n_params,):
            raise ValueError(f"expected {self.arch.n_params} parameters, got {self.flat.shape}")
        self.layout = self.arch.layout()

    def view(self, name: str) -> np.ndarray:
        for key, offset, shape in self.layout:
            if key == name:
                return self.flat[offset:offset + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def span(self, name: str) -> range:
        for key, offset, shape in self.layout:
            if key == name:
                return range(offset, offset + int(np.prod(shape)))
        raise KeyError(name)

    def copy(self) -> DenoiserParams:
        return DenoiserParams(self.arch, self.flat.copy())

    def digest(self) -> str:
        return hashlib.sha256(self.flat.tobytes()).hexdigest()


def init_params(arch: Architecture, seed: int) -> DenoiserParams:
    rng = np.random.default_rng(seed)
    params = DenoiserParams(arch, np.zeros(arch.n_params))
    for name, _, shape in params.layout:
        if name == "embed":
            params.view(name)[...] = 0.1 * rng.standard_normal(shape)
        elif name.startswith("W"):
            params.view(name)[...] = rng.standard_normal(shape) * np.sqrt(1.0 / shape[1])
    return params


def time_features(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal features of ``t / T``; returns shape ``(len(t), dim)``."""
    s = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    k = np.arange(dim) // 2
    phase = np.pi * (2.0 ** k)[None, :] * s[:, None]
    return np.where(np.arange(dim) % 2 == 0, np.sin(phase), np.cos(phase))


def _check_inputs(params: DenoiserParams, x_t, t, cond, T: int):
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim != 2 or x_t.shape[1] != params.arch.data_dim:
        raise ValueError(f"x_t must have shape (n, {params.arch.data_dim}), got {x_t.shape}")
    n = x_t.shape[0]
    t = np.broadcast_to(np.asarray(t), (n,))
    cond = np.broadcast_to(np.asarray(cond), (n,))
    if not np.issubdtype(t.dtype, np.integer) or np.any(t < 1) or np.any(t > T):
        raise ValueError(f"timestep out of range [1, {T}]")
    if not np.issubdtype(cond.dtype, np.integer) or np.any(cond < 0) or np.any(cond >= params.arch.cond_vocab):
        raise ValueError(f"condition token out of range [0, {params.arch.cond_vocab})")
    return x_t, t, cond


def _forward(params: DenoiserParams, x_t, t, cond, T: int):
    arch = params.arch
    x_t, t, cond = _check_inputs(params, x_t, t, cond, T)
    embed = params.view("embed")
    h = np.concatenate([x_t, embed[cond], time_features(t, T, arch.time_embed_dim)], axis=1)
    acts = [h]
    for i in range(arch.n_layers):
        z = h @ params.view(f"W{i}").T + params.view(f"b{i}")
        h = np.tanh(z) if i < arch.n_layers - 1 else z
        acts.append(h)
    return acts, cond


def denoise_batch(params: DenoiserParams, x_t, t, cond, T: int) -> np.ndarray:
    """Noise prediction for a batch: ``x_t`` is ``(n, d)``; ``t`` and ``cond`` broadcast to ``(n,)``."""
    acts, _ = _forward(params, x_t, t, cond, T)
    return acts[-1]


def denoise(params: DenoiserParams, x_t, t: int, cond: int, T: int) -> np.ndarray:
    return denoise_batch(params, np.asarray(x_t, dtype=np.float64)[None, :], t, cond, T)[0]


def vjp_batch(params: DenoiserParams, x_t, t, cond, upstream, T: int) -> np.ndarray:
    """Gradient of ``sum_i upstream[i] . denoise(x_t[i], t[i], cond[i])`` w.r.t. the flat params."""
    arch = params.arch
    acts, cond = _forward(params, x_t, t, cond, T)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != acts[-1].shape:
        raise ValueError(f"upstream shape {upstream.shape} != output shape {acts[-1].shape}")
    grad = DenoiserParams(arch, np.zeros(arch.n_params))
    delta = upstream
    for i in reversed(range(arch.n_layers)):
        grad.view(f"W{i}")[...] = delta.T @ acts[i]
        grad.view(f"b{i}")[...] = delta.sum(axis=0)
        back = delta @ params.view(f"W{i}")
        delta = back * (1.0 - acts[i] ** 2) if i > 0 else back
    d, e = arch.data_dim, arch.cond_embed_dim
    np.add.at(grad.view("embed"), cond, delta[:, d:d + e])
    return grad.flat


def denoise_vjp(params: DenoiserParams, x_t, t: int, cond: int, upstream, T: int) -> np.ndarray:
    return vjp_batch(
        params,
        np.asarray(x_t, dtype=np.float64)[None, :],
        t,
        cond,
        np.asarray(upstream, dtype=np.float64)[None, :],
        T,
    )


def condition_coupling_indices(arch: Architecture) -> np.ndarray:
    """Flat positions of the embedding table and the input layer (where the condition enters)."""
    params = DenoiserParams(arch, np.zeros(arch.n_params))
    spans = [params.span(name) for name in ("embed", "W0", "b0")]
    return np.concatenate([np.arange(s.start, s.stop) for s in spans])


def save_checkpoint(params: DenoiserParams, path) -> None:
    arch = params.arch
    header = CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION)
    fields = [arch.data_dim, len(arch.hidden_dims), *arch.hidden_dims,
              arch.cond_vocab, arch.cond_embed_dim, arch.time_embed_dim]
    header += struct.pack(f"<{len(fields)}I", *fields)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + params.flat.astype("<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> DenoiserParams:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    data_dim, n_hidden = struct.unpack_from("<2I", blob, pos)
    pos += 8
    hidden = struct.unpack_from(f"<{n_hidden}I", blob, pos)
    pos += 4 * n_hidden
    vocab, cond_embed, time_embed = struct.unpack_from("<3I", blob, pos)
    pos += 12
    arch = Architecture(data_dim, tuple(hidden), vocab, cond_embed, time_embed)
    flat = np.frombuffer(blob, dtype="<f8", offset=pos)
    if flat.size != arch.n_params:
        raise ValueError(f"{path}: expected {arch.n_params} values, found {flat.size}")
    return DenoiserParams(arch, flat.astype(np.float64))

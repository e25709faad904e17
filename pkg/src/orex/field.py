"""The coordinate network: a residual MLP that refines an in/out logit.

Every query point is lifted with sinusoidal positional encoding and pushed
through the same MLP a fixed number of refinement steps. Each step receives
the encoded point, the current logit, and a small per-point hidden state,
and produces an additive logit update plus the next state. The first step
starts from a learned constant logit and a learned initial state, so an
untrained network is a constant field.

Training needs exact parameter gradients through the whole unrolled
recurrence, so forward passes can retain per-step caches that ``backward``
consumes. Everything is plain numpy and bitwise deterministic for a fixed
batch order.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .slices import Normalization

SOFTPLUS_SHARPNESS = 100.0

# |u| beyond cutoff/sharpness, softplus and its slope equal relu's within one
# ulp of the dtype, so the smooth branch only runs near the kink
_CUTOFF = {np.dtype(np.float32): 20.0, np.dtype(np.float64): 40.0}


class FieldNumericsError(FloatingPointError):
    """Non-finite value produced during field evaluation or training."""


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


@dataclass(frozen=True)
class EncodingConfig:
    """Sinusoidal positional encoding: sin/cos of 2^j * pi * x per axis."""

    n_frequencies: int = 8
    include_input: bool = True

    def __post_init__(self):
        if self.n_frequencies < 1:
            raise ValueError("need at least one encoding frequency")

    @property
    def dim(self) -> int:
        return 3 * int(self.include_input) + 6 * self.n_frequencies


@dataclass(frozen=True)
class FieldArch:
    depth: int = 6
    width: int = 128
    state_dim: int = 16
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    refine_steps: int = 10

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.state_dim < 0 or self.refine_steps < 1:
            raise ValueError(f"invalid architecture: {self}")

    @property
    def in_dim(self) -> int:
        return self.encoding.dim + 1 + self.state_dim

    @property
    def out_dim(self) -> int:
        return 1 + self.state_dim

    def layer_shapes(self) -> list:
        dims = [self.in_dim] + [self.width] * self.depth + [self.out_dim]
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]


@dataclass(eq=False)
class FieldParams:
    """All trainable arrays. ``weights``/``biases`` run input to output;
    the last pair is the linear head producing (logit update, next state)."""

    arch: FieldArch
    weights: list
    biases: list
    init_logit: np.ndarray  # shape (1,)
    init_state: np.ndarray  # shape (state_dim,)

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype

    def flat_arrays(self) -> list:
        """Canonical parameter order: W_0, b_0, ..., W_last, b_last,
        init_logit, init_state. Checkpoints serialize in this order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        out.append(self.init_logit)
        out.append(self.init_state)
        return out

    def copy(self) -> "FieldParams":
        return FieldParams(
            self.arch,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.init_logit.copy(),
            self.init_state.copy(),
        )

    def astype(self, dtype) -> "FieldParams":
        return FieldParams(
            self.arch,
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            self.init_logit.astype(dtype),
            self.init_state.astype(dtype),
        )

    def check_finite(self) -> None:
        for arr in self.flat_arrays():
            if not np.all(np.isfinite(arr)):
                raise FieldNumericsError("non-finite parameter value")


def init_params(arch: FieldArch, rng: np.random.Generator, dtype=np.float32) -> FieldParams:
    """Fan-in-scaled uniform init; the head is shrunk so early refinement
    updates are small and the field starts near the learned constant."""
    weights, biases = [], []
    shapes = arch.layer_shapes()
    for li, (fan_in, fan_out) in enumerate(shapes):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if li == len(shapes) - 1:
            w *= 0.1
        weights.append(w.astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return FieldParams(
        arch,
        weights,
        biases,
        init_logit=np.zeros(1, dtype=dtype),
        init_state=np.zeros(arch.state_dim, dtype=dtype),
    )


def positional_encoding(x: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    """Encode (n, 3) points: optional raw prefix, then per frequency j the
    blocks sin(2^j pi x) and cos(2^j pi x), three columns each."""
    x = np.atleast_2d(np.asarray(x))
    parts = [x] if cfg.include_input else []
    for j in range(cfg.n_frequencies):
        arg = (2.0**j * np.pi) * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=1)


def _activation(u: np.ndarray):
    """Sharpened softplus and its slope, exact to one ulp outside the kink."""
    s = u.dtype.type(SOFTPLUS_SHARPNESS)
    cutoff = _CUTOFF[u.dtype] / SOFTPLUS_SHARPNESS
    act = np.maximum(u, 0)
    slope = (u > 0).astype(u.dtype)
    near = np.abs(u) < cutoff
    if np.any(near):
        un = u[near] * s
        act[near] += np.log1p(np.exp(-np.abs(un))) / s
        slope[near] = expit(un)
    return act, slope


@dataclass(eq=False)
class FieldOutput:
    logits: np.ndarray  # (batch, n_steps) logit after each refinement step
    hidden: np.ndarray  # (batch, state_dim) final state
    cache: Optional[list] = None

    @property
    def final(self) -> np.ndarray:
        return self.logits[:, -1]


def forward(
    params: FieldParams,
    points: np.ndarray,
    n_steps: Optional[int] = None,
    want_cache: bool = False,
) -> FieldOutput:
    """Run the refinement recurrence; step i adds the MLP's logit update to
    the running logit. Truncating ``n_steps`` reproduces a prefix of the
    full run exactly."""
    arch = params.arch
    n_steps = arch.refine_steps if n_steps is None else n_steps
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    dtype = params.dtype
    points = np.asarray(points, dtype=dtype)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be (n, 3), got {points.shape}")
    encoded = positional_encoding(points, arch.encoding).astype(dtype, copy=False)

    batch = len(points)
    logit = np.full(batch, params.init_logit[0], dtype=dtype)
    state = np.repeat(params.init_state[None, :], batch, axis=0)
    logits = np.empty((batch, n_steps), dtype=dtype)
    cache = [] if want_cache else None

    for i in range(n_steps):
        z = np.concatenate([encoded, logit[:, None], state], axis=1)
        feats = [z]
        slopes = []
        a = z
        for w, b in zip(params.weights[:-1], params.biases[:-1]):
            a, slope = _activation(a @ w + b)
            feats.append(a)
            slopes.append(slope)
        out = a @ params.weights[-1] + params.biases[-1]
        logit = logit + out[:, 0]
        state = out[:, 1:]
        logits[:, i] = logit
        if cache is not None:
            cache.append((feats, slopes))

    if not np.all(np.isfinite(logits)) or not np.all(np.isfinite(state)):
        raise FieldNumericsError(_diagnose_nonfinite(logits, cache))
    return FieldOutput(logits, state, cache)


def _diagnose_nonfinite(logits: np.ndarray, cache) -> str:
    bad_step = int(np.argmax(~np.isfinite(logits).all(axis=0)))
    msg = f"non-finite logit at refinement step {bad_step}"
    if cache is not None and bad_step < len(cache):
        feats, _ = cache[bad_step]
        for li, a in enumerate(feats):
            if not np.all(np.isfinite(a)):
                return f"{msg}, first bad layer input {li}"
    return msg


def backward(params: FieldParams, output: FieldOutput, d_logits: np.ndarray) -> FieldParams:
    """Exact reverse-mode gradients of sum_i d_logits[:, i] * logit_i with
    respect to every parameter, accumulated through all refinement steps.
    Returns a FieldParams-shaped gradient container."""
    if output.cache is None:
        raise ValueError("forward(..., want_cache=True) output is required")
    arch = params.arch
    dtype = params.dtype
    n_steps = len(output.cache)
    d_logits = np.asarray(d_logits, dtype=dtype)
    if d_logits.shape != output.logits.shape:
        raise ValueError(f"d_logits shape {d_logits.shape} != {output.logits.shape}")

    g_weights = [np.zeros_like(w) for w in params.weights]
    g_biases = [np.zeros_like(b) for b in params.biases]
    batch = d_logits.shape[0]
    d_logit = np.zeros(batch, dtype=dtype)
    d_state = np.zeros((batch, arch.state_dim), dtype=dtype)
    enc_dim = arch.encoding.dim

    for i in range(n_steps - 1, -1, -1):
        feats, slopes = output.cache[i]
        d_logit = d_logit + d_logits[:, i]
        d_out = np.concatenate([d_logit[:, None], d_state], axis=1)
        g_weights[-1] += feats[-1].T @ d_out
        g_biases[-1] += d_out.sum(axis=0)
        d_a = d_out @ params.weights[-1].T
        for li in range(arch.depth - 1, -1, -1):
            d_u = d_a * slopes[li]
            g_weights[li] += feats[li].T @ d_u
            g_biases[li] += d_u.sum(axis=0)
            d_a = d_u @ params.weights[li].T
        # d_a is now the gradient at the step input [encoding, logit, state];
        # the logit also feeds the next step through the residual connection
        d_logit = d_logit + d_a[:, enc_dim]
        d_state = d_a[:, enc_dim + 1 :]

    return FieldParams(
        arch,
        g_weights,
        g_biases,
        init_logit=np.array([d_logit.sum()], dtype=dtype),
        init_state=d_state.sum(axis=0).astype(dtype),
    )


# ---------------------------------------------------------------------------
# Optimizer


@dataclass(eq=False)
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def for_params(cls, arrays: list) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(
    arrays: list,
    grads: list,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, applied to ``arrays`` in place."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FieldNumericsError("non-finite gradient entry in optimizer step")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        a -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# Trained model wrapper and checkpoint format


@dataclass(eq=False)
class FieldModel:
    """Trained field plus the domain bookkeeping needed to use it: the
    raw-to-normalized transform and the grid bounds that cover the shape."""

    params: FieldParams
    normalization: Optional[Normalization] = None
    diag: Optional[float] = None
    grid_bounds: Optional[tuple] = None  # (lo, hi) in normalized units

    @property
    def arch(self) -> FieldArch:
        return self.params.arch

    def evaluate(self, points: np.ndarray, batch_size: int = 65536) -> np.ndarray:
        """Final-step logits at normalized points, as float64, batched."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.empty(len(points), dtype=np.float64)
        for s in range(0, len(points), batch_size):
            out[s : s + batch_size] = forward(self.params, points[s : s + batch_size]).final
        return out

    def evaluate_steps(self, points: np.ndarray, batch_size: int = 65536) -> np.ndarray:
        """(n, refine_steps) logits after every refinement step, float64."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.empty((len(points), self.arch.refine_steps), dtype=np.float64)
        for s in range(0, len(points), batch_size):
            out[s : s + batch_size] = forward(self.params, points[s : s + batch_size]).logits
        return out


_MAGIC = b"OREX"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIII")  # magic, version, depth, width, state, freqs, include, steps
_DOMAIN = struct.Struct("<B13d")  # flag, scale, center*3, diag, lo*3, hi*3, pad*2


def save_checkpoint(model: FieldModel, path) -> None:
    """Binary checkpoint: header with hyperparameters, optional domain block,
    parameters as little-endian float32 in flat_arrays() order, CRC32 tail."""
    arch = model.arch
    header = _HEADER.pack(
        _MAGIC,
        _VERSION,
        arch.depth,
        arch.width,
        arch.state_dim,
        arch.encoding.n_frequencies,
        int(arch.encoding.include_input),
        arch.refine_steps,
    )
    if model.normalization is not None:
        lo, hi = model.grid_bounds if model.grid_bounds is not None else ((0.0,) * 3, (0.0,) * 3)
        domain = _DOMAIN.pack(
            1,
            model.normalization.scale,
            *np.asarray(model.normalization.center, dtype=np.float64),
            model.diag if model.diag is not None else 0.0,
            *np.asarray(lo, dtype=np.float64),
            *np.asarray(hi, dtype=np.float64),
            0.0,
            0.0,
        )
    else:
        domain = _DOMAIN.pack(0, *([0.0] * 13))
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes() for a in model.params.flat_arrays()
    )
    body = header + domain + payload
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path) -> FieldModel:
    raw = open(path, "rb").read()
    if len(raw) < _HEADER.size + _DOMAIN.size + 4:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    magic, version, depth, width, state_dim, freqs, include, steps = _HEADER.unpack_from(body, 0)
    if magic != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (reader version {_VERSION})"
        )
    arch = FieldArch(
        depth=depth,
        width=width,
        state_dim=state_dim,
        encoding=EncodingConfig(n_frequencies=freqs, include_input=bool(include)),
        refine_steps=steps,
    )
    fields = _DOMAIN.unpack_from(body, _HEADER.size)
    offset = _HEADER.size + _DOMAIN.size
    arrays = []
    shapes = [s for pair in arch.layer_shapes() for s in (pair, (pair[1],))]
    shapes += [(1,), (arch.state_dim,)]
    for shape in shapes:
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(body):
            raise CheckpointError(f"{path}: parameter payload shorter than architecture implies")
        arrays.append(np.frombuffer(body, dtype="<f4", count=count, offset=offset).reshape(shape).copy())
        offset = end
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes in payload")

    params = FieldParams(
        arch,
        weights=arrays[0 : 2 * (arch.depth + 1) : 2],
        biases=arrays[1 : 2 * (arch.depth + 1) : 2],
        init_logit=arrays[-2],
        init_state=arrays[-1],
    )
    model = FieldModel(params)
    if fields[0]:
        model.normalization = Normalization(np.array(fields[2:5]), fields[1])
        model.diag = fields[5]
        model.grid_bounds = (np.array(fields[6:9]), np.array(fields[9:12]))
    return model

"""The recursive single-convolution classifier and its residual variant.

One convolutional filter bank is applied T times to the channel-padded
input.  Each iteration applies the shared convolution, the activation, a
shortcut sum, a per-iteration batch norm, and the scheduled downsampling:

    plain     x_{t+1} = D_t[ BN_t( x_t + act(conv(x_t)) ) ]
    residual  x_{t+1} = D_t[ BN_t( act(conv(x_t)) + sum_i alpha[t,i] * x_{t-i} ) ]

with lags restricted to t-i >= 0.  The head is a global max pool followed by
a fully connected layer.  Both variants normalize the shortcut sum before
pooling, so masking the residual sum to a unit lag-0 coefficient reproduces
the plain recursion bit for bit.  Whenever a downsampling fires, every
stored history entry is pooled as well, keeping all lags at the resolution
of the newest activation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigurationError
from .tensor import (
    BatchNormState,
    ConvKernel,
    MacTally,
    Tape,
    Value,
    add,
    add_scaled,
    batchnorm,
    channel_pad,
    check_tensor4,
    conv2d,
    global_max_pool,
    grouped_conv,
    linear,
    maxpool2x2,
    relu,
    reshape,
    tanh_act,
)

DownsampleSchedule = tuple[int, ...]

CONV_MODES = ("classical", "grouped")
ACTIVATIONS = ("relu", "tanh")


def validate_schedule(schedule, iterations: int) -> DownsampleSchedule:
    factors = tuple(int(d) for d in schedule)
    if len(factors) != iterations:
        raise ConfigurationError(
            f"schedule has {len(factors)} entries, expected iterations={iterations}"
        )
    if any(d not in (1, 2) for d in factors):
        raise ConfigurationError(f"schedule entries must be 1 or 2, got {factors}")
    return factors


@dataclass(frozen=True)
class ThriftyConfig:
    """Complete architecture description."""

    filters: int
    iterations: int
    schedule: DownsampleSchedule
    history: int = 0
    kernel: tuple[int, int] = (3, 3)
    conv_mode: str = "classical"
    activation: str = "relu"
    num_classes: int = 10
    input_channels: int = 3

    def __post_init__(self) -> None:
        if self.filters < 1 or self.iterations < 1:
            raise ConfigurationError("filters and iterations must be positive")
        if self.history < 0:
            raise ConfigurationError(f"history must be >= 0, got {self.history}")
        a, b = self.kernel
        if a < 1 or b < 1 or a % 2 == 0 or b % 2 == 0:
            raise ConfigurationError(f"kernel must have odd positive sides, got {a}x{b}")
        if self.conv_mode not in CONV_MODES:
            raise ConfigurationError(f"conv_mode must be one of {CONV_MODES}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be positive")
        if not 1 <= self.input_channels <= self.filters:
            raise ConfigurationError(
                f"input_channels={self.input_channels} must lie in [1, filters={self.filters}]"
            )
        object.__setattr__(
            self, "schedule", validate_schedule(self.schedule, self.iterations)
        )

    @property
    def residual(self) -> bool:
        return self.history >= 1

    @property
    def n_pools(self) -> int:
        return self.schedule.count(2)


@dataclass
class ForwardRecord:
    """Per-iteration channel means collected during a forward pass."""

    post_means: list[np.ndarray] = field(default_factory=list)  # mean of x_{t+1}
    act_means: list[np.ndarray] = field(default_factory=list)   # mean of act(conv(x_t))
    shapes: list[tuple[int, ...]] = field(default_factory=list)


def _glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                    fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ThriftyNet:
    """Model instance: a config plus its parameters and batch-norm state."""

    def __init__(self, config: ThriftyConfig, seed: int = 0, dtype=np.float32,
                 alpha_init: str = "identity"):
        self.config = config
        self.dtype = np.dtype(dtype)
        f = config.filters
        a, b = config.kernel
        rng = np.random.default_rng(seed)
        # Draw order is part of the checkpoint/replay contract: conv weights,
        # FC weights, then alpha, so that the alpha_init choice never shifts
        # the stream behind the shared weights.
        if config.conv_mode == "classical":
            w = _glorot_uniform(rng, (f, f, a, b), f * a * b, f * a * b, self.dtype)
            self.conv = ConvKernel(Value(w), groups=1)
            self.depthwise = None
            self.pointwise = None
        else:
            dw = _glorot_uniform(rng, (f, 1, a, b), a * b, a * b, self.dtype)
            pw = _glorot_uniform(rng, (f, f, 1, 1), f, f, self.dtype)
            self.conv = None
            self.depthwise = ConvKernel(Value(dw), groups=f)
            self.pointwise = ConvKernel(Value(pw), groups=1)
        self.bn = [BatchNormState.create(f, self.dtype) for _ in range(config.iterations)]
        self.fc_w = Value(
            _glorot_uniform(rng, (f, config.num_classes), f, config.num_classes, self.dtype)
        )
        self.fc_b = Value(np.zeros(config.num_classes, dtype=self.dtype))
        if config.residual:
            if alpha_init == "identity":
                alpha = np.zeros((config.iterations, config.history + 1), dtype=self.dtype)
                alpha[:, 0] = 1.0
            elif alpha_init == "uniform":
                alpha = rng.uniform(
                    0.0, 1.0, size=(config.iterations, config.history + 1)
                ).astype(self.dtype)
            else:
                raise ConfigurationError(
                    f"alpha_init must be 'identity' or 'uniform', got {alpha_init!r}"
                )
            self.alpha: Value | None = Value(alpha)
        else:
            self.alpha = None

    # -- parameter bookkeeping ------------------------------------------------

    def trainables(self) -> list[tuple[str, Value]]:
        """Named trainables in the fixed checkpoint/optimizer order."""
        params: list[tuple[str, Value]] = []
        if self.conv is not None:
            params.append(("conv_w", self.conv.weights))
        else:
            params.append(("conv_dw", self.depthwise.weights))
            params.append(("conv_pw", self.pointwise.weights))
        for t, state in enumerate(self.bn):
            params.append((f"gamma_{t}", state.gamma))
            params.append((f"beta_{t}", state.beta))
        if self.alpha is not None:
            params.append(("alpha", self.alpha))
        params.append(("fc_w", self.fc_w))
        params.append(("fc_b", self.fc_b))
        return params

    def trainable_count(self) -> int:
        return sum(v.data.size for _, v in self.trainables())

    def state_arrays(self) -> list[np.ndarray]:
        """Every array whose bits define the model: trainables + running stats."""
        arrays = [v.data for _, v in self.trainables()]
        for state in self.bn:
            arrays.append(state.running_mean)
            arrays.append(state.running_var)
        return arrays

    # -- forward passes --------------------------------------------------------

    def _conv_step(self, x: Value, tape, tally) -> Value:
        if self.conv is not None:
            return conv2d(x, self.conv, tape=tape, tally=tally)
        return grouped_conv(x, self.depthwise, self.pointwise, tape=tape, tally=tally)

    def _activate(self, x: Value, tape) -> Value:
        if self.config.activation == "relu":
            return relu(x, tape=tape)
        return tanh_act(x, tape=tape)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        check_tensor4(x)
        cfg = self.config
        if x.shape[1] != cfg.input_channels:
            raise ConfigurationError(
                f"expected {cfg.input_channels} input channels, got {x.shape[1]}"
            )
        if x.shape[1] > cfg.filters:
            raise ConfigurationError(
                f"input channels {x.shape[1]} exceed filters {cfg.filters}"
            )
        if 2 ** cfg.n_pools > min(x.shape[2], x.shape[3]):
            raise ConfigurationError(
                f"schedule performs {cfg.n_pools} halvings but input is only "
                f"{x.shape[2]}x{x.shape[3]}"
            )
        return np.ascontiguousarray(x, dtype=self.dtype)

    def forward(self, x: np.ndarray, mode: str = "train", tape: Tape | None = None,
                tally: MacTally | None = None,
                record: ForwardRecord | None = None) -> Value:
        """Run the recursion; returns the (N, K) class scores as a Value."""
        cfg = self.config
        cur = channel_pad(Value(self._check_input(x)), cfg.filters, tape=tape)
        if cfg.residual:
            cur = self._iterate_residual(cur, mode, tape, tally, record)
        else:
            cur = self._iterate_plain(cur, mode, tape, tally, record)
        pooled = global_max_pool(cur, tape=tape)
        flat = reshape(pooled, (pooled.data.shape[0], cfg.filters), tape=tape)
        if tally is not None:
            tally.begin_head()
        return linear(flat, self.fc_w, self.fc_b, tape=tape, tally=tally)

    def _iterate_plain(self, cur: Value, mode, tape, tally, record) -> Value:
        cfg = self.config
        for t in range(cfg.iterations):
            if tally is not None:
                tally.begin_iteration()
            a = self._activate(self._conv_step(cur, tape, tally), tape)
            if record is not None:
                record.act_means.append(a.data.mean(axis=(0, 2, 3)))
            u = add(cur, a, tape=tape)
            v = batchnorm(u, self.bn[t], mode, tape=tape)
            if cfg.schedule[t] == 2:
                v = maxpool2x2(v, tape=tape)
            cur = v
            if record is not None:
                record.post_means.append(cur.data.mean(axis=(0, 2, 3)))
                record.shapes.append(cur.data.shape)
        return cur

    def _iterate_residual(self, cur: Value, mode, tape, tally, record) -> Value:
        cfg = self.config
        history: list[Value] = [cur]  # history[i] = x_{t-i}, newest first
        for t in range(cfg.iterations):
            if tally is not None:
                tally.begin_iteration()
            a = self._activate(self._conv_step(cur, tape, tally), tape)
            if record is not None:
                record.act_means.append(a.data.mean(axis=(0, 2, 3)))
            u = a
            for i in range(min(t, cfg.history) + 1):  # lags with t - i >= 0
                u = add_scaled(u, history[i], self.alpha, (t, i), tape=tape)
            v = batchnorm(u, self.bn[t], mode, tape=tape)
            keep = history[: cfg.history]  # entries still reachable next step
            if cfg.schedule[t] == 2:
                v = maxpool2x2(v, tape=tape)
                keep = [maxpool2x2(h, tape=tape) for h in keep]
            cur = v
            history = [cur, *keep]
            if record is not None:
                record.post_means.append(cur.data.mean(axis=(0, 2, 3)))
                record.shapes.append(cur.data.shape)
        return cur


def mean_activations(model: ThriftyNet, images: np.ndarray,
                     batch_size: int = 256) -> np.ndarray:
    """(T, f) matrix: mean of x_{t+1} per channel over a dataset, eval mode.

    Spatial resolutions differ across iterations, so each row is the mean
    over batch and its own spatial grid, weighted by sample count across
    batches.
    """
    cfg = model.config
    total = np.zeros((cfg.iterations, cfg.filters), dtype=np.float64)
    seen = 0
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start : start + batch_size]
        rec = ForwardRecord()
        model.forward(chunk, mode="eval", record=rec)
        total += chunk.shape[0] * np.stack(rec.post_means)
        seen += chunk.shape[0]
    return (total / seen).astype(model.dtype)


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------
#
# Little-endian throughout.
#
#   magic   8 bytes  b"THRIFTY1"
#   u8      dtype code: 4 = float32, 8 = float64
#   u8      conv_mode: 0 = classical, 1 = grouped
#   u8      activation: 0 = relu, 1 = tanh
#   u8      reserved (0)
#   u32 x7  filters, kernel_a, kernel_b, iterations, history,
#           num_classes, input_channels
#   u8 x T  schedule factors
#
# then raw tensors in fixed order: conv weights (classical: one tensor;
# grouped: depthwise then pointwise), per iteration gamma/beta/
# running_mean/running_var, alpha row-major (residual only), FC weights
# row-major, FC bias.

CHECKPOINT_MAGIC = b"THRIFTY1"
_HEADER = struct.Struct("<8s4B7I")
_DTYPE_CODES = {4: np.dtype(np.float32), 8: np.dtype(np.float64)}


def _model_tensors(model: ThriftyNet) -> list[np.ndarray]:
    tensors = []
    if model.conv is not None:
        tensors.append(model.conv.weights.data)
    else:
        tensors.append(model.depthwise.weights.data)
        tensors.append(model.pointwise.weights.data)
    for state in model.bn:
        tensors.extend([state.gamma.data, state.beta.data,
                        state.running_mean, state.running_var])
    if model.alpha is not None:
        tensors.append(model.alpha.data)
    tensors.extend([model.fc_w.data, model.fc_b.data])
    return tensors


def serialize_model(model: ThriftyNet) -> bytes:
    cfg = model.config
    dtype_code = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}[model.dtype]
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        dtype_code,
        CONV_MODES.index(cfg.conv_mode),
        ACTIVATIONS.index(cfg.activation),
        0,
        cfg.filters,
        cfg.kernel[0],
        cfg.kernel[1],
        cfg.iterations,
        cfg.history,
        cfg.num_classes,
        cfg.input_channels,
    )
    parts = [header, bytes(cfg.schedule)]
    for tensor in _model_tensors(model):
        parts.append(np.ascontiguousarray(tensor, dtype=model.dtype).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes, offset: int = 0):
        self.blob = blob
        self.offset = offset

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise CheckpointError(
                f"checkpoint truncated: wanted {n} bytes at offset {self.offset}, "
                f"file has {len(self.blob)}"
            )
        chunk = self.blob[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def array(self, shape: tuple[int, ...], dtype: np.dtype) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.take(count * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def deserialize_model(blob: bytes) -> tuple[ThriftyNet, int]:
    """Rebuild a model from bytes; returns (model, bytes consumed)."""
    reader = _Reader(blob)
    try:
        (magic, dtype_code, mode_code, act_code, _reserved, f, a, b, t, h,
         num_classes, input_channels) = _HEADER.unpack(reader.take(_HEADER.size))
    except struct.error as exc:  # pragma: no cover - take() normally fires first
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if dtype_code not in _DTYPE_CODES:
        raise CheckpointError(f"unknown dtype code {dtype_code}")
    if mode_code >= len(CONV_MODES) or act_code >= len(ACTIVATIONS):
        raise CheckpointError("unknown conv mode or activation code")
    dtype = _DTYPE_CODES[dtype_code]
    schedule = tuple(reader.take(t))
    config = ThriftyConfig(
        filters=f,
        iterations=t,
        schedule=schedule,
        history=h,
        kernel=(a, b),
        conv_mode=CONV_MODES[mode_code],
        activation=ACTIVATIONS[act_code],
        num_classes=num_classes,
        input_channels=input_channels,
    )
    model = ThriftyNet(config, seed=0, dtype=dtype)
    if model.conv is not None:
        model.conv.weights.data = reader.array((f, f, a, b), dtype)
    else:
        model.depthwise.weights.data = reader.array((f, 1, a, b), dtype)
        model.pointwise.weights.data = reader.array((f, f, 1, 1), dtype)
    for state in model.bn:
        state.gamma.data = reader.array((f,), dtype)
        state.beta.data = reader.array((f,), dtype)
        state.running_mean = reader.array((f,), dtype)
        state.running_var = reader.array((f,), dtype)
    if model.alpha is not None:
        model.alpha.data = reader.array((t, h + 1), dtype)
    model.fc_w.data = reader.array((f, num_classes), dtype)
    model.fc_b.data = reader.array((num_classes,), dtype)
    return model, reader.offset


def save_model(model: ThriftyNet, path) -> None:
    Path(path).write_bytes(serialize_model(model))


def load_model(path) -> ThriftyNet:
    blob = Path(path).read_bytes()
    model, consumed = deserialize_model(blob)
    if consumed != len(blob):
        raise CheckpointError(
            f"checkpoint has {len(blob) - consumed} trailing bytes"
        )
    return model

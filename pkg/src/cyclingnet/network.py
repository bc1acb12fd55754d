"""CyclingNet and its baseline variants built on :mod:`cyclingnet.tensor_autograd`.

Default architecture (``sa_bi_cnn_lstm``)::

    240x320x3 -> conv 24@5x5/2 -> conv 36@5x5/2 -> pool -> bn
              -> conv 48@5x5/2 -> conv 64@3x3/1 -> pool -> bn
              -> conv 128@3x3/1 -> pool -> bn          (1x2x128)
              -> reshape 2x128 -> BiLSTM 2x512 -> self-attention 2x1024 -> dropout
              -> flatten 2048 -> dense 256 -> dropout -> dense 64 -> dropout -> dense 1 (sigmoid)

All convolutions are valid (unpadded) and ReLU-activated.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor_autograd as ta
from .tensor_autograd import Parameter, Tensor

VARIANTS = ("cnn", "cnn_lstm", "sa_cnn_lstm", "sa_bi_cnn_lstm")
ATTENTION_MODES = ("table_count", "additive")
CANDIDATES = ("tanh", "sigmoid")

WEIGHT_MAGIC = b"CYNW"
WEIGHT_VERSION = 1


class WeightFormatError(ValueError):
    pass


class WeightMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "sa_bi_cnn_lstm"
    attention_mode: str = "table_count"
    lstm_candidate: str = "tanh"
    lstm_hidden: int = 512
    attention_units: int = 512
    dense_widths: tuple[int, ...] = (256, 64)
    dropout: float = 0.3
    seed: int = 0
    input_shape: tuple[int, int, int] = (240, 320, 3)
    conv_filters: tuple[int, ...] = (24, 36, 48, 64, 128)
    conv_kernels: tuple[int, ...] = (5, 5, 5, 3, 3)
    conv_strides: tuple[int, ...] = (2, 2, 2, 1, 1)
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-3
    forget_bias: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"unknown attention_mode {self.attention_mode!r}")
        if self.lstm_candidate not in CANDIDATES:
            raise ValueError(f"unknown lstm_candidate {self.lstm_candidate!r}")
        if not (len(self.conv_filters) == len(self.conv_kernels) == len(self.conv_strides) == 5):
            raise ValueError("exactly five convolution layers are configured")
        if self.lstm_hidden < 1 or self.attention_units < 1 or not self.dense_widths:
            raise ValueError("layer widths must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @classmethod
    def shrunken(cls, **overrides) -> "ModelConfig":
        """Same layer types on a 24x32 input; small enough for exhaustive checks."""
        base = dict(input_shape=(24, 32, 3), conv_filters=(4, 4, 6, 6, 8),
                    conv_kernels=(3, 3, 2, 2, 3), conv_strides=(1, 1, 1, 1, 1),
                    lstm_hidden=6, attention_units=4, dense_widths=(8, 4))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# recurrent and attention primitives


@dataclass
class LstmParams:
    """Gate weights: forget (f), input (g), output (o) and cell candidate (c).

    ``U_*`` act on the input (input_dim, hidden), ``W_*`` on the previous
    hidden state (hidden, hidden), ``b_*`` are (hidden,) biases.
    """

    U_f: Tensor
    W_f: Tensor
    b_f: Tensor
    U_g: Tensor
    W_g: Tensor
    b_g: Tensor
    U_o: Tensor
    W_o: Tensor
    b_o: Tensor
    U_c: Tensor
    W_c: Tensor
    b_c: Tensor

    GATES = ("f", "g", "o", "c")

    @property
    def hidden(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.U_f.shape[0]

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f"{kind}_{gate}") for gate in self.GATES for kind in "UWb"]

    @classmethod
    def create(cls, input_dim: int, hidden: int, rng: np.random.Generator, prefix: str = "",
               forget_bias: float = 1.0, dtype=np.float32) -> "LstmParams":
        params = {}
        for gate in cls.GATES:
            params[f"U_{gate}"] = Parameter(ta.he_normal_init((input_dim, hidden), input_dim, rng, dtype).data,
                                            name=f"{prefix}U_{gate}")
            params[f"W_{gate}"] = Parameter(ta.he_normal_init((hidden, hidden), hidden, rng, dtype).data,
                                            name=f"{prefix}W_{gate}")
            bias = np.full(hidden, forget_bias if gate == "f" else 0.0, dtype=dtype)
            params[f"b_{gate}"] = Parameter(bias, name=f"{prefix}b_{gate}")
        return cls(**params)

    @classmethod
    def zeros(cls, input_dim: int, hidden: int, dtype=np.float32) -> "LstmParams":
        params = {}
        for gate in cls.GATES:
            params[f"U_{gate}"] = Tensor(np.zeros((input_dim, hidden), dtype))
            params[f"W_{gate}"] = Tensor(np.zeros((hidden, hidden), dtype))
            params[f"b_{gate}"] = Tensor(np.zeros(hidden, dtype))
        return cls(**params)


def lstm_param_count(input_dim: int, hidden: int) -> int:
    return 4 * hidden * (input_dim + hidden + 1)


def lstm_cell(x_t: Tensor, h_prev: Tensor, s_prev: Tensor, params: LstmParams,
              candidate: str = "tanh") -> tuple[Tensor, Tensor]:
    """One LSTM step; returns (h_t, s_t).

    f, g, q = sigmoid(b + x U + h W) for the forget, input and output gates;
    s_t = f * s_prev + g * cand(b + x U + h W); h_t = tanh(s_t) * q.
    """
    def affine(gate):
        return (ta.matmul(x_t, getattr(params, f"U_{gate}"))
                + ta.matmul(h_prev, getattr(params, f"W_{gate}"))
                + getattr(params, f"b_{gate}"))

    forget = ta.sigmoid(affine("f"))
    inp = ta.sigmoid(affine("g"))
    out = ta.sigmoid(affine("o"))
    cand = ta.activate(affine("c"), candidate)
    s_t = forget * s_prev + inp * cand
    h_t = ta.tanh(s_t) * out
    return h_t, s_t


def lstm_sequence(sequence: Tensor, params: LstmParams, candidate: str = "tanh",
                  reverse: bool = False) -> list[Tensor]:
    """Run a (batch, T, features) sequence; returns hidden states indexed by time step."""
    batch, steps = sequence.shape[0], sequence.shape[1]
    h = Tensor(np.zeros((batch, params.hidden), dtype=sequence.dtype))
    s = Tensor(np.zeros((batch, params.hidden), dtype=sequence.dtype))
    hidden: list[Optional[Tensor]] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        h, s = lstm_cell(sequence[:, t, :], h, s, params, candidate)
        hidden[t] = h
    return hidden


def bilstm(sequence: Tensor, forward_params: LstmParams, backward_params: LstmParams,
           candidate: str = "tanh") -> Tensor:
    """(batch, T, d) -> (batch, T, 2*hidden): forward and backward states concatenated per step."""
    if sequence.shape[1] < 1:
        raise ValueError("sequence must have at least one step")
    fwd = lstm_sequence(sequence, forward_params, candidate)
    bwd = lstm_sequence(sequence, backward_params, candidate, reverse=True)
    return ta.stack([ta.concat([f, b], axis=-1) for f, b in zip(fwd, bwd)], axis=1)


@dataclass
class AttentionParams:
    """``table_count``: score matrix M (d, d) and scalar bias.
    ``additive``: W_t, W_x (d, u), b_h (u,), W_a (u, 1), b_a (1,)."""

    mode: str
    M: Optional[Tensor] = None
    bias: Optional[Tensor] = None
    W_t: Optional[Tensor] = None
    W_x: Optional[Tensor] = None
    b_h: Optional[Tensor] = None
    W_a: Optional[Tensor] = None
    b_a: Optional[Tensor] = None

    def tensors(self) -> list[Tensor]:
        names = ("M", "bias") if self.mode == "table_count" else ("W_t", "W_x", "b_h", "W_a", "b_a")
        return [getattr(self, n) for n in names]

    @classmethod
    def create(cls, d: int, mode: str, units: int, rng: np.random.Generator, prefix: str = "",
               dtype=np.float32) -> "AttentionParams":
        def weight(shape, fan_in, name):
            return Parameter(ta.he_normal_init(shape, fan_in, rng, dtype).data, name=prefix + name)

        def zero(shape, name):
            return Parameter(np.zeros(shape, dtype), name=prefix + name)

        if mode == "table_count":
            return cls(mode, M=weight((d, d), d, "M"), bias=zero((1,), "bias"))
        if mode == "additive":
            return cls(mode, W_t=weight((d, units), d, "W_t"), W_x=weight((d, units), d, "W_x"),
                       b_h=zero((units,), "b_h"), W_a=weight((units, 1), units, "W_a"),
                       b_a=zero((1,), "b_a"))
        raise ValueError(f"unknown attention mode {mode!r}")


def attention_param_count(d: int, mode: str, units: int) -> int:
    return d * d + 1 if mode == "table_count" else 2 * d * units + units + units + 1


def self_attention(sequence: Tensor, params: AttentionParams,
                   return_weights: bool = False):
    """Contexts l_t = sum_t' a[t, t'] x_t' with a = softmax over t' of the scores.

    ``table_count`` scores are bilinear, x_t^T M x_t' + bias. ``additive``
    scores are sigmoid(W_a . tanh(x_t W_t + x_t' W_x + b_h) + b_a).
    """
    batch, steps, d = sequence.shape
    if steps < 1:
        raise ValueError("sequence must have at least one step")
    keys_t = ta.transpose(sequence, (0, 2, 1))
    if params.mode == "table_count":
        scores = ta.matmul(ta.matmul(sequence, params.M), keys_t) + params.bias
    else:
        units = params.W_t.shape[1]
        query = ta.reshape(ta.matmul(sequence, params.W_t), (batch, steps, 1, units))
        key = ta.reshape(ta.matmul(sequence, params.W_x), (batch, 1, steps, units))
        hidden = ta.tanh(query + key + params.b_h)
        scores = ta.reshape(ta.sigmoid(ta.matmul(hidden, params.W_a) + params.b_a),
                            (batch, steps, steps))
    weights = ta.softmax(scores, axis=-1)
    contexts = ta.matmul(weights, sequence)
    return (contexts, weights) if return_weights else contexts


# ---------------------------------------------------------------------------
# layers


class Layer:
    kind = "Layer"

    def __init__(self, name: str):
        self.name = name

    def parameters(self) -> list[Parameter]:
        return []

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def forward(self, x: Tensor, training: bool, rng: np.random.Generator) -> Tensor:
        raise NotImplementedError


class Conv2D(Layer):
    kind = "Conv2D"

    def __init__(self, name, channels, filters, kernel, stride, rng, dtype=np.float32):
        super().__init__(name)
        self.stride = stride
        fan_in = kernel * kernel * channels
        self.kernel = Parameter(ta.he_normal_init((kernel, kernel, channels, filters), fan_in, rng,
                                                  dtype).data, name=f"{name}/kernel")
        self.bias = Parameter(np.zeros(filters, dtype), name=f"{name}/bias")

    def parameters(self):
        return [self.kernel, self.bias]

    def output_shape(self, shape):
        h, w, _ = shape
        kh, kw, _, f = self.kernel.shape
        out = (ta.conv_output_size(h, kh, self.stride), ta.conv_output_size(w, kw, self.stride), f)
        if min(out[:2]) < 1:
            raise ValueError(f"{self.name}: kernel {kh}x{kw} does not fit input {shape}")
        return out

    def forward(self, x, training, rng):
        return ta.relu(ta.conv2d(x, self.kernel, self.bias, self.stride))


class MaxPool2D(Layer):
    kind = "MaxPooling2D"

    def output_shape(self, shape):
        h, w, c = shape
        if h < 2 or w < 2:
            raise ValueError(f"{self.name}: input {shape} too small to pool")
        return (h // 2, w // 2, c)

    def forward(self, x, training, rng):
        return ta.max_pool2d(x, 2)


class BatchNorm(Layer):
    kind = "BatchNormalization"

    def __init__(self, name, channels, momentum, epsilon, dtype=np.float32):
        super().__init__(name)
        self.momentum, self.epsilon = momentum, epsilon
        self.gamma = Parameter(np.ones(channels, dtype), name=f"{name}/gamma")
        self.beta = Parameter(np.zeros(channels, dtype), name=f"{name}/beta")
        self.moving_mean = Parameter(np.zeros(channels, dtype), name=f"{name}/moving_mean",
                                     trainable=False)
        self.moving_var = Parameter(np.ones(channels, dtype), name=f"{name}/moving_variance",
                                    trainable=False)

    def parameters(self):
        return [self.gamma, self.beta, self.moving_mean, self.moving_var]

    def forward(self, x, training, rng):
        return ta.batch_norm(x, self.gamma, self.beta, self.moving_mean, self.moving_var,
                             training, self.momentum, self.epsilon)


class Reshape(Layer):
    """(H, W, C) -> (H*W, C): spatial positions become time steps."""

    kind = "Reshape"

    def output_shape(self, shape):
        h, w, c = shape
        return (h * w, c)

    def forward(self, x, training, rng):
        b, h, w, c = x.shape
        return ta.reshape(x, (b, h * w, c))


class Recurrent(Layer):
    def __init__(self, name, input_dim, hidden, candidate, bidirectional, rng, forget_bias,
                 dtype=np.float32):
        super().__init__(name)
        self.kind = "Bidirectional(LSTM)" if bidirectional else "LSTM"
        self.candidate = candidate
        self.hidden = hidden
        self.bidirectional = bidirectional
        self.forward_params = LstmParams.create(input_dim, hidden, rng, f"{name}/forward/",
                                                forget_bias, dtype)
        self.backward_params = (LstmParams.create(input_dim, hidden, rng, f"{name}/backward/",
                                                  forget_bias, dtype) if bidirectional else None)

    def parameters(self):
        params = self.forward_params.tensors()
        if self.backward_params is not None:
            params += self.backward_params.tensors()
        return params

    def output_shape(self, shape):
        steps, _ = shape
        return (steps, self.hidden * (2 if self.bidirectional else 1))

    def forward(self, x, training, rng):
        if self.bidirectional:
            return bilstm(x, self.forward_params, self.backward_params, self.candidate)
        return ta.stack(lstm_sequence(x, self.forward_params, self.candidate), axis=1)


class SelfAttention(Layer):
    kind = "SeqSelfAttention"

    def __init__(self, name, d, mode, units, rng, dtype=np.float32):
        super().__init__(name)
        self.params = AttentionParams.create(d, mode, units, rng, f"{name}/", dtype)

    def parameters(self):
        return self.params.tensors()

    def forward(self, x, training, rng):
        return self_attention(x, self.params)


class Dropout(Layer):
    kind = "Dropout"

    def __init__(self, name, rate):
        super().__init__(name)
        self.rate = rate

    def forward(self, x, training, rng):
        return ta.dropout(x, self.rate, training, rng)


class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, training, rng):
        return ta.reshape(x, (x.shape[0], -1))


class Dense(Layer):
    kind = "Dense"

    def __init__(self, name, n, m, activation, rng, dtype=np.float32):
        super().__init__(name)
        self.activation = activation
        self.weights = Parameter(ta.he_normal_init((n, m), n, rng, dtype).data, name=f"{name}/kernel")
        self.bias = Parameter(np.zeros(m, dtype), name=f"{name}/bias")

    def parameters(self):
        return [self.weights, self.bias]

    def output_shape(self, shape):
        if shape[-1] != self.weights.shape[0]:
            raise ValueError(f"{self.name}: expects {self.weights.shape[0]} features, got {shape}")
        return shape[:-1] + (self.weights.shape[1],)

    def forward(self, x, training, rng):
        return ta.activate(ta.dense(x, self.weights, self.bias), self.activation)


# ---------------------------------------------------------------------------
# model


@dataclass
class SummaryRow:
    name: str
    kind: str
    shape: tuple[int, ...]
    params: int

    def shape_text(self) -> str:
        return "(" + ", ".join(["None"] + [str(s) for s in self.shape]) + ")"


class Model:
    def __init__(self, config: ModelConfig, layers: Sequence[Layer]):
        self.config = config
        self.layers = list(layers)
        self.rng = np.random.default_rng(config.seed + 1)
        self.rows = self._trace_shapes()

    def _trace_shapes(self) -> list[SummaryRow]:
        shape = tuple(self.config.input_shape)
        rows = [SummaryRow("input", "InputLayer", shape, 0)]
        for layer in self.layers:
            shape = layer.output_shape(shape)
            rows.append(SummaryRow(layer.name, layer.kind, shape,
                                   sum(p.size for p in layer.parameters())))
        return rows

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    @property
    def trainable_count(self) -> int:
        return sum(p.size for p in self.parameters() if p.trainable)

    @property
    def non_trainable_count(self) -> int:
        return sum(p.size for p in self.parameters() if not p.trainable)

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Model":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        return self

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data[...] = state[p.name]

    def forward(self, x, training: bool = False, rng: Optional[np.random.Generator] = None,
                return_intermediates: bool = False):
        """(B, H, W, C) batch -> (B,) near-miss probabilities."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.parameters()[0].dtype))
        expected = tuple(self.config.input_shape)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input (batch,) + {expected}, got {x.shape}")
        rng = rng if rng is not None else self.rng
        intermediates = {}
        for layer in self.layers:
            x = layer.forward(x, training, rng)
            intermediates[layer.name] = x.shape[1:]
        probs = ta.reshape(x, (x.shape[0],))
        return (probs, intermediates) if return_intermediates else probs

    __call__ = forward


def build_model(config: ModelConfig = ModelConfig()) -> Model:
    rng = np.random.default_rng(config.seed)
    h, w, channels = config.input_shape
    f, k, s = config.conv_filters, config.conv_kernels, config.conv_strides
    mom, eps = config.bn_momentum, config.bn_epsilon
    layers: list[Layer] = [
        Conv2D("conv2d_1", channels, f[0], k[0], s[0], rng),
        Conv2D("conv2d_2", f[0], f[1], k[1], s[1], rng),
        MaxPool2D("max_pooling2d_1"),
        BatchNorm("batch_normalization_1", f[1], mom, eps),
        Conv2D("conv2d_3", f[1], f[2], k[2], s[2], rng),
        Conv2D("conv2d_4", f[2], f[3], k[3], s[3], rng),
        MaxPool2D("max_pooling2d_2"),
        BatchNorm("batch_normalization_2", f[3], mom, eps),
        Conv2D("conv2d_5", f[3], f[4], k[4], s[4], rng),
        MaxPool2D("max_pooling2d_3"),
        BatchNorm("batch_normalization_3", f[4], mom, eps),
    ]
    shape = tuple(config.input_shape)
    for layer in layers:
        shape = layer.output_shape(shape)
    if config.variant != "cnn":
        layers.append(Reshape("reshape"))
        shape = layers[-1].output_shape(shape)
        bidirectional = config.variant == "sa_bi_cnn_lstm"
        name = "bidirectional_1" if bidirectional else "lstm_1"
        layers.append(Recurrent(name, shape[-1], config.lstm_hidden, config.lstm_candidate,
                                bidirectional, rng, config.forget_bias))
        shape = layers[-1].output_shape(shape)
        if config.variant in ("sa_cnn_lstm", "sa_bi_cnn_lstm"):
            layers.append(SelfAttention("attention", shape[-1], config.attention_mode,
                                        config.attention_units, rng))
        layers.append(Dropout("dropout_1", config.dropout))
    layers.append(Flatten("flatten"))
    shape = layers[-1].output_shape(shape)
    width = shape[-1]
    for i, units in enumerate(config.dense_widths, 1):
        layers.append(Dense(f"dense_{i}", width, units, "relu", rng))
        layers.append(Dropout(f"dropout_{i + 1}", config.dropout))
        width = units
    layers.append(Dense(f"dense_{len(config.dense_widths) + 1}", width, 1, "sigmoid", rng))
    return Model(config, layers)


def forward(model: Model, batch, mode: str = "infer") -> Tensor:
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be train or infer, got {mode!r}")
    return model.forward(batch, training=mode == "train")


# ---------------------------------------------------------------------------
# summary and golden table

# (layer, output shape without batch, parameter count) expected for the default model
GOLDEN_LAYERS = (
    ("input", (240, 320, 3), 0),
    ("conv2d_1", (118, 158, 24), 1824),
    ("conv2d_2", (57, 77, 36), 21636),
    ("max_pooling2d_1", (28, 38, 36), 0),
    ("batch_normalization_1", (28, 38, 36), 144),
    ("conv2d_3", (12, 17, 48), 43248),
    ("conv2d_4", (10, 15, 64), 27712),
    ("max_pooling2d_2", (5, 7, 64), 0),
    ("batch_normalization_2", (5, 7, 64), 256),
    ("conv2d_5", (3, 5, 128), 73856),
    ("max_pooling2d_3", (1, 2, 128), 0),
    ("batch_normalization_3", (1, 2, 128), 512),
    ("reshape", (2, 128), 0),
    ("attention", (2, 1024), 1048577),
    ("bidirectional_1", (2, 1024), 2625536),
    ("dropout_1", (2, 1024), 0),
    ("flatten", (2048,), 0),
    ("dense_1", (256,), 524544),
    ("dropout_2", (256,), 0),
    ("dense_2", (64,), 16448),
    ("dropout_3", (64,), 0),
    ("dense_3", (1,), 65),
)
GOLDEN_TRAINABLE = 4_383_902
GOLDEN_NON_TRAINABLE = 456


def summary_rows(model: Model) -> list[SummaryRow]:
    return list(model.rows)


def summary(model: Model) -> str:
    """Tab-separated layer table followed by parameter totals."""
    lines = ["layer\ttype\toutput_shape\tparams"]
    for row in model.rows:
        lines.append(f"{row.name}\t{row.kind}\t{row.shape_text()}\t{row.params}")
    lines.append(f"total_trainable\t\t\t{model.trainable_count}")
    lines.append(f"total_non_trainable\t\t\t{model.non_trainable_count}")
    return "\n".join(lines)


def golden_diff(model: Model) -> list[str]:
    """Differences between the model's summary and the reference layer table."""
    rows = {row.name: row for row in model.rows}
    diffs = []
    for name, shape, params in GOLDEN_LAYERS:
        row = rows.pop(name, None)
        if row is None:
            diffs.append(f"{name}: missing (expected {shape}, {params} params)")
            continue
        if tuple(row.shape) != shape:
            diffs.append(f"{name}: shape {tuple(row.shape)} != expected {shape}")
        if row.params != params:
            diffs.append(f"{name}: params {row.params} != expected {params}")
    for name in rows:
        diffs.append(f"{name}: not in the reference table")
    if model.trainable_count != GOLDEN_TRAINABLE:
        diffs.append(f"trainable total {model.trainable_count} != {GOLDEN_TRAINABLE}")
    if model.non_trainable_count != GOLDEN_NON_TRAINABLE:
        diffs.append(f"non-trainable total {model.non_trainable_count} != {GOLDEN_NON_TRAINABLE}")
    return diffs


# ---------------------------------------------------------------------------
# weight files
#
# "CYNW" | version u16 | count u32 | per entry: name_len u16, name, rank u8,
# dims u32 * rank, float32 little-endian values


def save_weights(model: Model, path) -> None:
    path = Path(path)
    chunks = [WEIGHT_MAGIC, struct.pack("<HI", WEIGHT_VERSION, len(model.parameters()))]
    for p in model.parameters():
        name = p.name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name)) + name)
        chunks.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_weights(path) -> dict[str, np.ndarray]:
    """Parse a weight file into an ordered name -> array mapping."""
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise WeightFormatError(f"{path}: truncated at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != WEIGHT_MAGIC:
        raise WeightFormatError(f"{path}: not a CyclingNet weight file (bad magic)")
    version, count = struct.unpack("<HI", take(6))
    if version != WEIGHT_VERSION:
        raise WeightFormatError(f"{path}: unsupported format version {version}")
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
        entries[name] = values.astype(np.float32)
    if pos != len(blob):
        raise WeightFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return entries


def load_weights(model: Model, path) -> None:
    """Load weights; nothing is assigned unless every name and shape matches."""
    entries = read_weights(path)
    params = model.named_parameters()
    missing = [n for n in params if n not in entries]
    extra = [n for n in entries if n not in params]
    if missing or extra:
        raise WeightMismatchError(f"{path}: architecture mismatch; missing {missing[:5]}, "
                                  f"unexpected {extra[:5]}")
    for name, p in params.items():
        if entries[name].shape != p.shape:
            raise WeightMismatchError(f"{path}: {name} has shape {entries[name].shape}, "
                                      f"model expects {p.shape}")
    for name, p in params.items():
        p.data = entries[name].astype(p.dtype).copy()
        p.zero_grad()

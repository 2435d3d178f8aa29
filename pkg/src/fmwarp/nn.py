"""Recurrent network: one LSTM layer followed by three dense layers.

The LSTM cell follows the standard equations

    f_t = sigma(W_xf x_t + W_hf h_{t-1} + b_f)
    i_t = sigma(W_xi x_t + W_hi h_{t-1} + b_i)
    g_t = tanh (W_xg x_t + W_hg h_{t-1} + b_g)
    o_t = sigma(W_xo x_t + W_ho h_{t-1} + b_o)
    c_t = f_t * c_{t-1} + i_t * g_t
    h_t = o_t * tanh(c_t)

with c_t the long-term cell state and h_t the short-term hidden state.
The hidden state feeds a stack of three dense layers whose final output
is a single scalar (fuel moisture, percent).

``LstmParams.linear_gates`` switches every sigma/tanh above to the
identity. In that mode a single-unit cell with zero gate weights,
b_f = a and b_i = 1 - a reproduces the first-order time-lag recursion
m_t = a m_{t-1} + (1-a) X_t exactly; see ``construct_timelag_lstm``.

Parameters serialize to a flat named-tensor JSON container (one record
per tensor: name, shape, row-major values) shared by training, transfer
and the CLI.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fmwarp.errors import DimensionError, InvalidInputError
from fmwarp.timelag import TimeLagParams

GATE_NAMES = ("f", "i", "g", "o")
CHECKPOINT_FORMAT = "fmwarp-tensors-v1"


def sigmoid(z):
    # Clip to keep exp() finite; sigmoid saturates far before +-500 anyway.
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500.0, 500.0)))


@dataclass
class LstmParams:
    """Weights and biases of one LSTM layer.

    Input-to-gate matrices are (hidden, input), recurrent matrices are
    (hidden, hidden), biases are (hidden,). ``linear_gates`` replaces all
    gate and candidate activations (and the cell-output tanh) with the
    identity, the mode used by the constructed time-lag unit.
    """

    w_xf: np.ndarray
    w_xi: np.ndarray
    w_xg: np.ndarray
    w_xo: np.ndarray
    w_hf: np.ndarray
    w_hi: np.ndarray
    w_hg: np.ndarray
    w_ho: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_g: np.ndarray
    b_o: np.ndarray
    linear_gates: bool = False

    def __post_init__(self):
        h, d = self.w_xf.shape
        for name in ("w_xf", "w_xi", "w_xg", "w_xo"):
            if getattr(self, name).shape != (h, d):
                raise DimensionError(f"{name} must have shape {(h, d)}")
        for name in ("w_hf", "w_hi", "w_hg", "w_ho"):
            if getattr(self, name).shape != (h, h):
                raise DimensionError(f"{name} must have shape {(h, h)}")
        for name in ("b_f", "b_i", "b_g", "b_o"):
            if getattr(self, name).shape != (h,):
                raise DimensionError(f"{name} must have shape {(h,)}")
        for name, arr in self.tensors().items():
            if not np.isfinite(arr).all():
                raise InvalidInputError(f"non-finite entries in lstm.{name}")

    @property
    def hidden_size(self) -> int:
        return self.w_xf.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_xf.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            name: getattr(self, name)
            for name in (
                "w_xf", "w_xi", "w_xg", "w_xo",
                "w_hf", "w_hi", "w_hg", "w_ho",
                "b_f", "b_i", "b_g", "b_o",
            )
        }


@dataclass
class DenseParams:
    """One dense layer: weights (out, in), bias (out,), activation name."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"dense bias shape {self.bias.shape} inconsistent with weights {self.weights.shape}"
            )
        if self.activation not in ("identity", "relu"):
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise InvalidInputError("non-finite entries in dense layer")


@dataclass
class RnnParams:
    """Full network: LSTM layer, three dense layers, per-tensor freeze flags.

    ``freeze_mask`` maps tensor names (e.g. ``"lstm.b_f"``, ``"dense0.w"``)
    to True when the tensor is excluded from training.
    """

    lstm: LstmParams
    dense: tuple[DenseParams, ...]
    freeze_mask: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.dense) != 3:
            raise DimensionError(f"expected 3 dense layers, got {len(self.dense)}")
        size = self.lstm.hidden_size
        for k, layer in enumerate(self.dense):
            if layer.weights.shape[1] != size:
                raise DimensionError(
                    f"dense{k} expects input {layer.weights.shape[1]}, got {size}"
                )
            size = layer.weights.shape[0]
        if size != 1:
            raise DimensionError(f"final dense layer must output a scalar, got {size}")
        full = {name: False for name in self.tensor_names()}
        full.update(self.freeze_mask)
        self.freeze_mask = full

    def tensor_names(self) -> list[str]:
        names = [f"lstm.{k}" for k in self.lstm.tensors()]
        for k in range(len(self.dense)):
            names += [f"dense{k}.w", f"dense{k}.b"]
        return names

    def tensors(self) -> dict[str, np.ndarray]:
        """Live views of every tensor, keyed by name."""
        out = {f"lstm.{k}": v for k, v in self.lstm.tensors().items()}
        for k, layer in enumerate(self.dense):
            out[f"dense{k}.w"] = layer.weights
            out[f"dense{k}.b"] = layer.bias
        return out

    def copy(self) -> "RnnParams":
        return RnnParams(
            lstm=LstmParams(
                **{k: v.copy() for k, v in self.lstm.tensors().items()},
                linear_gates=self.lstm.linear_gates,
            ),
            dense=tuple(
                DenseParams(layer.weights.copy(), layer.bias.copy(), layer.activation)
                for layer in self.dense
            ),
            freeze_mask=dict(self.freeze_mask),
        )

    def parameter_count(self) -> int:
        return sum(v.size for v in self.tensors().values())

    def trainable_count(self) -> int:
        return sum(v.size for k, v in self.tensors().items() if not self.freeze_mask[k])


@dataclass
class LstmState:
    """Cell state c (long-term memory) and hidden state h (short-term memory)."""

    c: np.ndarray
    h: np.ndarray

    @classmethod
    def zeros(cls, hidden_size: int) -> "LstmState":
        return cls(c=np.zeros(hidden_size), h=np.zeros(hidden_size))


@dataclass
class GateRecord:
    """Gate activations from one step, for diagnostics."""

    f: np.ndarray
    i: np.ndarray
    g: np.ndarray
    o: np.ndarray


def lstm_step(params: LstmParams, state: LstmState, x: np.ndarray) -> tuple[LstmState, GateRecord]:
    """One LSTM step; returns the new state and the gate activations."""
    x = np.asarray(x, dtype=float)
    if x.shape != (params.input_size,):
        raise DimensionError(f"input shape {x.shape}, expected {(params.input_size,)}")
    if state.h.shape != (params.hidden_size,) or state.c.shape != (params.hidden_size,):
        raise DimensionError("state dimension does not match hidden_size")
    if params.linear_gates:
        gate, squash = (lambda z: z), (lambda z: z)
    else:
        gate, squash = sigmoid, np.tanh
    f = gate(params.w_xf @ x + params.w_hf @ state.h + params.b_f)
    i = gate(params.w_xi @ x + params.w_hi @ state.h + params.b_i)
    g = squash(params.w_xg @ x + params.w_hg @ state.h + params.b_g)
    o = gate(params.w_xo @ x + params.w_ho @ state.h + params.b_o)
    c = f * state.c + i * g
    h = o * squash(c)
    return LstmState(c=c, h=h), GateRecord(f=f, i=i, g=g, o=o)


def dense_forward(dense: tuple[DenseParams, ...], h: np.ndarray) -> np.ndarray:
    """Dense stack applied to a single hidden vector or a (T, hidden) batch."""
    v = h
    for layer in dense:
        v = v @ layer.weights.T + layer.bias
        if layer.activation == "relu":
            v = np.maximum(v, 0.0)
    return v


def lstm_scan(
    lstm: LstmParams, inputs: np.ndarray, initial: LstmState
) -> tuple[np.ndarray, LstmState]:
    """Run the cell over a (T, input) series; returns (T, hidden) hidden
    states and the final state. Input projections are hoisted out of the
    recurrent loop."""
    if lstm.linear_gates:
        gate, squash = (lambda z: z), (lambda z: z)
    else:
        gate, squash = sigmoid, np.tanh
    xp = {tag: inputs @ getattr(lstm, f"w_x{tag}").T for tag in GATE_NAMES}
    c, h = initial.c, initial.h
    h_all = np.empty((inputs.shape[0], lstm.hidden_size))
    for t in range(inputs.shape[0]):
        f = gate(xp["f"][t] + lstm.w_hf @ h + lstm.b_f)
        i = gate(xp["i"][t] + lstm.w_hi @ h + lstm.b_i)
        g = squash(xp["g"][t] + lstm.w_hg @ h + lstm.b_g)
        o = gate(xp["o"][t] + lstm.w_ho @ h + lstm.b_o)
        c = f * c + i * g
        h = o * squash(c)
        h_all[t] = h
    return h_all, LstmState(c=c, h=h)


def forward(
    params: RnnParams, inputs: np.ndarray, initial: LstmState | None = None
) -> tuple[np.ndarray, LstmState]:
    """Map a (T, input_size) series to T scalar predictions.

    The prediction at step t depends only on inputs[0..t]; the final
    state is returned so a long series can be processed in chunks.
    """
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[0] < 1:
        raise InvalidInputError(f"inputs must be (T>=1, input_size), got {inputs.shape}")
    if inputs.shape[1] != params.lstm.input_size:
        raise DimensionError(
            f"inputs have {inputs.shape[1]} features, network expects {params.lstm.input_size}"
        )
    state = initial if initial is not None else LstmState.zeros(params.lstm.hidden_size)
    h_all, state = lstm_scan(params.lstm, inputs, state)
    preds = dense_forward(params.dense, h_all)[:, 0]
    return preds, state


def construct_timelag_lstm(tau: float, eq_input_index: int, input_size: int | None = None) -> RnnParams:
    """Build the single-unit linear-gate network that realizes the time-lag recursion.

    All gate weights are zero, so with identity activations the gate
    values are the biases themselves: f = b_f = a, i = b_i = 1 - a, and
    the candidate picks out input column ``eq_input_index``. The cell
    state then satisfies c_t = a c_{t-1} + (1-a) X_t exactly; the output
    gate and dense stack pass it through unchanged.
    """
    if input_size is None:
        input_size = eq_input_index + 1
    if not 0 <= eq_input_index < input_size:
        raise InvalidInputError(
            f"eq_input_index {eq_input_index} out of range for input_size {input_size}"
        )
    a = TimeLagParams.from_tau(tau).a
    zeros_x = np.zeros((1, input_size))
    zeros_h = np.zeros((1, 1))
    w_xg = np.zeros((1, input_size))
    w_xg[0, eq_input_index] = 1.0
    lstm = LstmParams(
        w_xf=zeros_x.copy(), w_xi=zeros_x.copy(), w_xg=w_xg, w_xo=zeros_x.copy(),
        w_hf=zeros_h.copy(), w_hi=zeros_h.copy(), w_hg=zeros_h.copy(), w_ho=zeros_h.copy(),
        b_f=np.array([a]), b_i=np.array([1.0 - a]), b_g=np.zeros(1), b_o=np.ones(1),
        linear_gates=True,
    )
    passthrough = lambda: DenseParams(np.ones((1, 1)), np.zeros(1), "identity")
    return RnnParams(lstm=lstm, dense=(passthrough(), passthrough(), passthrough()))


def init_params(
    input_size: int,
    hidden_size: int,
    dense_sizes: tuple[int, int] = (32, 16),
    rng: np.random.Generator | None = None,
    forget_bias: float = 1.0,
) -> RnnParams:
    """Glorot-uniform initialization of the full network.

    The forget-gate bias starts at ``forget_bias`` (default 1.0, the
    usual trick to favor remembering early in training); all other
    biases start at zero.
    """
    rng = rng if rng is not None else np.random.default_rng()

    def glorot(shape):
        fan_in, fan_out = shape[1], shape[0]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    h, d = hidden_size, input_size
    lstm = LstmParams(
        w_xf=glorot((h, d)), w_xi=glorot((h, d)), w_xg=glorot((h, d)), w_xo=glorot((h, d)),
        w_hf=glorot((h, h)), w_hi=glorot((h, h)), w_hg=glorot((h, h)), w_ho=glorot((h, h)),
        b_f=np.full(h, float(forget_bias)), b_i=np.zeros(h), b_g=np.zeros(h), b_o=np.zeros(h),
    )
    sizes = [hidden_size, *dense_sizes, 1]
    activations = ["relu"] * len(dense_sizes) + ["identity"]
    dense = tuple(
        DenseParams(glorot((sizes[k + 1], sizes[k])), np.zeros(sizes[k + 1]), activations[k])
        for k in range(len(sizes) - 1)
    )
    return RnnParams(lstm=lstm, dense=dense)


def save_params(params: RnnParams, path, extra: dict | None = None) -> None:
    """Write the named-tensor container: one record per tensor with
    name, shape and row-major values, plus structural metadata."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "meta": {
            "linear_gates": params.lstm.linear_gates,
            "dense_activations": [layer.activation for layer in params.dense],
            "freeze_mask": params.freeze_mask,
            "extra": extra or {},
        },
        "tensors": [
            {"name": name, "shape": list(arr.shape), "data": arr.ravel(order="C").tolist()}
            for name, arr in params.tensors().items()
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def load_params(path) -> tuple[RnnParams, dict]:
    """Read a named-tensor container; returns (params, extra metadata)."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"unrecognized checkpoint format in {path}")
    arrays = {
        rec["name"]: np.asarray(rec["data"], dtype=float).reshape(rec["shape"])
        for rec in doc["tensors"]
    }
    meta = doc["meta"]
    lstm = LstmParams(
        **{k.removeprefix("lstm."): v for k, v in arrays.items() if k.startswith("lstm.")},
        linear_gates=bool(meta["linear_gates"]),
    )
    dense = tuple(
        DenseParams(arrays[f"dense{k}.w"], arrays[f"dense{k}.b"], meta["dense_activations"][k])
        for k in range(3)
    )
    params = RnnParams(lstm=lstm, dense=dense, freeze_mask=dict(meta["freeze_mask"]))
    return params, meta.get("extra", {})

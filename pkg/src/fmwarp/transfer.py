"""Transfer-learning protocols, centered on the time-warping bias shift.

Shifting the forget- and input-gate biases of a pretrained LSTM by two
global scalars (alpha_f, alpha_i) rescales the learned dynamics: raising
the forget activation slows the system down, lowering it speeds the
system up. The shift pair is selected by grid search on the target
training observations; 2 x hidden tensor entries change and nothing else.

Six protocols are supported:

    NoTransfer        fresh initialization, direct training
    FullFineTune      pretrained start, all tensors trained
    FreezeRecurrent   LSTM tensors frozen, dense stack trained
    FreezeDense       dense stack frozen, LSTM trained
    TimeWarp          grid-searched bias shift, no training
    TimeWarpFineTune  grid-searched bias shift, then all tensors trained

No protocol ever sees the test partition: the interface takes only the
training and validation series.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fmwarp import nn
from fmwarp.errors import ConfigError, InvalidInputError, SearchFailedError
from fmwarp.train import STREAM_INIT, SupervisedSeries, TrainConfig, fit, substream


@dataclass(frozen=True)
class BiasShift:
    """Global additive shifts for the forget and input gate biases."""

    alpha_f: float
    alpha_i: float

    def __post_init__(self):
        if not (math.isfinite(self.alpha_f) and math.isfinite(self.alpha_i)):
            raise InvalidInputError("bias shifts must be finite")


@dataclass(frozen=True)
class GridSpec:
    """Evenly spaced candidate values per axis, endpoints inclusive."""

    lo: float = -5.0
    hi: float = 5.0
    n_per_axis: int = 25

    def __post_init__(self):
        if not self.lo < self.hi:
            raise InvalidInputError(f"grid lo {self.lo} must be < hi {self.hi}")
        if self.n_per_axis < 2:
            raise InvalidInputError(f"n_per_axis must be >= 2, got {self.n_per_axis}")

    def axis_values(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_per_axis)


DEFAULT_GRID = GridSpec()


class TransferMethod(enum.Enum):
    NO_TRANSFER = "NoTransfer"
    FULL_FINE_TUNE = "FullFineTune"
    FREEZE_RECURRENT = "FreezeRecurrent"
    FREEZE_DENSE = "FreezeDense"
    TIME_WARP = "TimeWarp"
    TIME_WARP_FINE_TUNE = "TimeWarpFineTune"

    @classmethod
    def parse(cls, name: str) -> "TransferMethod":
        for member in cls:
            if member.value.lower() == name.strip().lower():
                return member
        raise ConfigError(f"unknown transfer method {name!r}")


def candidate_shifts(grid: GridSpec = DEFAULT_GRID) -> np.ndarray:
    """All (alpha_f, alpha_i) candidates in fixed row-major order, with the
    exact zero shift always appended so the zero-shot baseline is searched."""
    axis = grid.axis_values()
    af, ai = np.meshgrid(axis, axis, indexing="ij")
    cands = np.column_stack([af.ravel(), ai.ravel()])
    return np.vstack([cands, [0.0, 0.0]])


def apply_shift(params: nn.RnnParams, shift: BiasShift) -> nn.RnnParams:
    """Shift b_f and b_i uniformly across all hidden units; every other
    tensor is copied unchanged."""
    out = params.copy()
    out.lstm.b_f += shift.alpha_f
    out.lstm.b_i += shift.alpha_i
    return out


def _masked_rmse_batched(
    params: nn.RnnParams, series: SupervisedSeries, shifts: np.ndarray
) -> np.ndarray:
    """Masked training RMSE for every candidate shift in one vectorized sweep.

    Weights are shared across candidates; only the gate biases differ, so
    the cell/hidden states are carried with a leading candidate axis.
    """
    lstm = params.lstm
    n_cand = shifts.shape[0]
    h_dim = lstm.hidden_size
    b_f = lstm.b_f + shifts[:, 0:1]  # (n_cand, hidden)
    b_i = lstm.b_i + shifts[:, 1:2]
    if lstm.linear_gates:
        gate, squash = (lambda z: z), (lambda z: z)
    else:
        gate, squash = nn.sigmoid, np.tanh
    c = np.zeros((n_cand, h_dim))
    h = np.zeros((n_cand, h_dim))
    sq_sum = np.zeros(n_cand)
    x_proj = {
        tag: series.inputs @ getattr(lstm, f"w_x{tag}").T for tag in nn.GATE_NAMES
    }  # (T, hidden) each
    n_obs = series.mask.sum()
    # Extreme shifts can overflow in the linear-gate mode; those candidates
    # come back non-finite and are simply excluded from the argmin.
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(len(series)):
            f = gate(x_proj["f"][t] + h @ lstm.w_hf.T + b_f)
            i = gate(x_proj["i"][t] + h @ lstm.w_hi.T + b_i)
            g = squash(x_proj["g"][t] + h @ lstm.w_hg.T + lstm.b_g)
            o = gate(x_proj["o"][t] + h @ lstm.w_ho.T + lstm.b_o)
            c = f * c + i * g
            h = o * squash(c)
            if series.mask[t]:
                v = h
                for layer in params.dense:
                    v = v @ layer.weights.T + layer.bias
                    if layer.activation == "relu":
                        v = np.maximum(v, 0.0)
                sq_sum += (v[:, 0] - series.targets[t]) ** 2
        return np.sqrt(sq_sum / n_obs)


def grid_search(
    params: nn.RnnParams,
    train: SupervisedSeries,
    grid: GridSpec = DEFAULT_GRID,
    objective=None,
) -> tuple[BiasShift, np.ndarray]:
    """Select the bias-shift pair minimizing the objective over the grid.

    The default objective is the masked RMSE over the training
    observations. Ties are broken toward the smallest |alpha_f|+|alpha_i|,
    then the smallest alpha_f. Returns the winning shift and the full
    objective surface as an (n_candidates, 3) array of
    (alpha_f, alpha_i, objective) rows.
    """
    if train.mask.sum() < 1:
        raise InvalidInputError("grid search needs at least one training observation")
    shifts = candidate_shifts(grid)
    if objective is None:
        values = _masked_rmse_batched(params, train, shifts)
    else:
        values = np.array(
            [objective(apply_shift(params, BiasShift(af, ai))) for af, ai in shifts]
        )
    surface = np.column_stack([shifts, values])
    finite = np.isfinite(values)
    if not finite.any():
        raise SearchFailedError("every grid candidate produced a non-finite objective")
    best = None
    best_key = None
    for (af, ai), val in zip(shifts, values):
        if not np.isfinite(val):
            continue
        key = (val, abs(af) + abs(ai), af, ai)
        if best_key is None or key < best_key:
            best_key = key
            best = BiasShift(alpha_f=float(af), alpha_i=float(ai))
    return best, surface


def write_surface_csv(surface: np.ndarray, path) -> None:
    lines = ["alpha_f,alpha_i,rmse"]
    lines += [f"{repr(float(af))},{repr(float(ai))},{repr(float(v))}" for af, ai, v in surface]
    Path(path).write_text("\n".join(lines) + "\n")


FREEZE_PREFIX = {
    TransferMethod.FREEZE_RECURRENT: "lstm.",
    TransferMethod.FREEZE_DENSE: "dense",
}


@dataclass(frozen=True)
class TransferResult:
    params: nn.RnnParams
    shift: BiasShift | None


def run_method(
    method: TransferMethod,
    pretrained: nn.RnnParams | None,
    train: SupervisedSeries,
    val: SupervisedSeries,
    config: TrainConfig,
    grid: GridSpec = DEFAULT_GRID,
    arch: tuple[int, int, tuple[int, ...]] | None = None,
    forced_shift: BiasShift | None = None,
) -> TransferResult:
    """Run one transfer protocol using only training and validation data.

    ``arch`` (input_size, hidden_size, dense_sizes) sizes the fresh
    network for NoTransfer when no pretrained model is given.
    ``forced_shift`` bypasses the grid search in the warp methods, for
    diagnostics and contract tests.
    """
    if method is not TransferMethod.NO_TRANSFER and pretrained is None:
        raise ConfigError(f"{method.value} requires a pretrained model")

    if method is TransferMethod.NO_TRANSFER:
        if pretrained is not None:
            input_size = pretrained.lstm.input_size
            hidden_size = pretrained.lstm.hidden_size
            dense_sizes = tuple(layer.weights.shape[0] for layer in pretrained.dense[:-1])
        elif arch is not None:
            input_size, hidden_size, dense_sizes = arch
        else:
            raise ConfigError("NoTransfer needs either a pretrained template or arch sizes")
        fresh = nn.init_params(
            input_size, hidden_size, tuple(dense_sizes), rng=substream(config.seed, STREAM_INIT)
        )
        return TransferResult(params=fit(fresh, train, val, config).trained, shift=None)

    start = pretrained.copy()
    start.freeze_mask = {name: False for name in start.tensor_names()}

    if method in FREEZE_PREFIX:
        prefix = FREEZE_PREFIX[method]
        start.freeze_mask = {
            name: name.startswith(prefix) for name in start.tensor_names()
        }
        return TransferResult(params=fit(start, train, val, config).trained, shift=None)

    if method is TransferMethod.FULL_FINE_TUNE:
        return TransferResult(params=fit(start, train, val, config).trained, shift=None)

    # Warp methods: grid search on the training observations only.
    shift = forced_shift
    if shift is None:
        shift, _ = grid_search(start, train, grid)
    warped = apply_shift(start, shift)
    if method is TransferMethod.TIME_WARP:
        return TransferResult(params=warped, shift=shift)
    if method is TransferMethod.TIME_WARP_FINE_TUNE:
        return TransferResult(params=fit(warped, train, val, config).trained, shift=shift)
    raise ConfigError(f"unhandled method {method}")

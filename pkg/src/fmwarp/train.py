"""Training: masked loss, backpropagation through time, Adam, replication.

Training runs truncated backpropagation through time over non-overlapping
fixed-length segments of a single long series. The hidden state at each
segment boundary is cached and refreshed whenever the preceding segment
is processed, so in chronological order the state is carried exactly and
under shuffling it is at most one visit stale. Gradients never flow
across segment boundaries.

Observations are sparse, so the loss is a mean of squared errors over
masked positions only. Validation loss is computed each epoch from a
clean stateful pass over the training span followed by the validation
span, and is used only for early stopping: the returned snapshot is the
one with the best validation loss.

All randomness flows from integer seeds through named substreams
(init / shuffle / valsplit), so a realization is a pure function of
(seed, data, config).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from fmwarp import nn
from fmwarp.errors import (
    DegenerateMaskError,
    InvalidInputError,
    NumericOverflowError,
    TrainingDivergedError,
)

# Adam moment decay and stabilizer; the gradient global-norm clip guards
# against divergence on rain spikes.
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
GRAD_CLIP_NORM = 5.0

# Named substream tags: every RNG in this package derives from
# SeedSequence([seed, tag]).
STREAM_INIT = 0x1A17
STREAM_SHUFFLE = 0x5F1E
STREAM_VALSPLIT = 0x7A15

# Fraction of validation observations kept when replicate varies the
# validation selection.
VAL_KEEP_FRACTION = 0.9


def substream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(tag)]))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_length: int = 72
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidInputError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_length < 2:
            raise InvalidInputError(f"batch_length must be >= 2, got {self.batch_length}")
        if self.patience < 1:
            raise InvalidInputError(f"patience must be >= 1, got {self.patience}")


@dataclass(frozen=True)
class SupervisedSeries:
    """A contiguous hourly span: model inputs, targets, and a 0/1 loss mask."""

    inputs: np.ndarray  # (T, n_features)
    targets: np.ndarray  # (T,)
    mask: np.ndarray  # (T,), 1 where an observation exists

    def __post_init__(self):
        t = self.inputs.shape[0]
        if self.targets.shape != (t,) or self.mask.shape != (t,):
            raise InvalidInputError("inputs/targets/mask length mismatch")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise InvalidInputError("mask entries must be 0 or 1")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class Realization:
    """One seeded training run: the best-validation snapshot plus its history."""

    seed: int
    validation_selection: str
    trained: nn.RnnParams
    history: list[tuple[int, float, float]]  # (epoch, train_loss, val_loss)
    best_epoch: int


def masked_mse(pred, obs, mask) -> float:
    """Mean squared error over masked positions only."""
    pred = np.asarray(pred, dtype=float)
    obs = np.asarray(obs, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if not (pred.shape == obs.shape == mask.shape):
        raise InvalidInputError("pred/obs/mask must have equal lengths")
    k = mask.sum()
    if k == 0:
        raise DegenerateMaskError("loss mask selects no observations")
    return float(np.sum(mask * (pred - obs) ** 2) / k)


def _forward_cached(params: nn.RnnParams, inputs: np.ndarray, initial: nn.LstmState):
    """Forward pass keeping everything the backward pass needs.

    The recurrent loop is sequential; input projections and the dense
    stack are batched over time.
    """
    lstm = params.lstm
    T = inputs.shape[0]
    h_dim = lstm.hidden_size
    if lstm.linear_gates:
        gate, squash = (lambda z: z), (lambda z: z)
    else:
        gate, squash = nn.sigmoid, np.tanh
    xp = {tag: inputs @ getattr(lstm, f"w_x{tag}").T for tag in nn.GATE_NAMES}
    cache = {
        name: np.empty((T, h_dim))
        for name in ("f", "i", "g", "o", "c", "h", "c_prev", "h_prev")
    }
    c, h = initial.c, initial.h
    for t in range(T):
        cache["c_prev"][t] = c
        cache["h_prev"][t] = h
        f = gate(xp["f"][t] + lstm.w_hf @ h + lstm.b_f)
        i = gate(xp["i"][t] + lstm.w_hi @ h + lstm.b_i)
        g = squash(xp["g"][t] + lstm.w_hg @ h + lstm.b_g)
        o = gate(xp["o"][t] + lstm.w_ho @ h + lstm.b_o)
        c = f * c + i * g
        h = o * squash(c)
        cache["f"][t], cache["i"][t], cache["g"][t], cache["o"][t] = f, i, g, o
        cache["c"][t], cache["h"][t] = c, h
    # Dense stack over all steps at once, caching layer inputs and
    # pre-activations for the backward pass.
    dense_in, dense_z = [], []
    v = cache["h"]
    for layer in params.dense:
        dense_in.append(v)
        z = v @ layer.weights.T + layer.bias
        dense_z.append(z)
        v = np.maximum(z, 0.0) if layer.activation == "relu" else z
    cache["dense_in"], cache["dense_z"] = dense_in, dense_z
    preds = v[:, 0]
    if not np.isfinite(preds).all():
        raise NumericOverflowError("forward pass produced non-finite predictions")
    return preds, nn.LstmState(c=c, h=h), cache


def backward(
    params: nn.RnnParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray,
    initial: nn.LstmState | None = None,
) -> tuple[dict[str, np.ndarray], float, nn.LstmState]:
    """Gradients of the masked MSE over one segment, by backprop through time.

    Returns (gradients keyed like ``params.tensors()``, loss, final state).
    Frozen tensors get zero gradient; gradients do not flow into the
    initial state (truncation boundary).
    """
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if initial is None:
        initial = nn.LstmState.zeros(params.lstm.hidden_size)
    preds, final_state, cache = _forward_cached(params, inputs, initial)
    loss = masked_mse(preds, targets, mask)

    grads = {}
    k = mask.sum()
    dpred = 2.0 * mask * (preds - targets) / k

    # Dense stack backward, batched over time (no cross-step coupling).
    dv = dpred[:, None]
    for j in range(len(params.dense) - 1, -1, -1):
        layer = params.dense[j]
        z = cache["dense_z"][j]
        dz = dv * (z > 0.0) if layer.activation == "relu" else dv
        grads[f"dense{j}.w"] = dz.T @ cache["dense_in"][j]
        grads[f"dense{j}.b"] = dz.sum(axis=0)
        dv = dz @ layer.weights
    dh_dense = dv  # (T, hidden)

    lstm = params.lstm
    linear = lstm.linear_gates
    T = inputs.shape[0]
    f_all, i_all, g_all, o_all = cache["f"], cache["i"], cache["g"], cache["o"]
    c_all, c_prev_all = cache["c"], cache["c_prev"]
    dz = {tag: np.empty((T, lstm.hidden_size)) for tag in nn.GATE_NAMES}
    dh_next = np.zeros(lstm.hidden_size)
    dc_next = np.zeros(lstm.hidden_size)
    for t in range(T - 1, -1, -1):
        dh = dh_dense[t] + dh_next
        f, i, g, o = f_all[t], i_all[t], g_all[t], o_all[t]
        if linear:
            phi, dphi = c_all[t], 1.0
            sf, si, so, sg = 1.0, 1.0, 1.0, 1.0
        else:
            phi = np.tanh(c_all[t])
            dphi = 1.0 - phi * phi
            sf, si, so = f * (1.0 - f), i * (1.0 - i), o * (1.0 - o)
            sg = 1.0 - g * g
        dz["o"][t] = dh * phi * so
        dc = dc_next + dh * o * dphi
        dz["f"][t] = dc * c_prev_all[t] * sf
        dz["i"][t] = dc * g * si
        dz["g"][t] = dc * i * sg
        dh_next = (
            lstm.w_hf.T @ dz["f"][t]
            + lstm.w_hi.T @ dz["i"][t]
            + lstm.w_hg.T @ dz["g"][t]
            + lstm.w_ho.T @ dz["o"][t]
        )
        dc_next = dc * f
    h_prev_all = cache["h_prev"]
    for tag in nn.GATE_NAMES:
        grads[f"lstm.w_x{tag}"] = dz[tag].T @ inputs
        grads[f"lstm.w_h{tag}"] = dz[tag].T @ h_prev_all
        grads[f"lstm.b_{tag}"] = dz[tag].sum(axis=0)

    for name, frozen in params.freeze_mask.items():
        if frozen:
            grads[name] = np.zeros_like(grads[name])
    for name, arr in grads.items():
        if not np.isfinite(arr).all():
            raise NumericOverflowError(f"non-finite gradient in {name}")
    return grads, loss, final_state


class AdamState:
    """Per-tensor Adam moments; frozen tensors are never touched."""

    def __init__(self, params: nn.RnnParams):
        self.m = {k: np.zeros_like(v) for k, v in params.tensors().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors().items()}
        self.t = 0

    def step(self, params: nn.RnnParams, grads: dict[str, np.ndarray], lr: float) -> None:
        live = {k: g for k, g in grads.items() if not params.freeze_mask[k]}
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in live.values()))
        scale = GRAD_CLIP_NORM / norm if norm > GRAD_CLIP_NORM else 1.0
        self.t += 1
        correction = math.sqrt(1.0 - ADAM_BETA2**self.t) / (1.0 - ADAM_BETA1**self.t)
        tensors = params.tensors()
        for name, g in live.items():
            g = g * scale
            self.m[name] = ADAM_BETA1 * self.m[name] + (1.0 - ADAM_BETA1) * g
            self.v[name] = ADAM_BETA2 * self.v[name] + (1.0 - ADAM_BETA2) * g * g
            tensors[name] -= lr * correction * self.m[name] / (np.sqrt(self.v[name]) + ADAM_EPS)


def _segment_bounds(n: int, batch_length: int) -> list[tuple[int, int]]:
    return [(s, min(s + batch_length, n)) for s in range(0, n, batch_length)]


def validation_loss(params: nn.RnnParams, train: SupervisedSeries, val: SupervisedSeries) -> float:
    """Masked validation MSE after a stateful spin-up over the training span."""
    _, state = nn.forward(params, train.inputs)
    preds, _ = nn.forward(params, val.inputs, initial=state)
    return masked_mse(preds, val.targets, val.mask)


def fit(
    params: nn.RnnParams,
    train: SupervisedSeries,
    val: SupervisedSeries,
    config: TrainConfig,
    val_selection_id: str = "full",
    shuffle_seed: int | None = None,
) -> Realization:
    """Truncated-BPTT training with validation-controlled early stopping.

    Returns the snapshot with the best validation loss; stops after
    ``patience`` epochs without improvement. Frozen tensors come back
    bit-identical to their initial values.
    """
    if len(train) == 0 or len(val) == 0:
        raise InvalidInputError("training and validation series must be non-empty")
    params = params.copy()
    shuffle_rng = substream(config.seed if shuffle_seed is None else shuffle_seed, STREAM_SHUFFLE)
    adam = AdamState(params)
    bounds = _segment_bounds(len(train), config.batch_length)
    seg_mask_counts = [train.mask[s:e].sum() for s, e in bounds]
    start_states = [nn.LstmState.zeros(params.lstm.hidden_size) for _ in bounds]

    history: list[tuple[int, float, float]] = []
    best_val = math.inf
    best_snapshot = params.copy()
    best_epoch = 0
    since_improve = 0
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(bounds)) if config.shuffle else range(len(bounds))
        sq_sum = 0.0
        n_obs = 0.0
        for k in order:
            s, e = bounds[k]
            if seg_mask_counts[k] == 0:
                continue  # no observations to learn from in this segment
            try:
                grads, seg_loss, final = backward(
                    params, train.inputs[s:e], train.targets[s:e], train.mask[s:e],
                    initial=start_states[k],
                )
            except NumericOverflowError as exc:
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch}: {exc}",
                    last_good=Realization(
                        seed=config.seed, validation_selection=val_selection_id,
                        trained=best_snapshot, history=history, best_epoch=best_epoch,
                    ),
                ) from exc
            adam.step(params, grads, config.learning_rate)
            if k + 1 < len(bounds):
                start_states[k + 1] = final
            sq_sum += seg_loss * seg_mask_counts[k]
            n_obs += seg_mask_counts[k]
        train_loss = sq_sum / n_obs if n_obs else math.nan
        try:
            val_loss = validation_loss(params, train, val)
        except NumericOverflowError as exc:
            raise TrainingDivergedError(
                f"validation diverged at epoch {epoch}: {exc}",
                last_good=Realization(
                    seed=config.seed, validation_selection=val_selection_id,
                    trained=best_snapshot, history=history, best_epoch=best_epoch,
                ),
            ) from exc
        history.append((epoch, float(train_loss), float(val_loss)))
        if not math.isfinite(val_loss) or not math.isfinite(train_loss):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch}",
                last_good=Realization(
                    seed=config.seed, validation_selection=val_selection_id,
                    trained=best_snapshot, history=history, best_epoch=best_epoch,
                ),
            )
        if val_loss < best_val:
            best_val = val_loss
            best_snapshot = params.copy()
            best_epoch = epoch
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= config.patience:
                break
    return Realization(
        seed=config.seed, validation_selection=val_selection_id,
        trained=best_snapshot, history=history, best_epoch=best_epoch,
    )


def subsample_validation(val: SupervisedSeries, seed: int) -> tuple[SupervisedSeries, str]:
    """Randomly keep VAL_KEEP_FRACTION of the validation observations."""
    rng = substream(seed, STREAM_VALSPLIT)
    idx = np.flatnonzero(val.mask)
    n_keep = max(1, int(math.ceil(VAL_KEEP_FRACTION * idx.size)))
    keep = np.sort(rng.choice(idx, size=n_keep, replace=False))
    mask = np.zeros_like(val.mask)
    mask[keep] = 1.0
    sub = SupervisedSeries(inputs=val.inputs, targets=val.targets, mask=mask)
    return sub, f"val-keep{n_keep}of{idx.size}-seed{seed}"


def replicate(
    input_size: int,
    hidden_size: int,
    dense_sizes: tuple[int, int],
    train: SupervisedSeries,
    val: SupervisedSeries,
    base_config: TrainConfig,
    n: int,
    vary: frozenset[str] = frozenset({"init", "order", "valsplit"}),
    forget_bias: float = 1.0,
) -> list[Realization]:
    """Train n independently seeded realizations (seeds seed0 .. seed0+n-1).

    ``vary`` selects which factors get a per-realization substream:
    "init" (initial weights), "order" (segment order), "valsplit"
    (random subset of validation observations). Factors not listed stay
    fixed at the base seed's stream.
    """
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    unknown = set(vary) - {"init", "order", "valsplit"}
    if unknown:
        raise InvalidInputError(f"unknown vary factors {sorted(unknown)}")
    out = []
    for k in range(n):
        seed_k = base_config.seed + k
        init_seed = seed_k if "init" in vary else base_config.seed
        params = nn.init_params(
            input_size, hidden_size, dense_sizes,
            rng=substream(init_seed, STREAM_INIT), forget_bias=forget_bias,
        )
        if "valsplit" in vary:
            val_k, selection = subsample_validation(val, seed_k)
        else:
            val_k, selection = val, "full"
        config_k = replace(base_config, seed=seed_k)
        shuffle_seed = seed_k if "order" in vary else base_config.seed
        out.append(
            fit(params, train, val_k, config_k,
                val_selection_id=selection, shuffle_seed=shuffle_seed)
        )
    return out


def write_history_csv(history: list[tuple[int, float, float]], path) -> None:
    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{e},{repr(tr)},{repr(vl)}" for e, tr, vl in history]
    Path(path).write_text("\n".join(lines) + "\n")

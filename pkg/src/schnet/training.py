"""Energy+force objective and the optimisation protocol.

ADAM with a staircase exponential learning-rate decay, an exponential moving
average of the weights, and early stopping on a validation metric computed
with the averaged weights.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .data import Dataset, MiniBatch, MissingLabelsError, batch_order, collate
from .model import SchNetModel

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "lr", "train_loss", "val_energy_mae", "val_force_mae", "wall_time_s")


class TrainingDiverged(RuntimeError):
    """Raised when the loss or a gradient becomes non-finite.

    ``result`` holds the best model found before the failure.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossConfig:
    rho: float = 0.01
    train_forces: bool = True

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be non-negative")

    @property
    def energy_weight(self) -> float:
        return self.rho if self.train_forces else 1.0


def loss(batch: MiniBatch, model: SchNetModel, config: LossConfig = LossConfig()) -> Variable:
    """Mean over molecules of rho (E - Ê)^2 + (1/n) sum_i |F_i + dÊ/dr_i|^2.

    Computed on normalised labels.  The force residual is built with
    ``create_graph=True`` so the result can be differentiated with respect
    to the model parameters.
    """
    if batch.energies is None:
        raise MissingLabelsError("batch has no energy labels")
    if config.train_forces and batch.forces is None:
        raise MissingLabelsError("batch has no force labels but train_forces is set")
    e_ref, f_ref = model.normalizer.normalize(batch.energies,
                                              batch.forces if config.train_forces else None)
    R = Variable(batch.R, requires_grad=config.train_forces)
    energy = model.forward(batch, R)
    per_mol = ad.affine(ad.square(ad.sub(energy, Variable(e_ref))), config.energy_weight)
    if config.train_forces:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ad.UnreachableGradientWarning)
            dEdR = ad.backward(ad.sum_all(energy), [R], create_graph=True)[R]
        residual = ad.add(dEdR, Variable(f_ref))  # F - (-dE/dR)
        per_atom = ad.sum_cols(ad.square(residual))
        inv_n = Variable(1.0 / batch.counts[batch.segments])
        per_mol = ad.add(per_mol, ad.segment_sum(ad.mul(per_atom, inv_n),
                                                 batch.segments, batch.n_molecules))
    return ad.affine(ad.sum_all(per_mol), 1.0 / batch.n_molecules)


def loss_and_grads(batch: MiniBatch, model: SchNetModel, config: LossConfig = LossConfig()):
    """Scalar loss value and a dict of parameter gradients (numpy arrays)."""
    with ad.Graph():
        value = loss(batch, model, config)
        params = list(model.params.values())
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ad.UnreachableGradientWarning)
            gm = ad.backward(value, params)
    return float(value.value), {k: gm[v].value for k, v in model.params.items()}


# ---------------------------------------------------------------------------
# optimiser, schedule, averaging
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Variable], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> AdamState:
    """One bias-corrected ADAM update.  Parameters get fresh arrays."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, var in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        var.value = var.value - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-3
    decay_ratio: float = 0.96
    decay_every: int = 100_000
    staircase: bool = True

    def lr_at(self, t: int) -> float:
        if t < 0:
            raise ValueError("step must be non-negative")
        k = t // self.decay_every if self.staircase else t / self.decay_every
        return self.base_lr * self.decay_ratio ** k


def lr_at(t: int, schedule: LrSchedule = LrSchedule()) -> float:
    return schedule.lr_at(t)


@dataclass
class EmaState:
    shadow: dict
    decay: float = 0.99

    @classmethod
    def from_params(cls, params: dict[str, Variable], decay: float = 0.99) -> EmaState:
        return cls({k: v.value.copy() for k, v in params.items()}, decay)


def ema_update(ema: EmaState, params) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * params."""
    d = ema.decay
    for name, p in params.items():
        value = p.value if isinstance(p, Variable) else np.asarray(p, dtype=np.float64)
        ema.shadow[name] = d * ema.shadow[name] + (1.0 - d) * value
    return ema


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    energy_mae: float
    force_mae: float | None = None


def predict(model: SchNetModel, ds: Dataset, forces: bool = True, batch_size: int = 128):
    """Energies (n_conf,) and, optionally, a list of per-conformation force arrays."""
    energies, force_list = [], []
    for start in range(0, len(ds), batch_size):
        batch = collate(ds.conformations[start:start + batch_size])
        E, F = model.predict_batch(batch, forces=forces)
        energies.append(E)
        if forces:
            force_list.extend(np.split(F, np.cumsum(batch.counts)[:-1]))
    return np.concatenate(energies) if energies else np.zeros(0), (force_list if forces else None)


def evaluate(model: SchNetModel, ds: Dataset, forces: bool | None = None,
             batch_size: int = 128) -> Metrics:
    """Energy MAE over conformations; force MAE over all atoms and components."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    e_ref = ds.energies()
    if forces is None:
        forces = ds.has_forces
    elif forces and not ds.has_forces:
        raise MissingLabelsError("dataset has conformations without force labels")
    e_pred, f_pred = predict(model, ds, forces=forces, batch_size=batch_size)
    energy_mae = float(np.mean(np.abs(e_pred - e_ref)))
    force_mae = None
    if forces:
        f_ref = np.concatenate([c.forces for c in ds])
        force_mae = float(np.mean(np.abs(np.concatenate(f_pred) - f_ref)))
    return Metrics(energy_mae, force_mae)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 32
    max_steps: int = 1_000_000
    eval_interval: int = 1000
    patience: int = 25
    seed: int = 0
    ema_decay: float = 0.99
    schedule: LrSchedule = field(default_factory=LrSchedule)
    loss: LossConfig = field(default_factory=LossConfig)
    selection: str = "combined"   # combined | energy | forces
    log_wall_time: bool = False

    def __post_init__(self):
        if self.selection not in ("combined", "energy", "forces"):
            raise ValueError(f"unknown selection metric {self.selection!r}")
        if self.batch_size < 1 or self.eval_interval < 1 or self.patience < 1:
            raise ValueError("batch_size, eval_interval and patience must be >= 1")


@dataclass
class TrainState:
    """Everything needed to resume training bit-exactly."""

    params: dict
    adam: AdamState
    ema: EmaState
    step: int = 0
    epoch: int = 0
    batch_index: int = 0
    best_metric: float = math.inf
    best_step: int = -1
    best_params: dict | None = None
    evals_since_improvement: int = 0
    loss_sum: float = 0.0
    loss_count: int = 0
    history: list = field(default_factory=list)
    stopped_early: bool = False

    @classmethod
    def fresh(cls, model: SchNetModel, config: TrainConfig) -> TrainState:
        return cls(params=model.snapshot(), adam=AdamState(),
                   ema=EmaState.from_params(model.params, config.ema_decay))


@dataclass
class TrainResult:
    model: SchNetModel          # best EMA weights
    state: TrainState
    history: list

    def metrics_csv(self) -> str:
        return format_metrics(self.history)


def selection_metric(m: Metrics, config: TrainConfig) -> float:
    if config.selection == "energy" or m.force_mae is None:
        return m.energy_mae
    if config.selection == "forces":
        return m.force_mae
    return config.loss.rho * m.energy_mae + m.force_mae


def format_metrics(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                    for c in METRIC_COLUMNS])
    return buf.getvalue()


def _batches_from(ds: Dataset, config: TrainConfig, epoch: int, start: int):
    order = batch_order(len(ds), config.seed, epoch)
    n_batches = math.ceil(len(ds) / config.batch_size)
    for b in range(start, n_batches):
        idx = order[b * config.batch_size:(b + 1) * config.batch_size]
        yield b, collate([ds[i] for i in idx])


def train(model: SchNetModel, train_ds: Dataset, val_ds: Dataset, config: TrainConfig,
          state: TrainState | None = None, log_path=None) -> TrainResult:
    """Run (or resume) training; returns the best EMA model by validation metric.

    ``model`` holds the raw (non-averaged) weights throughout and is left at
    the last step's values.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if not train_ds.has_energies or not val_ds.has_energies:
        raise MissingLabelsError("training requires energy labels on every conformation")
    if config.loss.train_forces and not (train_ds.has_forces and val_ds.has_forces):
        raise MissingLabelsError("train_forces requires force labels on every conformation")
    if state is None:
        state = TrainState.fresh(model, config)
    else:
        model.load_params(state.params)
    val_forces = config.loss.train_forces
    t0 = time.perf_counter()

    def best_model():
        values = state.best_params if state.best_params is not None else state.ema.shadow
        return model.with_params(values)

    def write_log():
        if log_path is not None:
            Path(log_path).write_text(format_metrics(state.history))

    while state.step < config.max_steps and not state.stopped_early:
        for b, batch in _batches_from(train_ds, config, state.epoch, state.batch_index):
            lr = config.schedule.lr_at(state.step)
            value, grads = loss_and_grads(batch, model, config.loss)
            if not math.isfinite(value):
                write_log()
                raise TrainingDiverged(f"loss became {value} at step {state.step}",
                                       TrainResult(best_model(), state, state.history))
            try:
                adam_step(model.params, grads, state.adam, lr)
            except FloatingPointError as exc:
                write_log()
                raise TrainingDiverged(f"step {state.step}: {exc}",
                                       TrainResult(best_model(), state, state.history)) from exc
            ema_update(state.ema, model.params)
            state.step += 1
            state.batch_index = b + 1
            state.loss_sum += value
            state.loss_count += 1

            if state.step % config.eval_interval == 0 or state.step == config.max_steps:
                ema_model = model.with_params(state.ema.shadow)
                m = evaluate(ema_model, val_ds, forces=val_forces)
                metric = selection_metric(m, config)
                state.history.append({
                    "step": state.step,
                    "lr": lr,
                    "train_loss": state.loss_sum / state.loss_count,
                    "val_energy_mae": m.energy_mae,
                    "val_force_mae": m.force_mae,
                    "wall_time_s": (time.perf_counter() - t0) if config.log_wall_time else None,
                })
                state.loss_sum, state.loss_count = 0.0, 0
                log.info("step %d lr %.3g train_loss %.5g val_E %.5g val_F %s",
                         state.step, lr, state.history[-1]["train_loss"], m.energy_mae, m.force_mae)
                if metric < state.best_metric:
                    state.best_metric = metric
                    state.best_step = state.step
                    state.best_params = {k: v.copy() for k, v in state.ema.shadow.items()}
                    state.evals_since_improvement = 0
                else:
                    state.evals_since_improvement += 1
                    if state.evals_since_improvement >= config.patience:
                        state.stopped_early = True
                write_log()
            if state.step >= config.max_steps or state.stopped_early:
                break
        else:
            state.epoch += 1
            state.batch_index = 0
    state.params = model.snapshot()
    write_log()
    return TrainResult(best_model(), state, state.history)


# ---------------------------------------------------------------------------
# train-state persistence
# ---------------------------------------------------------------------------

STATE_FORMAT = "schnet-trainstate"
STATE_VERSION = 1


def save_train_state(path, state: TrainState):
    """Versioned ``.npz``: arrays under params/, adam_m/, adam_v/, ema/, best/; scalars as JSON."""
    arrays = {"__format__": np.array(STATE_FORMAT), "__version__": np.array(STATE_VERSION)}
    groups = {"params": state.params, "adam_m": state.adam.m, "adam_v": state.adam.v,
              "ema": state.ema.shadow, "best": state.best_params or {}}
    for prefix, d in groups.items():
        for k, v in d.items():
            arrays[f"{prefix}/{k}"] = np.asarray(v)
    scalars = {
        "adam": {"t": state.adam.t, "beta1": state.adam.beta1, "beta2": state.adam.beta2,
                 "eps": state.adam.eps},
        "ema_decay": state.ema.decay,
        "step": state.step, "epoch": state.epoch, "batch_index": state.batch_index,
        "best_metric": state.best_metric if math.isfinite(state.best_metric) else None,
        "best_step": state.best_step, "has_best": state.best_params is not None,
        "evals_since_improvement": state.evals_since_improvement,
        "loss_sum": state.loss_sum, "loss_count": state.loss_count,
        "history": state.history, "stopped_early": state.stopped_early,
    }
    arrays["scalars"] = np.array(json.dumps(scalars))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_train_state(path) -> TrainState:
    with np.load(path, allow_pickle=False) as data:
        if str(data["__format__"]) != STATE_FORMAT:
            raise ValueError(f"{path}: not a {STATE_FORMAT} file")
        if int(data["__version__"]) != STATE_VERSION:
            raise ValueError(f"{path}: unsupported train-state version")
        groups: dict[str, dict] = {p: {} for p in ("params", "adam_m", "adam_v", "ema", "best")}
        for key in data.files:
            if "/" in key:
                prefix, name = key.split("/", 1)
                groups[prefix][name] = data[key]
        s = json.loads(str(data["scalars"]))
    a = s["adam"]
    return TrainState(
        params=groups["params"],
        adam=AdamState(groups["adam_m"], groups["adam_v"], a["t"], a["beta1"], a["beta2"], a["eps"]),
        ema=EmaState(groups["ema"], s["ema_decay"]),
        step=s["step"], epoch=s["epoch"], batch_index=s["batch_index"],
        best_metric=math.inf if s["best_metric"] is None else s["best_metric"],
        best_step=s["best_step"],
        best_params=groups["best"] if s["has_best"] else None,
        evals_since_improvement=s["evals_since_improvement"],
        loss_sum=s["loss_sum"], loss_count=s["loss_count"],
        history=s["history"], stopped_early=s["stopped_early"],
    )


class MeanPredictor:
    """Baseline predicting a constant energy and zero forces."""

    def __init__(self, mean: float):
        self.mean = float(mean)

    @classmethod
    def fit(cls, ds: Dataset) -> MeanPredictor:
        return cls(float(np.mean(ds.energies())))

    def predict_batch(self, batch: MiniBatch, forces: bool = True):
        E = np.full(batch.n_molecules, self.mean)
        return E, (np.zeros_like(batch.R) if forces else None)

"""Losses, Adam, the training loop, and the two tank-system neural DAE models."""

from __future__ import annotations

import gc
import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Value
from .data import Trajectory
from .integrators import NeuralDaeModel, NonFiniteStateError, Rollout, rollout
from .nn import MlpConfig, mlp_apply, mlp_forward, mlp_init, standardization


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"training diverged at epoch {epoch}: {message}")
        self.epoch = epoch


# -- losses ------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    residual: float = 1.0
    constraint: float = 1.0

    def __post_init__(self):
        if self.residual < 0 or self.constraint < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.residual == 0 and self.constraint == 0:
            raise ValueError("loss weights cannot both be zero")


def _states(pred) -> tuple:
    if isinstance(pred, Rollout):
        return pred.X(), pred.Y()
    if isinstance(pred, Trajectory):
        return ad.Value(pred.X), ad.Value(pred.Y)
    return pred


def residual_loss(pred, ref: Trajectory) -> Value:
    """Sum over samples of squared state errors, both state groups."""
    X, Y = _states(pred)
    if X.shape[0] != len(ref) or Y.shape[0] != len(ref):
        raise ValueError(f"trajectory lengths differ: {X.shape[0]} vs {len(ref)}")
    if X.shape[1:] != ref.X.shape[1:] or Y.shape[1:] != ref.Y.shape[1:]:
        raise ValueError("state dimensions differ")
    return ad.square_norm(X - ref.X) + ad.square_norm(Y - ref.Y)


def constraint_loss(g: Callable, pred, U: np.ndarray | None = None) -> Value:
    """Sum over samples of squared constraint residuals.

    ``g(X, Y, U)`` maps stacked states (one row per sample) to a residual
    matrix with one row per sample.
    """
    if isinstance(pred, Rollout):
        X, Y = pred.X(), pred.Y()
        U = pred.u_data() if U is None else U
    elif isinstance(pred, Trajectory):
        X, Y = ad.Value(pred.X), ad.Value(pred.Y)
        U = pred.U if U is None else U
    else:
        X, Y = pred
    return ad.square_norm(g(X, Y, U))


def total_loss(pred, ref: Trajectory, g: Callable, weights: LossWeights = LossWeights()) -> Value:
    X, Y = _states(pred)
    U = pred.u_data() if isinstance(pred, Rollout) else ref.U
    loss = weights.residual * residual_loss((X, Y), ref)
    if weights.constraint:
        loss = loss + weights.constraint * constraint_loss(g, (X, Y), U)
    return loss


# -- Adam --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[Value], state: AdamState) -> None:
    """In-place bias-corrected Adam update from ``p.grad``."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient for {p.name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.lr:
            p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- models ------------------------------------------------------------------------

class DaeNetModel:
    """Common plumbing for the tank models: a tape, parameters and a timestepper."""

    kind = ""

    def __init__(self, tape: Tape, dt: float, stepper: str = "euler"):
        self.tape = tape
        self.timestepper = NeuralDaeModel(self.f, self.h, dt, stepper)

    @property
    def dt(self) -> float:
        return self.timestepper.dt

    def parameters(self) -> list[Value]:
        return list(self.tape.parameters)

    def rollout(self, x0, y0, U: np.ndarray, N: int | None = None) -> Rollout:
        N = len(U) - 1 if N is None else N
        return rollout(self.timestepper, np.asarray(x0, float), np.asarray(y0, float),
                       [np.asarray(u, float) for u in U], N)

    def state_dict(self) -> dict:
        return {p.name: p.data.tolist() for p in self.tape.parameters}

    def load_state_dict(self, state: dict) -> None:
        by_name = {p.name: p for p in self.tape.parameters}
        missing = set(by_name) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")
        for name, p in by_name.items():
            new = np.asarray(state[name], dtype=np.float64)
            if new.shape != p.data.shape:
                raise ValueError(f"{name}: shape {new.shape} != {p.data.shape}")
            p.data[...] = new

    def config(self) -> dict:
        raise NotImplementedError

    def f(self, x, y, u):
        raise NotImplementedError

    def h(self, x, y, u):
        raise NotImplementedError

    @staticmethod
    def constraints(X, Y, U):
        raise NotImplementedError


_SPLIT_MAP = np.array([[1.0], [-1.0]])
_SPLIT_OFFSET = np.array([0.0, 1.0])
_EMBED_SECOND = np.array([[0.0], [1.0]])
_SECOND = np.array([1])


class ManifoldModel(DaeNetModel):
    """Two tanks behind a manifold; tank 2's area profile is unknown.

    ``area_net`` (1 -> 5 -> 1) stands in for tank 2's area as a function of
    its height; ``split_net`` (4 -> 5 -> 1, sigmoid output) gives the share
    of inflow routed to tank 1, so the outflows always sum to the inflow.
    """

    kind = "manifold"

    def __init__(self, tape: Tape, area_net: MlpConfig, split_net: MlpConfig,
                 phi1: float = 3.0, dt: float = 1.0, stepper: str = "euler"):
        self.phi1 = phi1
        self._phi1_vec = np.array([float(phi1), 0.0])
        self.area_cfg, self.split_cfg = area_net, split_net
        self.area_net = mlp_init(area_net, tape, "area_net")
        self.split_net = mlp_init(split_net, tape, "split_net")
        super().__init__(tape, dt, stepper)

    @classmethod
    def build(cls, dataset: Trajectory | None = None, seed: int = 0, hidden: int = 5,
              area_bias: float | None = None, phi1: float = 3.0, dt: float | None = None,
              stepper: str = "euler", tape: Tape | None = None) -> "ManifoldModel":
        if dataset is not None:
            shift1, scale1 = standardization(dataset.X[:, 1:2])
            shift2, scale2 = standardization(np.hstack([dataset.X, dataset.Y]))
            dt = dataset.dt if dt is None else dt
        else:
            shift1 = scale1 = shift2 = scale2 = None
        # start the unknown area at the known tank's area: a positive
        # guess keeps early rollouts away from the zero-area singularity
        area_bias = phi1 if area_bias is None else area_bias
        area = MlpConfig((1, hidden, 1), "sigmoid", "linear", seed,
                         shift1, scale1, area_bias)
        split = MlpConfig((4, hidden, 1), "sigmoid", "sigmoid", seed + 1, shift2, scale2)
        return cls(tape or Tape(), area, split, phi1, 1.0 if dt is None else dt, stepper)

    def area(self, height) -> Value:
        return mlp_forward(self.area_net, height)[0]

    def f(self, x, y, u):
        area2 = mlp_apply(self.area_net, (x,), (_SECOND,))
        # (phi1, NN1(x2)) as one affine node
        return y / ad.affine(_EMBED_SECOND, area2, self._phi1_vec)

    def h(self, x, y, u):
        share = mlp_apply(self.split_net, (x, y))
        # (u s, u - u s) as one affine node
        u0 = float(u[0])
        return ad.affine(_SPLIT_MAP * u0, share, _SPLIT_OFFSET * u0)

    @staticmethod
    def constraints(X, Y, U):
        U = np.asarray(U)
        return ad.stack([Y[:, 0] + Y[:, 1] - U[:, 0], X[:, 0] - X[:, 1]])

    def area_profile(self, heights) -> np.ndarray:
        return np.array([self.area(np.array([h], float)).data for h in heights], dtype=float)

    def config(self) -> dict:
        return {"kind": self.kind, "phi1": self.phi1, "dt": self.dt,
                "stepper": self.timestepper.stepper,
                "area_net": asdict(self.area_cfg), "split_net": asdict(self.split_cfg)}

    @classmethod
    def from_config(cls, cfg: dict) -> "ManifoldModel":
        return cls(Tape(), _mlp_cfg(cfg["area_net"]), _mlp_cfg(cfg["split_net"]),
                   cfg["phi1"], cfg["dt"], cfg.get("stepper", "euler"))


_PUMP_INPUTS = np.array([0, 3])
_SPLIT_INPUTS = np.array([1, 2])
_OUTLET_HEIGHTS = np.array([0, 2])
_BRANCH_MAP = np.array([[0.0], [1.0], [-1.0]])
_BRANCH_OFFSET = np.array([1.0, 0.0, 1.0])

_NETWORK_FLOW_MAP = np.array([
    # y0   y1   y2   y3   y4
    [0.0, 1.0, 0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 1.0, -1.0],
    [-1.0, 0.0, 0.0, 0.0, 1.0],
])


class NetworkModel(DaeNetModel):
    """Closed tank network with known tank areas and outlet laws.

    ``pump_net`` (inputs x1, x4) replaces the level-controlled pump law,
    ``split_net`` (inputs x2, x3, sigmoid output) splits the pump flow at
    the manifold, and the outlet discharge coefficients are trainable.
    """

    kind = "network"

    def __init__(self, tape: Tape, pump_net: MlpConfig, split_net: MlpConfig,
                 phi=(2.0, 1.0, 1.0, 10.0), alpha_init: float = 0.2, dt: float = 0.1,
                 stepper: str = "euler"):
        self.phi = tuple(float(p) for p in phi)
        self.pump_cfg, self.split_cfg = pump_net, split_net
        self.alpha_init = alpha_init
        self.pump_net = mlp_init(pump_net, tape, "pump_net")
        self.split_net = mlp_init(split_net, tape, "split_net")
        self.alpha1 = tape.parameter(alpha_init, "alpha1")
        self.alpha2 = tape.parameter(alpha_init, "alpha2")
        self._flow_map = _NETWORK_FLOW_MAP / np.asarray(self.phi)[:, None]
        self._zero4 = np.zeros(4)
        super().__init__(tape, dt, stepper)

    @classmethod
    def build(cls, dataset: Trajectory | None = None, seed: int = 0, hidden: int = 30,
              phi=(2.0, 1.0, 1.0, 10.0), alpha_init: float = 0.2, dt: float | None = None,
              stepper: str = "euler", tape: Tape | None = None) -> "NetworkModel":
        if dataset is not None:
            shift1, scale1 = standardization(dataset.X[:, [0, 3]])
            shift2, scale2 = standardization(dataset.X[:, [1, 2]])
            (flow_mean,), (flow_sd,) = standardization(dataset.Y[:, :1])
            dt = dataset.dt if dt is None else dt
        else:
            shift1 = scale1 = shift2 = scale2 = None
            flow_mean, flow_sd = 0.0, 1.0
        # the pump net works in standardized flow units: a fresh network's
        # O(1) output would otherwise drain the tanks within a few steps
        pump = MlpConfig((2, hidden, hidden, 1), "relu", "linear", seed, shift1, scale1,
                         output_shift=flow_mean, output_scale=flow_sd)
        split = MlpConfig((2, hidden, hidden, 1), "relu", "sigmoid", seed + 1, shift2, scale2)
        return cls(tape or Tape(), pump, split, phi, alpha_init,
                   0.1 if dt is None else dt, stepper)

    def with_areas(self, phi) -> "NetworkModel":
        """Copy with different (known) tank areas and the same learned parameters."""
        other = NetworkModel(Tape(), self.pump_cfg, self.split_cfg, phi, self.alpha_init,
                             self.dt, self.timestepper.stepper)
        other.load_state_dict(self.state_dict())
        return other

    def f(self, x, y, u):
        return ad.affine(self._flow_map, y, self._zero4)

    def h(self, x, y, u):
        y0 = mlp_apply(self.pump_net, (x,), (_PUMP_INPUTS,))
        share = mlp_apply(self.split_net, (x,), (_SPLIT_INPUTS,))
        # (y0, y0 s, y0 (1 - s)): the two branches sum to y0 by construction
        flows = ad.affine(_BRANCH_MAP, share, _BRANCH_OFFSET) * y0
        alphas = ad.stack([self.alpha1, self.alpha2])
        outlets = alphas * ad.sqrt(ad.index(x, _OUTLET_HEIGHTS))
        return ad.concat([flows, outlets])

    @staticmethod
    def constraints(X, Y, U):
        return ad.stack([Y[:, 0] - Y[:, 1] - Y[:, 2], X[:, 0] - X[:, 1]])

    def config(self) -> dict:
        return {"kind": self.kind, "phi": list(self.phi), "dt": self.dt,
                "alpha_init": self.alpha_init, "stepper": self.timestepper.stepper,
                "pump_net": asdict(self.pump_cfg), "split_net": asdict(self.split_cfg)}

    @classmethod
    def from_config(cls, cfg: dict) -> "NetworkModel":
        return cls(Tape(), _mlp_cfg(cfg["pump_net"]), _mlp_cfg(cfg["split_net"]),
                   cfg["phi"], cfg.get("alpha_init", 0.2), cfg["dt"], cfg.get("stepper", "euler"))


def _mlp_cfg(d: dict) -> MlpConfig:
    d = dict(d)
    d["layer_sizes"] = tuple(d["layer_sizes"])
    for k in ("input_shift", "input_scale"):
        if d.get(k) is not None:
            d[k] = tuple(d[k])
    return MlpConfig(**d)


MODEL_KINDS = {"manifold": ManifoldModel, "network": NetworkModel}


def save_checkpoint(model: DaeNetModel, path: str | Path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"model": model.config(), "params": model.state_dict(), "extra": extra or {}}
    path.write_text(json.dumps(doc) + "\n")


def load_checkpoint(path: str | Path) -> DaeNetModel:
    doc = json.loads(Path(path).read_text())
    cfg = doc["model"]
    model = MODEL_KINDS[cfg["kind"]].from_config(cfg)
    model.load_state_dict(doc["params"])
    return model


# -- training loop -------------------------------------------------------------------

@dataclass
class TrainConfig:
    max_epochs: int = 20000
    patience: int = 20
    lr: float = 1e-3
    loss_tol: float = 1e-6
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    horizon: int | None = None
    checkpoint_every: int = 1000
    checkpoint_path: str | None = None
    log_every: int = 0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")


@dataclass
class TrainReport:
    loss_history: list[float]
    final_params: dict
    metrics: dict
    wall_time: float
    seed: int
    epochs: int
    stop_reason: str

    def to_dict(self) -> dict:
        return asdict(self)


def _horizon(dataset: Trajectory, cfg: TrainConfig) -> int:
    N = len(dataset) - 1 if cfg.horizon is None else cfg.horizon
    if not 0 <= N <= len(dataset) - 1:
        raise ValueError(f"horizon {N} exceeds dataset length {len(dataset)}")
    return N


def _truncate(traj: Trajectory, N: int) -> Trajectory:
    if N == len(traj) - 1:
        return traj
    return Trajectory(traj.times[:N + 1], traj.X[:N + 1], traj.Y[:N + 1], traj.U[:N + 1],
                      traj.meta)


def epoch_loss(model: DaeNetModel, ref: Trajectory, weights: LossWeights) -> Value:
    """Forward pass of one epoch: full-horizon rollout from the reference IC."""
    model.tape.reset()
    pred = model.rollout(ref.X[0], ref.Y[0], ref.U, len(ref) - 1)
    return total_loss(pred, ref, model.constraints, weights)


def _epochs(model, ref, cfg, params, adam, history, log) -> tuple[int, str]:
    rising = 0
    for epoch in range(cfg.max_epochs):
        try:
            loss = epoch_loss(model, ref, cfg.weights)
        except (NonFiniteStateError, ad.DomainError, FloatingPointError) as exc:
            raise DivergenceError(epoch, str(exc)) from exc
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(epoch, f"loss is {value}")
        if history and value > history[-1]:
            rising += 1
        else:
            rising = 0
        history.append(value)
        if value <= cfg.loss_tol:
            return epoch, "loss_tol"
        if rising >= cfg.patience:
            return epoch, "early_stop"
        model.tape.zero_grad()
        model.tape.backward(loss)
        try:
            adam_step(params, adam)
        except FloatingPointError as exc:
            raise DivergenceError(epoch, str(exc)) from exc
        if log and cfg.log_every and epoch % cfg.log_every == 0:
            log(f"epoch {epoch:6d}  loss {value:.6e}")
        if cfg.checkpoint_path and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, cfg.checkpoint_path, {"epoch": epoch + 1})
        if epoch % 1000 == 999:
            gc.collect()
    return cfg.max_epochs, "max_epochs"


def train(model: DaeNetModel, dataset: Trajectory, cfg: TrainConfig = TrainConfig(),
          log: Callable[[str], None] | None = None) -> TrainReport:
    """Full-batch training: one rollout, one backward pass, one Adam step per epoch.

    Stops after ``max_epochs``, when the loss drops to ``loss_tol``, or after
    ``patience`` consecutive epochs of strictly increasing loss.
    """
    if abs(dataset.dt - model.dt) > 1e-9 * max(1.0, model.dt):
        raise ValueError(f"dataset spacing {dataset.dt} != model dt {model.dt}")
    ref = _truncate(dataset, _horizon(dataset, cfg))
    params = model.parameters()
    adam = AdamState(lr=cfg.lr)
    history: list[float] = []
    t0 = time.perf_counter()
    epoch = 0
    # the per-epoch graph is acyclic and freed by reference counting, so
    # cyclic collection only adds pauses; run it occasionally instead
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        epoch, stop = _epochs(model, ref, cfg, params, adam, history, log)
    finally:
        if gc_was_enabled:
            gc.enable()
    model.tape.reset()
    wall = time.perf_counter() - t0
    metrics = evaluate(model, ref)
    metrics["final_loss"] = history[-1] if history else math.nan
    if cfg.checkpoint_path:
        save_checkpoint(model, cfg.checkpoint_path, {"epoch": epoch})
    return TrainReport(history, model.state_dict(), metrics, wall, cfg.seed, len(history), stop)


def predict(model: DaeNetModel, ref: Trajectory) -> Trajectory:
    """Open-loop rollout from ``ref``'s initial state, driven by ``ref``'s inputs."""
    model.tape.reset()
    roll = model.rollout(ref.X[0], ref.Y[0], ref.U, len(ref) - 1)
    out = Trajectory(ref.times, roll.x_data(), roll.y_data(), ref.U,
                     {"system": ref.meta.get("system", model.kind), "dt": ref.dt,
                      "source": "model"})
    model.tape.reset()
    return out


def conservation_residual(model: DaeNetModel, traj: Trajectory) -> float:
    """Largest absolute flow-balance violation at the manifold along a rollout.

    Only the model's outputs (rows 1 onward) are checked; row 0 is the
    initial state supplied by the caller, possibly noisy data. ``h`` maps
    the input held over step k to the algebraic state at k + 1, so each
    predicted split is checked against the inflow that produced it.
    """
    Y = traj.Y[1:]
    if len(Y) == 0:
        return 0.0
    if model.kind == "manifold":
        r = Y[:, 0] + Y[:, 1] - traj.U[:-1, 0]
    elif model.kind == "network":
        r = Y[:, 1] + Y[:, 2] - Y[:, 0]
    else:
        return math.nan
    return float(np.max(np.abs(r)))


def evaluate(model: DaeNetModel, ref: Trajectory) -> dict:
    pred = predict(model, ref)
    dX = pred.X - ref.X
    dY = pred.Y - ref.Y
    return {
        "height_mse": float(np.mean(dX ** 2)),
        "flow_mse": float(np.mean(dY ** 2)),
        "state_mse": float(np.mean(np.hstack([dX, dY]) ** 2)),
        "height_sq_error_per_sample": float(np.mean(np.sum(dX ** 2, axis=1))),
        "height_equality_max": float(np.max(np.abs(pred.X[:, 0] - pred.X[:, 1]))),
        "conservation_max": conservation_residual(model, pred),
    }

"""Small feed-forward networks built from tape operations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tape, Value

HIDDEN_ACTIVATIONS = {"sigmoid": ad.sigmoid, "relu": ad.relu}
OUTPUT_ACTIVATIONS = {"linear": None, "sigmoid": ad.sigmoid}
HIDDEN_ACTIVATIONS_NP = {"sigmoid": expit, "relu": lambda z: z * (z > 0.0)}
OUTPUT_ACTIVATIONS_NP = {"linear": None, "sigmoid": expit}


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; streams are identical across platforms."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


@dataclass(frozen=True)
class MlpConfig:
    """Architecture of a dense network.

    ``input_shift``/``input_scale`` define a fixed (non-trainable)
    standardization ``(x - shift) / scale`` applied before the first layer.
    ``output_bias`` is the initial value of the final bias vector, and
    ``output_shift + output_scale * out`` is a fixed map applied to the
    activated output (so a network can start on the scale of its target).
    """

    layer_sizes: tuple[int, ...]
    hidden_activation: str = "sigmoid"
    output_activation: str = "linear"
    seed: int = 0
    input_shift: tuple[float, ...] | None = None
    input_scale: tuple[float, ...] | None = None
    output_bias: float = 0.0
    output_shift: float = 0.0
    output_scale: float = 1.0

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or any(n < 1 for n in sizes):
            raise ValueError(f"layer_sizes must have >= 2 positive entries, got {sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        for name in ("input_shift", "input_scale"):
            v = getattr(self, name)
            if v is not None:
                v = tuple(float(s) for s in np.atleast_1d(v))
                if len(v) != sizes[0]:
                    raise ValueError(f"{name} must have {sizes[0]} entries")
                object.__setattr__(self, name, v)
        if self.input_scale is not None and any(s == 0 for s in self.input_scale):
            raise ValueError("input_scale entries must be nonzero")
        if self.output_scale == 0:
            raise ValueError("output_scale must be nonzero")

    @property
    def rescales_output(self) -> bool:
        return self.output_shift != 0.0 or self.output_scale != 1.0

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))


@dataclass
class MlpParams:
    config: MlpConfig
    weights: list[Value] = field(default_factory=list)
    biases: list[Value] = field(default_factory=list)

    _std: tuple | None = field(default=None, repr=False, compare=False)
    _plan: tuple | None = field(default=None, repr=False, compare=False)

    def standardizer(self) -> tuple[np.ndarray, np.ndarray]:
        """``(scale, offset)`` with ``(x - shift) / s == x * scale + offset``."""
        if self._std is None:
            n = self.config.layer_sizes[0]
            shift = np.asarray(self.config.input_shift or np.zeros(n))
            scale = 1.0 / np.asarray(self.config.input_scale or np.ones(n))
            self._std = (scale, -shift * scale)
        return self._std

    def values(self) -> list[Value]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def to_arrays(self) -> dict[str, list]:
        return {
            "weights": [W.data.tolist() for W in self.weights],
            "biases": [b.data.tolist() for b in self.biases],
        }

    def load_arrays(self, arrays: dict) -> None:
        for W, data in zip(self.weights, arrays["weights"]):
            new = np.asarray(data, dtype=np.float64)
            if new.shape != W.data.shape:
                raise ValueError(f"weight shape {new.shape} != {W.data.shape}")
            W.data[...] = new
        for b, data in zip(self.biases, arrays["biases"]):
            new = np.asarray(data, dtype=np.float64)
            if new.shape != b.data.shape:
                raise ValueError(f"bias shape {new.shape} != {b.data.shape}")
            b.data[...] = new


def mlp_init(config: MlpConfig, tape: Tape, name: str = "mlp") -> MlpParams:
    """Glorot-uniform weights and zero biases, registered on ``tape``."""
    rng = make_rng(config.seed)
    params = MlpParams(config)
    sizes = config.layer_sizes
    n_layers = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-lim, lim, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        if i == n_layers - 1:
            b += config.output_bias
        params.weights.append(tape.parameter(W, f"{name}.W{i}"))
        params.biases.append(tape.parameter(b, f"{name}.b{i}"))
    return params


def mlp_forward(params: MlpParams, x, fused: bool = True) -> Value:
    """Evaluate the network at a single input vector.

    With ``fused=True`` the whole network is one tape node whose backward
    pass is written out by hand; otherwise every layer is recorded as
    separate elementary operations. Both give identical values and
    gradients; the fused path is several times cheaper per call.
    """
    if fused:
        return mlp_apply(params, (x,))
    cfg = params.config
    n_in = cfg.layer_sizes[0]
    xd = x.data if isinstance(x, Value) else np.asarray(x, dtype=np.float64)
    if xd.shape != (n_in,):
        raise ValueError(f"mlp input must have shape ({n_in},), got {xd.shape}")
    h = x
    if cfg.input_shift is not None or cfg.input_scale is not None:
        scale, offset = params.standardizer()
        h = ad.scale_shift(h, scale, offset)
    act = HIDDEN_ACTIVATIONS[cfg.hidden_activation]
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.affine(W, h, b)
        if i < last:
            h = act(h)
    out_act = OUTPUT_ACTIVATIONS[cfg.output_activation]
    if out_act is not None:
        h = out_act(h)
    if cfg.rescales_output:
        h = ad.scale_shift(h, cfg.output_scale, cfg.output_shift)
    return h


_ACT_GRAD = {
    # derivative expressed through the activation output
    "sigmoid": lambda out: out * (1.0 - out),
    "relu": lambda out: (out > 0.0).astype(np.float64),
    "linear": None,
}


def _plan(params: MlpParams) -> tuple:
    # parameter arrays are updated in place, so references stay valid
    if params._plan is None:
        cfg = params.config
        scale, offset = params.standardizer()
        params._plan = (
            [W.data for W in params.weights], [b.data for b in params.biases],
            tuple(params.values()), scale, offset,
            HIDDEN_ACTIVATIONS_NP[cfg.hidden_activation],
            OUTPUT_ACTIVATIONS_NP[cfg.output_activation],
            _ACT_GRAD[cfg.hidden_activation], _ACT_GRAD[cfg.output_activation],
            (cfg.output_scale, cfg.output_shift) if cfg.rescales_output else None,
        )
    return params._plan


def mlp_apply(params: MlpParams, parts: Sequence, select: Sequence | None = None) -> Value:
    """Fused forward pass on the concatenation of ``parts``.

    ``select``, if given, holds one index array (or ``None`` for all
    entries) per part, so callers can feed slices of state vectors without
    recording separate indexing and concatenation nodes.
    """
    Ws, bs, weights, scale, offset, hidden, out_act, hgrad, ograd, rescale = _plan(params)
    parts = tuple(p if type(p) is Value else Value(np.asarray(p, dtype=np.float64))
                  for p in parts)
    if select is None:
        pieces = [p.data for p in parts]
    else:
        pieces = [p.data if s is None else p.data[s] for p, s in zip(parts, select)]
    xd = pieces[0] if len(pieces) == 1 else np.concatenate(pieces)
    n_in = Ws[0].shape[1]
    if xd.shape != (n_in,):
        raise ValueError(f"mlp input must have shape ({n_in},), got {xd.shape}")
    acts = [xd * scale + offset]
    last = len(Ws) - 1
    for i in range(last):
        acts.append(hidden(Ws[i] @ acts[-1] + bs[i]))
    out = Ws[last] @ acts[-1] + bs[last]
    if out_act is not None:
        out = out_act(out)
    act_out = out
    if rescale is not None:
        out = out * rescale[0] + rescale[1]
    need = [p.requires_grad for p in parts]
    if not weights[0].requires_grad:
        if not any(need):
            return Value(out)
        tape = next(p.tape for p in parts if p.requires_grad)
    else:
        tape = weights[0].tape
    bounds = [0]
    for q in pieces:
        bounds.append(bounds[-1] + len(q))
    records = _records(params, tape)

    def vjp(g):
        deltas = [None] * (last + 1)
        if rescale is not None:
            g = g * rescale[0]
        if ograd is not None:
            g = g * ograd(act_out)
        for i in range(last, -1, -1):
            deltas[i] = g
            g = Ws[i].T @ g
            if i > 0:
                g = g * hgrad(acts[i])
        records.append((deltas, acts))
        g = g * scale
        in_grads = []
        for k, p in enumerate(parts):
            if not need[k]:
                in_grads.append(None)
                continue
            gk = g[bounds[k]:bounds[k + 1]]
            s = None if select is None else select[k]
            if s is None:
                in_grads.append(gk)
            else:
                full = np.zeros(p.data.shape)
                np.add.at(full, s, gk)
                in_grads.append(full)
        return in_grads

    return ad.deferred_node(tape, out, parts, vjp)


def _records(params: MlpParams, tape: Tape) -> list:
    """Per-sweep buffer of (layer deltas, layer inputs) for one network.

    Weight gradients are summed over all calls with a single matrix
    product per layer when the reverse sweep finishes.
    """
    key = id(params)
    entry = tape.finalizers.get(key)
    if entry is not None:
        return entry.records
    records: list = []

    def finalize():
        if not records:
            return
        for i, (W, b) in enumerate(zip(params.weights, params.biases)):
            G = np.array([r[0][i] for r in records])
            A = np.array([r[1][i] for r in records])
            if W.requires_grad:
                gW, gb = G.T @ A, G.sum(axis=0)
                W.adj = gW if W.adj is None else W.adj + gW
                b.adj = gb if b.adj is None else b.adj + gb
        records.clear()

    finalize.records = records
    tape.finalizers[key] = finalize
    return records


def standardization(samples: Sequence | np.ndarray) -> tuple[tuple, tuple]:
    """Column mean and standard deviation (unit where a column is constant)."""
    z = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    mu = z.mean(axis=0)
    sd = z.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return tuple(mu.tolist()), tuple(sd.tolist())

"""Command-line entry point: generate | train | eval | extrapolate | gradcheck.

Every command reads one JSON experiment file (``--config``); all defaults
reproduce the stock experiments, so an empty ``{"experiment": "manifold"}``
is a complete configuration. Exit codes: 0 ok, 1 numerical failure,
2 invalid configuration.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .data import (NoiseSpec, Trajectory, TrajectoryFormatError, add_noise, mse,
                   noise_variance, read_csv, write_csv, write_report, write_svg_lineplot)
from .integrators import NonFiniteStateError
from .reference import (ConvergenceError, Index1Violation, Inflow, ManifoldSpec,
                        NegativeHeightError, NetworkSpec, check_index1, manifold_dae,
                        network_dae, simulate_manifold, simulate_network)
from .training import (DivergenceError, LossWeights, ManifoldModel, NetworkModel, TrainConfig,
                       conservation_residual, epoch_loss, evaluate, load_checkpoint, predict,
                       train)

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2

NUMERICAL_ERRORS = (DivergenceError, NonFiniteStateError, NegativeHeightError,
                    ConvergenceError, Index1Violation, ad.DomainError, FloatingPointError)


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the field path."""


# -- configuration ---------------------------------------------------------------

DEFAULTS: dict[str, dict] = {
    "manifold": {
        "system": {"phi1": 3.0, "phi2_offset": 0.1, "dt": 1.0, "horizon": 500.0, "x0": 0.2,
                   "substeps": 10,
                   "inflow": {"kind": "constant", "level": 0.5, "amplitude": 0.25,
                              "period": 100.0}},
        "model": {"hidden": 5, "area_bias": None, "stepper": "euler"},
        "extrapolate": {"inflow": {"kind": "sinusoid"}},
    },
    "network": {
        "system": {"phi": [2.0, 1.0, 1.0, 10.0], "pump_gain": 0.1, "alpha1": 0.1,
                   "alpha2": 0.1, "dt": 0.1, "horizon": 20.0, "x0": [1.0, 1.0, 1.0, 2.0],
                   "substeps": 10},
        "model": {"hidden": 30, "alpha_init": 0.2, "stepper": "euler"},
        "extrapolate": {"phi": [1.0, 1.0, 1.0, 10.0]},
    },
}

COMMON_DEFAULTS: dict[str, Any] = {
    "train": {"max_epochs": 20000, "patience": 20, "lr": 1e-3, "loss_tol": 1e-6,
              "weights": {"residual": 1.0, "constraint": 1.0}, "horizon": None,
              "checkpoint_every": 1000, "log_every": 0},
    "noise": {"snr_db": None, "seed": 0, "channels": "xy"},
    "gradcheck": {"horizon": 50, "tolerance": 1e-4, "fd_step": 1e-6},
    "out": "runs",
    "seed": 0,
}


@dataclass
class ExperimentConfig:
    experiment: str
    system: dict
    model: dict
    train: dict
    noise: dict
    extrapolate: dict
    gradcheck: dict
    out: str
    seed: int

    # -- derived objects --
    def system_spec(self, overrides: dict | None = None):
        s = _merge(self.system, overrides or {})
        s["substeps"] = int(s["substeps"])
        if self.experiment == "manifold":
            s["inflow"] = Inflow(**s["inflow"])
            return ManifoldSpec(**s)
        s["phi"] = tuple(s["phi"])
        s["x0"] = tuple(s["x0"])
        return NetworkSpec(**s)

    def scenario_spec(self):
        return self.system_spec(self.extrapolate)

    def noise_spec(self) -> NoiseSpec:
        snr = self.noise["snr_db"]
        return NoiseSpec(math.inf if snr is None else float(snr), int(self.noise["seed"]),
                         self.noise["channels"])

    def train_config(self, checkpoint_path: str | None = None) -> TrainConfig:
        t = dict(self.train)
        t["weights"] = LossWeights(**t["weights"])
        if self.noise["snr_db"] is not None:
            # an absolute loss target is meaningless above a noise floor
            t["loss_tol"] = 0.0
        return TrainConfig(seed=self.seed, checkpoint_path=checkpoint_path, **t)

    def build_model(self, dataset: Trajectory):
        m = self.model
        if self.experiment == "manifold":
            return ManifoldModel.build(dataset, seed=self.seed, hidden=m["hidden"],
                                       area_bias=m["area_bias"], phi1=self.system["phi1"],
                                       stepper=m["stepper"])
        return NetworkModel.build(dataset, seed=self.seed, hidden=m["hidden"],
                                  phi=tuple(self.system["phi"]), alpha_init=m["alpha_init"],
                                  stepper=m["stepper"])


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(given: dict, allowed: dict, path: str) -> None:
    for k, v in given.items():
        where = f"{path}.{k}" if path else k
        if k not in allowed:
            raise ConfigError(f"{where}: unknown field")
        if isinstance(allowed[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}: expected an object")
            _check_keys(v, allowed[k], where)


def _number(d: dict, key: str, path: str, positive: bool = False, nonneg: bool = False,
            integer: bool = False, optional: bool = False):
    v = d.get(key)
    where = f"{path}.{key}"
    if v is None and optional:
        return
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{where}: expected a finite number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(f"{where}: expected an integer, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(f"{where}: must be > 0, got {v!r}")
    if nonneg and v < 0:
        raise ConfigError(f"{where}: must be >= 0, got {v!r}")


def _validate_system(s: dict, kind: str, path: str) -> None:
    _number(s, "dt", path, positive=True)
    _number(s, "horizon", path, positive=True)
    _number(s, "substeps", path, positive=True, integer=True)
    if kind == "manifold":
        _number(s, "phi1", path, positive=True)
        _number(s, "phi2_offset", path, positive=True)
        _number(s, "x0", path, nonneg=True)
        inflow = s["inflow"]
        if inflow["kind"] not in ("constant", "sinusoid"):
            raise ConfigError(f"{path}.inflow.kind: must be 'constant' or 'sinusoid'")
        for k in ("level", "amplitude"):
            _number(inflow, k, f"{path}.inflow")
        _number(inflow, "period", f"{path}.inflow")
        if inflow["period"] == 0:
            raise ConfigError(f"{path}.inflow.period: must be nonzero")
        return
    for key in ("phi", "x0"):
        v = s[key]
        if not isinstance(v, list) or len(v) != 4:
            raise ConfigError(f"{path}.{key}: expected a list of four numbers")
        for i in range(4):
            _number({str(i): v[i]}, str(i), f"{path}.{key}", nonneg=True,
                    positive=(key == "phi"))
    if s["x0"][0] != s["x0"][1]:
        raise ConfigError(f"{path}.x0: tanks 1 and 2 share a datum, x0[0] must equal x0[1]")
    for key in ("pump_gain", "alpha1", "alpha2"):
        _number(s, key, path, nonneg=True)


def load_config(source: str | Path | dict) -> ExperimentConfig:
    """Parse and validate a configuration (path to JSON, or an already-loaded dict)."""
    if isinstance(source, dict):
        raw = copy.deepcopy(source)
    else:
        try:
            raw = json.loads(Path(source).read_text())
        except OSError as exc:
            raise ConfigError(f"config: cannot read {source}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be an object")
    kind = raw.get("experiment")
    if kind not in DEFAULTS:
        raise ConfigError(f"experiment: must be one of {sorted(DEFAULTS)}, got {kind!r}")
    defaults = _merge(COMMON_DEFAULTS, DEFAULTS[kind])
    defaults["experiment"] = kind
    # the scenario may override any system field
    allowed = dict(defaults, extrapolate=defaults["system"])
    _check_keys(raw, allowed, "")
    cfg = _merge(defaults, raw)

    _validate_system(cfg["system"], kind, "system")
    try:
        scen = _merge(cfg["system"], cfg["extrapolate"])
    except AttributeError:
        raise ConfigError("extrapolate: expected an object") from None
    _validate_system(scen, kind, "extrapolate")

    m = cfg["model"]
    _number(m, "hidden", "model", positive=True, integer=True)
    if m["stepper"] not in ("euler", "rk4"):
        raise ConfigError("model.stepper: must be 'euler' or 'rk4'")
    if kind == "manifold":
        _number(m, "area_bias", "model", optional=True)
    else:
        _number(m, "alpha_init", "model", nonneg=True)

    t = cfg["train"]
    _number(t, "max_epochs", "train", positive=True, integer=True)
    _number(t, "patience", "train", positive=True, integer=True)
    _number(t, "lr", "train", nonneg=True)
    _number(t, "loss_tol", "train", nonneg=True)
    _number(t, "horizon", "train", positive=True, integer=True, optional=True)
    _number(t, "checkpoint_every", "train", nonneg=True, integer=True)
    _number(t, "log_every", "train", nonneg=True, integer=True)
    for k in ("residual", "constraint"):
        _number(t["weights"], k, "train.weights", nonneg=True)
    if t["weights"]["residual"] == 0 and t["weights"]["constraint"] == 0:
        raise ConfigError("train.weights: residual and constraint cannot both be zero")

    n = cfg["noise"]
    _number(n, "snr_db", "noise", optional=True)
    _number(n, "seed", "noise", nonneg=True, integer=True)
    if n["channels"] not in ("x", "y", "xy"):
        raise ConfigError("noise.channels: must be 'x', 'y' or 'xy'")

    g = cfg["gradcheck"]
    _number(g, "horizon", "gradcheck", positive=True, integer=True)
    _number(g, "tolerance", "gradcheck", positive=True)
    _number(g, "fd_step", "gradcheck", positive=True)

    _number(cfg, "seed", "", nonneg=True, integer=True)
    if not isinstance(cfg["out"], str) or not cfg["out"]:
        raise ConfigError("out: expected a nonempty path string")

    for section in (t, g):
        for k in ("max_epochs", "patience", "horizon", "checkpoint_every", "log_every"):
            if section.get(k) is not None:
                section[k] = int(section[k])
    cfg["seed"] = int(cfg["seed"])
    out = ExperimentConfig(**cfg)
    try:
        out.system_spec()
        out.scenario_spec()
    except ValueError as exc:
        raise ConfigError(f"system: {exc}") from None
    return out


# -- commands --------------------------------------------------------------------

def _simulate(cfg: ExperimentConfig, spec) -> Trajectory:
    return simulate_manifold(spec) if cfg.experiment == "manifold" else simulate_network(spec)


def _index1_at_ic(cfg: ExperimentConfig, spec, traj: Trajectory) -> dict:
    dae = manifold_dae(spec) if cfg.experiment == "manifold" else network_dae(spec)
    chk = check_index1(dae.g, traj.X[0], traj.Y[0], traj.U[0])
    return {"ok": bool(chk.ok), "condition_number": float(chk.condition_number)}


def cmd_generate(cfg: ExperimentConfig, out: Path) -> dict:
    spec = cfg.system_spec()
    truth = _simulate(cfg, spec)
    index1 = _index1_at_ic(cfg, spec, truth)
    truth.meta["index1_at_ic"] = index1
    truth.meta["seed"] = cfg.seed
    data = add_noise(truth, cfg.noise_spec())
    out.mkdir(parents=True, exist_ok=True)
    write_csv(truth, out / "truth.csv")
    write_csv(data, out / "dataset.csv")
    summary = {"rows": len(data), "dt": data.dt, "index1_at_ic": index1,
               "noisy": cfg.noise["snr_db"] is not None}
    if summary["noisy"]:
        ns = cfg.noise_spec()
        summary["noise_variance"] = {
            g: noise_variance(getattr(truth, g.upper()), ns.snr_db).tolist()
            for g in ns.channels if getattr(truth, g.upper()).shape[1]}
    write_report(summary, out / "generate.json")
    return summary


def cmd_train(cfg: ExperimentConfig, out: Path, dataset: Path) -> dict:
    data = read_csv(dataset)
    model = cfg.build_model(data)
    ckpt = out / "checkpoint.json"
    report = train(model, data, cfg.train_config(str(ckpt)), log=_stderr)
    write_report(report.to_dict(), out / "train_report.json")
    return {"epochs": report.epochs, "stop_reason": report.stop_reason,
            "wall_time": report.wall_time, **report.metrics}


def _area_plot(model: ManifoldModel, heights: np.ndarray, out: Path, offset: float) -> float:
    hs = np.linspace(float(heights.min()), float(heights.max()), 200)
    learned = model.area_profile(hs)
    true = np.sqrt(hs) + offset
    write_svg_lineplot([("true area", hs, true), ("learned area", hs, learned)],
                       out / "area_profile.svg", "Tank 2 area", "height", "area",
                       dashed={"learned area"})
    return float(np.mean((learned - true) ** 2))


def _overlay_plots(pred: Trajectory, ref: Trajectory, out: Path, tag: str) -> None:
    heights, flows = [], []
    for j in range(ref.n_x):
        heights += [(f"x{j + 1} true", ref.times, ref.X[:, j]),
                    (f"x{j + 1} model", pred.times, pred.X[:, j])]
    for j in range(ref.n_y):
        flows += [(f"y{j + 1} true", ref.times, ref.Y[:, j]),
                  (f"y{j + 1} model", pred.times, pred.Y[:, j])]
    dashed = {name for name, _, _ in heights + flows if name.endswith("model")}
    write_svg_lineplot(heights, out / f"{tag}_heights.svg", f"{tag}: heights", "t", "height",
                       dashed=dashed)
    write_svg_lineplot(flows, out / f"{tag}_flows.svg", f"{tag}: flows", "t", "flow",
                       dashed=dashed)


def cmd_eval(cfg: ExperimentConfig, out: Path, checkpoint: Path, reference: Path) -> dict:
    model = load_checkpoint(checkpoint)
    ref = read_csv(reference)
    metrics = evaluate(model, ref)
    out.mkdir(parents=True, exist_ok=True)
    _overlay_plots(predict(model, ref), ref, out, "eval")
    if isinstance(model, ManifoldModel):
        metrics["area_mse"] = _area_plot(model, ref.X[:, 1], out, cfg.system["phi2_offset"])
    write_report(metrics, out / "eval.json")
    return metrics


def sign_agreement(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of samples where the finite-difference slopes of ``a`` and ``b`` agree in sign."""
    da, db = np.sign(np.diff(a)), np.sign(np.diff(b))
    return float(np.mean(da == db))


def local_extrema(v: np.ndarray) -> np.ndarray:
    """Indices of strict interior local extrema of a sampled signal."""
    d = np.diff(v)
    return np.flatnonzero(d[:-1] * d[1:] < 0) + 1


def amplitudes_decay(v: np.ndarray) -> tuple[bool, list[float]]:
    """Whether the distance from successive extrema to the final level shrinks.

    Needs at least two extrema; a signal without oscillation does not count
    as a decaying oscillation.
    """
    idx = local_extrema(v)
    amps = [float(abs(v[i] - v[-1])) for i in idx]
    ok = len(amps) >= 2 and all(b < a for a, b in zip(amps, amps[1:]))
    return ok, amps


def cmd_extrapolate(cfg: ExperimentConfig, out: Path, checkpoint: Path) -> dict:
    model = load_checkpoint(checkpoint)
    spec = cfg.scenario_spec()
    truth = _simulate(cfg, spec)
    if isinstance(model, NetworkModel):
        model = model.with_areas(spec.phi)
    pred = predict(model, truth)
    metrics = {"height_mse": mse(pred, truth, "x"), "flow_mse": mse(pred, truth, "y"),
               "state_mse": mse(pred, truth, "both")}
    if isinstance(model, ManifoldModel):
        metrics["flow_slope_sign_agreement"] = sign_agreement(pred.Y[:, 0], truth.Y[:, 0])
    else:
        ok, amps = amplitudes_decay(pred.Y[:, 0])
        metrics["pump_extrema_amplitudes"] = amps
        metrics["pump_oscillation_decays"] = ok
    metrics["conservation_max"] = conservation_residual(model, pred)
    out.mkdir(parents=True, exist_ok=True)
    _overlay_plots(pred, truth, out, "extrapolate")
    write_report(metrics, out / "extrapolate.json")
    return metrics


def cmd_gradcheck(cfg: ExperimentConfig, out: Path, dataset: Path | None,
                  checkpoint: Path | None) -> dict:
    data = read_csv(dataset) if dataset else _simulate(cfg, cfg.system_spec())
    model = load_checkpoint(checkpoint) if checkpoint else cfg.build_model(data)
    N = min(cfg.gradcheck["horizon"], len(data) - 1)
    ref = Trajectory(data.times[:N + 1], data.X[:N + 1], data.Y[:N + 1], data.U[:N + 1],
                     data.meta)
    weights = LossWeights(**cfg.train["weights"])
    report = ad.gradient_check(lambda: epoch_loss(model, ref, weights), model.parameters(),
                               fd_step=cfg.gradcheck["fd_step"])
    model.tape.reset()
    result = {"horizon": N, "n_parameters": int(sum(p.data.size for p in model.parameters())),
              "max_rel_error": report.max_rel_error, "mean_rel_error": report.mean_rel_error,
              "max_elementwise_error": report.max_elementwise_error,
              "per_parameter": {p.name: e for p, e in zip(model.parameters(),
                                                          report.per_parameter)},
              "tolerance": cfg.gradcheck["tolerance"],
              "passed": report.passed(cfg.gradcheck["tolerance"])}
    out.mkdir(parents=True, exist_ok=True)
    write_report(result, out / "gradcheck.json")
    return result


# -- entry point -----------------------------------------------------------------

def _stderr(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ndae", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in [("generate", "simulate the ground-truth dataset"),
                       ("train", "train a neural DAE on a dataset"),
                       ("eval", "open-loop evaluation against a reference trajectory"),
                       ("extrapolate", "evaluate on the unseen scenario"),
                       ("gradcheck", "compare tape gradients with finite differences")]:
        c = sub.add_parser(name, help=text)
        c.add_argument("--config", required=True, type=Path)
        c.add_argument("--out", type=Path, help="output directory (overrides config)")
        c.add_argument("--seed", type=int, help="model seed (overrides config)")
        c.add_argument("--dataset", type=Path, help="trajectory CSV")
        c.add_argument("--checkpoint", type=Path, help="model checkpoint JSON")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed: must be >= 0")
            cfg.seed = args.seed
    except ConfigError as exc:
        _stderr(f"config error: {exc}")
        return EXIT_CONFIG
    out = args.out or Path(cfg.out)
    dataset = args.dataset or out / "dataset.csv"
    # evaluation defaults to the clean ground truth, never the noised copy
    reference = args.dataset or out / "truth.csv"
    checkpoint = args.checkpoint or out / "checkpoint.json"
    try:
        if args.command == "generate":
            result = cmd_generate(cfg, out)
        elif args.command == "train":
            result = cmd_train(cfg, out, dataset)
        elif args.command == "eval":
            result = cmd_eval(cfg, out, checkpoint, reference)
        elif args.command == "extrapolate":
            result = cmd_extrapolate(cfg, out, checkpoint)
        else:
            result = cmd_gradcheck(cfg, out, args.dataset, args.checkpoint)
    except NUMERICAL_ERRORS as exc:
        _stderr(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    except (OSError, TrajectoryFormatError, KeyError) as exc:
        _stderr(f"input error: {exc}")
        return EXIT_CONFIG
    print(json.dumps(result, indent=2, default=float))
    if args.command == "gradcheck" and not result["passed"]:
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

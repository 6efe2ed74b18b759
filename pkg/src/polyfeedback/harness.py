"""Experiment orchestration: configuration, the full pipeline and reports.

A run builds the finite-difference model, projects and reduces it, computes
the feedback tensors for every ``beta``, simulates the reduced closed loops
for ``p = 2..p_max``, optionally replays the controls on the full model and
computes the open-loop benchmark.  Everything is deterministic for a given
configuration; reports are written with round-trip float formatting so that
regenerating them gives byte-identical files.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .control import (Trajectory, control_distance, cost, replay_full, simulate_closed_loop,
                      write_trajectory_csv)
from .fp_model import (BilinearModel, assemble_model, build_grid, calibrate_gaussian_width,
                       initial_condition, l2_distance)
from .openloop import ArmijoParams, DiscreteProblem, optimize, write_control_csv
from .potentials import PotentialSpec, four_well_2d, load_potential, triple_well_1d
from .projection import ProjectedModel, project
from .reduction import GramianPair, ReducedModel, gramians, balance_truncate, save_singular_values
from .riccati import solve_care
from .tensors import feedback_tensors

log = logging.getLogger(__name__)

POTENTIALS = {"triple_well_1d": triple_well_1d, "four_well_2d": four_well_2d}
UNREDUCED_LIMIT = 200


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    log.info("stage %s", name)
    try:
        yield
    except (ConfigError, StageError):
        raise
    except Exception as exc:  # any numerical failure is tagged with its stage
        raise StageError(name, exc) from exc


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class ModelConfig:
    potential: str | dict = "triple_well_1d"
    nu: float = 1.0
    bounds: list = field(default_factory=lambda: [[-6.0, 6.0]])
    counts: list = field(default_factory=lambda: [1000])


@dataclass
class ReductionConfig:
    threshold: float | None = 1e-3
    r: int | None = None
    gramian_eps: float = 1e-6
    max_iter: int = 200


@dataclass
class LawConfig:
    p_max: int = 6
    l: int = 50
    betas: list = field(default_factory=lambda: [1e-4])


@dataclass
class OpenLoopConfig:
    enabled: bool = True
    C: float = 500.0
    theta: float = 0.7
    sigma: float = 0.05
    delta: float = 3e-4
    max_iter: int = 2000
    warm_start: str = "best"


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    reduction: ReductionConfig = field(default_factory=ReductionConfig)
    law: LawConfig = field(default_factory=LawConfig)
    initial_condition: dict = field(default_factory=lambda: {"kind": "uniform"})
    horizon: float = 20.0
    nodes: int = 2000
    openloop: OpenLoopConfig = field(default_factory=OpenLoopConfig)
    replay_full: bool = True
    output_dir: str = "runs/experiment"
    base_dir: str = field(default=".", repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    @property
    def digest(self) -> str:
        """Hash of everything that affects the numbers (not where they go)."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def out(self) -> Path:
        p = Path(self.output_dir)
        return p if p.is_absolute() else Path(self.base_dir) / p


def _section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"'{name}' must be an object")
    known = set(cls.__dataclass_fields__)
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown keys in '{name}': {sorted(extra)}")
    return cls(**data)


def config_from_dict(data: dict, base_dir=".") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    data = dict(data)
    data.pop("$schema", None)
    top = set(ExperimentConfig.__dataclass_fields__) - {"base_dir"}
    extra = set(data) - top
    if extra:
        raise ConfigError(f"unknown configuration keys: {sorted(extra)}")
    try:
        cfg = ExperimentConfig(
            name=str(data.get("name", "experiment")),
            seed=int(data.get("seed", 0)),
            model=_section(ModelConfig, data.get("model"), "model"),
            reduction=_section(ReductionConfig, data.get("reduction"), "reduction"),
            law=_section(LawConfig, data.get("law"), "law"),
            initial_condition=dict(data.get("initial_condition", {"kind": "uniform"})),
            horizon=float(data.get("horizon", 20.0)),
            nodes=int(data.get("nodes", 2000)),
            openloop=_section(OpenLoopConfig, data.get("openloop"), "openloop"),
            replay_full=bool(data.get("replay_full", True)),
            output_dir=str(data.get("output_dir", "runs/experiment")),
            base_dir=str(base_dir),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    red = data.get("reduction") or {}
    if "r" in red and "threshold" not in red:
        cfg.reduction.threshold = None
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file {path} not found")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data, base_dir=path.parent)


def validate(cfg: ExperimentConfig) -> None:
    if not cfg.law.betas or any(not (b > 0) for b in cfg.law.betas):
        raise ConfigError("beta values must be positive")
    if cfg.law.p_max < 2 or cfg.law.p_max > 8:
        raise ConfigError("p_max must lie in 2..8")
    if cfg.law.l < 1:
        raise ConfigError("quadrature parameter l must be positive")
    red = cfg.reduction
    if (red.r is None) == (red.threshold is None):
        raise ConfigError("reduction needs exactly one of 'r' and 'threshold'")
    if red.r is not None and red.r < 1:
        raise ConfigError("reduced order must be positive")
    if not cfg.horizon > 0 or cfg.nodes < 3:
        raise ConfigError("horizon must be positive and nodes >= 3")
    if cfg.model.nu <= 0:
        raise ConfigError("diffusion coefficient must be positive")
    if len(cfg.model.bounds) != len(cfg.model.counts):
        raise ConfigError("model bounds and counts differ in dimension")
    pot = cfg.model.potential
    if isinstance(pot, str) and pot not in POTENTIALS:
        path = Path(pot) if Path(pot).is_absolute() else Path(cfg.base_dir) / pot
        if not path.is_file():
            raise ConfigError(f"potential {pot!r} is neither built in nor an existing file")
    if cfg.openloop.warm_start not in ("best", "p2", "zero"):
        raise ConfigError("openloop.warm_start must be 'best', 'p2' or 'zero'")
    kind = cfg.initial_condition.get("kind")
    if kind not in ("uniform", "gaussian", "random_perturbation", "stationary"):
        raise ConfigError(f"unknown initial condition kind {kind!r}")


# --------------------------------------------------------------------------
# pipeline stages
# --------------------------------------------------------------------------

def resolve_potential(cfg: ExperimentConfig) -> PotentialSpec:
    pot = cfg.model.potential
    if isinstance(pot, dict):
        from .potentials import potential_from_dict
        return potential_from_dict(pot)
    if pot in POTENTIALS:
        return POTENTIALS[pot]()
    path = Path(pot) if Path(pot).is_absolute() else Path(cfg.base_dir) / pot
    return load_potential(path)


def build_model(cfg: ExperimentConfig) -> BilinearModel:
    with stage("build-model"):
        grid = build_grid(cfg.model.bounds, cfg.model.counts)
        return assemble_model(grid, resolve_potential(cfg), cfg.model.nu)


def calibrate_perturbation(grid, rho_inf, seed, target) -> float:
    """Amplitude of the seeded random perturbation at ``L2`` distance
    ``target`` from ``rho_inf``."""
    from scipy.optimize import brentq

    def f(a):
        rho0 = initial_condition("random_perturbation", grid, rho_inf, seed=seed, amplitude=a)
        return l2_distance(grid, rho0, rho_inf) - target

    hi = 1.0
    while f(hi) < 0:
        hi *= 2
        if hi > 1e3:
            raise ConfigError(f"perturbation cannot reach distance {target}")
    return brentq(f, 1e-12, hi, xtol=1e-14)


def initial_density(cfg: ExperimentConfig, model: BilinearModel) -> tuple[np.ndarray, dict]:
    ic = dict(cfg.initial_condition)
    kind = ic.pop("kind")
    grid, rho_inf = model.grid, model.rho_inf
    info = {"kind": kind}
    if kind == "stationary":
        rho0 = rho_inf.copy()
    elif kind == "uniform":
        rho0 = initial_condition("uniform", grid, rho_inf)
    elif kind == "gaussian":
        center = ic.get("center")
        width = ic.get("width")
        if width is None:
            if "distance" not in ic:
                raise ConfigError("gaussian initial condition needs 'width' or 'distance'")
            width = calibrate_gaussian_width(grid, rho_inf, center, ic["distance"])
        info.update(center=list(np.atleast_1d(center).astype(float)), width=float(width))
        rho0 = initial_condition("gaussian", grid, rho_inf, center=center, width=width)
    else:
        seed = int(ic.get("seed", cfg.seed))
        amp = ic.get("amplitude")
        if amp is None:
            if "distance" not in ic:
                raise ConfigError("random perturbation needs 'amplitude' or 'distance'")
            amp = calibrate_perturbation(grid, rho_inf, seed, ic["distance"])
        info.update(seed=seed, amplitude=float(amp))
        rho0 = initial_condition("random_perturbation", grid, rho_inf, seed=seed, amplitude=amp)
    info["distance"] = l2_distance(grid, rho0, rho_inf)
    return rho0, info


def reduce(cfg: ExperimentConfig, proj: ProjectedModel,
           pair: GramianPair | None = None) -> tuple[ReducedModel, GramianPair]:
    with stage("reduce"):
        pair = pair or gramians(proj, cfg.reduction.gramian_eps, cfg.reduction.max_iter)
        red = balance_truncate(pair.X, pair.Y, proj, r=cfg.reduction.r,
                               threshold=None if cfg.reduction.r else cfg.reduction.threshold)
        return red, pair


def armijo_params(cfg: ExperimentConfig) -> ArmijoParams:
    o = cfg.openloop
    return ArmijoParams(C=o.C, theta=o.theta, sigma=o.sigma, delta=o.delta, T=cfg.horizon,
                        max_iter=o.max_iter, nodes=cfg.nodes)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class Report:
    name: str
    config_hash: str
    n: int
    r: int
    betas: list
    ps: list
    sigma: np.ndarray
    tables: dict = field(default_factory=dict)
    diverged: dict = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    trajectories: dict = field(default_factory=dict, repr=False)
    controls: dict = field(default_factory=dict, repr=False)

    @property
    def provenance(self) -> dict:
        return {"config_hash": self.config_hash, "package": __version__,
                "numpy": np.__version__, "scipy": scipy.__version__}

    def table(self, name: str) -> np.ndarray:
        return np.array(self.tables[name]["rows"], dtype=float)


def _json_value(x):
    """Finite floats pass through; non-finite values become ``None``."""
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, dict):
        return {str(k): _json_value(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_json_value(v) for v in x]
    return x


def _csv_token(x) -> str:
    if isinstance(x, str):
        return x
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def write_report(report: Report, directory) -> Path:
    d = Path(directory)
    (d / "tables").mkdir(parents=True, exist_ok=True)
    (d / "trajectories").mkdir(parents=True, exist_ok=True)
    save_singular_values(report.sigma, d / "singular_values.csv")
    tables_json = {}
    for name, tab in report.tables.items():
        with open(d / "tables" / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(tab["columns"])
            for label, row in zip(tab["index"], tab["rows"]):
                w.writerow([_csv_token(label)] + [_csv_token(v) for v in row])
        tables_json[name] = {
            "columns": tab["columns"], "index": _json_value(tab["index"]),
            "rows": _json_value(tab["rows"]),
            "infinite": [[bool(isinstance(v, float) and math.isinf(v)) for v in row]
                         for row in tab["rows"]],
        }
    for key, traj in report.trajectories.items():
        write_trajectory_csv(traj, d / "trajectories" / f"{key}.csv")
    for key, it in report.controls.items():
        write_control_csv(it, d / "trajectories" / f"{key}.csv")
    doc = {
        "name": report.name, "provenance": report.provenance, "n": report.n, "r": report.r,
        "betas": _json_value(report.betas), "p": report.ps, "tables": tables_json,
        "diverged": report.diverged, "scalars": _json_value(report.scalars),
        "diagnostics": _json_value(report.diagnostics),
    }
    path = d / "report.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _beta_label(beta: float) -> str:
    return f"{beta:.0e}".replace("+", "")


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, pair: GramianPair | None = None) -> Report:
    model = build_model(cfg)
    with stage("initial-condition"):
        rho0, ic_info = initial_density(cfg, model)
        y0n = rho0 - model.rho_inf
    with stage("project"):
        proj = project(model)
    red, pair = reduce(cfg, proj, pair)
    y0r = red.W.T @ proj.project_state(y0n)
    T, nodes = cfg.horizon, cfg.nodes
    ps = list(range(2, cfg.law.p_max + 1))
    params = armijo_params(cfg)
    report = Report(cfg.name, cfg.digest, model.n, red.r, list(cfg.law.betas), ps, red.sigma)
    report.scalars["initial_condition"] = ic_info
    report.scalars["reduced_initial_norm"] = float(np.linalg.norm(y0r))
    report.diagnostics["gramian_iterations"] = [pair.reach.iterations, pair.observe.iterations]
    report.diagnostics["gramian_residuals"] = [pair.reach.residual, pair.observe.residual]
    report.diagnostics["projection_residuals"] = proj.residuals

    with stage("uncontrolled"):
        zero = lambda t: np.zeros(model.m)  # noqa: E731
        if cfg.replay_full:
            report.scalars["J_uncontrolled"] = cost(replay_full(model, zero, y0n, T), 0.0)
        prob0 = DiscreteProblem(red, y0r, 1.0, params.t)
        report.scalars["J_uncontrolled_reduced"] = prob0.cost(np.zeros((nodes, red.m)))

    cost_rows, full_rows, cont_rows, dist_rows, value_rows = [], [], [], [], []
    riccati_res, tensor_res, mass = [], {}, 0.0
    for beta in cfg.law.betas:
        bl = _beta_label(beta)
        with stage(f"riccati beta={bl}"):
            ric = solve_care(red.A, red.B, red.C, beta)
            riccati_res.append(ric.residual)
        with stage(f"tensors beta={bl}"):
            law = feedback_tensors(red, ric, cfg.law.p_max, cfg.law.l)
            tensor_res[bl] = law.info["residuals"]
        prob = DiscreteProblem(red, y0r, beta, params.t)
        trajs: dict[int, Trajectory] = {}
        J_disc, J_cont, J_full, flags = [], [], [], []
        for p in ps:
            with stage(f"closed-loop beta={bl} p={p}"):
                tr = simulate_closed_loop(red, law.truncate(p), y0r, T, samples=nodes)
            trajs[p] = tr
            flags.append(tr.diverged)
            if tr.diverged:
                report.diagnostics.setdefault("nonconvergence", {}).setdefault(bl, {})[
                    f"p={p}"] = tr.message
            J_cont.append(cost(tr, beta))
            J_disc.append(float("inf") if tr.diverged else prob.cost(tr.u))
            if cfg.replay_full and not tr.diverged:
                with stage(f"replay beta={bl} p={p}"):
                    fr = replay_full(model, tr, y0n, T, samples=nodes)
                J_full.append(cost(fr, beta))
                mass = max(mass, fr.extra["mass_drift"])
            else:
                J_full.append(float("inf"))
            report.trajectories[f"beta{bl}_p{p}"] = tr
        value_rows.append([law.truncate(p).value(y0r) for p in ps])
        report.diverged[bl] = flags

        if cfg.openloop.enabled:
            with stage(f"open-loop beta={bl}"):
                finite = [p for p, J in zip(ps, J_disc) if math.isfinite(J)]
                if cfg.openloop.warm_start == "zero" or not finite:
                    u_init = None
                elif cfg.openloop.warm_start == "p2" and 2 in finite:
                    u_init = trajs[2].u
                else:
                    best = min(finite, key=lambda p: J_disc[ps.index(p)])
                    u_init = trajs[best].u
                opt = optimize(red, y0r, params, beta, u_init)
            report.controls[f"beta{bl}_opt"] = opt
            J_opt = opt.cost
            dists = [control_distance(params.t, trajs[p].u, opt.u) if not trajs[p].diverged
                     else float("inf") for p in ps]
            J_opt_full = float("nan")
            if cfg.replay_full:
                with stage(f"replay beta={bl} opt"):
                    fr = replay_full(model, Trajectory(opt.t, np.zeros((opt.t.size, 0)), opt.u,
                                                       np.zeros(opt.t.size)), y0n, T, samples=nodes)
                J_opt_full = cost(fr, beta)
                mass = max(mass, fr.extra["mass_drift"])
            report.diagnostics.setdefault("openloop", {})[bl] = {
                "iterations": opt.iterations, "grad_norm": opt.grad_norm,
                "converged": opt.converged}
        else:
            J_opt = J_opt_full = float("nan")
            dists = [float("nan")] * len(ps)
        cost_rows.append(J_disc + [J_opt])
        full_rows.append(J_full + [J_opt_full])
        cont_rows.append(J_cont)
        dist_rows.append(dists)

    pcols = [f"J(u{p})" for p in ps]
    report.tables["costs"] = {"columns": ["beta"] + pcols + ["J(u_opt)"],
                              "index": list(cfg.law.betas), "rows": cost_rows}
    report.tables["costs_full"] = {"columns": ["beta"] + pcols + ["J(u_opt)"],
                                   "index": list(cfg.law.betas), "rows": full_rows}
    report.tables["costs_reduced_continuous"] = {"columns": ["beta"] + pcols,
                                                 "index": list(cfg.law.betas), "rows": cont_rows}
    report.tables["distances"] = {"columns": ["beta"] + [f"p={p}" for p in ps],
                                  "index": list(cfg.law.betas), "rows": dist_rows}
    report.tables["value_at_y0"] = {"columns": ["beta"] + [f"V{p}(y0)" for p in ps],
                                    "index": list(cfg.law.betas), "rows": value_rows}
    report.diagnostics["riccati_residuals"] = riccati_res
    report.diagnostics["tensor_residuals"] = tensor_res
    report.diagnostics["max_mass_drift"] = mass
    return report


def _as_reduced(proj: ProjectedModel) -> ReducedModel:
    """The projected model viewed as an untruncated 'reduced' model."""
    eye = np.eye(proj.dim)
    return ReducedModel(proj.A, list(proj.N), proj.B, proj.C, eye, eye, np.ones(proj.dim))


def compare_reduction(cfg: ExperimentConfig, r_list, p_max: int = 3,
                      pair: GramianPair | None = None) -> Report:
    """Controls of reduced models of several orders against a reference.

    The reference is the unreduced projected model when ``n <= 200`` and the
    largest requested order otherwise.  Deviations are relative ``L2(0, T)``
    distances of the control trajectories.
    """
    model = build_model(cfg)
    with stage("initial-condition"):
        rho0, ic_info = initial_density(cfg, model)
        y0n = rho0 - model.rho_inf
    with stage("project"):
        proj = project(model)
    with stage("reduce"):
        pair = pair or gramians(proj, cfg.reduction.gramian_eps, cfg.reduction.max_iter)
    r_list = sorted(int(r) for r in r_list)
    if model.n <= UNREDUCED_LIMIT:
        ref_model, ref_label = _as_reduced(proj), "full"
        y_ref = proj.project_state(y0n)
    else:
        ref_model = balance_truncate(pair.X, pair.Y, proj, r=r_list[-1])
        ref_label = f"r{r_list[-1]}"
        y_ref = ref_model.W.T @ proj.project_state(y0n)
    if ref_model.r ** p_max > 10**8:
        raise StageError("compare-reduction", MemoryError(
            f"order-{p_max} tensors of dimension {ref_model.r} exceed the size guard"))
    ps = list(range(2, p_max + 1))
    T, nodes = cfg.horizon, cfg.nodes
    red_models = {r: balance_truncate(pair.X, pair.Y, proj, r=r) for r in r_list}
    report = Report(cfg.name, cfg.digest, model.n, ref_model.r, list(cfg.law.betas), ps,
                    red_models[r_list[0]].sigma)
    report.scalars["initial_condition"] = ic_info
    report.scalars["reference"] = ref_label
    rows, index = [], []
    for beta in cfg.law.betas:
        bl = _beta_label(beta)
        with stage(f"reference beta={bl}"):
            ric = solve_care(ref_model.A, ref_model.B, ref_model.C, beta)
            law = feedback_tensors(ref_model, ric, p_max, cfg.law.l)
            ref = {p: simulate_closed_loop(ref_model, law.truncate(p), y_ref, T, samples=nodes)
                   for p in ps}
        for r, red in red_models.items():
            with stage(f"reduced r={r} beta={bl}"):
                ric_r = solve_care(red.A, red.B, red.C, beta)
                law_r = feedback_tensors(red, ric_r, p_max, cfg.law.l)
                y0r = red.W.T @ proj.project_state(y0n)
                row = []
                for p in ps:
                    tr = simulate_closed_loop(red, law_r.truncate(p), y0r, T, samples=nodes)
                    if tr.diverged or ref[p].diverged:
                        row.append(float("inf"))
                        continue
                    scale = control_distance(ref[p].t, ref[p].u, np.zeros_like(ref[p].u))
                    dev = control_distance(tr.t, tr.u, ref[p].u)
                    row.append(dev / scale if scale > 0 else dev)
                    # u columns: reference first, then the reduced model
                    overlay = Trajectory(tr.t, tr.y, np.hstack([ref[p].u, tr.u]),
                                         tr.output_sq)
                    report.trajectories[f"compare_beta{bl}_p{p}_r{r}"] = overlay
            rows.append(row)
            index.append(f"{bl}/r={r}")
    report.tables["control_deviation"] = {"columns": ["beta/r"] + [f"p={p}" for p in ps],
                                          "index": index, "rows": rows}
    return report

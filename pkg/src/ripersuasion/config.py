"""Run configuration: a YAML tree parsed into frozen dataclasses.

Option, group and level indices are 1-based in configuration files and
0-based in the library. Every validation failure raises ``ConfigError`` with
the dotted path of the offending field.

Example::

    seed: 7
    model: {J: 3, K: 2, L: 1}
    dgp:
      alpha: [[[-0.5], [-0.2]], [[-0.5], [0.1]]]   # alpha[j][k][l], inside options
      prior:
        support: [[1.5, -0.75], [-1.5, 1.2], [0.9, 1.8], [-0.9, -2.25]]
        weights: [0.25, 0.25, 0.25, 0.25]
      dirichlet: [[0.5, 0.5]]
      n_markets: 2000
      n_persuasion: 2000
    persuasion:
      families: [hs_family, college_family]
      theta: [0.9]
      rep: 1
      dem: 2
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .exceptions import InputError
from .gmm import Stage1Options, ThetaOptions
from .model import Belief, ChoiceSpec
from .persuasion import BUILTIN_FAMILIES, PersuasionStrategy
from .simulate import DgpSpec
from .solver import SolverOptions


class ConfigError(InputError):
    """Invalid configuration value; the message starts with the field path."""


def _num(value, path, kind=float, lo=None, hi=None, lo_open=False):
    if isinstance(value, bool) or value is None:
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    try:
        # YAML 1.1 reads exponent literals without a dot (1e-10) as strings
        x = kind(float(value)) if kind is int else float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a number, got {value!r}") from None
    if kind is int and float(value) != x:
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if not np.isfinite(x):
        raise ConfigError(f"{path}: must be finite")
    if lo is not None and (x < lo or (lo_open and x == lo)):
        raise ConfigError(f"{path}: must be {'>' if lo_open else '>='} {lo}, got {x}")
    if hi is not None and x > hi:
        raise ConfigError(f"{path}: must be <= {hi}, got {x}")
    return x


def _array(value, path, ndim=None):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a numeric array") from None
    if ndim is not None and arr.ndim != ndim:
        raise ConfigError(f"{path}: expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{path}: entries must be finite")
    return arr


def _section(tree, name):
    sec = tree.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: expected a mapping")
    return sec


def _unknown(sec, allowed, path):
    extra = sorted(set(sec) - set(allowed))
    if extra:
        raise ConfigError(f"{path}: unknown field(s) {extra}")


@dataclass(frozen=True)
class PersuasionConfig:
    families: tuple
    theta: tuple
    theta_index: tuple = ()
    rep: int = 0
    dem: int = 1
    theta_bounds: tuple = (0.5, 1.0)
    grid_points: int = 50
    plateau_z: float = 1.96
    weak_id_fraction: float = 0.5

    def strategy(self, theta=None) -> PersuasionStrategy:
        return PersuasionStrategy(
            self.families, self.theta if theta is None else theta, self.theta_index, rep=self.rep, dem=self.dem
        )

    def theta_options(self, solver: SolverOptions) -> ThetaOptions:
        return ThetaOptions(
            lower=self.theta_bounds[0], upper=self.theta_bounds[1], grid_points=self.grid_points,
            plateau_z=self.plateau_z, weak_id_fraction=self.weak_id_fraction, solver=solver,
        )


@dataclass(frozen=True)
class EstimationConfig:
    weight: str = "identity"
    n_starts: int = 5
    optimizer: str = "least_squares"
    instruments: str = "reduced"
    inversion_tol: float = 1e-12
    thresholds: tuple = (0.25, 0.5, 0.75)
    share_floor: float | None = None
    bootstrap: int = 0

    def stage1_options(self, seed: int) -> Stage1Options:
        return Stage1Options(
            weight=self.weight, n_starts=self.n_starts, seed=seed, method=self.optimizer,
            instruments=self.instruments, inversion_tol=self.inversion_tol,
        )


@dataclass(frozen=True)
class RunConfig:
    seed: int
    choice: ChoiceSpec
    solver: SolverOptions = field(default_factory=SolverOptions)
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    persuasion: PersuasionConfig | None = None
    dgp: dict | None = None  # validated raw section, turned into DgpSpec on demand
    welfare_bins: int = 30
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def dgp_spec(self, seed: int | None = None) -> DgpSpec:
        if self.dgp is None:
            raise ConfigError("dgp: section required for simulate")
        d = self.dgp
        return DgpSpec(
            alpha=d["alpha"], prior=d["prior"], dirichlet=d["dirichlet"], n_markets=d["n_markets"],
            n_persuasion=d["n_persuasion"], level_probs=d["level_probs"],
            strategy=self.persuasion.strategy() if self.persuasion else None,
            seed=self.seed if seed is None else seed, voters=d["voters"], choice=self.choice, solver=self.solver,
        )

    def to_dict(self) -> dict:
        return self.raw

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()


def _parse_model(tree):
    sec = _section(tree, "model")
    _unknown(sec, {"J", "K", "L", "option_labels", "group_labels", "level_labels"}, "model")
    if "J" not in sec:
        raise ConfigError("model.J: required")
    J = _num(sec["J"], "model.J", int, lo=2)
    K = _num(sec.get("K", 1), "model.K", int, lo=1)
    L = _num(sec.get("L", 1), "model.L", int, lo=1)
    try:
        return ChoiceSpec(J, K, L, tuple(sec.get("option_labels", ())), tuple(sec.get("group_labels", ())), tuple(sec.get("level_labels", ())))
    except InputError as exc:
        raise ConfigError(f"model: {exc}") from None


def _parse_solver(tree):
    sec = _section(tree, "solver")
    _unknown(sec, {"tol", "foc_tol", "max_iter", "newton"}, "solver")
    return SolverOptions(
        tol=_num(sec.get("tol", 1e-10), "solver.tol", lo=0, lo_open=True),
        foc_tol=_num(sec.get("foc_tol", 1e-8), "solver.foc_tol", lo=0, lo_open=True),
        max_iter=_num(sec.get("max_iter", 10_000), "solver.max_iter", int, lo=1),
        newton=bool(sec.get("newton", True)),
    )


def _parse_estimation(tree):
    sec = _section(tree, "estimation")
    _unknown(sec, {"weight", "n_starts", "optimizer", "instruments", "inversion_tol", "thresholds", "share_floor", "bootstrap"}, "estimation")
    weight = sec.get("weight", "identity")
    if weight not in ("identity", "efficient"):
        raise ConfigError(f"estimation.weight: must be identity or efficient, got {weight!r}")
    opt = sec.get("optimizer", "least_squares")
    if opt not in ("least_squares", "bfgs"):
        raise ConfigError(f"estimation.optimizer: must be least_squares or bfgs, got {opt!r}")
    inst = sec.get("instruments", "reduced")
    if inst not in ("reduced", "full"):
        raise ConfigError(f"estimation.instruments: must be reduced or full, got {inst!r}")
    thr = tuple(_num(t, "estimation.thresholds", lo=0, hi=1) for t in sec.get("thresholds", (0.25, 0.5, 0.75)))
    floor = sec.get("share_floor")
    return EstimationConfig(
        weight=weight,
        n_starts=_num(sec.get("n_starts", 5), "estimation.n_starts", int, lo=1),
        optimizer=opt,
        instruments=inst,
        inversion_tol=_num(sec.get("inversion_tol", 1e-12), "estimation.inversion_tol", lo=0, lo_open=True),
        thresholds=thr,
        share_floor=None if floor is None else _num(floor, "estimation.share_floor", lo=0, lo_open=True, hi=0.1),
        bootstrap=_num(sec.get("bootstrap", 0), "estimation.bootstrap", int, lo=0),
    )


def _parse_persuasion(tree, choice):
    if "persuasion" not in tree or tree["persuasion"] is None:
        return None
    sec = _section(tree, "persuasion")
    _unknown(sec, {"families", "theta", "theta_index", "rep", "dem", "theta_bounds", "grid_points", "plateau_z", "weak_id_fraction"}, "persuasion")
    fams = sec.get("families")
    if isinstance(fams, str):
        fams = [fams] * choice.K
    if not isinstance(fams, list) or len(fams) != choice.K:
        raise ConfigError(f"persuasion.families: need one family per group (K={choice.K})")
    for f in fams:
        if f not in BUILTIN_FAMILIES:
            raise ConfigError(f"persuasion.families: unknown family {f!r}; choose from {list(BUILTIN_FAMILIES)}")
    theta = sec.get("theta", [0.9])
    theta = tuple(_num(t, "persuasion.theta", lo=0, lo_open=True, hi=1) for t in np.atleast_1d(theta).tolist())
    idx = sec.get("theta_index")
    idx = tuple(_num(i, "persuasion.theta_index", int, lo=1, hi=len(theta)) - 1 for i in idx) if idx else tuple(0 for _ in fams)
    if len(idx) != choice.K:
        raise ConfigError(f"persuasion.theta_index: need one entry per group (K={choice.K})")
    rep = _num(sec.get("rep", 1), "persuasion.rep", int, lo=1, hi=choice.J) - 1
    dem = _num(sec.get("dem", 2), "persuasion.dem", int, lo=1, hi=choice.J) - 1
    if rep == dem:
        raise ConfigError("persuasion.dem: must differ from persuasion.rep")
    bounds = tuple(_num(b, "persuasion.theta_bounds", lo=0, lo_open=True, hi=1) for b in sec.get("theta_bounds", (0.5, 1.0)))
    if len(bounds) != 2 or bounds[0] >= bounds[1]:
        raise ConfigError("persuasion.theta_bounds: need [lower, upper] with lower < upper")
    return PersuasionConfig(
        tuple(fams), theta, idx, rep, dem, bounds,
        _num(sec.get("grid_points", 50), "persuasion.grid_points", int, lo=3),
        _num(sec.get("plateau_z", 1.96), "persuasion.plateau_z", lo=0),
        _num(sec.get("weak_id_fraction", 0.5), "persuasion.weak_id_fraction", lo=0, lo_open=True, hi=1),
    )


def _parse_dgp(tree, choice):
    if "dgp" not in tree or tree["dgp"] is None:
        return None
    sec = _section(tree, "dgp")
    _unknown(sec, {"alpha", "prior", "dirichlet", "level_probs", "n_markets", "n_persuasion", "voters"}, "dgp")
    J, K, L = choice.J, choice.K, choice.L
    if "alpha" not in sec:
        raise ConfigError("dgp.alpha: required")
    a = _array(sec["alpha"], "dgp.alpha")
    if a.ndim == 2 and L == 1:
        a = a[:, :, None]
    if a.shape == (J, K, L):
        if np.any(a[-1] != 0):
            raise ConfigError("dgp.alpha: outside-option utilities must be 0")
        a = a[:-1]
    if a.shape != (J - 1, K, L):
        raise ConfigError(f"dgp.alpha: expected shape ({J - 1}, {K}, {L}) for inside options, got {a.shape}")
    alpha = np.concatenate([a, np.zeros((1, K, L))])
    psec = sec.get("prior") or {}
    if not isinstance(psec, dict) or "support" not in psec:
        raise ConfigError("dgp.prior.support: required")
    sup = _array(psec["support"], "dgp.prior.support", ndim=2)
    if sup.shape[1] == J - 1:
        sup = np.hstack([sup, np.zeros((sup.shape[0], 1))])
    if sup.shape[1] != J:
        raise ConfigError(f"dgp.prior.support: points need {J - 1} (or {J}) components")
    w = _array(psec.get("weights", np.full(sup.shape[0], 1.0 / sup.shape[0])), "dgp.prior.weights", ndim=1)
    try:
        prior = Belief.normalized(sup, w)
    except InputError as exc:
        raise ConfigError(f"dgp.prior: {exc}") from None
    dir_ = _array(sec.get("dirichlet", np.ones((L, K))), "dgp.dirichlet")
    dir_ = np.atleast_2d(dir_)
    if dir_.shape == (1, K):
        dir_ = np.repeat(dir_, L, axis=0)
    if dir_.shape != (L, K) or np.any(dir_ <= 0):
        raise ConfigError(f"dgp.dirichlet: expected positive ({L}, {K}) array")
    lp = sec.get("level_probs")
    lp = None if lp is None else _array(lp, "dgp.level_probs", ndim=1)
    if lp is not None and (lp.shape != (L,) or np.any(lp < 0) or abs(lp.sum() - 1) > 1e-12):
        raise ConfigError(f"dgp.level_probs: need {L} nonnegative entries summing to 1")
    n0 = _num(sec.get("n_markets", 0), "dgp.n_markets", int, lo=0)
    n1 = _num(sec.get("n_persuasion", 0), "dgp.n_persuasion", int, lo=0)
    if n0 + n1 == 0:
        raise ConfigError("dgp.n_markets: M = n_markets + n_persuasion must be positive, got 0")
    voters = sec.get("voters")
    voters = None if voters is None else _num(voters, "dgp.voters", int, lo=1)
    return {
        "alpha": alpha, "prior": prior, "dirichlet": dir_, "level_probs": lp,
        "n_markets": n0, "n_persuasion": n1, "voters": voters,
    }


def parse_config(tree: dict, seed: int | None = None) -> RunConfig:
    if not isinstance(tree, dict):
        raise ConfigError("config: top level must be a mapping")
    if "config" in tree and "manifest_version" in tree:
        # a run manifest: replay its resolved configuration and seed
        seed = tree.get("seed") if seed is None else seed
        tree = tree["config"]
    _unknown(tree, {"seed", "model", "dgp", "persuasion", "solver", "estimation", "welfare"}, "config")
    choice = _parse_model(tree)
    s = tree.get("seed", 0) if seed is None else seed
    s = _num(s, "seed", int, lo=0)
    pers = _parse_persuasion(tree, choice)
    dgp = _parse_dgp(tree, choice)
    if dgp is not None and dgp["n_persuasion"] > 0 and pers is None:
        raise ConfigError("persuasion: section required when dgp.n_persuasion > 0")
    wsec = _section(tree, "welfare")
    _unknown(wsec, {"bins"}, "welfare")
    bins = _num(wsec.get("bins", 30), "welfare.bins", int, lo=1)
    raw = dict(tree)
    raw["seed"] = s
    return RunConfig(s, choice, _parse_solver(tree), _parse_estimation(tree), pers, dgp, bins, raw)


def load_config(path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: YAML syntax error: {exc}") from None
    return parse_config(tree or {}, seed)


def config_hash(cfg: RunConfig) -> str:
    return cfg.digest()


def as_plain(obj):
    """Recursively convert numpy values and dataclasses into JSON-serialisable objects."""
    if hasattr(obj, "__dataclass_fields__"):
        return as_plain(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): as_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [as_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return as_plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj

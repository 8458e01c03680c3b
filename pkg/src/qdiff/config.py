"""Run configuration: JSON schema 1, defaults and validation.

A config looks like::

    {
      "schema": 1,
      "experiment": {
        "engine": "DENSITY_NONLINEAR",
        "lindblad_mode": "SINGLE_OBSERVABLE",
        "eigenvalues": [0, 1],
        "initial_state": {"diagonal": [0.3, 0.7]},
        "trajectories": 10000,
        "t_max": 20
      },
      "engines": ["DENSITY_NONLINEAR", "LINEAR_WEIGHTED"],
      "tracked": ["p[0]", "rho[0,1].re", "<L>"],
      "output_dir": "out"
    }

The observable may instead be given as a matrix under ``"observable"``
(``{"dim", "re", "im"}``); it must be Hermitian and diagonal.  The initial
state accepts ``{"diagonal": [...]}``, ``{"amplitudes": [...]}`` (real, or
``{"re", "im"}``) or a full matrix in the operator encoding.

Validation errors carry the dotted path of the offending field.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass

import numpy as np

from .engines import Engine
from .experiments import EPS_ENDPOINT, ExperimentSpec, LindbladMode
from .operators import (
    StateError,
    check_density_matrix,
    is_hermitian,
    operator_from_json,
    operator_to_json,
)

SCHEMA_VERSION = 1

EXPERIMENT_DEFAULTS = {
    "engine": Engine.DENSITY_NONLINEAR.value,
    "lindblad_mode": LindbladMode.SINGLE_OBSERVABLE.value,
    "dt": 1e-3,
    "t_max": 1.0,
    "trajectories": 1000,
    "seed": 0,
    "epsilon_endpoint": EPS_ENDPOINT,
    "stop_at_endpoint": True,
    "n_record": 20,
    "renormalize": True,
    "linear_gauge": "center",
}
TOP_DEFAULTS = {
    "output_dir": "qdiff_out",
    "formats": ["json", "csv"],
    "bit_exact": True,
    "workers": 1,
}
_EXPERIMENT_KEYS = set(EXPERIMENT_DEFAULTS) | {"eigenvalues", "observable", "initial_state"}
_TOP_KEYS = set(TOP_DEFAULTS) | {"schema", "experiment", "engines", "tracked", "decoherence"}

_SEL = re.compile(r"^(?:p\[(\d+)\]|rho\[(\d+),(\d+)\]\.(re|im)|<L>|w|purity)$")


class ConfigParseError(ValueError):
    """The file is not JSON or not a JSON object."""


class ConfigError(ValueError):
    """A semantically invalid field; ``path`` is its dotted location."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


@dataclass(frozen=True)
class Selector:
    """A tracked scalar: ``p[m]``, ``rho[m,n].re|im``, ``<L>``, ``w`` or ``purity``."""

    name: str

    def evaluate(self, rho: np.ndarray, weight: np.ndarray, eigenvalues) -> np.ndarray:
        """Per-sample values from ``(..., d, d)`` states and matching weights."""
        m = _SEL.match(self.name)
        if m.group(1) is not None:
            k = int(m.group(1))
            return rho[..., k, k].real
        if m.group(2) is not None:
            a, b = int(m.group(2)), int(m.group(3))
            v = rho[..., a, b]
            return v.real if m.group(4) == "re" else v.imag
        if self.name == "<L>":
            return np.diagonal(rho, axis1=-2, axis2=-1).real @ np.asarray(eigenvalues, dtype=float)
        if self.name == "w":
            return np.asarray(weight, dtype=float)
        return np.einsum("...ij,...ji->...", rho, rho).real

    @property
    def is_weight(self) -> bool:
        return self.name == "w"


@dataclass
class RunConfig:
    spec: ExperimentSpec
    engines: list
    output_dir: str
    formats: list
    bit_exact: bool
    workers: object  # int or "AUTO"
    tracked: list
    decoherence: tuple | None
    normalized: dict

    def config_hash(self) -> str:
        """Hash of everything that determines the results (not paths or worker counts)."""
        d = {k: v for k, v in self.normalized.items() if k not in ("output_dir", "workers")}
        return hashlib.sha256(canonical_json(d).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def parse_text(text: str) -> dict:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ConfigParseError("top level must be a JSON object")
    return obj


def load_config(path) -> RunConfig:
    """Read and validate a config file.

    Raises ``OSError`` when the file cannot be read, :class:`ConfigParseError`
    for malformed JSON and :class:`ConfigError` for invalid contents.
    """
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return validate_config(parse_text(text))


def _number(obj, key, path, kind=float, positive=False):
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}", f"must be a number, got {v!r}")
    if kind is int and float(v) != int(v):
        raise ConfigError(f"{path}.{key}", f"must be an integer, got {v!r}")
    v = kind(v)
    if not np.isfinite(v):
        raise ConfigError(f"{path}.{key}", "must be finite")
    if positive and not v > 0:
        raise ConfigError(f"{path}.{key}", f"must be positive, got {v!r}")
    return v


def _bool(obj, key, path):
    v = obj[key]
    if not isinstance(v, bool):
        raise ConfigError(f"{path}.{key}", f"must be true or false, got {v!r}")
    return v


def _initial_state(obj, path) -> np.ndarray:
    if not isinstance(obj, dict):
        raise ConfigError(path, "must be an object")
    try:
        if "diagonal" in obj:
            p = np.asarray(obj["diagonal"], dtype=float)
            if p.ndim != 1 or p.size < 2:
                raise ConfigError(f"{path}.diagonal", "needs at least two entries")
            return check_density_matrix(np.diag(p).astype(np.complex128))
        if "amplitudes" in obj:
            a = obj["amplitudes"]
            if isinstance(a, dict):
                amp = np.asarray(a["re"], dtype=float) + 1j * np.asarray(a.get("im", np.zeros(len(a["re"]))), dtype=float)
            else:
                amp = np.asarray(a, dtype=float).astype(np.complex128)
            if amp.ndim != 1 or amp.size < 2:
                raise ConfigError(f"{path}.amplitudes", "needs at least two entries")
            n2 = float(np.vdot(amp, amp).real)
            if abs(n2 - 1.0) > 1e-10:
                raise ConfigError(f"{path}.amplitudes", f"squared norm is {n2!r}, expected 1")
            return check_density_matrix(np.outer(amp, amp.conj()))
        return check_density_matrix(operator_from_json(obj))
    except ConfigError:
        raise
    except (StateError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(path, str(exc)) from None


def _observable(exp, path, dim):
    """Eigenvalues from ``eigenvalues`` or a Hermitian diagonal ``observable`` matrix."""
    if "observable" in exp and "eigenvalues" in exp:
        raise ConfigError(f"{path}.observable", "give either observable or eigenvalues, not both")
    if "observable" in exp:
        try:
            obs = operator_from_json(exp["observable"])
        except (StateError, ValueError, TypeError) as exc:
            raise ConfigError(f"{path}.observable", str(exc)) from None
        if obs.ndim != 2:
            raise ConfigError(f"{path}.observable", "must be a matrix")
        if not is_hermitian(obs):
            raise ConfigError(f"{path}.observable",
                              "must be Hermitian: a measured observable needs real eigenvalues "
                              "(the measurement coupling is L = L^dagger)")
        if np.any(obs * (1.0 - np.eye(obs.shape[0])) != 0):
            raise ConfigError(f"{path}.observable",
                              "must be diagonal; express the state in the observable's eigenbasis")
        ev = np.diagonal(obs).real
    elif "eigenvalues" in exp:
        try:
            ev = np.asarray(exp["eigenvalues"], dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}.eigenvalues", "must be a list of real numbers") from None
        if ev.ndim != 1 or not np.all(np.isfinite(ev)):
            raise ConfigError(f"{path}.eigenvalues", "must be a list of finite real numbers")
    else:
        raise ConfigError(f"{path}.eigenvalues", "SINGLE_OBSERVABLE mode needs eigenvalues or observable")
    if len(ev) != dim:
        raise ConfigError(f"{path}.eigenvalues", f"{len(ev)} eigenvalues for a dim-{dim} initial state")
    return [float(x) for x in ev]


def validate_config(raw: dict) -> RunConfig:
    """Fill defaults, check every field and build the :class:`RunConfig`."""
    raw = copy.deepcopy(raw)
    schema = raw.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ConfigError("schema", f"unsupported schema version {schema!r} (expected {SCHEMA_VERSION})")
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        raise ConfigError(unknown[0], "unknown field")
    exp = raw.get("experiment")
    if not isinstance(exp, dict):
        raise ConfigError("experiment", "missing or not an object")
    unknown = sorted(set(exp) - _EXPERIMENT_KEYS)
    if unknown:
        raise ConfigError(f"experiment.{unknown[0]}", "unknown field")
    P = "experiment"
    e = {**EXPERIMENT_DEFAULTS, **exp}

    try:
        engine = Engine(e["engine"])
    except ValueError:
        raise ConfigError(f"{P}.engine", f"unknown engine {e['engine']!r}; "
                          f"choose from {[x.value for x in Engine]}") from None
    try:
        mode = LindbladMode(e["lindblad_mode"])
    except ValueError:
        raise ConfigError(f"{P}.lindblad_mode", f"unknown mode {e['lindblad_mode']!r}") from None
    if "initial_state" not in e:
        raise ConfigError(f"{P}.initial_state", "required")
    rho0 = _initial_state(e["initial_state"], f"{P}.initial_state")
    dim = rho0.shape[0]
    eigenvalues = None
    if mode is LindbladMode.SINGLE_OBSERVABLE:
        eigenvalues = _observable(e, P, dim)
    elif "eigenvalues" in exp or "observable" in exp:
        raise ConfigError(f"{P}.eigenvalues", "not used in PROJECTORS mode")

    dt = _number(e, "dt", P, positive=True)
    t_max = _number(e, "t_max", P, positive=True)
    ratio = t_max / dt
    if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
        raise ConfigError(f"{P}.t_max", f"must be an integer multiple of dt (t_max/dt = {ratio!r})")
    n_traj = _number(e, "trajectories", P, int, positive=True)
    seed = _number(e, "seed", P, int)
    if not 0 <= seed < 2**64:
        raise ConfigError(f"{P}.seed", "must lie in [0, 2^64)")
    eps = _number(e, "epsilon_endpoint", P)
    if not 0 < eps < 0.5:
        raise ConfigError(f"{P}.epsilon_endpoint", "must lie in (0, 0.5)")
    n_record = _number(e, "n_record", P, int, positive=True)
    if n_record > round(ratio):
        raise ConfigError(f"{P}.n_record", f"exceeds the number of steps {round(ratio)}")
    stop = _bool(e, "stop_at_endpoint", P)
    renorm = _bool(e, "renormalize", P)
    if e["linear_gauge"] not in ("center", "raw"):
        raise ConfigError(f"{P}.linear_gauge", "must be 'center' or 'raw'")

    try:
        spec = ExperimentSpec(engine, mode, rho0, tuple(eigenvalues) if eigenvalues else None, dt, t_max,
                              n_traj, seed, eps, stop, n_record, renorm, e["linear_gauge"])
    except ValueError as exc:
        raise ConfigError(P, str(exc)) from None

    top = {**TOP_DEFAULTS, **{k: v for k, v in raw.items() if k in TOP_DEFAULTS}}
    engines = raw.get("engines", [engine.value])
    if not isinstance(engines, list) or not engines:
        raise ConfigError("engines", "must be a non-empty list")
    for i, name in enumerate(engines):
        try:
            Engine(name)
        except ValueError:
            raise ConfigError(f"engines[{i}]", f"unknown engine {name!r}") from None

    if not isinstance(top["output_dir"], str) or not top["output_dir"]:
        raise ConfigError("output_dir", "must be a non-empty string")
    formats = top["formats"]
    if not isinstance(formats, list) or not set(formats) <= {"json", "csv"} or not formats:
        raise ConfigError("formats", "must be a non-empty subset of ['json', 'csv']")
    if not isinstance(top["bit_exact"], bool):
        raise ConfigError("bit_exact", "must be true or false")
    workers = top["workers"]
    if workers != "AUTO" and (isinstance(workers, bool) or not isinstance(workers, int) or workers < 1):
        raise ConfigError("workers", "must be a positive integer or \"AUTO\"")

    default_tracked = [f"p[{m}]" for m in range(dim)]
    if Engine.LINEAR_WEIGHTED.value in engines:
        default_tracked.append("w")
    tracked = raw.get("tracked", default_tracked)
    if not isinstance(tracked, list):
        raise ConfigError("tracked", "must be a list of selectors")
    sels = []
    for i, name in enumerate(tracked):
        m = _SEL.match(name) if isinstance(name, str) else None
        if m is None:
            raise ConfigError(f"tracked[{i}]", f"unknown selector {name!r}; use p[m], rho[m,n].re, "
                              "rho[m,n].im, <L>, w or purity")
        idx = [int(g) for g in m.groups()[:3] if g is not None]
        if any(k >= dim for k in idx):
            raise ConfigError(f"tracked[{i}]", f"index out of range for dim {dim}")
        if name == "<L>" and mode is not LindbladMode.SINGLE_OBSERVABLE:
            raise ConfigError(f"tracked[{i}]", "<L> needs SINGLE_OBSERVABLE mode")
        sels.append(Selector(name))
    if len({s.name for s in sels}) != len(sels):
        raise ConfigError("tracked", "lists a selector twice")

    deco = raw.get("decoherence")
    pair = None
    if deco is not None:
        if not isinstance(deco, dict) or "pair" not in deco:
            raise ConfigError("decoherence", "must be an object with a \"pair\" field")
        pr = deco["pair"]
        if (not isinstance(pr, list) or len(pr) != 2 or not all(isinstance(k, int) and not isinstance(k, bool)
                                                               for k in pr)):
            raise ConfigError("decoherence.pair", "must be two integer indices")
        if not all(0 <= k < dim for k in pr) or pr[0] == pr[1]:
            raise ConfigError("decoherence.pair", f"needs two distinct indices below {dim}")
        pair = (int(pr[0]), int(pr[1]))

    exp_norm = {"engine": engine.value, "lindblad_mode": mode.value, "dt": dt, "t_max": t_max,
                "trajectories": n_traj, "seed": seed, "epsilon_endpoint": eps, "stop_at_endpoint": stop,
                "n_record": n_record, "renormalize": renorm, "linear_gauge": e["linear_gauge"],
                "initial_state": operator_to_json(rho0)}
    if eigenvalues is not None:
        exp_norm["eigenvalues"] = eigenvalues
    normalized = {"schema": SCHEMA_VERSION, "experiment": exp_norm, "engines": list(engines),
                  "output_dir": top["output_dir"], "formats": list(formats), "bit_exact": top["bit_exact"],
                  "workers": workers, "tracked": [s.name for s in sels],
                  "decoherence": {"pair": list(pair)} if pair else None}
    return RunConfig(spec, [Engine(x) for x in engines], top["output_dir"], list(formats), top["bit_exact"],
                     workers, sels, pair, normalized)


def with_overrides(cfg: RunConfig, seed=None, workers=None, bit_exact=None, output_dir=None) -> RunConfig:
    """Re-validate ``cfg`` with command-line or environment overrides applied."""
    raw = copy.deepcopy(cfg.normalized)
    if raw["decoherence"] is None:
        del raw["decoherence"]
    if seed is not None:
        raw["experiment"]["seed"] = seed
    if workers is not None:
        raw["workers"] = workers
    if bit_exact is not None:
        raw["bit_exact"] = bit_exact
    if output_dir is not None:
        raw["output_dir"] = output_dir
    return validate_config(raw)

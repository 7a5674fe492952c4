"""Offline/online pipeline: run configuration, artifact persistence and benchmarks.

An offline artifact is a directory holding ``manifest.json`` and one binary
blob per array.  Blobs start with the magic ``CRB1``, the number of
dimensions (``uint32``) and the shape (``uint64`` each), followed by the data
as little-endian float64 in row-major order.  The manifest carries no
timestamps, so two runs with the same configuration give identical bytes;
timings and convergence curves go to ``logs/``.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import os
import struct
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .certification import (CertificationConstants, InfSupSolver, beta_surrogate,
                            compute_constants)
from .eim import EIMApproximation, eim_build, write_training_curve
from .fom import FomConfig, FullOrderModel
from .mesh import ParameterBox, ParameterPoint
from .rb_offline import GreedyCertifier, ReducedBasisSpace, rb_greedy, write_greedy_log
from .rb_online import (NewtonDivergence, ReducedModel, ResidualSplit, build_residual_split,
                        reconstruct)
from .riesz import XInnerProduct

__all__ = [
    "ARTIFACT_VERSION",
    "ConfigError",
    "ArtifactError",
    "StageError",
    "RunConfig",
    "OfflineArtifact",
    "run_offline",
    "run_online",
    "run_benchmark",
    "export_fields",
    "relative_errors",
    "write_benchmark",
    "write_online",
]

log = logging.getLogger(__name__)

ARTIFACT_VERSION = 1
_MAGIC = b"CRB1"


class ConfigError(ValueError):
    """Invalid or mismatched configuration."""


class ArtifactError(RuntimeError):
    """Unreadable, incompatible or locked artifact directory."""


class StageError(RuntimeError):
    """Numerical failure inside a named offline stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# -- configuration -----------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """All knobs of an offline run; every model constant is explicit."""

    ra_min: float = 1e3
    ra_max: float = 1e4
    height_min: float = 1.0
    height_max: float = 1.0
    n_h: int = 16
    prandtl: float = 0.71
    c_s: float = 0.1
    dt: float = 0.01
    eps_fe: float = 1e-10
    max_steps: int = 20000
    eps_eim: float = 1e-8
    m_max: int = 100
    eps_rb: float = 1e-3
    n_max: int = 20
    train_rayleigh: int = 16
    train_height: int = 1
    beta_rayleigh: int = 6
    beta_height: int = 1
    newton_tol: float = 1e-12
    seed: int = 0

    def __post_init__(self):
        positive = ("ra_min", "ra_max", "height_min", "height_max", "prandtl", "c_s", "dt",
                    "eps_fe", "eps_eim", "eps_rb", "newton_tol")
        for name in positive:
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ConfigError(f"{name} must be positive, got {val}")
        if self.ra_min > self.ra_max or self.height_min > self.height_max:
            raise ConfigError("empty parameter range")
        for name in ("n_h", "max_steps", "m_max", "n_max", "train_rayleigh", "train_height",
                     "beta_rayleigh", "beta_height"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.n_h < 2:
            raise ConfigError("n_h must be at least 2")

    @property
    def box(self) -> ParameterBox:
        return ParameterBox((self.ra_min, self.ra_max), (self.height_min, self.height_max))

    @property
    def fom_config(self) -> FomConfig:
        return FomConfig(dt=self.dt, steady_tol=self.eps_fe, max_steps=self.max_steps)

    def training_set(self) -> list:
        return self.box.grid(self.train_rayleigh, self.train_height)

    def beta_set(self) -> list:
        return self.box.grid(self.beta_rayleigh, self.beta_height)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        text = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    # key-value text ------------------------------------------------------------------
    def to_text(self) -> str:
        lines = ["# cavityrb run configuration", "[run]"]
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        if "run" not in parser:
            raise ConfigError("missing [run] section")
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in parser["run"].items():
            if key not in types:
                raise ConfigError(f"unknown key {key!r}")
            try:
                kwargs[key] = int(raw) if types[key] in ("int", int) else float(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_text(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc


# -- binary blobs ------------------------------------------------------------------------

def _write_blob(path: Path, array) -> str:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    header = _MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    data = header + arr.tobytes(order="C")
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _read_blob(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if data[:4] != _MAGIC:
        raise ArtifactError(f"{path.name}: bad magic")
    (ndim,) = struct.unpack_from("<I", data, 4)
    shape = struct.unpack_from(f"<{ndim}Q", data, 8)
    offset = 8 + 8 * ndim
    arr = np.frombuffer(data, dtype="<f8", offset=offset)
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ArtifactError(f"{path.name}: payload does not match shape {shape}")
    return arr.reshape(shape).astype(float)


@contextmanager
def _lock(directory: Path):
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise ArtifactError(f"{directory} is locked by another process ({lock})") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# -- artifact ----------------------------------------------------------------------------------

@dataclass(eq=False)
class OfflineArtifact:
    """Everything the online stage needs, plus the stored snapshots."""

    config: RunConfig
    basis: ReducedBasisSpace
    operators: dict
    eim: EIMApproximation
    beta_nodes: list
    beta_values: np.ndarray
    constants: CertificationConstants
    snapshot_coeffs: np.ndarray
    residual_R: np.ndarray
    greedy_log: list = dataclasses.field(default_factory=list)

    def model(self) -> ReducedModel:
        cfg = self.config
        surrogate = beta_surrogate(list(zip(self.beta_nodes, self.beta_values)), cfg.box)
        split = ResidualSplit(self.residual_R, self.basis.velocity.shape[1], self.basis.n,
                              self.eim.size)
        return ReducedModel(self.operators, self.eim.interpolation_matrix, prandtl=cfg.prandtl,
                            c_s=cfg.c_s, n_h=cfg.n_h, box=cfg.box,
                            snapshot_parameters=self.basis.parameters,
                            snapshot_coeffs=self.snapshot_coeffs, constants=self.constants,
                            beta=surrogate, residual_split=split, basis=self.basis)

    def blobs(self) -> dict:
        b = self.basis
        out = {
            "basis_velocity": b.velocity,
            "basis_temperature": b.temperature,
            "basis_pressure": b.pressure,
            "snapshot_parameters": np.array([m.as_tuple() for m in b.parameters]),
            "snapshots": np.array(b.snapshots),
            "snapshot_coeffs": self.snapshot_coeffs,
            "eim_basis": self.eim.basis,
            "eim_magic_points": self.eim.magic_points.astype(float),
            "eim_training_errors": np.array(self.eim.training_errors),
            "beta_nodes": np.array([m.as_tuple() for m in self.beta_nodes]),
            "beta_values": self.beta_values,
            "residual_R": self.residual_R,
        }
        for key in sorted(self.operators):
            out["op_" + key] = self.operators[key]
        return out

    def manifest(self, hashes: dict) -> dict:
        shapes = {k: list(np.shape(v)) for k, v in self.blobs().items()}
        return {
            "version": ARTIFACT_VERSION,
            "config_hash": self.config.hash(),
            "config": self.config.as_dict(),
            "mesh": {"divisions_per_side": self.config.n_h, "element": "P2-P2-P1"},
            "dimensions": {"N": self.basis.n, "velocity": self.basis.velocity.shape[1],
                           "M": self.eim.size},
            "eim": {"tol": self.eim.tol, "initial_error": self.eim.initial_error,
                    "selected": [int(i) for i in self.eim.selected]},
            "constants": self.constants.as_dict(),
            "blobs": {k: {"shape": shapes[k], "sha256": hashes[k]} for k in sorted(hashes)},
        }

    def save(self, directory) -> Path:
        directory = Path(directory)
        blob_dir = directory / "blobs"
        blob_dir.mkdir(parents=True, exist_ok=True)
        hashes = {k: _write_blob(blob_dir / f"{k}.bin", v) for k, v in self.blobs().items()}
        text = json.dumps(self.manifest(hashes), indent=2, sort_keys=True)
        (directory / "manifest.json").write_text(text + "\n")
        return directory

    @classmethod
    def load(cls, directory, config: RunConfig | None = None) -> "OfflineArtifact":
        directory = Path(directory)
        try:
            manifest = json.loads((directory / "manifest.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ArtifactError(f"cannot read manifest in {directory}: {exc}") from exc
        if manifest.get("version") != ARTIFACT_VERSION:
            raise ArtifactError(f"unsupported artifact version {manifest.get('version')!r} "
                                f"(this build reads version {ARTIFACT_VERSION})")
        stored = RunConfig(**manifest["config"])
        if stored.hash() != manifest["config_hash"]:
            raise ArtifactError("manifest config does not match its recorded hash")
        if config is not None and config.hash() != manifest["config_hash"]:
            raise ConfigError(f"configuration hash {config.hash()[:12]} does not match the "
                              f"artifact ({manifest['config_hash'][:12]})")
        blobs = {}
        for key, meta in manifest["blobs"].items():
            arr = _read_blob(directory / "blobs" / f"{key}.bin")
            if list(arr.shape) != meta["shape"]:
                raise ArtifactError(f"blob {key}: shape {arr.shape} differs from manifest")
            blobs[key] = arr
        params = [ParameterPoint(*p) for p in blobs["snapshot_parameters"]]
        basis = ReducedBasisSpace(blobs["basis_velocity"], blobs["basis_temperature"],
                                  blobs["basis_pressure"], params, list(blobs["snapshots"]))
        dims = manifest["dimensions"]
        if basis.n != dims["N"] or blobs["eim_basis"].shape[0] != dims["M"]:
            raise ArtifactError("manifest dimensions disagree with blob shapes")
        eim_meta = manifest["eim"]
        eim = EIMApproximation(blobs["eim_basis"], blobs["eim_magic_points"].astype(np.int64),
                               list(blobs["eim_training_errors"]), eim_meta["selected"],
                               eim_meta["initial_error"], eim_meta["tol"])
        c = manifest["constants"]
        constants = CertificationConstants(c["c_u"], c["c_theta"], c["c_f"], c["c_inv"], c["c_p"],
                                           c["c_s"], c["n_h"],
                                           (c["sup_grad_u"], c["sup_grad_theta"]))
        ops = {k[3:]: v for k, v in blobs.items() if k.startswith("op_")}
        return cls(stored, basis, ops, eim,
                   [ParameterPoint(*p) for p in blobs["beta_nodes"]], blobs["beta_values"],
                   constants, blobs["snapshot_coeffs"], blobs["residual_R"])


# -- offline --------------------------------------------------------------------------------

@contextmanager
def _stage(name: str, timings: dict):
    t0 = time.perf_counter()
    log.info("offline stage %s", name)
    try:
        yield
    except (ConfigError, ArtifactError):
        raise
    except Exception as exc:  # numerical failures get a stage label
        raise StageError(name, exc) from exc
    finally:
        timings[name] = time.perf_counter() - t0


def run_offline(config: RunConfig, directory, fom: FullOrderModel | None = None,
                snapshot_cache: dict | None = None) -> OfflineArtifact:
    """Training sweep, EIM, constants, inf-sup grid, greedy; saves the artifact.

    ``snapshot_cache`` maps ``mu.as_tuple()`` to full-order state vectors and is
    filled in place, so callers can reuse truth solutions.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    logs = directory / "logs"
    logs.mkdir(exist_ok=True)
    timings = {}
    cache = {} if snapshot_cache is None else snapshot_cache
    with _lock(directory):
        t_start = time.perf_counter()
        with _stage("setup", timings):
            fom = fom or FullOrderModel(config.n_h, config.prandtl, config.c_s)
            if (fom.space.mesh.divisions_per_side != config.n_h or fom.prandtl != config.prandtl
                    or fom.c_s != config.c_s):
                raise ConfigError("full-order model does not match the configuration")
        fom_cfg = config.fom_config
        space = fom.space
        training = config.training_set()

        def state(mu):
            key = mu.as_tuple()
            if key not in cache:
                cache[key] = fom.solve(mu, fom_cfg).vector()
            return cache[key]

        with _stage("training_sweep", timings):
            fields = np.array([fom.forms.eddy_viscosity_field(state(mu)[:2 * space.n_p2], mu.height)
                               for mu in training])
        with _stage("eim", timings):
            eim = eim_build(fields, training, config.eps_eim, config.m_max)
            write_training_curve(logs / "eim_training.csv", eim)
        with _stage("constants", timings):
            constants = compute_constants(space, config.c_s, seed=config.seed)
        with _stage("inf_sup_grid", timings):
            solver = InfSupSolver(fom)
            beta_nodes = config.beta_set()
            beta_values = np.array([solver.beta(mu, state(mu)) for mu in beta_nodes])
            surrogate = beta_surrogate(list(zip(beta_nodes, beta_values)), config.box) \
                if len(beta_nodes) >= 4 else _constant_beta(beta_values)
        inner = XInnerProduct(space)
        certifier = GreedyCertifier(constants, surrogate,
                                    lambda mu, x: inner.dual_norm(fom.forms.residual(x, mu)))
        with _stage("greedy", timings):
            result = rb_greedy(training, config.eps_rb, config.n_max, eim, certifier, fom=fom,
                               fom_config=fom_cfg, box=config.box, snapshot_cache=cache,
                               newton_tol=config.newton_tol)
            write_greedy_log(logs / "greedy_log.csv", result.log)
        with _stage("residual_split", timings):
            split = build_residual_split(fom.forms, result.basis, eim, inner)
        basis = result.basis
        coeffs = np.array([basis.coefficients(space, x) for x in basis.snapshots])
        art = OfflineArtifact(config, basis, result.operators, eim, beta_nodes, beta_values,
                              constants, coeffs, split.R, result.log)
        with _stage("save", timings):
            art.save(directory)
        timings["total"] = time.perf_counter() - t_start
        timings["greedy_converged"] = result.converged
        (logs / "offline_timings.json").write_text(json.dumps(timings, indent=2) + "\n")
    return art


def _constant_beta(values):
    value = float(np.min(values))
    return lambda mu: value


# -- online / benchmark -------------------------------------------------------------------------

def run_online(artifact: OfflineArtifact, parameters, model: ReducedModel | None = None,
               csv_path=None) -> list:
    """Reduced solve and certificate per parameter; failures are recorded per row."""
    model = model or artifact.model()
    rows = []
    for mu in parameters:
        if not artifact.config.box.contains(mu):
            raise ConfigError(f"{mu} lies outside the parameter box {artifact.config.box}")
        row = {"rayleigh": mu.rayleigh, "height": mu.height, "n": model.n}
        t0 = time.perf_counter()
        try:
            sol = model.solve(mu, artifact.config.newton_tol)
            cert = model.certificate(sol)
        except NewtonDivergence as exc:
            row.update(status=f"newton_divergence: {exc}", wall_time=time.perf_counter() - t0)
            rows.append(row)
            continue
        row.update(status="ok", wall_time=time.perf_counter() - t0,
                   iterations=sol.newton_iterations, solution=sol, certificate=cert)
        rows.append(row)
    if csv_path is not None:
        write_online(csv_path, rows)
    return rows


_ONLINE_COLUMNS = ["rayleigh", "height", "n", "status", "newton_iterations", "epsilon", "beta",
                   "beta_source", "rho", "tau", "delta", "defined", "wall_time"]


def write_online(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_ONLINE_COLUMNS)
        for r in rows:
            rec = _certificate_row(r)
            w.writerow([_fmt(rec[k]) for k in _ONLINE_COLUMNS])


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return f"{v:.10e}"
    return v


def _certificate_row(r):
    c = r.get("certificate")
    nan = float("nan")
    return {"rayleigh": r["rayleigh"], "height": r["height"], "n": r["n"], "status": r["status"],
            "newton_iterations": r.get("iterations", -1),
            "epsilon": c.epsilon_n if c else nan, "beta": c.beta_n if c else nan,
            "beta_source": c.beta_source if c else "", "rho": c.rho_n if c else nan,
            "tau": c.tau_n if c else nan, "delta": c.delta_n if c else nan,
            "defined": c.defined if c else False, "wall_time": r["wall_time"]}


def relative_errors(space, truth_state, approx_state) -> dict:
    """Relative H1 seminorm errors of velocity and (lifted) temperature, L2 of pressure."""
    u, th, p = space.split(truth_state)
    ur, thr, pr = space.split(approx_state)
    n2 = space.n_p2
    hu = np.sqrt(space.h1_seminorm(u[:n2]) ** 2 + space.h1_seminorm(u[n2:]) ** 2)
    du = u - ur
    hdu = np.sqrt(space.h1_seminorm(du[:n2]) ** 2 + space.h1_seminorm(du[n2:]) ** 2)
    t_full = th + space.lift
    return {"velocity_h1": float(hdu / hu),
            "temperature_h1": space.h1_seminorm(th - thr) / space.h1_seminorm(t_full),
            "pressure_l2": space.l2_norm_p1(p - pr) / space.l2_norm_p1(p)}


def run_benchmark(artifact: OfflineArtifact, parameters, fom: FullOrderModel | None = None,
                  repeats: int = 3, csv_path=None, truth_cache: dict | None = None) -> list:
    """Full-order versus reduced timings and errors, one row per parameter.

    ``T_online`` (reduced solve, residual norm and certificate) is the median of
    ``repeats`` runs; ``T_FE`` is a single steady solve from the conduction state.
    """
    cfg = artifact.config
    fom = fom or FullOrderModel(cfg.n_h, cfg.prandtl, cfg.c_s)
    model = artifact.model()
    Y = artifact.basis.embed(fom.space)
    rows = []
    for mu in parameters:
        if not cfg.box.contains(mu):
            raise ConfigError(f"{mu} lies outside the parameter box {cfg.box}")
        t0 = time.perf_counter()
        truth = fom.solve(mu, cfg.fom_config).vector()
        t_fe = time.perf_counter() - t0
        if truth_cache is not None:
            truth_cache[mu.as_tuple()] = truth
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            sol = model.solve(mu, cfg.newton_tol)
            cert = model.certificate(sol)
            times.append(time.perf_counter() - t0)
        t_on = float(np.median(times))
        err = relative_errors(fom.space, truth, Y @ sol.coefficients)
        rows.append({"rayleigh": mu.rayleigh, "height": mu.height, "t_fe": t_fe, "t_online": t_on,
                     "speedup": t_fe / t_on, **err, "delta": cert.delta_n, "tau": cert.tau_n,
                     "solution": sol})
    if csv_path is not None:
        write_benchmark(csv_path, rows)
    return rows


def write_benchmark(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rayleigh", "height", "T_FE_s", "T_online_s", "speedup",
                    "rel_error_u_H1", "rel_error_theta_H1", "rel_error_p_L2"])
        for r in rows:
            w.writerow([f"{r['rayleigh']:.10g}", f"{r['height']:.10g}", f"{r['t_fe']:.6e}",
                        f"{r['t_online']:.6e}", f"{r['speedup']:.4g}", f"{r['velocity_h1']:.6e}",
                        f"{r['temperature_h1']:.6e}", f"{r['pressure_l2']:.6e}"])


def export_fields(artifact: OfflineArtifact, mu: ParameterPoint, path, full_order: bool = False,
                  fom: FullOrderModel | None = None) -> None:
    """Write the reduced (or full-order) fields at ``mu`` as legacy VTK."""
    cfg = artifact.config
    if not cfg.box.contains(mu):
        raise ConfigError(f"{mu} lies outside the parameter box {cfg.box}")
    fom = fom or FullOrderModel(cfg.n_h, cfg.prandtl, cfg.c_s)
    if full_order:
        sol = fom.solve(mu, cfg.fom_config)
    else:
        sol = reconstruct(artifact.model().solve(mu, cfg.newton_tol), artifact.basis)
    fom.space.write_vtk(path, sol)


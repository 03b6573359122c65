"""Pipeline orchestration: configuration, stage subcommands, and artifact
persistence (binary blocks + text manifests, CSV exports).

Stages: gen-data -> train -> certify -> estimate / simulate / validate-cert.
Every artifact embeds the semantic hash of the configuration that produced
it, and stage commands refuse mismatched inputs.

Exit codes: 0 ok, 1 config, 2 IO, 3 numeric, 4 certification.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from dataclasses import dataclass, fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import dynamics, pinn, synth
from .errors import (BudgetExceededError, CertificationError,
                     CertificationViolationError, ConfigError, NumericError,
                     StabilizabilityError, TrainingDivergedError)
from .value import AlphaFn, ValueParams, alpha, xi

log = logging.getLogger("doskit")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_NUMERIC = 3
EXIT_CERTIFICATION = 4

DATASET_BIN = "dataset.bin"
DATASET_MANIFEST = "dataset.manifest"
CHECKPOINT = "model.ckpt"
LOSS_HISTORY = "loss_history.csv"
CERTIFICATE = "certificate.txt"
DOS_GRID_CSV = "dos_grid.csv"
TRAJECTORIES_CSV = "trajectories.csv"

# fixed architecture: two tanh hidden layers, width per system
_PER_SYSTEM = {
    "builtin-2d": {"grid_resolution": 101, "sim_max_steps": 300,
                   "alpha_c": 0.5, "hidden": 20},
    "builtin-3d": {"grid_resolution": 41, "sim_max_steps": 400,
                   "alpha_c": 0.5, "hidden": 30},
}


@dataclass
class RunConfig:
    """One flat configuration drives every pipeline stage."""

    system: str
    n_s: int = 30
    n_traj: int = 5000
    n_d: int = 5000
    n_pi: int = 10000
    alpha_c: float | None = None
    lambda_d: float = 0.1
    lambda_pi: float = 1.0
    epochs: int = 300
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    grid_resolution: int | None = None
    u_grid_resolution: int = 21
    c2_ladder_size: int = 200
    omega_ladder_size: int = 100
    sim_max_steps: int | None = None
    sim_stop_tol: float = 1e-3
    out_dir: str = "out"

    def __post_init__(self):
        if self.system not in _PER_SYSTEM:
            raise ConfigError("system", f"unknown system {self.system!r}; "
                              f"choose from {sorted(_PER_SYSTEM)}")
        per = _PER_SYSTEM[self.system]
        if self.alpha_c is None:
            self.alpha_c = per["alpha_c"]
        if self.grid_resolution is None:
            self.grid_resolution = per["grid_resolution"]
        if self.sim_max_steps is None:
            self.sim_max_steps = per["sim_max_steps"]
        for name in ("n_s", "n_traj", "n_d", "n_pi", "batch_size", "sim_max_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed", "must be >= 0")
        for name in ("alpha_c", "lambda_d", "lambda_pi", "learning_rate", "sim_stop_tol"):
            if not getattr(self, name) > 0.0:
                raise ConfigError(name, "must be positive")
        if self.grid_resolution < 2:
            raise ConfigError("grid_resolution", "must be >= 2")
        if self.u_grid_resolution < 1:
            raise ConfigError("u_grid_resolution", "must be >= 1")
        for name in ("c2_ladder_size", "omega_ladder_size"):
            if getattr(self, name) < 2:
                raise ConfigError(name, "must be >= 2")
        if self.batch_size > min(self.n_d, self.n_pi):
            raise ConfigError("batch_size", "must not exceed n_d or n_pi")

    @property
    def layer_sizes(self) -> tuple:
        n = dynamics.make_system(self.system).n
        width = _PER_SYSTEM[self.system]["hidden"]
        return (2 * n, width, width, 1)


_INT_KEYS = {"n_s", "n_traj", "n_d", "n_pi", "epochs", "batch_size", "seed",
             "grid_resolution", "u_grid_resolution", "c2_ladder_size",
             "omega_ladder_size", "sim_max_steps"}
_FLOAT_KEYS = {"alpha_c", "lambda_d", "lambda_pi", "learning_rate", "sim_stop_tol"}
_STR_KEYS = {"system", "out_dir"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _STR_KEYS


def config_from_text(text: str) -> RunConfig:
    """Parse the flat ``key = value`` format; unknown keys are rejected."""
    raw: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {stripped!r}")
        key = key.strip()
        if key not in _ALL_KEYS:
            raise ConfigError(key, "unknown configuration key")
        if key in raw:
            raise ConfigError(key, "duplicate configuration key")
        raw[key] = value.strip()
    if "system" not in raw:
        raise ConfigError("system", "missing required key")
    kwargs: dict = {}
    for key, value in raw.items():
        try:
            if key in _INT_KEYS:
                kwargs[key] = int(value)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        except ValueError:
            raise ConfigError(key, f"cannot parse {value!r}")
    return RunConfig(**kwargs)


def config_from_file(path) -> RunConfig:
    return config_from_text(Path(path).read_text())


def config_to_text(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclass_fields(cfg)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """Semantic hash binding artifacts to the configuration (out_dir excluded)."""
    lines = sorted(f"{f.name}={getattr(cfg, f.name)!r}" for f in dataclass_fields(cfg)
                   if f.name != "out_dir")
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_kv_file(path: Path, magic: str, pairs: dict) -> None:
    lines = [magic] + [f"{k} = {pairs[k]}" for k in sorted(pairs)]
    path.write_text("\n".join(lines) + "\n")


def _read_kv_file(path: Path, magic: str) -> dict:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != magic:
        raise ValueError(f"{path}: expected a {magic} file")
    pairs = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: malformed line {line!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def build_system(cfg: RunConfig) -> dynamics.SystemSpec:
    return dynamics.make_system(cfg.system)


def certificate_chain(cfg: RunConfig, sys_spec: dynamics.SystemSpec):
    """Linear gain and quadratic Lyapunov matrix shared by gen-data and certify."""
    A, B = synth.linearize(sys_spec)
    K = synth.design_gain(A, B)
    A_cl = A + B @ K
    P = synth.solve_discrete_lyapunov(A_cl, np.eye(sys_spec.n))
    log.info("gain: spectral radius of the closed loop = %.6f",
             synth.spectral_radius(A_cl))
    log.info("lyapunov: residual = %.3e",
             float(np.max(np.abs(A_cl.T @ P @ A_cl - P + np.eye(sys_spec.n)))))
    return K, P


def save_dataset(ds: pinn.ValueDataset, out: Path, cfg: RunConfig) -> None:
    blocks = [ds.data_x, ds.data_targets, ds.col_x, ds.col_z_x, ds.col_z_fx, ds.col_xi]
    payload = b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in blocks)
    (out / DATASET_BIN).write_bytes(payload)
    _write_kv_file(out / DATASET_MANIFEST, "doskit-dataset-v1", {
        "system": cfg.system,
        "n": ds.n,
        "n_d": ds.n_data,
        "n_pi": ds.n_colloc,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "bin_file": DATASET_BIN,
        "bin_sha256": _sha256_bytes(payload),
    })


def load_dataset(out: Path, cfg: RunConfig) -> pinn.ValueDataset:
    meta = _read_kv_file(out / DATASET_MANIFEST, "doskit-dataset-v1")
    if meta.get("config_hash") != config_hash(cfg):
        raise ConfigError("config_hash", "dataset was generated with a different configuration")
    payload = (out / meta.get("bin_file", DATASET_BIN)).read_bytes()
    if _sha256_bytes(payload) != meta.get("bin_sha256"):
        raise ValueError(f"{out / DATASET_BIN}: checksum mismatch, file is corrupt")
    n = int(meta["n"])
    n_d = int(meta["n_d"])
    n_pi = int(meta["n_pi"])
    flat = np.frombuffer(payload, dtype="<f8").astype(float)
    sizes = [n_d * n, n_d, n_pi * n, n_pi * 2 * n, n_pi * 2 * n, n_pi]
    if flat.size != sum(sizes):
        raise ValueError(f"{out / DATASET_BIN}: expected {sum(sizes)} values, got {flat.size}")
    parts, pos = [], 0
    for size in sizes:
        parts.append(flat[pos:pos + size])
        pos += size
    return pinn.ValueDataset(
        data_x=parts[0].reshape(n_d, n),
        data_targets=parts[1],
        col_x=parts[2].reshape(n_pi, n),
        col_z_x=parts[3].reshape(n_pi, 2 * n),
        col_z_fx=parts[4].reshape(n_pi, 2 * n),
        col_xi=parts[5],
    )


def save_certificate(cert: synth.Certificate, path: Path, cfg: RunConfig) -> None:
    n = cert.P.shape[0]
    m = cert.K.shape[0]
    _write_kv_file(path, "doskit-certificate-v1", {
        "system": cfg.system,
        "config_hash": config_hash(cfg),
        "n": n,
        "m": m,
        "K": ",".join(repr(v) for v in cert.K.ravel()),
        "P": ",".join(repr(v) for v in cert.P.ravel()),
        "c1": repr(cert.c1),
        "c2": repr(cert.c2),
        "omega1": repr(cert.omega1),
        "omega2": repr(cert.omega2),
        "grid_resolution": cert.grid_resolution,
        "u_grid_resolution": cert.u_grid_resolution,
    })


def load_certificate(path: Path, cfg: RunConfig | None = None) -> synth.Certificate:
    """Load and re-validate a certificate; any defect raises CertificationError."""
    try:
        meta = _read_kv_file(path, "doskit-certificate-v1")
        if cfg is not None and meta.get("config_hash") != config_hash(cfg):
            raise ConfigError("config_hash",
                              "certificate was produced with a different configuration")
        n = int(meta["n"])
        m = int(meta["m"])
        return synth.Certificate(
            K=np.array([float(v) for v in meta["K"].split(",")]).reshape(m, n),
            P=np.array([float(v) for v in meta["P"].split(",")]).reshape(n, n),
            c1=float(meta["c1"]),
            c2=float(meta["c2"]),
            omega1=float(meta["omega1"]),
            omega2=float(meta["omega2"]),
            grid_resolution=int(meta["grid_resolution"]),
            u_grid_resolution=int(meta["u_grid_resolution"]),
        )
    except ConfigError:
        raise
    except (KeyError, ValueError) as err:
        raise CertificationError(f"invalid certificate {path}: {err}")


def load_model(out: Path, cfg: RunConfig):
    model, meta = pinn.load_checkpoint(out / CHECKPOINT)
    if meta.get("config_hash") != config_hash(cfg):
        raise ConfigError("config_hash", "checkpoint was trained with a different configuration")
    return model


def cmd_gen_data(cfg: RunConfig, out: Path) -> int:
    sys_spec = build_system(cfg)
    _, P = certificate_chain(cfg, sys_spec)
    a = AlphaFn(P, cfg.alpha_c)
    vp = ValueParams(n_s=cfg.n_s, n_traj=cfg.n_traj, seed=cfg.seed)
    log.info("sampling %d data points and %d collocation points", cfg.n_d, cfg.n_pi)
    ds = pinn.generate_dataset(sys_spec, a, vp, cfg.n_d, cfg.n_pi, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out, cfg)
    log.info("dataset written to %s", out / DATASET_BIN)
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path) -> int:
    ds = load_dataset(out, cfg)
    tc = pinn.TrainConfig(lambda_d=cfg.lambda_d, lambda_pi=cfg.lambda_pi,
                          epochs=cfg.epochs, batch_size=cfg.batch_size,
                          learning_rate=cfg.learning_rate, seed=cfg.seed)
    ckpt = out / CHECKPOINT
    if ckpt.exists():
        model = load_model(out, cfg)
        log.info("resuming from existing checkpoint")
    else:
        model = pinn.init_mlp(cfg.layer_sizes, seed=cfg.seed)
    log.info("training %d epochs (batch %d, lr %g)", cfg.epochs, cfg.batch_size,
             cfg.learning_rate)
    model, history = pinn.train(model, ds, tc)
    pinn.save_checkpoint(model, ckpt, {"seed": cfg.seed, "config_hash": config_hash(cfg)})
    with open(out / LOSS_HISTORY, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "L_d", "L_pi", "total"])
        for epoch, (l_d, l_pi, total) in enumerate(history, start=1):
            writer.writerow([epoch, repr(l_d), repr(l_pi), repr(total)])
    if history:
        log.info("final losses: L_d = %.6g, L_pi = %.6g, total = %.6g", *history[-1])
    log.info("checkpoint written to %s", ckpt)
    return EXIT_OK


def cmd_certify(cfg: RunConfig, out: Path) -> int:
    sys_spec = build_system(cfg)
    model = load_model(out, cfg)
    K, P = certificate_chain(cfg, sys_spec)
    c1 = synth.compute_c1(P, K, sys_spec.input_box, sys_spec.domain_box)
    log.info("c1: input-feasible quadratic level = %.6g", c1)
    _, state_pts = synth.state_grid_points(sys_spec.domain_box, cfg.grid_resolution)
    u_pts = synth.input_grid_points(sys_spec.input_box, cfg.u_grid_resolution)
    c2 = synth.enlarge_c2(sys_spec, P, c1, state_pts, u_pts, cfg.c2_ladder_size)
    log.info("c2: grid-enlarged quadratic level = %.6g", c2)
    omega1, omega2 = synth.find_omega_levels(model, sys_spec, P, c2, state_pts,
                                             u_pts, cfg.omega_ladder_size)
    log.info("omega levels: omega1 = %.6g, omega2 = %.6g", omega1, omega2)
    cert = synth.Certificate(K=K, P=P, c1=c1, c2=c2, omega1=omega1, omega2=omega2,
                             grid_resolution=cfg.grid_resolution,
                             u_grid_resolution=cfg.u_grid_resolution)
    save_certificate(cert, out / CERTIFICATE, cfg)
    log.info("certificate written to %s", out / CERTIFICATE)
    return EXIT_OK


def cmd_estimate(cfg: RunConfig, out: Path) -> int:
    sys_spec = build_system(cfg)
    model = load_model(out, cfg)
    cert = load_certificate(out / CERTIFICATE, cfg)
    grid = synth.dos_grid(model, sys_spec, cert.omega2, cfg.grid_resolution)
    nu = synth.quad_form(cert.P, grid.points)
    with open(out / DOS_GRID_CSV, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(sys_spec.n)]
                        + ["omega_value", "in_dos", "in_ellipsoid"])
        for row, value, inside, level in zip(grid.points, grid.values, grid.mask, nu):
            writer.writerow([repr(v) for v in row]
                            + [repr(float(value)), int(inside), int(level <= cert.c2)])
    log.info("wrote %d grid rows to %s", grid.points.shape[0], out / DOS_GRID_CSV)
    return EXIT_OK


def sample_initial_states(model, sys_spec, omega2: float, count: int,
                          rng: np.random.Generator, max_tries: int = 1000) -> np.ndarray:
    """Rejection-sample initial states uniformly from the certified region."""
    picked: list = []
    for _ in range(max_tries):
        cand = sys_spec.domain_box.sample(rng, count)
        om = np.asarray(pinn.omega_nn(model, cand))
        for x in cand[om <= omega2]:
            picked.append(x)
            if len(picked) == count:
                return np.array(picked)
    raise CertificationError(
        f"could not sample {count} initial states from the certified region")


def cmd_simulate(cfg: RunConfig, out: Path, num_trajectories: int, seed: int) -> int:
    sys_spec = build_system(cfg)
    model = load_model(out, cfg)
    cert = load_certificate(out / CERTIFICATE, cfg)
    rng = np.random.default_rng(seed)
    starts = sample_initial_states(model, sys_spec, cert.omega2, num_trajectories, rng)
    violations = 0
    with open(out / TRAJECTORIES_CSV, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["traj_id", "step", "norm2"]
                        + [f"u_{i + 1}" for i in range(sys_spec.m)]
                        + ["branch", "violation"])
        for tid, x0 in enumerate(starts):
            violated_step = None
            try:
                run = synth.simulate_closed_loop(sys_spec, cert, model, x0,
                                                 cfg.sim_max_steps, cfg.sim_stop_tol)
            except CertificationViolationError as err:
                run = err.partial
                violated_step = err.step
                violations += 1
                log.warning("trajectory %d: %s", tid, err)
            traj = run.trajectory
            for k in range(traj.horizon):
                flag = int(violated_step is not None and k == traj.horizon - 1)
                writer.writerow([tid, k, repr(float(np.linalg.norm(traj.states[k])))]
                                + [repr(float(v)) for v in traj.inputs[k]]
                                + [int(run.branches[k]), flag])
            writer.writerow([tid, traj.horizon,
                             repr(float(np.linalg.norm(traj.states[-1])))]
                            + [""] * sys_spec.m + ["", 0])
    log.info("wrote %d trajectories to %s", len(starts), out / TRAJECTORIES_CSV)
    if violations:
        log.error("%d trajectories hit certification violations", violations)
        return EXIT_CERTIFICATION
    return EXIT_OK


def cmd_validate_cert(cfg: RunConfig, out: Path) -> int:
    sys_spec = build_system(cfg)
    model = load_model(out, cfg)
    cert = load_certificate(out / CERTIFICATE, cfg)
    stats = synth.revalidate_certificate(cert, model, sys_spec)
    log.info("certificate re-validated: %s", stats)
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="doskit",
        description="Estimate domains of stabilization and synthesize controllers "
                    "for the built-in benchmark systems.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="path to the run configuration")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="override the config output directory")
    for name, help_text in [
            ("gen-data", "sample value targets and collocation points"),
            ("train", "fit the value network on an existing dataset"),
            ("certify", "derive controller levels from a trained network"),
            ("estimate", "export the estimated stabilization domain as CSV"),
            ("simulate", "run closed-loop trajectories from the certified region"),
            ("validate-cert", "re-check every grid condition of a certificate")]:
        sp = sub.add_parser(name, parents=[common], help=help_text)
        if name == "simulate":
            sp.add_argument("--num-trajectories", type=int, default=100)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    args = _build_parser().parse_args(argv)
    try:
        cfg = config_from_file(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed", "must be >= 0")
            cfg.seed = args.seed
        out = Path(args.out if args.out is not None else cfg.out_dir)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "certify":
            return cmd_certify(cfg, out)
        if args.command == "estimate":
            return cmd_estimate(cfg, out)
        if args.command == "simulate":
            return cmd_simulate(cfg, out, args.num_trajectories, cfg.seed)
        if args.command == "validate-cert":
            return cmd_validate_cert(cfg, out)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as err:
        log.error("configuration error: %s", err)
        return EXIT_CONFIG
    except OSError as err:
        log.error("io error: %s", err)
        return EXIT_IO
    except TrainingDivergedError as err:
        log.error("training error: %s", err)
        return EXIT_NUMERIC
    except (NumericError, BudgetExceededError) as err:
        log.error("numeric error: %s", err)
        return EXIT_NUMERIC
    except (CertificationError, CertificationViolationError, StabilizabilityError) as err:
        log.error("certification error: %s", err)
        return EXIT_CERTIFICATION
    except ValueError as err:
        log.error("invalid artifact: %s", err)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Config-driven experiment runner with reproducible CSV/JSON outputs.

Configs are TOML.  Top-level keys: ``out_dir`` (str), ``seed`` (int),
``threads`` (int).  The ``[map]`` table describes the endomorphism:
``kind`` in {linear, raw, shear_composition, smooth_conjugate}, ``matrix``
(2x2 integer rows), and per kind either ``terms`` (rows of
[k1, k2, a1, a2, phase]), ``s_terms``/``t_terms`` (rows of
[k, amplitude, phase]), or ``h_terms``/``h_s_terms``/``h_t_terms``.
``[tolerances]`` holds ``newton_tol``, ``rho_tol``, ``cert_grid``.  Each
``[[experiments]]`` entry has a unique ``name``, a ``kind`` in
{certify, exponents, conjugacy, rigidity, ubd, strip}, and kind-specific
parameters (all optional, defaults below).

Determinism contract: outputs are a pure function of the effective config.
The master seed expands to a per-experiment substream by hashing the
experiment name, so adding an experiment never perturbs the randomness of
the others, and ``--threads`` never changes any output byte (experiments
run sequentially; the flag only permits intra-experiment parallelism in
the numerical kernels, all of which reduce deterministically).

Exit codes: 0 all experiments succeeded; 1 at least one experiment failed;
2 config error; 3 certification failure (including expanding
linearizations, which have no stable apparatus).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - python < 3.11
    import tomli as tomllib

from . import __version__
from .conjugacy import build_conjugacy, estimate_holder_along_leaf
from .errors import AnosovLabError, CertificationFailed, ConfigError, ExpandingMap
from .leaf_measures import covering_height, leaf_growth_ratio, ubd_constant
from .periodic_data import (
    birkhoff_exponent,
    continue_periodic_orbit,
    livshitz_obstruction,
    orbit_exponents,
    orbit_log_jacobian_mean,
    periodic_orbits_linear,
    specialness_diagnostic,
)
from .splitting import grow_leaf_segment, quasi_isometry_constant
from .torus_map import (
    IntMatrix2,
    TrigTerm,
    certify_hyperbolicity,
    make_linear,
    make_raw,
    make_shear_composition,
    make_smooth_conjugate,
)

EXPERIMENT_KINDS = ("certify", "exponents", "conjugacy", "rigidity", "ubd", "strip")


# ---------------------------------------------------------------------------
# config


@dataclass
class LabConfig:
    map_spec: dict
    newton_tol: float = 1e-12
    rho_tol: float = 1e-8
    cert_grid: int = 256
    seed: int = 0
    out_dir: str = "out"
    threads: int = 1
    experiments: list = field(default_factory=list)
    path: str = "<config>"

    def config_hash(self) -> str:
        """Hash of everything that may influence output bytes.

        out_dir and threads are excluded: neither affects any computed
        value, and the determinism contract requires identical CSVs across
        thread counts.
        """
        payload = {
            "map": self.map_spec,
            "newton_tol": self.newton_tol,
            "rho_tol": self.rho_tol,
            "cert_grid": self.cert_grid,
            "seed": self.seed,
            "experiments": self.experiments,
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _anchor(text: str, section: str) -> int:
    """1-based line number of a section header, for error messages."""
    for i, line in enumerate(text.splitlines(), start=1):
        if line.strip().startswith(section):
            return i
    return 1


def load_config(path) -> LabConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    if "map" not in data or not isinstance(data["map"], dict):
        raise ConfigError(f"{path}:1: config requires a [map] table")
    map_spec = data["map"]
    line = _anchor(text, "[map]")
    if "matrix" not in map_spec:
        raise ConfigError(f"{path}:{line}: [map] requires 'matrix'")
    m = map_spec["matrix"]
    if (not isinstance(m, list) or len(m) != 2
            or any(len(row) != 2 for row in m)
            or any(int(v) != v for row in m for v in row)):
        raise ConfigError(f"{path}:{line}: 'matrix' must be two rows of two integers")
    kind = map_spec.get("kind", "raw")
    if kind not in ("linear", "raw", "shear_composition", "smooth_conjugate"):
        raise ConfigError(f"{path}:{line}: unknown map kind '{kind}'")

    tols = data.get("tolerances", {})
    tline = _anchor(text, "[tolerances]")
    cfg = LabConfig(
        map_spec=map_spec,
        newton_tol=float(tols.get("newton_tol", 1e-12)),
        rho_tol=float(tols.get("rho_tol", 1e-8)),
        cert_grid=int(tols.get("cert_grid", 256)),
        seed=int(data.get("seed", 0)),
        out_dir=str(data.get("out_dir", "out")),
        threads=int(data.get("threads", 1)),
        experiments=list(data.get("experiments", [])),
        path=str(path),
    )
    if cfg.newton_tol <= 0 or cfg.rho_tol <= 0 or cfg.cert_grid <= 0:
        raise ConfigError(f"{path}:{tline}: all tolerances must be positive")
    names = []
    for exp in cfg.experiments:
        eline = _anchor(text, "[[experiments]]")
        if "name" not in exp:
            raise ConfigError(f"{path}:{eline}: every experiment requires 'name'")
        if exp.get("kind", exp["name"]) not in EXPERIMENT_KINDS:
            raise ConfigError(
                f"{path}:{eline}: experiment '{exp['name']}': unknown kind "
                f"'{exp.get('kind', exp['name'])}'")
        names.append(exp["name"])
    if len(set(names)) != len(names):
        raise ConfigError(f"{path}: experiment names must be unique")
    return cfg


def build_map(cfg: LabConfig):
    spec = cfg.map_spec
    L = IntMatrix2(tuple(tuple(int(v) for v in row) for row in spec["matrix"]))
    kind = spec.get("kind", "raw")
    trig = [TrigTerm((int(t[0]), int(t[1])), (float(t[2]), float(t[3])),
                     float(t[4])) for t in spec.get("terms", [])]
    shear = lambda key: [(int(t[0]), float(t[1]), float(t[2]))
                         for t in spec.get(key, [])]
    if kind == "linear":
        return make_linear(L)
    if kind == "raw":
        return make_raw(L, trig)
    if kind == "shear_composition":
        return make_shear_composition(L, shear("s_terms"), shear("t_terms"))
    h_terms = [TrigTerm((int(t[0]), int(t[1])), (float(t[2]), float(t[3])),
                        float(t[4])) for t in spec.get("h_terms", [])]
    if spec.get("h_s_terms") or spec.get("h_t_terms"):
        return make_smooth_conjugate(
            L, h_shears=(shear("h_s_terms"), shear("h_t_terms")))
    return make_smooth_conjugate(L, h_terms)


def experiment_seed(master: int, name: str) -> int:
    """Stable per-experiment substream seed (independent of declaration order)."""
    digest = hashlib.sha256(f"{master}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, header, rows, cfg: LabConfig):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    buf.write(f"# config_hash={cfg.config_hash()} anosovlab={__version__} "
              f"numpy={np.__version__}\n")
    path.write_text(buf.getvalue())


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


# ---------------------------------------------------------------------------
# experiments


def _exp_certify(f, cfg, params, sub, out):
    cert = certify_hyperbolicity(f, grid_n=int(params.get("grid_n", cfg.cert_grid)))
    row = (cert.map_class.name, cert.mu_u, cert.mu_s, cert.theta_u,
           cert.theta_s, cert.grid_n, cert.lip_slack)
    path = out / "certificate.csv"
    write_csv(path, ("map_class", "mu_u", "mu_s", "theta_u", "theta_s",
                     "grid_n", "lip_slack"), [row], cfg)
    return {"map_class": cert.map_class.name, "mu_u": cert.mu_u,
            "mu_s": cert.mu_s, "theta_u": cert.theta_u,
            "theta_s": cert.theta_s}, [path]


def _exp_exponents(f, cfg, params, sub, out):
    max_period = int(params.get("max_period", 3))
    birkhoff_n = int(params.get("birkhoff_n", 20_000))
    log_lam_u = math.log(abs(f.eigen_data()[0]))
    rows = []
    lam_us = []
    for n in range(1, max_period + 1):
        for oid, seed_orbit in enumerate(periodic_orbits_linear(f.linear, n)):
            orbit = continue_periodic_orbit(f, seed_orbit, tol=cfg.newton_tol)
            e = orbit_exponents(orbit)
            sum_resid = abs(e.total - orbit_log_jacobian_mean(f, orbit))
            rows.append((n, oid, orbit.points[0, 0], orbit.points[0, 1],
                         e.lam_u, e.lam_s, sum_resid, abs(e.lam_u - log_lam_u)))
            lam_us.append(e.lam_u)
    rng = np.random.default_rng(sub)
    bu = birkhoff_exponent(f, rng.uniform(size=2), birkhoff_n)
    path = out / "exponents.csv"
    write_csv(path, ("period", "orbit_id", "x0_1", "x0_2", "lambda_u",
                     "lambda_s", "sum_residual", "livshitz_term"), rows, cfg)
    return {"n_orbits": len(rows), "lambda_u_min": min(lam_us),
            "lambda_u_max": max(lam_us), "lambda_u_linear": log_lam_u,
            "birkhoff_lambda_u": bu.value,
            "birkhoff_stderr": bu.stderr}, [path]


def _exp_conjugacy(f, cfg, params, sub, out):
    n_points = int(params.get("n_points", 1000))
    H = build_conjugacy(f, tol=cfg.rho_tol)
    rng = np.random.default_rng(sub)
    x = rng.uniform(size=(n_points, 2))
    resid = H.residual(x)
    disp = np.linalg.norm(H.displacement(x), axis=-1)
    path = out / "conjugacy.csv"
    write_csv(path, ("x1", "x2", "residual", "displacement"),
              [(x[i, 0], x[i, 1], float(resid[i]), float(disp[i]))
               for i in range(n_points)], cfg)
    return {"max_residual": float(np.max(resid)),
            "sup_displacement": float(np.max(disp)),
            "sup_displacement_bound": H.sup_displacement_bound(),
            "n_fwd": H.n_fwd, "n_bwd": H.n_bwd}, [path]


def _exp_rigidity(f, cfg, params, sub, out):
    max_period = int(params.get("max_period", 3))
    scales = params.get("scales", [2.0 ** (-k) for k in range(4, 12)])
    rep = specialness_diagnostic(f, max_period, tol=max(cfg.newton_tol, 1e-12))
    H = build_conjugacy(f, tol=cfg.rho_tol)
    g = make_linear(f.linear)
    obstruction = livshitz_obstruction(f, g, H.eval, max_period)
    rng = np.random.default_rng(sub)
    seg = grow_leaf_segment(f, rng.uniform(size=2), "unstable",
                            halflength=float(params.get("halflength", 0.6)),
                            h_max=1e-3)
    holder = estimate_holder_along_leaf(H, seg, [float(s) for s in scales],
                                        seed=sub % (2 ** 32))
    fine = holder.local_slopes[-2:]
    slope_flag = ("slope defect at fine scales" if min(fine) < 0.95
                  else "slope stable near 1")
    path = out / "holder_scales.csv"
    write_csv(path, ("scale", "max_distortion", "mean_distortion"),
              list(zip(holder.scales, holder.max_distortion,
                       holder.mean_distortion)), cfg)
    return {"exponent_spread": rep.spread, "specialness": rep.verdict,
            "livshitz_obstruction": obstruction,
            "holder_exponent": holder.holder_exponent,
            "fine_scale_slopes": [float(s) for s in fine],
            "slope_flag": slope_flag,
            "theoremA_hypothesis": "holds" if obstruction < 1e-6 else "fails",
            }, [path]


def _exp_ubd(f, cfg, params, sub, out):
    scales = [float(s) for s in params.get("scales", (1.0, 0.5, 0.25))]
    n_centers = int(params.get("n_centers", 10))
    rng = np.random.default_rng(sub)
    centers = rng.uniform(0.1, 0.9, size=(n_centers, 2))
    rep = ubd_constant(
        f, centers, scales,
        delta_s=float(params.get("delta_s", 0.04)),
        delta_u=float(params.get("delta_u", 0.25)),
        n_leaves=int(params.get("n_leaves", 6)),
        n_samples=int(params.get("n_samples", 20_000)),
        bins=int(params.get("bins", 16)),
        seed=sub % (2 ** 32))
    rows = []
    for scale, box_id, table in rep.box_tables:
        for leaf_id in range(table.densities.shape[0]):
            for b in range(table.densities.shape[1]):
                rows.append((scale, box_id, leaf_id, b,
                             float(table.densities[leaf_id, b]),
                             float(table.stderr[leaf_id, b])))
    path = out / "ubd_densities.csv"
    write_csv(path, ("scale", "box_id", "leaf_id", "bin", "density", "stderr"),
              rows, cfg)
    return {"C_estimate": rep.C_estimate, "C_by_scale": rep.C_by_scale,
            "scales": rep.scales, "deviation_by_scale": rep.deviation_by_scale,
            "deviation_z": rep.deviation_z, "flag": rep.flag}, [path]


def _exp_strip(f, cfg, params, sub, out):
    k_max = int(params.get("k_max", 6))
    delta0, base = covering_height(f)
    rng = np.random.default_rng(sub)
    ratios = leaf_growth_ratio(f, rng.uniform(size=2), k_max, delta0)
    q = quasi_isometry_constant(f, "unstable", n_samples=2,
                                lengths=(0.5, 1.0), seed=sub % (2 ** 32))
    path = out / "strip_growth.csv"
    write_csv(path, ("k", "normalized_ratio", "deviation"),
              [(k, float(r), float(abs(r - 1.0)))
               for k, r in enumerate(ratios)], cfg)
    return {"delta0": float(delta0), "base_length": float(base.length),
            "max_ratio_deviation": float(np.max(np.abs(ratios - 1.0))),
            "quasi_isometry_Q": max(q.values())}, [path]


_RUNNERS = {
    "certify": _exp_certify,
    "exponents": _exp_exponents,
    "conjugacy": _exp_conjugacy,
    "rigidity": _exp_rigidity,
    "ubd": _exp_ubd,
    "strip": _exp_strip,
}


# ---------------------------------------------------------------------------
# runner


@dataclass
class RunReport:
    statuses: dict          # name -> "ok" | "failed: <reason>"
    wall_times: dict        # name -> seconds
    outputs: dict           # name -> list of file paths
    metrics: dict           # name -> metrics dict
    config_hash: str
    summary_path: str

    @property
    def all_ok(self) -> bool:
        return all(s == "ok" for s in self.statuses.values())


def run(cfg: LabConfig, only: str | None = None,
        kinds: tuple | None = None) -> RunReport:
    """Execute the config's experiments in declared order and write outputs."""
    wanted = []
    for exp in cfg.experiments:
        kind = exp.get("kind", exp["name"])
        if only is not None and exp["name"] != only:
            continue
        if kinds is not None and kind not in kinds:
            continue
        wanted.append((exp["name"], kind, exp))
    if only is not None and not wanted:
        raise ConfigError(f"{cfg.path}: no experiment named '{only}'")
    if kinds is not None and not wanted:
        # bare subcommand with no matching config entry: run defaults
        wanted = [(k, k, {}) for k in kinds]

    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    f = build_map(cfg)
    needs_cert = any(kind != "certify" for _, kind, _ in wanted)
    if needs_cert:
        certify_hyperbolicity(f, grid_n=cfg.cert_grid)

    statuses, wall, outputs, metrics = {}, {}, {}, {}
    for name, kind, exp in wanted:
        params = {k: v for k, v in exp.items() if k not in ("name", "kind")}
        sub = experiment_seed(cfg.seed, name)
        out = out_root / name
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        try:
            m, paths = _RUNNERS[kind](f, cfg, params, sub, out)
            statuses[name] = "ok"
            metrics[name] = _jsonable(m)
            outputs[name] = [str(p.relative_to(out_root)) for p in paths]
        except (CertificationFailed, ExpandingMap):
            raise
        except (AnosovLabError, ValueError) as exc:
            statuses[name] = f"failed: {exc}"
            metrics[name] = {}
            outputs[name] = []
        wall[name] = time.perf_counter() - t0

    summary = {
        "config_hash": cfg.config_hash(),
        "map_kind": cfg.map_spec.get("kind", "raw"),
        "experiments": [
            {"name": name, "status": statuses[name], "metrics": metrics[name],
             "outputs": outputs[name]}
            for name, _, _ in wanted
        ],
    }
    summary_path = out_root / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunReport(statuses=statuses, wall_times=wall, outputs=outputs,
                     metrics=metrics, config_hash=cfg.config_hash(),
                     summary_path=str(summary_path))


def merge_reports(out_dir) -> Path:
    """Merge every summary.json below out_dir into a single report.json."""
    root = Path(out_dir)
    found = sorted(p for p in root.rglob("summary.json"))
    if not found:
        raise ConfigError(f"{root}: no summary.json files to merge")
    merged = {"runs": []}
    for p in found:
        data = json.loads(p.read_text())
        merged["runs"].append({"path": str(p.relative_to(root)), **data})
    path = root / "report.json"
    path.write_text(json.dumps(merged, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# CLI


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="anosovlab",
        description="reproducible experiments on hyperbolic torus endomorphisms")
    p.add_argument("command", choices=("run",) + EXPERIMENT_KINDS + ("report",))
    p.add_argument("--config", help="path to a TOML config file")
    p.add_argument("--out-dir", help="override the config's output directory")
    p.add_argument("--seed", type=int, help="override the config's master seed")
    p.add_argument("--threads", type=int,
                   help="intra-experiment parallelism (never changes outputs)")
    p.add_argument("--experiment", help="run only the named experiment")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "report":
            if args.out_dir is None:
                raise ConfigError("report requires --out-dir")
            path = merge_reports(args.out_dir)
            print(path)
            return 0
        if args.config is None:
            raise ConfigError(f"{args.command} requires --config")
        cfg = load_config(args.config)
        if args.out_dir is not None:
            cfg.out_dir = args.out_dir
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None:
            cfg.threads = args.threads
        kinds = None if args.command == "run" else (args.command,)
        report = run(cfg, only=args.experiment, kinds=kinds)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CertificationFailed, ExpandingMap) as exc:
        print(f"certification failed: {exc}", file=sys.stderr)
        return 3
    for name, status in report.statuses.items():
        print(f"{name}: {status} ({report.wall_times[name]:.2f}s)")
    print(report.summary_path)
    return 0 if report.all_ok else 1


if __name__ == "__main__":
    sys.exit(main())

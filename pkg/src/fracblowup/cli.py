"""Command-line entry point.

    fracblowup ground   --beta 2 --box 64 --points 4096 --out run/
    fracblowup spectral --beta-list 1.9,1.95,2.0 --out run/
    fracblowup evolve   --beta 2 --init scaled:1.05 --tmax 5 --dt0 1e-3 --out run/

Exit codes: 0 success, 1 invalid input, 2 numerical failure.  Every run
writes ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import grid as gr
from .ground import ConvergenceError, solve_ground_state

logger = logging.getLogger("fracblowup")

WORKERS_ENV = "FRACBLOWUP_WORKERS"
SUBCOMMANDS = ("ground", "profiles", "spectral", "hardy", "evolve", "sweep")
# below this beta no claim is made; rows are flagged exploratory
CLAIM_THRESHOLD = 1.9


class ValidationError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def default_grid(beta: float) -> tuple:
    """Box half width and node count used when none is given."""
    if beta == 2.0:
        return 64.0, 4096
    return 200.0, 16384


@dataclass
class RunConfig:
    subcommand: str
    betas: list
    box: float | None = None
    points: int | None = None
    tol: float = 1e-10
    out: str = "fracblowup_out"
    workers: int = 1
    seed: int = 0
    # spectral / sweep
    hardy: bool = False
    box_check: bool = True
    # evolve
    init: str = "scaled:1.05"
    tmax: float = 10.0
    dt0: float = 1e-3
    lam_min: float = 1e-3
    refit_every: int = 10
    extra: dict = field(default_factory=dict)

    def grid_for(self, beta: float) -> gr.GridSpec:
        L, N = default_grid(beta)
        return gr.make_grid(self.box or L, self.points or N)

    def validate(self) -> None:
        if self.subcommand not in SUBCOMMANDS:
            raise ValidationError(f"unknown subcommand {self.subcommand!r}")
        if not self.betas:
            raise ValidationError("beta list is empty")
        for b in self.betas:
            if not (1.0 <= b <= 2.0):
                raise ValidationError(f"beta = {b} outside [1, 2]")
        if self.box is not None and not (self.box > 0 and math.isfinite(self.box)):
            raise ValidationError("box must be positive")
        if self.points is not None:
            n = self.points
            if n < 16 or n & (n - 1):
                raise ValidationError("points must be a power of two >= 16")
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        if self.subcommand == "evolve":
            if len(self.betas) != 1:
                raise ValidationError("evolve takes a single beta")
            if not (self.tmax > 0 and self.dt0 > 0 and 0 < self.lam_min < 1):
                raise ValidationError("tmax, dt0 must be positive and 0 < lam_min < 1")
            if self.refit_every < 1:
                raise ValidationError("refit-every must be >= 1")
            kind = self.init.split(":", 1)[0]
            if kind not in ("ground", "scaled", "file"):
                raise ValidationError(f"unknown init {self.init!r}")
            if kind == "scaled":
                try:
                    float(self.init.split(":", 1)[1])
                except (IndexError, ValueError):
                    raise ValidationError(f"bad amplitude in {self.init!r}") from None


# --- output helpers ---------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


class Outputs:
    """Tracks every file written so the manifest can list them."""

    def __init__(self, root: Path):
        self.root = root
        self.files = []
        root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(str(p.relative_to(self.root)))
        return p

    def json(self, name: str, obj) -> None:
        self.path(name).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")

    def csv(self, name: str, rows: list, columns: list) -> None:
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([fmt(r.get(c, "")) for c in columns])


# --- stages -----------------------------------------------------------------

def _ground(cfg: RunConfig, beta: float):
    gs = solve_ground_state(beta, cfg.grid_for(beta), tol=cfg.tol)
    return gs, gs.diagnostics()


def _profiles(gs):
    from .profile import build_profiles, energy_expansion
    ps = build_profiles(gs)
    rep = ps.report()
    rep["c0_fit"] = energy_expansion(ps)["c0_fit"]
    worst = max(rep["solvability"].values())
    if worst > 1e-8:
        raise NumericalFailure("profile solvability residual too large", worst)
    return ps, rep


def spectral_row(cfg: RunConfig, beta: float) -> dict:
    """ground -> profiles -> certification, flattened into one table row."""
    from .profile import residual_slopes
    from .spectral import certify
    gs, gd = _ground(cfg, beta)
    ps, pr = _profiles(gs)
    rep = certify(beta, gs, ps, hardy=cfg.hardy, box_check=cfg.box_check)
    row = {"beta": beta, "L": gs.grid.L, "N": gs.grid.N, "delta": rep.delta,
           "delta_positive": rep.delta > 0,
           "index_Hbar1_even": rep.index_Hbar1[0], "index_Hbar1_odd": rep.index_Hbar1[1],
           "index_Hbar2_even": rep.index_Hbar2[0], "index_Hbar2_odd": rep.index_Hbar2[1],
           "q1": rep.q1, "q2": rep.q2, "q3": rep.q3, "c0": ps.c0, "c0_fit": pr["c0_fit"],
           "hardy_constant": rep.hardy_constant,
           "ground_residual": gd["residual"], "energy_ratio": gd["energy_ratio"],
           "max_solvability": max(pr["solvability"].values()),
           "exploratory": beta < CLAIM_THRESHOLD, "report": rep.to_dict()}
    if cfg.extra.get("slopes", True):
        sl = residual_slopes(ps)
        row["slope_b"] = sl["slope_b"]
        row["slope_v"] = sl["slope_v"]
    return row


SPECTRAL_COLUMNS = ["beta", "L", "N", "status", "exploratory", "delta", "delta_positive",
                    "index_Hbar1_even", "index_Hbar1_odd", "index_Hbar2_even", "index_Hbar2_odd",
                    "q1", "q2", "q3", "c0", "c0_fit", "slope_b", "slope_v", "hardy_constant",
                    "ground_residual", "energy_ratio", "max_solvability", "error"]


def _job(args):
    cfg, beta = args
    try:
        row = spectral_row(cfg, beta)
        row["status"] = "ok"
    except (ConvergenceError, NumericalFailure, np.linalg.LinAlgError, gr.GridError) as exc:
        logger.error("beta=%s failed: %s", beta, exc)
        g = cfg.grid_for(beta)
        row = {"beta": beta, "L": g.L, "N": g.N, "status": "failed", "error": str(exc),
               "exploratory": beta < CLAIM_THRESHOLD}
    return row


def _map(cfg: RunConfig, jobs):
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(_job, jobs))
    return [_job(j) for j in jobs]


def cmd_ground(cfg, out: Outputs, manifest):
    rows = []
    for beta in cfg.betas:
        gs, d = _ground(cfg, beta)
        tag = f"beta_{beta:g}"
        out.json(f"{tag}/ground.json", d)
        f = gr.Field(gs.grid, gs.q, "even")
        f.to_csv(out.path(f"{tag}/ground_state.csv"))
        f.to_binary(out.path(f"{tag}/ground_state.bin"))
        manifest["residuals"][tag] = {"ground": d["residual"]}
        rows.append(d)
    return rows


def cmd_profiles(cfg, out: Outputs, manifest):
    from .profile import FIELD_PARITY, residual_slopes
    for beta in cfg.betas:
        gs, d = _ground(cfg, beta)
        ps, rep = _profiles(gs)
        tag = f"beta_{beta:g}"
        names = list(FIELD_PARITY)
        rows = [{"y": y, **{n: ps.fields[n][i] for n in names}} for i, y in enumerate(gs.grid.y)]
        out.csv(f"{tag}/profiles.csv", rows, ["y"] + names)
        for n in names:
            gr.Field(gs.grid, ps.fields[n], FIELD_PARITY[n]).to_binary(out.path(f"{tag}/{n}.bin"))
        sl = residual_slopes(ps, cfg.extra.get("b_grid"), cfg.extra.get("v_grid"))
        cols = ["param", "residual_L2", "truncation_L2", "defect_L2"]
        out.csv(f"{tag}/slopes_b.csv", [dict(zip(cols, r)) for r in sl["b_table"]], cols)
        out.csv(f"{tag}/slopes_v.csv", [dict(zip(cols, r)) for r in sl["v_table"]], cols)
        rep.update({k: sl[k] for k in ("slope_b", "slope_v", "slope_b_direct",
                                       "slope_v_direct", "defect_floor_b", "defect_floor_v")})
        out.json(f"{tag}/profiles.json", rep)
        manifest["residuals"][tag] = {"ground": d["residual"],
                                      "solvability": max(rep["solvability"].values())}


def cmd_spectral(cfg, out: Outputs, manifest):
    rows = _map(cfg, [(cfg, b) for b in cfg.betas])
    name = "sweep.csv" if cfg.subcommand == "sweep" else "spectral.csv"
    out.csv(name, rows, SPECTRAL_COLUMNS)
    for r in rows:
        if "report" in r:
            out.json(f"beta_{r['beta']:g}/spectral.json", r["report"])
    for r in rows:
        manifest["residuals"][f"beta_{r['beta']:g}"] = {
            k: r.get(k) for k in ("ground_residual", "max_solvability", "delta", "status")}
    failed = [r for r in rows if r["status"] != "ok"]
    if failed and cfg.subcommand == "spectral":
        raise NumericalFailure(f"{len(failed)} beta value(s) failed", failed[0].get("error"))
    manifest["failed_betas"] = [r["beta"] for r in failed]


def cmd_hardy(cfg, out: Outputs, manifest):
    from .spectral import hardy_constant, hardy_ratio, random_field
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for beta in cfg.betas:
        g = cfg.grid_for(beta)
        h = hardy_constant(beta, g)
        draws = [hardy_ratio(g, beta, random_field(g, rng)) for _ in range(100)]
        rows.append({"beta": beta, "L": g.L, "N": g.N, "C": h["C"], "sector": h["sector"],
                     "max_random_ratio": max(draws),
                     "random_ok": max(draws) <= h["C"] * (1 + 1e-10),
                     "exploratory": beta < CLAIM_THRESHOLD})
    out.csv("hardy.csv", rows, ["beta", "L", "N", "C", "sector", "max_random_ratio",
                                "random_ok", "exploratory"])


def _initial_field(cfg: RunConfig, g: gr.GridSpec, gs) -> gr.Field:
    kind, _, arg = cfg.init.partition(":")
    if kind == "ground":
        return gr.Field(g, gs.q.astype(complex))
    if kind == "scaled":
        return gr.Field(g, float(arg) * gs.q.astype(complex))
    try:
        data = np.loadtxt(arg, delimiter=",", skiprows=1)
    except OSError as exc:
        raise ValidationError(f"cannot read initial data: {exc}") from None
    if data.ndim != 2 or data.shape[1] != 3 or len(data) != g.N:
        raise ValidationError("initial data must be a y,re,im CSV on the evolution grid")
    if abs(-data[0, 0] - g.L) > 1e-9 * g.L:
        raise ValidationError("initial data box does not match --box")
    return gr.Field(g, data[:, 1] + 1j * data[:, 2])


def cmd_evolve(cfg, out: Outputs, manifest):
    from .dynamics import BlowupConfig, run_blowup
    from .profile import build_profiles
    beta = cfg.betas[0]
    g = cfg.grid_for(beta)
    gs = solve_ground_state(beta, g, tol=cfg.tol)
    ps = build_profiles(gs)
    u0 = _initial_field(cfg, g, gs)
    bc = BlowupConfig(dt0=cfg.dt0, t_max=cfg.tmax, lam_min=cfg.lam_min,
                      refit_every=cfg.refit_every)
    tr = run_blowup(u0, beta, bc, ps=ps)
    tr.to_csv(out.path("trace.csv"))
    out.json("summary.json", tr.summary())
    manifest["residuals"]["evolve"] = {
        "mass_drift": tr.mass_drift[-1], "max_orthogonality": float(np.nanmax(tr.orth_residual)),
        "termination": tr.termination}


COMMANDS = {"ground": cmd_ground, "profiles": cmd_profiles, "spectral": cmd_spectral,
            "sweep": cmd_spectral, "hardy": cmd_hardy, "evolve": cmd_evolve}


# --- parsing ----------------------------------------------------------------

def _beta_list(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"malformed beta list {text!r}") from None


def _value_list(text: str, name: str) -> list:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"malformed {name} {text!r}") from None
    if len(vals) < 2 or not all(0 < v <= 0.3 for v in vals):
        raise ValidationError(f"{name} needs at least two values in (0, 0.3]")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fracblowup", description="Blow-up toolkit for the L2-critical fractional NLS")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--beta", type=float)
        s.add_argument("--beta-list", type=str)
        s.add_argument("--box", type=float, help="half width L of the box [-L, L)")
        s.add_argument("--points", type=int, help="number of grid nodes N")
        s.add_argument("--tol", type=float, default=1e-10)
        s.add_argument("--out", default="fracblowup_out")
        s.add_argument("--workers", type=int)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--config", type=str, help="key = value file; its values override flags")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("spectral", "sweep"):
            s.add_argument("--hardy", action="store_true", help="also compute the Hardy constant")
            s.add_argument("--no-box-check", action="store_true")
        if name == "profiles":
            s.add_argument("--b-grid", type=str, help="comma-separated b values for the slope fit")
            s.add_argument("--v-grid", type=str, help="comma-separated v values for the slope fit")
        if name == "evolve":
            s.add_argument("--init", default="scaled:1.05",
                           help="ground | scaled:A | file:PATH (y,re,im CSV)")
            s.add_argument("--tmax", type=float, default=10.0)
            s.add_argument("--dt0", type=float, default=1e-3)
            s.add_argument("--lam-min", type=float, default=1e-3)
            s.add_argument("--refit-every", type=int, default=10)
    return p


_CONFIG_KEYS = {"beta": float, "beta_list": str, "box": float, "points": int, "tol": float,
                "out": str, "workers": int, "seed": int, "init": str, "tmax": float,
                "dt0": float, "lam_min": float, "refit_every": int, "hardy": bool,
                "no_box_check": bool, "b_grid": str, "v_grid": str}


def read_config(path: str, subcommand: str) -> dict:
    """Keys from [DEFAULT] and from the section named after the subcommand."""
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ValidationError(f"malformed config {path}: {exc}") from None
    sec = cp[subcommand] if cp.has_section(subcommand) else cp["DEFAULT"]
    out = {}
    for key, raw in sec.items():
        k = key.replace("-", "_")
        if k not in _CONFIG_KEYS:
            raise ValidationError(f"unknown config key {key!r}")
        typ = _CONFIG_KEYS[k]
        try:
            out[k] = sec.getboolean(key) if typ is bool else typ(raw)
        except ValueError:
            raise ValidationError(f"bad value for {key!r}: {raw!r}") from None
    return out


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    opts = {k: v for k, v in vars(ns).items()}
    if ns.config:
        opts.update(read_config(ns.config, ns.subcommand))
    if opts.get("beta_list"):
        betas = _beta_list(opts["beta_list"])
    elif opts.get("beta") is not None:
        betas = [float(opts["beta"])]
    else:
        betas = [2.0]
    workers = opts.get("workers")
    if workers is None:
        env = os.environ.get(WORKERS_ENV, "1")
        try:
            workers = int(env)
        except ValueError:
            raise ValidationError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    cfg = RunConfig(subcommand=ns.subcommand, betas=betas, box=opts.get("box"),
                    points=opts.get("points"), tol=opts["tol"], out=opts["out"],
                    workers=workers, seed=opts["seed"],
                    hardy=bool(opts.get("hardy", False)),
                    box_check=not opts.get("no_box_check", False))
    for key in ("b_grid", "v_grid"):
        if opts.get(key):
            cfg.extra[key] = _value_list(opts[key], key)
    if ns.subcommand == "evolve":
        cfg.init, cfg.tmax, cfg.dt0 = opts["init"], opts["tmax"], opts["dt0"]
        cfg.lam_min, cfg.refit_every = opts["lam_min"], opts["refit_every"]
    cfg.validate()
    return cfg


def parse_and_dispatch(argv=None) -> int:
    t0 = time.time()
    try:
        ns = build_parser().parse_args(argv)
    except ValidationError as exc:
        # no output directory is known yet, so there is nowhere to put a manifest
        print(f"fracblowup: error: {exc}", file=sys.stderr)
        return 1
    try:
        cfg = config_from_args(ns)
    except ValidationError as exc:
        print(f"fracblowup: error: {exc}", file=sys.stderr)
        root = Path(ns.out)
        root.mkdir(parents=True, exist_ok=True)
        (root / "manifest.json").write_text(json.dumps(_jsonable({
            "version": __version__, "argv": list(argv) if argv is not None else sys.argv[1:],
            "status": "invalid", "error": str(exc), "exit_code": 1,
            "wall_clock_s": time.time() - t0, "outputs": []}), indent=2, sort_keys=True) + "\n")
        return 1
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Outputs(Path(cfg.out))
    manifest = {"version": __version__, "config": asdict(cfg), "residuals": {},
                "argv": list(argv) if argv is not None else sys.argv[1:]}
    code = 0
    try:
        COMMANDS[cfg.subcommand](cfg, out, manifest)
        manifest["status"] = "ok"
    except ValidationError as exc:
        manifest["status"], manifest["error"] = "invalid", str(exc)
        code = 1
    except NumericalFailure as exc:
        manifest["status"], manifest["error"] = "numerical_failure", str(exc)
        manifest["failing_residual"] = exc.residual
        code = 2
    except (ConvergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
        manifest["status"], manifest["error"] = "numerical_failure", str(exc)
        code = 2
    manifest["exit_code"] = code
    manifest["wall_clock_s"] = time.time() - t0
    manifest["outputs"] = sorted(out.files)
    (out.root / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2,
                                                       sort_keys=True) + "\n")
    if code:
        print(f"fracblowup: {manifest['status']}: {manifest.get('error')}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()

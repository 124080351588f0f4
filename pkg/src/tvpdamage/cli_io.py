"""Run configuration, trajectory files and the command line.

Config files are INI-style (read with configparser). Every value error is
reported with the file name and line of the offending key.

    [mesh]      d, divisions, extents, dirichlet
    [material]  any MaterialModel field
    [time]      T, tau, taus
    [problem]   s, z0, theta0, v0, p0, w_grad, w_shift, label
    [profile.X] one per time-dependent datum X in F, f, G, g, w, theta:
                amplitude, kind, value, t0, t1, v0, v1, times, values
    [audits]    enabled
    [contdep]   directions, eps
"""

import argparse
import configparser
import hashlib
import logging
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from fractions import Fraction

import numpy as np

from . import auditors as A
from . import contdep as CD
from . import mesh_fem as mf
from . import stepper as S
from .constitutive import MaterialModel
from .fractional import check_exponent
from .problem import Profile, ProblemData, Term, check_initial, default_initial

log = logging.getLogger(__name__)

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "configs")
NODAL = ("u", "u_prev", "z", "theta", "omega")
ELEMENT = ("e", "p", "zeta", "sigma")
RECORD = ("load", "w", "G", "g")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- parsing

def _parse_float(text):
    return float(Fraction(text.strip())) if "/" in text else float(text)


def _parse_list(text):
    return [_parse_float(t) for t in re.split(r"[,\s]+", text.strip()) if t]


class _Source:
    """configparser wrapper that knows where each key sits in the file."""

    def __init__(self, text, name="<config>"):
        self.name = name
        self.text = text
        self.cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
        self.cp.optionxform = str  # keys are case sensitive (T, C_R, lam_C)
        try:
            self.cp.read_string(text, source=name)
        except configparser.Error as exc:
            raise ConfigError(str(exc).replace("\n", " ")) from None
        self.lines = {}
        section = None
        for i, line in enumerate(text.splitlines(), 1):
            s = line.strip()
            m = re.match(r"\[(.+)\]$", s)
            if m:
                section = m.group(1).strip()
                self.lines[(section, None)] = i
            elif section and "=" in s and not s.startswith(("#", ";")):
                self.lines[(section, s.split("=", 1)[0].strip())] = i
        self.used = set()

    def where(self, section, key=None):
        ln = self.lines.get((section, key), self.lines.get((section, None)))
        return f"{self.name}:{ln}" if ln else self.name

    def fail(self, section, key, msg):
        raise ConfigError(f"{self.where(section, key)}: [{section}] {key}: {msg}")

    def has(self, section, key=None):
        return self.cp.has_section(section) and (key is None or self.cp.has_option(section, key))

    def raw(self, section, key, default=None):
        if not self.has(section, key):
            return default
        self.used.add((section, key))
        return self.cp.get(section, key)

    def num(self, section, key, default=None):
        v = self.raw(section, key)
        if v is None:
            return default
        try:
            return _parse_float(v)
        except (ValueError, ZeroDivisionError):
            self.fail(section, key, f"expected a number, got {v!r}")

    def nums(self, section, key, default=None, size=None):
        v = self.raw(section, key)
        if v is None:
            return default
        try:
            out = _parse_list(v)
        except (ValueError, ZeroDivisionError):
            self.fail(section, key, f"expected a list of numbers, got {v!r}")
        if size is not None and len(out) != size:
            self.fail(section, key, f"expected {size} values, got {len(out)}")
        return out

    def words(self, section, key, default=()):
        v = self.raw(section, key)
        return tuple(default) if v is None else tuple(w for w in re.split(r"[,\s]+", v.strip()) if w)

    def check_unused(self):
        for sec in self.cp.sections():
            for key in self.cp.options(sec):
                if (sec, key) not in self.used:
                    self.fail(sec, key, "unknown key")


@dataclass
class RunConfig:
    text: str
    name: str
    problem: ProblemData
    model: MaterialModel
    tau: float
    taus: tuple
    audits: tuple
    directions: tuple = CD.DIRECTIONS
    epsilons: tuple = CD.EPSILONS
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def digest(self):
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]


def _profile(src, sec):
    kind = src.raw(sec, "kind", "constant").strip()
    try:
        if kind == "constant":
            return Profile("constant", value=src.num(sec, "value", 1.0))
        if kind == "ramp":
            return Profile("ramp", t0=src.num(sec, "t0", 0.0), t1=src.num(sec, "t1", 1.0),
                           v0=src.num(sec, "v0", 0.0), v1=src.num(sec, "v1", 1.0))
        if kind == "table":
            return Profile("table", times=tuple(src.nums(sec, "times", [])),
                           values=tuple(src.nums(sec, "values", [])))
    except ValueError as exc:
        src.fail(sec, "kind", str(exc))
    src.fail(sec, "kind", f"unknown profile kind {kind!r} (constant, ramp, table)")


def _term(src, name, size, zero_default=True):
    sec = f"profile.{name}"
    if not src.has(sec):
        return Term(np.zeros(size) if size else 0.0, Profile("constant", value=0.0))
    amp = src.nums(sec, "amplitude", [0.0] * max(size, 1), size=max(size, 1))
    return Term(np.array(amp) if size else amp[0], _profile(src, sec))


def parse_config(text, name="<config>", tau=None, audits=None, seed=0):
    """Build a validated RunConfig from config text."""
    src = _Source(text, name)
    d = int(src.num("mesh", "d", 2))
    if d not in (1, 2):
        src.fail("mesh", "d", f"dimension must be 1 or 2, got {d}")
    div = [int(v) for v in src.nums("mesh", "divisions", [2] * d, size=d)]
    ext = src.nums("mesh", "extents", [1.0] * d, size=d)
    if min(div) < 1:
        src.fail("mesh", "divisions", "must be positive")
    if min(ext) <= 0:
        src.fail("mesh", "extents", "must be positive")
    sides = src.words("mesh", "dirichlet", ("left",))
    try:
        mesh = mf.build_mesh(ext, div, sides)
    except ValueError as exc:
        src.fail("mesh", "dirichlet", str(exc))

    kw = {"d": d}
    names = {f.name for f in fields(MaterialModel)}
    if src.has("material"):
        for key in src.cp.options("material"):
            if key not in names or key == "d":
                src.fail("material", key, "unknown material parameter")
            if key == "regularize":
                kw[key] = src.raw("material", key).strip().lower() in ("1", "true", "yes", "on")
            else:
                kw[key] = src.num("material", key)
    try:
        model = MaterialModel(**kw)
    except ValueError as exc:
        raise ConfigError(f"{src.where('material')}: [material] {exc}") from None

    T_end = src.num("time", "T", 1.0)
    tau0 = src.num("time", "tau", 1 / 8)
    taus = tuple(src.nums("time", "taus", [1 / 8, 1 / 16, 1 / 32]))
    tau = tau0 if tau is None else tau
    for t in (tau,) + taus:
        if t <= 0 or abs(round(T_end / t) * t - T_end) > 1e-9 * T_end:
            src.fail("time", "tau", f"T = {T_end} is not a positive integer multiple of tau = {t}")

    s = src.num("problem", "s", 1.25 if d == 2 else 1.1)
    Wg = np.array(src.nums("problem", "w_grad", [0.0] * d * d, size=d * d)).reshape(d, d)
    b = np.array(src.nums("problem", "w_shift", [0.0] * d, size=d))
    w_prof = _profile(src, "profile.w") if src.has("profile.w") else Profile("constant", value=0.0)
    init = default_initial(mesh, Wg, b, w_prof(0.0), z0=src.num("problem", "z0", 1.0),
                           theta0=src.num("problem", "theta0", 1.0),
                           v0=np.array(src.nums("problem", "v0", [0.0] * d, size=d)),
                           p0=np.array(src.nums("problem", "p0", [0.0] * d * d, size=d * d)).reshape(d, d))
    init["e0"] = mf.strain(mesh, init["u0"]) - init["p0"]
    presc = ()
    if src.has("profile.theta"):
        presc = (_term(src, "theta", 0),)
        amp = presc[0].amplitude
        presc = (Term(np.full(mesh.nV, float(amp)), presc[0].profile),)
    problem = ProblemData(mesh, T_end, s, _term(src, "F", d), _term(src, "f", d), _term(src, "G", 0),
                          _term(src, "g", 0), Wg, b, w_prof, prescribed_theta=presc,
                          label=src.raw("problem", "label", os.path.splitext(os.path.basename(name))[0]),
                          **init)
    if presc and np.any(np.asarray(problem.theta_prescribed_at(0.0)) < 0):
        src.fail("profile.theta", "amplitude", "prescribed temperature must be nonnegative")
    try:
        check_initial(problem)
        check_exponent(d, s)
    except ValueError as exc:
        raise ConfigError(f"{src.where('problem')}: [problem] {exc}") from None

    enabled = src.words("audits", "enabled", A.ALL_AUDITS)
    if audits is not None:
        enabled = tuple(audits)
    for a in enabled:
        if a not in A.ALL_AUDITS:
            raise ConfigError(f"{src.where('audits', 'enabled')}: unknown audit {a!r} "
                              f"(choose from {', '.join(A.ALL_AUDITS)})")
    directions = src.words("contdep", "directions", CD.DIRECTIONS)
    for dn in directions:
        if dn not in CD.DIRECTIONS:
            src.fail("contdep", "directions", f"unknown direction {dn!r}")
    eps = tuple(src.nums("contdep", "eps", list(CD.EPSILONS)))
    src.check_unused()
    return RunConfig(text, name, problem, model, float(tau), taus, tuple(enabled), directions, eps, seed)


def load_config(path, **kw):
    with open(path) as fh:
        return parse_config(fh.read(), path, **kw)


def bundled_config(name):
    return os.path.join(CONFIG_DIR, name if name.endswith(".ini") else name + ".ini")


# ---------------------------------------------------------------- trajectory files

def _rows(arrs):
    return np.array([np.asarray(a, float).ravel() for a in arrs])


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(x)) for x in r) + "\n")


def _read_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data


def write_trajectory(traj, out, config=None, failure=None):
    os.makedirs(out, exist_ok=True)
    times = traj.times()
    for name in NODAL + ELEMENT:
        vals = _rows(getattr(s, name) for s in traj.states)
        head = ["k", "t"] + [f"c{i}" for i in range(vals.shape[1])]
        _write_csv(os.path.join(out, f"fields_{name}.csv"), head,
                   np.column_stack([np.arange(len(times)), times, vals]))
    if traj.records:
        for name in RECORD:
            vals = _rows(getattr(r, name) for r in traj.records)
            _write_csv(os.path.join(out, f"records_{name}.csv"), ["k"] + [f"c{i}" for i in range(vals.shape[1])],
                       np.column_stack([[r.k for r in traj.records], vals]))
        for name in traj.records[0].sources:
            vals = _rows(r.sources[name] for r in traj.records)
            _write_csv(os.path.join(out, f"sources_{name}.csv"), ["k"] + [f"c{i}" for i in range(vals.shape[1])],
                       np.column_stack([[r.k for r in traj.records], vals]))
    _write_csv(os.path.join(out, "w0.csv"), ["c"], traj.w0.reshape(-1, 1))
    lines = [f"tau = {float(traj.tau)!r}", f"K = {traj.K}", f"T = {float(traj.problem.T)!r}",
             f"model_digest = {traj.model.digest()}", f"label = {traj.problem.label}"]
    if config is not None:
        lines.append(f"config_digest = {config.digest}")
        with open(os.path.join(out, "config.ini"), "w") as fh:
            fh.write(config.text)
    if failure is not None:
        lines.append(f"failure = {failure}")
    lines.append("")
    lines.append("[steps]")
    for r in traj.records:
        lines.append(f"{r.k} = " + " ".join(f"{k}={v}" for k, v in sorted(r.stats.items())))
    with open(os.path.join(out, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trajectory(out):
    """Rebuild a DiscreteTrajectory from a run directory (needs config.ini)."""
    cfg = load_config(os.path.join(out, "config.ini"))
    man = dict(re.findall(r"^(\w+) = (.*)$", open(os.path.join(out, "manifest.txt")).read(), re.M))
    tau = float(man["tau"])
    pr, mdl = cfg.problem, cfg.model
    m, d = pr.mesh, pr.mesh.d
    data = {n: _read_csv(os.path.join(out, f"fields_{n}.csv")) for n in NODAL + ELEMENT}
    shapes = {"u": (m.nV, d), "u_prev": (m.nV, d), "z": (m.nV,), "theta": (m.nV,), "omega": (m.nV,),
              "e": (m.nE, d, d), "p": (m.nE, d, d), "zeta": (m.nE, d, d), "sigma": (m.nE, d, d)}
    states = []
    for i in range(len(data["u"])):
        vals = {n: data[n][i, 2:].reshape(shapes[n]) for n in shapes}
        states.append(S.FieldState(int(data["u"][i, 0]), float(data["u"][i, 1]), **vals))
    records = []
    if os.path.exists(os.path.join(out, "records_load.csv")):
        rec = {n: _read_csv(os.path.join(out, f"records_{n}.csv")) for n in RECORD}
        names = sorted(f[len("sources_"):-4] for f in os.listdir(out) if f.startswith("sources_"))
        src = {n: _read_csv(os.path.join(out, f"sources_{n}.csv")) for n in names}
        for i in range(len(rec["load"])):
            records.append(S.StepRecord(int(rec["load"][i, 0]), rec["load"][i, 1:],
                                        rec["w"][i, 1:].reshape(m.nV, d), rec["G"][i, 1:], rec["g"][i, 1:],
                                        {n: src[n][i, 1:] for n in names}))
    w0 = _read_csv(os.path.join(out, "w0.csv"))[:, 0].reshape(m.nV, d)
    ctx = S.Context(pr, mdl, tau)
    return S.DiscreteTrajectory(tau, pr, mdl, ctx.form, states, records, w0), cfg


def write_report(report, out):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "audit_report.txt"), "w") as fh:
        fh.write(report.to_text())
    with open(os.path.join(out, "margins.csv"), "w") as fh:
        fh.write(report.margins_csv())


# ---------------------------------------------------------------- sweeps

def final_difference(t1, t2):
    """Distance between the final states of two trajectories on the same mesh."""
    m = t1.mesh
    a, b = t1.states[-1], t2.states[-1]
    return (mf.h1_norm(m, a.u - b.u) + mf.element_l2_norm(m, a.e - b.e) + mf.element_l2_norm(m, a.p - b.p)
            + mf.l2_norm(m, a.z - b.z) + mf.l2_norm(m, a.theta - b.theta))


def run_family(problem, model, taus, workers=4):
    form = S.Context(problem, model, taus[0]).form
    with ThreadPoolExecutor(max_workers=workers) as ex:
        futs = [ex.submit(S.run, problem, model, t, form) for t in taus]
        return [f.result() for f in futs]


def self_convergence(trajs):
    trajs = sorted(trajs, key=lambda t: -t.tau)
    diffs = [final_difference(trajs[i], trajs[i + 1]) for i in range(len(trajs) - 1)]
    ratios = [diffs[i + 1] / diffs[i] if diffs[i] > 0 else 0.0 for i in range(len(diffs) - 1)]
    return diffs, ratios


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg, out):
    try:
        traj = S.run(cfg.problem, cfg.model, cfg.tau)
    except S.StepFailure as exc:
        write_trajectory(exc.trajectory, out, cfg, failure=str(exc))
        print(f"solver failure: {exc} (partial trajectory written to {out})", file=sys.stderr)
        return 3
    write_trajectory(traj, out, cfg)
    print(f"wrote {traj.K} steps to {out}")
    return 0


def cmd_audit(traj_dir, out, audits=None):
    traj, cfg = read_trajectory(traj_dir)
    report = A.audit_all(traj, audits or cfg.audits)
    write_report(report, out)
    for name, ok in report.passed.items():
        print(f"{name}: {'PASS' if ok else 'FAIL'}")
    return 0 if report.ok else 1


def cmd_sweep(cfg, out):
    taus = sorted(cfg.taus, reverse=True)
    try:
        trajs = run_family(cfg.problem, cfg.model, taus)
    except S.StepFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    os.makedirs(out, exist_ok=True)
    for t in trajs:
        write_trajectory(t, os.path.join(out, f"tau_{round(1 / t.tau)}"), cfg)
    taus, names, table, flags, dec = A.audit_apriori(trajs)
    with open(os.path.join(out, "apriori_table.csv"), "w") as fh:
        fh.write(A.apriori_csv(taus, names, table, flags))
    diffs, ratios = self_convergence(trajs)
    with open(os.path.join(out, "self_convergence.csv"), "w") as fh:
        fh.write("pair,difference,ratio\n")
        for i, dv in enumerate(diffs):
            r = ratios[i - 1] if i > 0 else float("nan")
            fh.write(f"{float(taus[i])!r}:{float(taus[i + 1])!r},{float(dv)!r},{float(r)!r}\n")
    nflag = sum(flags.values())
    print(f"{len(names)} norms, {nflag} flagged; self-convergence ratios {['%.3g' % r for r in ratios]}")
    # flags compare against the coarsest step only and are informational
    return 0 if all(dec.values()) else 1


def cmd_contdep(cfg, out):
    try:
        res = CD.battery(cfg.problem, cfg.model, cfg.tau, cfg.directions, cfg.epsilons)
    except ValueError as exc:
        print(f"invalid contdep setup: {exc}", file=sys.stderr)
        return 2
    except S.StepFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "contdep.csv"), "w") as fh:
        fh.write(CD.results_csv(res))
    spread = CD.ratio_spread(res)
    for k, v in spread.items():
        print(f"{k}: ratio spread {v:.4g}")
    return 0 if all(v < 2.0 for v in spread.values()) else 1


def cmd_validate_material(cfg, seed):
    ok = True
    for name, passed, detail in cfg.model.validate(seed=seed):
        print(f"{name}: {'PASS' if passed else 'FAIL'} {detail}")
        ok &= passed
    return 0 if ok else 1


COMMANDS = ("simulate", "audit", "sweep-tau", "contdep", "validate-material")


def build_parser():
    p = argparse.ArgumentParser(prog="tvpdamage", description="Damage simulator with runtime audits.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("trajectory", nargs="?", help="run directory to audit (audit only; default --out)")
    p.add_argument("--config", help="config file or bundled config name")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--tau", type=_parse_float, help="override the time step")
    p.add_argument("--audits", help="comma separated subset of " + ",".join(A.ALL_AUDITS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve(path):
    if path and not os.path.exists(path) and os.path.exists(bundled_config(path)):
        return bundled_config(path)
    return path


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    audits = tuple(a for a in args.audits.split(",") if a) if args.audits else None
    np.random.seed(args.seed)
    try:
        if args.command == "audit":
            if audits:
                bad = [a for a in audits if a not in A.ALL_AUDITS]
                if bad:
                    raise ConfigError(f"unknown audit {bad[0]!r}")
            return cmd_audit(args.trajectory or args.out, args.out, audits)
        if not args.config:
            raise ConfigError("--config is required")
        cfg = load_config(_resolve(args.config), tau=args.tau, audits=audits, seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command == "simulate":
        return cmd_simulate(cfg, args.out)
    if args.command == "sweep-tau":
        return cmd_sweep(cfg, args.out)
    if args.command == "contdep":
        return cmd_contdep(cfg, args.out)
    return cmd_validate_material(cfg, args.seed)


if __name__ == "__main__":
    sys.exit(main())

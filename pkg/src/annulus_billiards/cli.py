"""
Command-line front end: trace, verify, integrate, transport.

Exit codes: 0 pass, 1 verification failure, 2 usage or configuration error.
Every CSV starts with a ``# config_sha256=...`` line over the fully resolved
configuration; floats are written with 17 significant digits.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import estimates as est
from . import kinetic as kin
from .errors import AnnulusError, BetaOutOfRange
from .geometry import AnnulusDomain, Case, PhaseState, classify_batch, weight_h_batch
from .trajectory import flow, flow_oracle_batch

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "ANNULUS_THREADS"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# formatting
# ---------------------------------------------------------------------------

def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return f"{x:.17g}"
    return str(x)


def _csv_field(s: str) -> str:
    if any(ch in s for ch in ',"\n\r'):
        return '"' + s.replace('"', '""') + '"'
    return s


def _json_value(x) -> str:
    if isinstance(x, dict):
        return "{" + ", ".join(json.dumps(str(k)) + ": " + _json_value(v) for k, v in x.items()) + "}"
    if isinstance(x, (list, tuple)):
        return "[" + ", ".join(_json_value(v) for v in x) + "]"
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        # JSON has no nan/inf literals
        return f"{x:.17g}" if math.isfinite(x) else json.dumps(fmt(x))
    if x is None:
        return "null"
    return json.dumps(str(x))


# output locations do not affect results and stay out of the hash
_LOCATION_KEYS = ("out", "snap_dir")


def _hashed(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k not in _LOCATION_KEYS}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(_hashed(cfg), sort_keys=True).encode("utf-8")).hexdigest()


def render(columns, rows, cfg: dict, out_format: str) -> str:
    h = config_hash(cfg)
    if out_format == "json":
        doc = {"config_sha256": h, "config": _hashed(cfg), "columns": list(columns), "rows": [list(r) for r in rows]}
        return _json_value(doc) + "\n"
    buf = io.StringIO()
    buf.write(f"# config_sha256={h}\n")
    buf.write(",".join(_csv_field(c) for c in columns) + "\n")
    for r in rows:
        buf.write(",".join(_csv_field(fmt(v)) for v in r) + "\n")
    return buf.getvalue()


def emit(text: str, out_path) -> None:
    if out_path in (None, "-"):
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# argument helpers
# ---------------------------------------------------------------------------

def parse_vec(s, n=3, name="vector"):
    if isinstance(s, (list, tuple)):
        vals = list(s)
    else:
        vals = [p for p in str(s).replace(" ", "").split(",") if p != ""]
    try:
        out = [float(p) for p in vals]
    except (TypeError, ValueError):
        raise UsageError(f"malformed {name}: {s!r}")
    if n is not None and len(out) != n:
        raise UsageError(f"{name} needs {n} components, got {len(out)}: {s!r}")
    if not all(math.isfinite(v) for v in out):
        raise UsageError(f"{name} must be finite: {s!r}")
    return out


def parse_list(s, name="list"):
    return parse_vec(s, None, name)


COMMON = {"R": 2.0, "r": 1.0, "seed": 0, "out": None, "format": "csv", "threads": None}

DEFAULTS = {
    "trace": {"x": None, "v": None, "t": None, "s": None, "n_samples": 11},
    "verify": {"lemma": "all-lemmas", "N": 10_000, "mode": None, "delta": 1e-4, "t": 2.0, "verbatim": False},
    "integrate": {"lemma": "5.6", "weight": None, "beta": 0.2, "r_exp": 0.0, "c": 1.0, "v": "0,2,4,8",
                  "v_dir": None, "x": "1.5,0,0", "N": 100_000, "no_indicator": False},
    "transport": {"init": "equilibrium", "eta": 0.5, "grid": "24,48,9,4.5", "T": 0.05, "varpi": 2.0,
                  "beta": 0.2, "c": 1.0, "picard": 2, "levels": 3, "n_sub": 32, "collisionless": False,
                  "pairs": 256, "n_zeta": 128, "snap_dir": None},
}


def resolve(args, command):
    """Merge defaults, the JSON config file and explicit flags (flags win)."""
    cfg = dict(COMMON)
    cfg.update(DEFAULTS[command])
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg["format"] not in ("csv", "json"):
        raise UsageError(f"format must be csv or json, got {cfg['format']!r}")
    if cfg["threads"] is None:
        env = os.environ.get(THREADS_ENV)
        cfg["threads"] = int(env) if env and env.isdigit() else 1
    if int(cfg["threads"]) < 1:
        raise UsageError("threads must be >= 1")
    cfg["command"] = command
    return cfg


def make_domain(cfg) -> AnnulusDomain:
    try:
        return AnnulusDomain(R=float(cfg["R"]), r=float(cfg["r"]))
    except ValueError as exc:
        raise UsageError(str(exc))


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------

def _angles(c, i=0):
    case = int(c["case"][i])
    a = float(c["a"][i]) if case in (Case.C1, Case.C2, Case.C3, Case.GRAZING) else float("nan")
    b = float(c["b"][i]) if case in (Case.C1, Case.C2) else float("nan")
    return Case(case).name, a, b


def cmd_trace(args) -> int:
    cfg = resolve(args, "trace")
    dom = make_domain(cfg)
    if cfg["x"] is None or cfg["v"] is None or cfg["t"] is None:
        raise UsageError("trace needs --x, --v and --t")
    x = parse_vec(cfg["x"], name="--x")
    v = parse_vec(cfg["v"], name="--v")
    t = float(cfg["t"])
    if not t >= 0:
        raise UsageError("--t must be >= 0")
    if cfg["s"] is not None:
        ss = parse_list(cfg["s"], "--s")
    else:
        n = int(cfg["n_samples"])
        if n < 1:
            raise UsageError("--n-samples must be >= 1")
        ss = list(np.linspace(0.0, t, n)) if n > 1 else [0.0]
    if any(not 0 <= s <= t for s in ss):
        raise UsageError("sample times must lie in [0, t]")
    if not dom.contains(np.array([x]), closed=True)[0]:
        raise UsageError(f"x = {x} is not in the closed annulus")
    cfg.update(x=x, v=v, t=t, s=[float(s) for s in ss])
    state = PhaseState(np.array(x), np.array(v))
    c = classify_batch(dom, state.x, state.v)
    case_name, a, b = _angles(c)
    h = float(weight_h_batch(dom, state.x, state.v))
    cols = ["kind", "s", "k", "X1", "X2", "X3", "V1", "V2", "V3", "case", "a", "b", "h"]
    rows = []
    ok = True
    speed = float(np.linalg.norm(v))
    for s in ss:
        fs = flow(dom, float(s), t, state)
        Xo, Vo, _ = flow_oracle_batch(dom, float(s), t, state.x, state.v)
        err = float(np.linalg.norm(Xo[0] - fs.X) + np.linalg.norm(Vo[0] - fs.V))
        ok &= err < 1e-8 * (1 + speed * t)
        ok &= abs(np.linalg.norm(fs.V) - speed) <= 1e-12 * max(1.0, speed)
        ok &= bool(dom.contains(fs.X[None, :], closed=True)[0])
        rows.append(["sample", s, fs.k, *fs.X, *fs.V, case_name, a, b, h])
    last = flow(dom, 0.0, t, state, with_log=True, max_log=1000)
    for j, tj, Xj, Vj in last.log:
        rows.append(["bounce", tj, j, *Xj, *Vj, case_name, a, b, h])
    emit(render(cols, rows, cfg, cfg["format"]), cfg["out"])
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

VERIFY_EXTRA = ("grazing-exponent", "kernel-domination", "averaging", "disk-gradient")


def _lemma_selection(sel):
    if sel in ("all-lemmas", "lemmas"):
        return list(est.SPACE_LEMMAS + est.VELOCITY_LEMMAS)
    if sel == "space":
        return list(est.SPACE_LEMMAS)
    if sel == "velocity":
        return list(est.VELOCITY_LEMMAS)
    if sel == "all":
        return list(est.SPACE_LEMMAS + est.VELOCITY_LEMMAS) + list(VERIFY_EXTRA)
    items = [p.strip() for p in str(sel).split(",") if p.strip()]
    known = set(est.SPACE_LEMMAS + est.VELOCITY_LEMMAS) | set(VERIFY_EXTRA)
    bad = [p for p in items if p not in known]
    if bad or not items:
        raise UsageError(f"unknown lemma selector {sel!r}")
    return items


def _disk_gradient_rows(dom, N, seed, t):
    rng = np.random.default_rng(seed)
    ratios = []
    while len(ratios) < N:
        x = est.sample_annulus(rng, dom, 1)[0]
        v = est.sample_velocity(rng, 1)[0]
        c = classify_batch(dom, x, v)
        if int(c["case"][0]) != Case.C3 or c["cos_a"][0] < 0.05:
            continue
        rows = est.disk_gradient_check(dom, t, x, v, N=3)
        ratios.append(max(rows[-1].ratios.values()))
    return np.array(ratios)


def cmd_verify(args) -> int:
    cfg = resolve(args, "verify")
    dom = make_domain(cfg)
    N = int(cfg["N"])
    if N < 10:
        raise UsageError("--N must be at least 10 (the refinement ratio uses N/10)")
    mode = cfg["mode"]
    if mode not in (None, "lipschitz", "holder"):
        raise UsageError(f"mode must be lipschitz or holder, got {mode!r}")
    if not float(cfg["delta"]) > 0:
        raise UsageError("--delta must be positive")
    sel = _lemma_selection(cfg["lemma"])
    seed = int(cfg["seed"])
    cols = ["lemma_id", "N", "max_ratio", "refinement_ratio", "exponent_fit", "skipped", "violations", "passed"]
    rows = []
    all_ok = True
    nan = float("nan")
    for lem in sel:
        if lem == "grazing-exponent":
            g = est.grazing_sweep(dom)
            ok = 0.45 <= g.holder_exponent <= 0.55 and g.lipschitz_slope <= -0.4
            rows.append([lem, g.deltas.size, float(np.max(g.dV / np.sqrt(g.deltas))), nan, g.holder_exponent,
                         0, 0, ok])
        elif lem == "kernel-domination":
            viol, excess = est.kernel_domination_check(n=N, seed=seed)
            ok = viol == 0
            rows.append([lem, N, excess, nan, nan, 0, viol, ok])
        elif lem == "averaging":
            a = est.averaging_sample(dom, n_random=N, seed=seed)
            ref = float(a.ratios.max() / a.ratios[: max(1, N // 10)].max())
            bad = int(np.sum(np.abs(a.quad - a.closed) / a.closed > 1e-6))
            ok = bad == 0 and np.isfinite(a.ratios.max()) and ref < 2
            rows.append([lem, N, float(a.ratios.max()), ref, a.max_rel_error, 0, bad, ok])
        elif lem == "disk-gradient":
            r = _disk_gradient_rows(dom, N, seed, float(cfg["t"]))
            ref = float(r.max() / r[: max(1, N // 10)].max())
            ok = bool(np.isfinite(r.max()) and ref < 2)
            rows.append([lem, N, float(r.max()), ref, nan, 0, 0, ok])
        else:
            sc = est.ScanConfig(lemma=lem, n_pairs=N, t=float(cfg["t"]), delta=float(cfg["delta"]), mode=mode,
                                seed=seed, verbatim=bool(cfg["verbatim"]))
            res = est.quotient_scan(dom, sc)
            fc = est.fit_constant(res.records)
            ok = bool(np.isfinite(fc["max_ratio"]) and fc["refinement_ratio"] < 2)
            rows.append([lem, len(res.records), fc["max_ratio"], fc["refinement_ratio"], fc["exponent_fit"],
                         res.skipped, 0, ok])
        all_ok &= bool(rows[-1][-1])
    emit(render(cols, rows, cfg, cfg["format"]), cfg["out"])
    return EXIT_OK if all_ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# integrate
# ---------------------------------------------------------------------------

INTEGRATE_WEIGHTS = {"5.5": "cos_b_2beta", "5.6": "cos_a_4beta", "cor5.7": "corollary_T"}


def cmd_integrate(args) -> int:
    cfg = resolve(args, "integrate")
    dom = make_domain(cfg)
    lem = str(cfg["lemma"])
    if lem not in INTEGRATE_WEIGHTS:
        raise UsageError(f"--lemma must be one of {sorted(INTEGRATE_WEIGHTS)}, got {lem!r}")
    kind = cfg["weight"] or INTEGRATE_WEIGHTS[lem]
    if kind not in est.ZETA_WEIGHTS:
        raise UsageError(f"unknown weight {kind!r}")
    speeds = parse_list(cfg["v"], "--v")
    if not speeds or any(s < 0 for s in speeds):
        raise UsageError("--v needs non-negative speeds")
    if cfg["v_dir"] is None:
        # radial from x reaches the inner shell (C1/C2); tangential stays outer-only (C3)
        cfg["v_dir"] = "0,1,0" if kind.startswith("cos_a") else "1,0,0"
    d = np.array(parse_vec(cfg["v_dir"], name="--v-dir"))
    if np.linalg.norm(d) == 0:
        raise UsageError("--v-dir must be nonzero")
    d = d / np.linalg.norm(d)
    x = np.array(parse_vec(cfg["x"], name="--x"))
    N = int(cfg["N"])
    if N < 2:
        raise UsageError("--N must be at least 2")
    cfg.update(weight=kind, v=speeds)
    rows = []
    ests = []
    for sp in speeds:
        p = est.ZetaParams(weight_kind=kind, beta=float(cfg["beta"]), r_exp=float(cfg["r_exp"]),
                           c=float(cfg["c"]), N=N, seed=int(cfg["seed"]), indicator=not cfg["no_indicator"])
        try:
            e, se = est.zeta_integral(dom, x, sp * d, p)
        except BetaOutOfRange as exc:
            raise UsageError(f"BetaOutOfRange: {exc}")
        except ValueError as exc:
            raise UsageError(str(exc))
        ests.append(e)
        rows.append([sp, e, se])
    ok = True
    if len(speeds) >= 2 and all(e > 0 for e in ests):
        g = est.growth_exponent(speeds, ests)
        ok = g <= float(cfg["r_exp"]) + 1.0 + 0.2
    else:
        g = float("nan")
    rows = [r + [g] for r in rows]
    emit(render(["speed", "estimate", "stderr", "growth_exponent"], rows, cfg, cfg["format"]), cfg["out"])
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# transport
# ---------------------------------------------------------------------------

def cmd_transport(args) -> int:
    cfg = resolve(args, "transport")
    dom = make_domain(cfg)
    g = parse_list(cfg["grid"], "--grid")
    if len(g) != 4:
        raise UsageError("--grid is n_rho,n_theta,n_v,v_max")
    try:
        grid = kin.GridSpec(int(g[0]), int(g[1]), int(g[2]), float(g[3]))
        kc = kin.KineticConfig(varpi=float(cfg["varpi"]), c=float(cfg["c"]), beta=float(cfg["beta"]),
                               T=float(cfg["T"]), picard_iters=int(cfg["picard"]), n_levels=int(cfg["levels"]),
                               n_sub=int(cfg["n_sub"]), collisionless=bool(cfg["collisionless"]))
    except ValueError as exc:
        raise UsageError(str(exc))
    if cfg["init"] == "equilibrium":
        f0 = kin.equilibrium_initial()
    elif cfg["init"] == "bump":
        try:
            f0 = kin.bump_initial(dom, eta=float(cfg["eta"]))
        except ValueError as exc:
            raise UsageError(str(exc))
    else:
        raise UsageError(f"--init must be equilibrium or bump, got {cfg['init']!r}")
    if int(cfg["pairs"]) < 1 or int(cfg["n_zeta"]) < 1:
        raise UsageError("--pairs and --n-zeta must be positive")
    levels = kin.picard_solve(dom, kc, f0, grid)
    spec = kin.SampleSpec(n_pairs=int(cfg["pairs"]), n_zeta=int(cfg["n_zeta"]), seed=int(cfg["seed"]))
    pairs = kin.sample_pairs(dom, spec, kc.T)
    cols = ["t", "H_sp", "H_vel", "theorem_space", "theorem_velocity", "equilibrium_drift", "pullback_error",
            "specular_defect"]
    rows = []
    ok = True
    h0 = None
    for fn in levels:
        H = kin.holder_seminorms(dom, kc, fn, fn.t, spec, pairs)
        th = kin.theorem_functional(dom, kc, fn, fn.t, spec, pairs)
        drift = kin.equilibrium_drift(fn) if cfg["init"] == "equilibrium" else float("nan")
        if kc.collisionless:
            x, v = kin._node_states(fn)
            Xo, Vo, _ = flow_oracle_batch(dom, 0.0, fn.t, x, v)
            exact = f0(Xo, Vo)
            # exact outer tangency follows the gliding limit, which the oracle does not model
            c = classify_batch(dom, x, v)
            keep = ~(((c["case"] == Case.C3) | (c["case"] == Case.GRAZING)) & (c["cos_a"] < kin.GLIDE_COS))
            diff = np.abs(fn.values.ravel() - exact)[keep]
            perr = float(np.max(diff) / max(np.max(np.abs(exact)), 1e-300))
            ok &= perr < 1e-8
        else:
            perr = float("nan")
        spd = kin.specular_defect(fn)
        if cfg["init"] == "equilibrium":
            ok &= drift <= 0.05
        if h0 is None:
            h0 = (H.H_sp + H.H_vel)
        ok &= (H.H_sp + H.H_vel) <= 3.0 * h0 + 1e-300
        rows.append([fn.t, H.H_sp, H.H_vel, th[0], th[1], drift, perr, spd])
        if cfg["snap_dir"]:
            Path(cfg["snap_dir"]).mkdir(parents=True, exist_ok=True)
            meta = {"config_sha256": config_hash(cfg), "kinetic": kc.to_dict()}
            kin.save_snapshot(Path(cfg["snap_dir"]) / f"snapshot_t{fn.t:.6f}.agf", fn, meta)
    emit(render(cols, rows, cfg, cfg["format"]), cfg["out"])
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="annulus-billiards", description=__doc__.strip().splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; flags override its keys")
        sp.add_argument("--R", type=float)
        sp.add_argument("--r", type=float)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output path (default stdout)")
        sp.add_argument("--format", choices=("csv", "json"))
        sp.add_argument("--threads", type=int, help=f"worker count (env {THREADS_ENV})")

    t = sub.add_parser("trace", help="sample one characteristic and its bounce log")
    common(t)
    t.add_argument("--x")
    t.add_argument("--v")
    t.add_argument("--t", type=float)
    t.add_argument("--s", help="comma-separated sample times in [0, t]")
    t.add_argument("--n-samples", dest="n_samples", type=int)
    t.set_defaults(func=cmd_trace)

    v = sub.add_parser("verify", help="quotient-bound scans and other property checks")
    common(v)
    v.add_argument("--lemma", help="lemma id, comma list, space, velocity, all-lemmas, all, "
                                   + ", ".join(VERIFY_EXTRA))
    v.add_argument("--N", type=int)
    v.add_argument("--mode", choices=("lipschitz", "holder"))
    v.add_argument("--delta", type=float)
    v.add_argument("--t", type=float)
    v.add_argument("--verbatim", action="store_const", const=True)
    v.set_defaults(func=cmd_verify)

    i = sub.add_parser("integrate", help="singular zeta-integrals and their growth in |v|")
    common(i)
    i.add_argument("--lemma", choices=sorted(INTEGRATE_WEIGHTS))
    i.add_argument("--weight", choices=est.ZETA_WEIGHTS)
    i.add_argument("--beta", type=float)
    i.add_argument("--r-exp", dest="r_exp", type=float)
    i.add_argument("--c", type=float)
    i.add_argument("--v", help="comma-separated speeds")
    i.add_argument("--v-dir", dest="v_dir")
    i.add_argument("--x")
    i.add_argument("--N", type=int)
    i.add_argument("--no-indicator", dest="no_indicator", action="store_const", const=True)
    i.set_defaults(func=cmd_integrate)

    tr = sub.add_parser("transport", help="Picard iteration of the mild form with seminorm time series")
    common(tr)
    tr.add_argument("--init", choices=("equilibrium", "bump"))
    tr.add_argument("--eta", type=float)
    tr.add_argument("--grid", help="n_rho,n_theta,n_v,v_max")
    tr.add_argument("--T", type=float)
    tr.add_argument("--varpi", type=float)
    tr.add_argument("--beta", type=float)
    tr.add_argument("--c", type=float)
    tr.add_argument("--picard", type=int)
    tr.add_argument("--levels", type=int)
    tr.add_argument("--n-sub", dest="n_sub", type=int)
    tr.add_argument("--collisionless", action="store_const", const=True)
    tr.add_argument("--pairs", type=int)
    tr.add_argument("--n-zeta", dest="n_zeta", type=int)
    tr.add_argument("--snap-dir", dest="snap_dir")
    tr.set_defaults(func=cmd_transport)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a command is required: trace, verify, integrate or transport")
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except AnnulusError as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

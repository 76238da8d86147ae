"""Regenerates the frozen reference values in ../fixtures.

Independent of the Rust code: power flow and OPF come from PYPOWER, the
projection references from cvxpy. Run from any directory:

    python3 crates/core/tests/oracles/generate.py
"""

import json
import pathlib
import re

import cvxpy as cp
import numpy as np
from pypower.api import case14, ppoption, runopf, runpf
from pypower.idx_brch import BR_B, BR_R, BR_X
from pypower.idx_bus import VA, VM, VMAX, VMIN
from pypower.idx_gen import GEN_BUS, PG, PMAX, PMIN, QG

HERE = pathlib.Path(__file__).resolve().parent
FIXTURES = HERE.parent / "fixtures"
CASE_FILE = HERE.parents[3] / "cases" / "case14.m"

RAMP = 0.1
VOLTAGE_BAND = 0.02
QUIET = dict(VERBOSE=0, OUT_ALL=0)
OPF_OPTS = ppoption(OPF_VIOLATION=1e-10, PDIPM_GRADTOL=1e-10, PDIPM_COMPTOL=1e-10, PDIPM_COSTTOL=1e-12, **QUIET)


def matrix(text, name):
    body = re.search(r"mpc\.%s\s*=\s*\[(.*?)\];" % name, text, re.S).group(1)
    rows = [r.split("%")[0].strip() for r in body.split(";")]
    return np.array([[float(v) for v in r.split()] for r in rows if r])


def check_case_file(ppc):
    """The shipped case file must hold the same data as PYPOWER's case14."""
    text = CASE_FILE.read_text()
    for name in ("bus", "gen", "branch", "gencost"):
        ours = matrix(text, name)
        ref = ppc[name][:, : ours.shape[1]]
        assert np.allclose(ours, ref), name


def power_flow():
    ppc = case14()
    r, ok = runpf(ppc, ppoption(PF_TOL=1e-12, **QUIET))
    assert ok
    return {
        "vm": r["bus"][:, VM].tolist(),
        "va_rad": np.deg2rad(r["bus"][:, VA]).tolist(),
        "p_slack_mw": float(r["gen"][0, PG]),
        "qg_mvar": r["gen"][:, QG].tolist(),
    }


def base_opf():
    r = runopf(case14(), OPF_OPTS)
    assert r["success"]
    gen_bus = r["gen"][:, GEN_BUS].astype(int) - 1
    return r, {
        "cost": float(r["f"]),
        "pg_mw": r["gen"][:, PG].tolist(),
        "dispatch_p": (r["gen"][1:, PG] / 100.0).tolist(),
        "dispatch_v": r["bus"][gen_bus, VM].tolist(),
    }


def half_line_outage(opf, branch):
    """Contingency redispatch with one branch at half admittance, posed as an
    ordinary OPF: ramp windows and voltage bands become plain limits."""
    ppc = case14()
    ppc["branch"][branch, BR_R] *= 2.0
    ppc["branch"][branch, BR_X] *= 2.0
    ppc["branch"][branch, BR_B] *= 0.5
    p = np.array(opf["dispatch_p"]) * 100.0
    for g in range(1, ppc["gen"].shape[0]):
        half = RAMP * ppc["gen"][g, PMAX]
        lo, hi = p[g - 1] - half, p[g - 1] + half
        ppc["gen"][g, PMIN] = max(ppc["gen"][g, PMIN], lo)
        ppc["gen"][g, PMAX] = min(ppc["gen"][g, PMAX], hi)
    for g, v in enumerate(opf["dispatch_v"]):
        b = int(ppc["gen"][g, GEN_BUS]) - 1
        ppc["bus"][b, VMIN] = max(ppc["bus"][b, VMIN], v - VOLTAGE_BAND)
        ppc["bus"][b, VMAX] = min(ppc["bus"][b, VMAX], v + VOLTAGE_BAND)
    r = runopf(ppc, OPF_OPTS)
    assert r["success"]
    f, t = case14()["branch"][branch, :2].astype(int)
    return {
        "branch_from": int(f),
        "branch_to": int(t),
        "y": 0.5,
        "cost": float(r["f"]),
        "pg_mw": r["gen"][:, PG].tolist(),
    }


def projections(seed=7, count=100):
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(count):
        n = int(rng.integers(1, 9))
        k = int(rng.integers(1, 4))
        y_raw = rng.uniform(-0.6, 1.6, n)
        y = cp.Variable(n)
        prob = cp.Problem(cp.Minimize(cp.sum_squares(y - y_raw)), [y >= 0, y <= 1, cp.sum(y) <= k])
        prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
        cases.append({"k": k, "y_raw": y_raw.tolist(), "y": np.clip(y.value, 0.0, 1.0).tolist()})
    return cases


def main():
    check_case_file(case14())
    r, opf = base_opf()
    fixtures = {
        "case14_powerflow.json": power_flow(),
        "case14_opf.json": opf,
        "case14_half_line.json": half_line_outage(opf, branch=0),
        "projections.json": projections(),
    }
    FIXTURES.mkdir(exist_ok=True)
    for name, value in fixtures.items():
        (FIXTURES / name).write_text(json.dumps(value, indent=1) + "\n")
        print("wrote", FIXTURES / name)


if __name__ == "__main__":
    main()

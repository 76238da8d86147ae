"""Exercises the Python bindings on the shipped 14-bus case."""

import json
import pathlib
import sys

import pynkscopf

ROOT = pathlib.Path(__file__).resolve().parent.parent
CASE = ROOT / "cases" / "case14.m"


def main() -> int:
    case = pynkscopf.Case.load(str(CASE))
    assert (case.n_bus, case.n_gen, case.n_outage) == (14, 5, 25), case

    pf = pynkscopf.power_flow(case)
    assert pf["residual"] <= 1e-8
    print(f"power flow: {pf['iterations']} iterations, slack {pf['p_slack'] * case.base_mva:.2f} MW")

    opf = pynkscopf.base_opf(case)
    print(f"base OPF cost: {opf['cost']:.3f} $/h")

    y = pynkscopf.project_attack([0.9, 0.8, 0.7, -0.2], 2)
    assert abs(sum(y) - 2.0) < 1e-9 and min(y) >= 0.0

    atk = pynkscopf.find_attack(case, opf["p"], opf["v"], 2)
    assert atk["loss"] >= 1.01 * atk["initial_loss"], atk
    labels = case.device_labels()
    worst = max(range(len(atk["y"])), key=lambda j: atk["y"][j])
    print(f"attack k=2: loss {atk['initial_loss']:.3e} -> {atk['loss']:.3e}, most attacked {labels[worst]}")

    cfg = json.dumps({"k": 1, "max_outer": 5})
    res = pynkscopf.run(case, cfg)
    print(f"run k=1: {res['iterations']} iterations, {res['reason']}")

    rep = pynkscopf.evaluate(case, res["p"], res["v"], [1], [25])
    assert rep["total_scenarios"] == 25
    print(f"N-1 violations: {rep['total_violations']} of {rep['total_scenarios']}")

    try:
        pynkscopf.Case.parse("garbage")
    except ValueError:
        pass
    else:
        raise AssertionError("malformed case was accepted")
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())

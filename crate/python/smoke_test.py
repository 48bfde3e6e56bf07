"""Smoke test for the Python bindings.

Build first:  maturin develop --release -m crates/py/Cargo.toml
"""

import json
import math
import tempfile

import obstacle_mfg_py as om


def main():
    model = om.Model.cosine(1, 1.0, 2.0)
    assert model.dims == 1
    assert math.isinf(om.alpha_max(2)) and 0.0 < om.alpha_max(3) < math.inf
    assert model.check_assumptions(samples=200, seed=1)["all_passed"]

    g, dg = model.coupling(math.e)
    assert abs(g - 1.0) < 1e-14 and abs(dg - 1.0 / math.e) < 1e-14
    assert abs(model.invert_coupling(g) - math.e) < 1e-12
    beta, dbeta = om.penalization(0.1, 0.3)
    assert abs(beta - 2.0) < 1e-14 and abs(dbeta - 10.0) < 1e-14

    flat = om.Model.constant(1, 1.0)
    sol = om.solve_penalized(flat, [32], 0.05)
    assert sol.converged and sol.residual_norm <= 1e-10
    mass = sum(sol.theta) / len(sol.theta)
    print(f"constant data: theta = {mass:.6f}, u = {sol.u[0]:.3e}")

    sol = om.solve_penalized(model, [64], 0.05)
    report = om.estimate_report(model, sol)
    assert report["min_theta"] > 0.0
    assert om.energy_identity_gap(model, sol) < 1e-10
    other = om.solve_penalized(model, [64], 0.05, u_init=[-0.5] * 64)
    assert other.converged
    gap = om.uniqueness_gap(model, sol, other)
    assert gap["linf_u_gap"] < 1e-8
    print(f"penalized: {sol!r}")

    limit = om.run_continuation(model, [64], steps=4)
    assert len(limit.trace) == 4 and len(limit.solutions) == 4
    print(f"continuation: contact measure {limit.contact_measure:.3f}, residuals {limit.residuals['hj_residual']:.2e}")

    with tempfile.TemporaryDirectory() as out:
        config = {
            "mode": "solve",
            "epsilon": 0.1,
            "model": json.loads(flat.to_json()),
            "grid": {"dims": 1, "sizes": [32]},
        }
        config["model"].pop("dims", None)
        code = om.run_config(json.dumps(config), output_dir=out)
        assert code == 0, code
        with open(f"{out}/report.json") as fh:
            assert json.load(fh)["status"] == "ok"

    try:
        om.Model.from_json('{"dims": 1, "hamiltonian": {}, "coupling": {"kind": "nope"}}')
    except ValueError:
        pass
    else:
        raise AssertionError("bad model accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()

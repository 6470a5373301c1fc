"""Smoke test for the `ebsa` extension module.

Build and install first, e.g. `pip install --no-build-isolation ./crates/python`,
then run `python python/smoke_test.py`.
"""

import math

import ebsa


def main():
    names = ebsa.corpus_names()
    assert "qp_kink" in names, names

    prob = ebsa.Problem.corpus("qp_kink")
    assert prob.dims[:2] == (1, 1), prob.dims
    ref = prob.reference
    assert ref is not None and abs(ref["upper_obj"]) < 1e-12

    z, kappa = ebsa.eval_zk([0.5, -2.0], [0.1, 0.3], 0.1, 2.0)
    for zi, ki in zip(z, kappa):
        assert zi >= 0 and ki >= 0
        assert math.isclose(zi * ki, 0.2, rel_tol=1e-12)

    x0, y0 = ebsa.perturbed_start(prob, ebsa.derive_seed(7, "qp_kink", 0))
    res = ebsa.solve(prob, ebsa.SolverConfig(), x0, y0)
    assert res.converged, res
    assert abs(res.x[0] - 1) < 1e-3 and abs(res.y[0] - 1) < 1e-3, (res.x, res.y)
    assert len(res.res_history) == len(res.report()["history"])

    inf = ebsa.infeasibility(prob, res.x, res.y)
    assert inf["total"] <= 1e-6 and inf["applicable"], inf
    assert math.isclose(ebsa.value_function(prob, [1.0]), -0.5, abs_tol=1e-6)

    oracle = ebsa.grid_oracle(prob, 1e-2)
    assert abs(oracle["upper_obj"]) < 1e-1, oracle

    cfg = ebsa.SolverConfig(max_outer=5)
    assert cfg.to_dict()["stop"]["k_cap"] == 5
    try:
        ebsa.SolverConfig(nosuch=1)
    except ebsa.EbsaError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    toy = ebsa.Problem.parse(
        "name = toy\ndims = 1 1\nx0 = 0.5\ny0 = 0.5\n"
        "F = x1^2 - 2*x1 + 1 + y1^2 - 2*y1 + 1\nf = 0.5*y1^2 - x1*y1\ng1 = -y1\n"
    )
    print(toy, ebsa.solve(toy))
    print(res)
    print("smoke test passed")


if __name__ == "__main__":
    main()

"""Quick check that the extension module loads and its main entry points run."""

import json
import math

import drmpc_py as d

C = [1.13, -0.02, -0.33, -0.16]

r = d.radius(0.05, 4, 1000)
assert 0.0 < r < 2.0, r
assert d.radius(0.05, 4, 4000) < r

est = d.estimate([1, 2, 2, 1, 1, 2], 2)
assert est["counts"] == [[1, 2], [1, 1]], est

z, p = [1.0, 2.0, 3.0], [0.5, 0.3, 0.2]
assert math.isclose(d.avar(z, p, 1.0), 1.7)
assert math.isclose(d.avar(z, p, 1e-9), 3.0, rel_tol=1e-6)
assert d.robust_avar(z, p, 0.4, 0.5) >= d.avar(z, p, 0.5) - 1e-9

params = d.AccParams(C)
assert params.step([50.0, 20.0, 25.0], 0.0, 1)[0] > 50.0
rk = d.rpi_set(params)
out = d.invariant_set(params)
assert out["converged"], out["iterations"]
final = out["iterates"][-1]
assert rk.is_subset(final)
h = final.h_min(20.0, 20.0)
assert final.contains([h, 20.0, 20.0])
print(f"radius={r:.4f} rci_iterations={out['iterations']} h_min(20,20)={h:.3f} rss={d.rss_distance(params, 20.0, 20.0):.3f}")

cfg = json.dumps({
    "params": {"preset": "table1", "c": C},
    "markov": {"p_true": "P_p", "alpha": 0.05, "offline_n": 20},
    "controller": "risk_averse",
    "horizon": 2,
    "experiment": {"steps": 5, "realizations": 2, "master_seed": 1, "x0": [40.0, 20.0, 25.0], "w0": 1},
})
rep = d.solve_once(cfg, [60.0, 25.0, 25.0], 2)
assert rep["status"] == "Optimal", rep
sim = d.simulate(cfg)
assert len(sim["costs"]) == 2
print("solve_once u0 =", rep["u0"], "| simulate summary:", sim["summary"])

try:
    d.radius(2.0, 4, 10)
except ValueError:
    pass
else:
    raise AssertionError("bad alpha accepted")
print("ok")

"""Smoke test for the `vmv` extension module.

Build and install first:

    maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/*.whl
"""

import math
import os
import sys
import tempfile

import vmv


def check(name, ok, detail=""):
    print(f"{'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())
    return ok


def main():
    results = []

    k = vmv.Kernel.constant(1.0)
    r = vmv.resolvent(k, 1.0, 200)
    results.append(check("resolvent", abs(r[200][0] / math.e - 1) < 0.02, f"R(1,0)={r[200][0]:.6f}"))

    fbm = vmv.Kernel.fbm(0.7)
    var = fbm.integrate(1.0, 0.0, 1.0, 2)
    results.append(check("fbm variance", abs(var - 1.0) < 1e-6, f"int K^2={var:.8f}"))

    gamma, _ = vmv.Kernel.power(0.25).regularity(0.5, 1.0)
    results.append(check("regularity", abs(gamma - 0.25) < 0.02, f"gamma={gamma:.4f}"))

    model = vmv.LinearMeanField.scalar(1.0, 0.5, 1.0)
    scheme = vmv.Scheme(k, k, model, 1.0, 50)
    x0 = scheme.limit([1.0])
    results.append(check("limit", abs(x0[-1][0] - math.exp(1.5)) < 0.1, f"X0_T={x0[-1][0]:.4f}"))

    ens = scheme.simulate([1.0], 1e-2, 2000, 7, workers=1)
    again = scheme.simulate([1.0], 1e-2, 2000, 7, workers=2)
    results.append(check("worker independence", ens.at(50) == again.at(50)))

    flat = vmv.Scheme(k, k, vmv.LinearMeanField.scalar(0.0, 0.0, 1.0), 1.0, 50)
    times = flat.times()
    mdp = flat.mdp_rate([0.0], [[t] for t in times])
    results.append(check("mdp rate", abs(mdp.rate - 0.5) < 1e-8, f"rate={mdp.rate:.12f}"))

    control = [[0.3]] * 50
    target = scheme.skeleton([1.0], control)
    ldp = scheme.ldp_rate([1.0], target)
    results.append(check("ldp round trip", abs(ldp.rate - 0.045) < 1e-8 and ldp.attained, f"rate={ldp.rate:.12f}"))

    best = flat.rate_min([0.0], [1.0], 1.0)
    results.append(check("rate min", abs(best.rate - 0.5) < 1e-6, f"rate={best.rate:.9f}"))

    w = vmv.wasserstein2([[0.0], [1.0]], [[2.0], [3.0]])
    results.append(check("wasserstein", abs(w - 2.0) < 1e-12, f"W2={w}"))

    try:
        vmv.validate_config('kind = "simulate"\n[run]\neps = [1.5]\n')
        results.append(check("config errors", False))
    except ValueError as e:
        results.append(check("config errors", "run.eps[0] must lie in (0,1]" in str(e)))

    with tempfile.TemporaryDirectory() as tmp:
        cfg = os.path.join(tmp, "limit.toml")
        with open(cfg, "w") as f:
            f.write('kind = "limit"\n[run]\nxi = 1.0\n[model]\na = -1.0\n')
        out = vmv.run_experiment(cfg, out=os.path.join(tmp, "out"))
        results.append(check("harness", os.path.isfile(os.path.join(out, "manifest.toml"))))

    print(f"{sum(results)}/{len(results)} checks passed")
    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main())

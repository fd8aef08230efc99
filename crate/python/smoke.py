"""Smoke test for the tsr_lab_py extension module.

Build and stage the module first:

    cargo build --release -p tsr-lab-py
    cp target/release/libtsr_lab_py.so python/tsr_lab_py.so
    python3 python/smoke.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import tsr_lab_py as lab  # noqa: E402


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def main():
    # DPO gradient on a 2-d Gaussian: weight 1/2 at the reference, factorized gradient.
    p = lab.Policy.gaussian(2, [0.5, -0.2, 0.1, 0.8], [-0.3, 0.2])
    x, yw, yl = [0.6, -0.8], [0.4, 0.1], [-1.0, 0.3]
    g = lab.dpo_grad_decomposed(p, p, x, yw, yl, beta=0.1)
    assert g["r_hat"] == 0.0 and g["adaptive_weight"] == 0.5, g
    assert close(lab.dpo_loss(p, p, x, yw, yl), math.log(2.0))
    ref = p.with_params([v + 0.1 for v in p.params()])
    h = lab.dpo_grad_decomposed(p, ref, x, yw, yl)
    assert 0.0 < h["adaptive_weight"] < 1.0
    assert h["direction"] == g["direction"]
    for f, d in zip(h["full_grad"], h["direction"]):
        assert close(f, -0.1 * h["adaptive_weight"] * d, 1e-12)

    # Token policies take integer sequences.
    t = lab.Policy.token(2, 3, 2, init_sd=0.5, seed=1)
    total = sum(math.exp(t.log_prob(x, [a, b])) for a in range(3) for b in range(3))
    assert close(total, 1.0, 1e-10), total
    assert len(t.sample(x, seed=4)) == 2

    # Selection rules, including the strict tie rules.
    assert lab.select_phase1([3.0, 1.0], [1.0, 0.5]) == (0, ("anchor", 1))
    assert lab.select_phase1([3.0, 1.0], [1.0, 2.0]) == (0, ("current", 1))
    assert lab.select_phase2([4.0], [4.0]) == ("current", 0)
    assert lab.select_sr([2.0, 2.0]) is None

    b = lab.lipschitz_bound_check(p, x, yw, yl)
    assert b["satisfied"], b

    w = lab.World(seed=0)
    assert w.latent_dim == 2 and w.n_prompts > 0
    assert 0.0 <= w.true_quality(0, [0.0, 0.0]) <= 5.0

    checks = lab.run_checks(cases=50)
    assert all(passed for _, passed, _ in checks), checks

    with tempfile.TemporaryDirectory() as tmp:
        run = lab.run_experiment(os.path.join(tmp, "run"), method="tsr", iterations=1)
        assert run["ledger"]["dpo_runs"] == 2 and len(run["rows"]) == 2
        rows = lab.compare_methods(os.path.join(tmp, "cmp"), ["sr", "tsr"], [0], budget=2)
        assert {r["method"] for r in rows} == {"sr", "tsr"}
        assert all(r["dpo_runs"] == 2 for r in rows)
        try:
            lab.compare_methods(os.path.join(tmp, "bad"), ["tsr"], [0], budget=3)
        except lab.LabError as e:
            assert "budget" in str(e), e
        else:
            raise AssertionError("odd TSR budget was accepted")

    print("smoke ok:", ", ".join(f"{n} {'pass' if ok else 'FAIL'}" for n, ok, _ in checks))


if __name__ == "__main__":
    main()

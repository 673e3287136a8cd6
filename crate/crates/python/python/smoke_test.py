"""Quick end-to-end check of the mvdrl extension module.

Build first with `maturin develop -m crates/python/Cargo.toml`, then run
`python crates/python/python/smoke_test.py`.
"""

import json
import math

import mvdrl


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * (1.0 + abs(b))


def main():
    k = mvdrl.Kernel(alpha=1.0, dim=1)
    p = mvdrl.Measure([[0.0], [1.0]], [0.5, 0.5])
    q = mvdrl.Measure.dirac([0.5])
    assert close(mvdrl.mmd_squared(p, p, k), 0.0)
    # energy MMD² on the line equals the Cramér distance squared
    c = mvdrl.cramer([a[0] for a in p.atoms], p.weights, [0.5], [1.0])
    assert close(mvdrl.mmd_squared(p, q, k), c * c)

    back = mvdrl.Measure.from_json(p.to_json())
    assert back.weights == p.weights and back.atoms == p.atoms
    assert set(json.loads(p.to_json())) == {"dim", "atoms", "weights"}

    support = [[x / 4.0] for x in range(5)]
    simplex = mvdrl.project_simplex(q, support, k)
    assert min(simplex.weights) >= 0.0
    assert close(sum(simplex.weights), 1.0)
    signed = mvdrl.project_signed(q, support, k)
    assert close(sum(signed.weights), 1.0)

    mdp = mvdrl.Mdp.random(5, 2, 0.9, seed=3)
    mdp2 = mvdrl.Mdp.from_json(mdp.to_json())
    assert mdp2.n_states == 5 and close(mdp2.gamma, 0.9)

    k2 = mvdrl.Kernel(alpha=1.0, dim=2)
    hi = mdp.return_bound
    grid = [[i * hi / 7.0, j * hi / 7.0] for i in range(8) for j in range(8)]
    rep = mvdrl.categorical_dp(mdp, grid, k2)
    assert rep["converged"], rep["iterations"]
    ratios = [b / a for a, b in zip(rep["distances"][3:], rep["distances"][4:]) if a > 1e-12]
    assert max(ratios) <= math.sqrt(0.9) + 1e-6

    sf = mdp.successor_features()
    for est, psi in zip(rep["estimate"], sf):
        assert all(abs(a - b) < 0.2 * hi for a, b in zip(est.mean(), psi))

    ewp = mvdrl.ewp_dp(mdp, 16, k2, seed=1)
    assert len(ewp["estimate"]) == 5 and len(ewp["estimate"][0]) <= 16

    atoms, weights = mvdrl.zeroshot(rep["estimate"][0], [1.0, -0.5])
    assert close(sum(weights), 1.0)

    cert = mvdrl.cert_nonaffine()
    assert cert["mmd"] >= 1e-3

    half = mvdrl.Measure([[0.0]], [0.5])
    try:
        mvdrl.mmd(half, q, k)
    except ValueError:
        pass
    else:
        raise AssertionError("mass-0.5 measure accepted")

    print("smoke test ok")


if __name__ == "__main__":
    main()

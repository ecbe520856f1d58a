"""Smoke test for the malliavin_py extension module.

Build first:  pip install --no-build-isolation -e crates/python   (needs maturin)
"""

import math

import malliavin_py as mp


def close(a, b, tol):
    assert abs(a - b) <= tol, f"{a} vs {b} (tol {tol})"


def main():
    ou = mp.Model("ou", theta=1.0, sigma=1.0)
    grid = mp.Grid(1.0, 64)
    assert ou.state_dim == 1 and ou.state_independent_diffusion
    close(ou.drift(0.0, [0.5])[0], -0.5, 1e-15)

    path = mp.simulate(ou, [0.0], grid, seed=3)
    assert len(path.states) == 65
    cov = path.malliavin_covariance()
    close(cov["covering"][0][0], 1.0, 1e-10)
    parts = path.skorokhod()[0]
    close(parts["total"], parts["ito"], 1e-12)

    tanh = mp.Model("tanh", alpha=0.5)
    tpath = mp.simulate(tanh, [0.2], grid, seed=3)
    fast = tpath.skorokhod("general")[0]["total"]
    slow = tpath.skorokhod("reference")[0]["total"]
    close(fast, slow, 1e-10 * (1 + abs(slow)))

    exact = mp.analytic_score(ou, 1.0, [0.0], [0.5])[0]
    close(exact, -1.15652, 1e-5)
    table = mp.score(ou, [0.0], grid, 20_000, 1.0, [[0.0], [0.5]], seed=7)
    est, se = table.score[1][0], table.stderr[1][0]
    close(est, exact, max(3 * se, 0.05))
    assert not any(table.flagged)

    report = mp.duality(tanh, [0.2], grid, 4000, seed=2)
    assert report["max_z"] <= 3.0, report

    start, end = mp.reverse_sample(ou, [0.0], grid, 2000, seed=5)
    mean = sum(e[0] for e in end) / len(end)
    std = math.sqrt(sum((e[0] - mean) ** 2 for e in end) / (len(end) - 1))
    assert abs(mean) < 0.02 and std < 0.15, (mean, std)

    _, by_callback = mp.reverse_sample(ou, [0.0], grid, 200, score=lambda t, y: mp.analytic_score(ou, t, [0.0], y), seed=5)
    _, analytic = mp.reverse_sample(ou, [0.0], grid, 200, score="analytic", seed=5)
    assert by_callback == analytic

    try:
        mp.Model("ou", thetta=1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown parameter accepted")

    print("malliavin_py smoke test passed")


if __name__ == "__main__":
    main()

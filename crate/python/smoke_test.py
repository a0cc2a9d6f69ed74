"""Smoke test for the pyvilds extension module.

Build and install first, e.g. `pip install --no-build-isolation crates/python`
or `maturin develop -m crates/python/Cargo.toml`, then run this script.
"""

import json
import math
import os
import sys
import tempfile

import pyvilds


def check(cond, msg):
    if not cond:
        print("FAIL:", msg)
        sys.exit(1)
    print("ok:", msg)


def main():
    # block kernels on a 2-block, 1x1 example: H = [[2, -1], [-1, 2]]
    diag, lower = pyvilds.btd_cholesky([[[2.0]], [[2.0]]], [[[-1.0]]])
    check(abs(diag[0][0][0] - math.sqrt(2.0)) < 1e-12, "cholesky first block")
    check(abs(diag[1][0][0] - math.sqrt(1.5)) < 1e-12, "cholesky second block")
    check(abs(pyvilds.btd_logdet_sigma(diag, lower) + math.log(3.0)) < 1e-12, "logdet of the inverse")
    y = pyvilds.btd_solve(diag, lower, [1.0, 0.0])
    x = pyvilds.btd_solve(diag, lower, y, transpose=True)
    check(abs(x[0] - 2.0 / 3.0) < 1e-12 and abs(x[1] - 1.0 / 3.0) < 1e-12, "solve H x = e1")

    post = pyvilds.Posterior.from_moments([0.5, -0.5], [[[2.0]], [[2.0]]], [[[-1.0]]])
    _, var, cross = post.marginals()
    check(abs(var[0][0][0] - 2.0 / 3.0) < 1e-12 and abs(cross[0][0][0] - 1.0 / 3.0) < 1e-12, "marginals")
    check(abs(post.sample([0.0, 0.0])[0] - 0.5) < 1e-12, "zero noise sample is the mean")

    model = pyvilds.Model.random("lds", n=1, m=3, seed=7)
    xs, zs = model.simulate(200, 8)
    check(len(xs) == 200 and len(xs[0]) == 3 and len(zs[0]) == 1, "simulate shape")
    again = pyvilds.Model.from_json(model.to_json())
    check(again.to_json() == model.to_json(), "model json round trip")
    means, _, _, log_evidence = model.kalman_smoother(xs)

    rec = pyvilds.Recognition.from_data("vildsmult", xs, 1, hidden=16, layers=3, seed=9)
    flat = rec.params()
    check(len(flat) == rec.num_params, "parameter vector length")
    _, fitted, elbo = pyvilds.fit(model, rec, xs, epochs=30, window=100, batches_per_epoch=20, seed=10, learn_theta=False)
    check(len(elbo) == 30 and elbo[-1] > elbo[0], "fit raises the ELBO")
    check(elbo[-1] < log_evidence + 5.0, "ELBO stays below the evidence (up to sampling noise)")
    mu = fitted.posterior(xs).mu
    exact = [v[0] for v in means]
    n = len(mu)
    ma, mb = sum(mu) / n, sum(exact) / n
    cov = sum((a - ma) * (b - mb) for a, b in zip(mu, exact))
    corr = cov / math.sqrt(sum((a - ma) ** 2 for a in mu) * sum((b - mb) ** 2 for b in exact))
    check(corr > 0.95, "fitted means track the smoother (corr %.4f)" % corr)

    with tempfile.TemporaryDirectory() as d:
        code = pyvilds.cli(["simulate", "--family", "lds", "--T", "50", "--n", "1", "--m", "2", "--seed", "3", "--out-dir", d])
        check(code == 0 and os.path.exists(os.path.join(d, "x.csv")), "cli simulate")
        with open(os.path.join(d, "manifest.json")) as f:
            check(json.load(f)["seed"] == 3, "manifest seed")
        check(pyvilds.cli(["fit", "--bogus"]) == 2, "cli usage error exit code")

    print("all smoke tests passed (pyvilds %s)" % pyvilds.__version__)


if __name__ == "__main__":
    main()

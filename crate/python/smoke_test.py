"""Quick end-to-end check of the Python bindings.

Build and install first:  pip install --no-build-isolation ./crates/python
"""

import math

import dlcz


def close(a, b, rel):
    return abs(a - b) <= rel * abs(b)


def main():
    p = dlcz.ModelParams.reference_regime()
    assert p.chi == 1e-3
    p.chi = 2e-3
    assert p.with_chi(1e-3).chi == 1e-3
    try:
        p.retrieval_eff = 1.5
    except ValueError as e:
        assert "retrieval_eff" in str(e)
    else:
        raise AssertionError("out-of-range parameter accepted")
    assert dlcz.ModelParams.from_document(p.to_document()) == p

    stats = dlcz.click_statistics(p, mode="split")
    m = dlcz.derived_metrics(p, mode="split")
    assert close(m["g12"], stats["p12"] / (stats["p1"] * stats["p2"]), 1e-12)
    assert dlcz.derived_metrics(dlcz.ModelParams(chi=0.0))["g12"] is None

    counts = dlcz.simulate_counts(p, 2_000_000, seed=3, mode="split")
    assert counts == dlcz.simulate_counts(p, 2_000_000, seed=3, mode="split")
    est = dlcz.estimate(counts, eta2=0.2)
    exact = {"p1": stats["p1"], "g12": m["g12"], "qc": m["qc"]}
    for key, want in exact.items():
        value, se = est[key]
        assert abs(value - want) <= 4 * se, key
    boot = dlcz.estimate(counts, eta2=0.2, method="bootstrap", replicates=200, seed=1)
    assert boot["qc"][0] == est["qc"][0]

    truth = dlcz.ModelParams.reference_regime()
    chis = [3e-5 * 10 ** (i * 3 / 7) for i in range(8)]
    data = dlcz.synthetic_dataset(truth, chis, 4_000_000, seed=2)
    result = dlcz.fit(data, init=truth, bounds={"retrieval_eff": (0.1, 0.9)}, mode="split", starts=4)
    eff, se = result["free"]["retrieval_eff"]
    assert abs(eff - 0.5) <= max(0.05, 3 * se), (eff, se)
    assert result["dof"] > 0 and not result["flagged"]

    curves = dlcz.predict_curves(result["params"], [1e-4, 1e-3, 1e-2], mode="split")
    assert all(math.isfinite(c["qc"]) for c in curves)
    print("smoke test ok: qc = %.3f +- %.3f, fitted retrieval_eff = %.3f +- %.3f" % (*est["qc"], eff, se))


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Smoke test for the mgproto_py extension module.

Expects the extension to be built already:

    cargo build -p mgproto-py
    python3 python/smoke_test.py

The test loads the shared library straight from the cargo target directory,
so no installation step is needed.
"""

import importlib.util
import math
import pathlib
import sys
import tempfile

REPO_ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        REPO_ROOT / "target" / profile / "libmgproto_py.so"
        for profile in ("debug", "release")
    ]
    for path in candidates:
        if path.exists():
            spec = importlib.util.spec_from_file_location("mgproto_py", path)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit(
        "libmgproto_py.so not found; run `cargo build -p mgproto-py` first "
        f"(looked at {', '.join(str(c) for c in candidates)})"
    )


def approx(a, b, tol=1e-12):
    assert abs(a - b) <= tol, f"{a} vs {b}"


def main():
    mg = load_module()

    # Likelihood peaks at one exactly on the mean.
    approx(mg.gaussian_likelihood([1.0, 2.0], [1.0, 2.0]), 1.0)
    lik = mg.gaussian_likelihood([0.0, 0.0], [0.5, 0.0])
    approx(lik, math.exp(-math.pi * 0.25))

    # A two-class head with well-separated prototypes.
    means = [
        [[0.0, 0.0], [0.2, 0.0]],
        [[3.0, 3.0], [3.2, 3.0]],
    ]
    priors = [[0.6, 0.4], [0.5, 0.5]]
    head = mg.Head.from_parts(means, priors)
    assert head.num_classes == 2
    assert head.num_components == 2
    assert head.dim == 2
    assert head.priors(0) == [0.6, 0.4]
    assert head.means(1)[0] == [3.0, 3.0]

    # Posterior on a 1x2 grid of class-0-like features.
    grid = [[[0.1, 0.0], [0.0, 0.1]]]
    post = head.posterior(grid)
    approx(sum(post), 1.0, tol=1e-9)
    assert post[0] > post[1], post

    score = head.ood_score(grid)
    assert score > 0.0
    assert head.classify_or_abstain(grid, score / 2.0) == 0
    assert head.classify_or_abstain(grid, score * 2.0) is None

    # Pruning keeps the heaviest component without renormalizing.
    pruned = head.prune(1)
    assert pruned.num_components == 1
    assert pruned.priors(0) == [0.6]
    renorm = head.prune(1, renormalize=True)
    approx(renorm.priors(0)[0], 1.0)

    # Checkpoint roundtrip through a temporary file.
    with tempfile.TemporaryDirectory() as tmp:
        path = str(pathlib.Path(tmp) / "head.mgp")
        head.save(path)
        reloaded = mg.Head.load(path)
        assert reloaded.posterior(grid) == post

    # Metrics.
    approx(mg.accuracy([0, 1, 1], [0, 0, 1]), 2.0 / 3.0)
    approx(mg.auroc([2.0] * 25, [1.0] * 25), 1.0)
    approx(mg.auroc([1.0] * 25, [1.0] * 25), 0.5)
    assert 0.0 <= mg.fpr95([2.0] * 25, [1.0] * 25) <= 1.0

    # Error mapping.
    try:
        mg.Head.load(str(REPO_ROOT / "no-such-checkpoint.mgp"))
    except FileNotFoundError:
        pass
    else:
        raise AssertionError("missing checkpoint must raise FileNotFoundError")
    try:
        mg.Head.from_parts([[[0.0], [0.0, 1.0]]], [[0.5, 0.5]])
    except ValueError:
        pass
    else:
        raise AssertionError("ragged means must raise ValueError")

    print("smoke test passed")


if __name__ == "__main__":
    main()

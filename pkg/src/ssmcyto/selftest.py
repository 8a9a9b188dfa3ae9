"""Fast invariant sweep runnable without a test framework.

Four suites cover the numerical core: scan equivalence, gradient checks
against central differences, traversal permutation round-trips, and the
weighted-metric identities.  Each prints one line; `run` returns the
number of failed suites.
"""

from __future__ import annotations

import time

import numpy as np

from .blocks import BlockConfig, block_forward, init_block
from .metrics import confusion_matrix, weighted_metrics
from .ssm import DiscreteSSM, scan_parallel, scan_sequential
from .tensor import Tensor, silu
from .traversal import (
    KINDS,
    cross_merge,
    deserialize_patches,
    local_directions,
    make_traversal,
    serialize_patches,
    ss2d_directions,
)


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / (np.abs(b) + 1e-8)))


def _suite_scan(rng) -> str:
    worst = 0.0
    for _ in range(40):
        L, D, N = rng.integers(1, 65), rng.integers(1, 9), rng.integers(1, 9)
        disc = DiscreteSSM(
            A_bar=Tensor(rng.uniform(0.1, 0.99, (L, D, N))),
            B_bar=Tensor(rng.standard_normal((L, D, N))),
        )
        x = Tensor(rng.standard_normal((L, D)))
        c = Tensor(rng.standard_normal((L, N)))
        d = Tensor(rng.standard_normal(D))
        h0 = Tensor(rng.standard_normal((D, N)))
        y_par, h_par = scan_parallel(disc, x, c, d, h0=h0)
        y_seq, h_seq = scan_sequential(disc, x, c, d, h0=h0)
        worst = max(worst, _rel_err(y_par.data, y_seq.data),
                    _rel_err(h_par.data, h_seq.data))
    if worst >= 1e-9:
        raise AssertionError(f"scan mismatch, worst rel err {worst:.2e}")
    return f"worst rel err {worst:.2e} over 40 instances"


def _fd_check(f, x: np.ndarray, tol: float, n_probe: int, rng, step=1e-5) -> float:
    xt = Tensor(x.copy(), requires_grad=True)
    f(xt).backward()
    flat_grad = xt.grad.ravel()
    worst = 0.0
    for idx in rng.choice(x.size, size=min(n_probe, x.size), replace=False):
        bumped = x.ravel().copy()
        bumped[idx] += step
        hi = float(f(Tensor(bumped.reshape(x.shape))).data)
        bumped[idx] -= 2 * step
        lo = float(f(Tensor(bumped.reshape(x.shape))).data)
        fd = (hi - lo) / (2 * step)
        worst = max(worst, abs(flat_grad[idx] - fd) / (abs(fd) + 1e-8))
    if worst >= tol:
        raise AssertionError(f"gradient mismatch, worst rel err {worst:.2e}")
    return worst


def _suite_gradients(rng) -> str:
    w = Tensor(rng.standard_normal((6, 4)))
    probe = Tensor(rng.standard_normal((5, 4)))
    prim = _fd_check(
        lambda t: (silu(t @ w) * probe).sum(), rng.standard_normal((5, 6)),
        1e-4, 8, rng,
    )

    cfg = BlockConfig(variant="vanilla", d_model=6, n_state=4)
    params = init_block(cfg, np.random.default_rng(0))
    block_probe = Tensor(rng.standard_normal((8, 6)))
    comp = _fd_check(
        lambda t: (block_forward(t, cfg, params) * block_probe).sum(),
        rng.standard_normal((8, 6)),
        1e-3, 8, rng,
    )
    return f"primitive rel err {prim:.2e}, block rel err {comp:.2e}"


def _suite_traversals(rng) -> str:
    checked = 0
    for _ in range(6):
        h, w = rng.integers(1, 7), rng.integers(1, 7)
        ts = [make_traversal(k, h, w, reverse=r)
              for k in KINDS if k != "local_window" for r in (False, True)]
        if h % 2 == 0 and w % 2 == 0:
            ts += local_directions(h, w, window=2)
        for t in ts:
            assert sorted(t.order) == list(range(h * w))
            x = Tensor(rng.standard_normal((h * w, 3)))
            back = deserialize_patches(serialize_patches(x, t), t)
            np.testing.assert_array_equal(back.data, x.data)
            checked += 1
        dirs = ss2d_directions(h, w)
        seqs = [Tensor(rng.standard_normal((h * w, 3))) for _ in dirs]
        merged = cross_merge(seqs, dirs)
        oracle = np.zeros((h * w, 3))
        for s, t in zip(seqs, dirs):
            for i, patch in enumerate(t.order):
                oracle[patch] += s.data[i]
        np.testing.assert_array_equal(merged.data, oracle)
    return f"{checked} permutation round-trips + cross-merge oracle"


def _suite_metrics(rng) -> str:
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 200))
        t = rng.integers(0, 5, n)
        p = rng.integers(0, 5, n)
        r = weighted_metrics(confusion_matrix(t, p, 5))
        worst = max(worst, abs(r.weighted_sensitivity - r.accuracy))
        correct = float((t == p).mean())
        worst = max(worst, abs(r.accuracy - correct))
    if worst >= 1e-12:
        raise AssertionError(f"metric identity violated by {worst:.2e}")
    return f"identity gap {worst:.2e} over 200 random matrices"


SUITES = (
    ("scan equivalence", _suite_scan),
    ("gradient checks", _suite_gradients),
    ("traversal round-trips", _suite_traversals),
    ("metric identities", _suite_metrics),
)


def run(log_fn=print, seed: int = 0) -> int:
    """Run every suite; returns the number of failures."""
    failures = 0
    for index, (name, suite) in enumerate(SUITES):
        rng = np.random.default_rng([seed, index])
        start = time.perf_counter()
        try:
            detail = suite(rng)
            verdict = "ok"
        except AssertionError as exc:
            detail = str(exc)
            verdict = "FAIL"
            failures += 1
        log_fn(f"{verdict:4s} {name} ({time.perf_counter() - start:.2f}s): {detail}")
    log_fn(
        f"{len(SUITES) - failures}/{len(SUITES)} suites passed"
        if failures else f"all {len(SUITES)} suites passed"
    )
    return failures

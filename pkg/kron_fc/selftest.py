"""Fast invariant suite run by `kron-fc selftest`.

Each group is a function returning (description, passed) pairs; `run_selftest`
prints one line per group and a final "OK (N checks)" when everything passes.
Oracles come from numpy.linalg, never from the code under test.
"""
from __future__ import annotations

import logging
from typing import Callable, Iterator, Tuple

import numpy as np

from kron_fc import kfc
from kron_fc.linalg import Rng, kron, mac_counter, rearrange, vec
from kron_fc.nkp import nkp
from kron_fc.utils import FloatArray


logger = logging.getLogger(__name__)

Check = Tuple[str, bool]
Backward = Callable[
    [kfc.KfcSpec, kfc.KfcWeights, FloatArray, FloatArray],
    "tuple[kfc.KfcWeights, FloatArray, FloatArray]",
]


def _close(a: FloatArray, b: FloatArray, tol: float) -> bool:
    scale = max(1.0, float(np.abs(b).max(initial=0)))
    return bool(np.abs(np.asarray(a) - b).max(initial=0) <= tol * scale)


def check_kron(rng: Rng) -> Iterator[Check]:
    a, b = rng.normal((2, 3)), rng.normal((4, 2))
    c, d = rng.normal((3, 2)), rng.normal((2, 5))
    yield "mixed product", _close(kron(a, b) @ kron(c, d), np.kron(a @ c, b @ d), 1e-12)
    yield "transpose", _close(kron(a, b).T, np.kron(a.T, b.T), 0)
    x, b2 = rng.normal((2, 2)), rng.normal((2, 4))
    yield "vec identity", _close(vec(a.T @ x @ b2), kron(a.T, b2.T) @ vec(x), 1e-12)


def check_rearrangement(rng: Rng) -> Iterator[Check]:
    for m1, n1, m2, n2 in [(2, 3, 4, 2), (3, 3, 2, 5), (1, 4, 3, 1)]:
        m = rng.normal((m1 * m2, n1 * n2))
        a, b = rng.normal((m1, n1)), rng.normal((m2, n2))
        lhs = np.linalg.norm(m - np.kron(a, b))
        rhs = np.linalg.norm(rearrange(m, m1, n1, m2, n2) - np.outer(a, b))
        yield f"norm correspondence {m1}x{n1}*{m2}x{n2}", _close(lhs, rhs, 1e-12)


def check_nkp(rng: Rng) -> Iterator[Check]:
    shape = kfc.FactorShape(2, 2, 2, 2)
    for trial in range(5):
        m = rng.normal((4, 4))
        sigma = np.linalg.svd(rearrange(m, 2, 2, 2, 2), compute_uv=False)
        result = nkp(m, shape, 1)
        yield f"residual equals svd tail #{trial}", _close(
            result.residual_fro**2, np.sum(sigma[1:] ** 2), 1e-10
        )
        a, b = result.weights.factors[0]
        best = np.linalg.norm(m - np.kron(a[0], b[0]))
        nudged = np.linalg.norm(m - np.kron(a[0] + 1e-3 * rng.normal((2, 2)), b[0]))
        yield f"perturbation does not improve #{trial}", bool(nudged >= best - 1e-12)


def _toy_specs() -> list[kfc.KfcSpec]:
    return [
        kfc.make_spec_kfcm(6, 4, 2, 2, rank=2),
        kfc.make_spec_kfcm(7, 5, pad=True),
        kfc.make_spec_formulation("I", (2, 2, 3, 4), (2, 1, 2)),
        kfc.make_spec_formulation("II", (2, 2, 3, 6), (3, 2), rank=2),
        kfc.make_spec_formulation("III", (2, 2, 3, 6), (2, 3)),
        kfc.make_spec_formulation("IV", (2, 2, 3, 4), (2, 2), rank=3),
        kfc.make_spec_combined(
            (2, 2, 3, 4), [("II", (2, 2), 1), ("III", (4, 1), 2), ("IV", (1, 4), 1)]
        ),
    ]


def check_forward(rng: Rng) -> Iterator[Check]:
    for spec in _toy_specs():
        weights = kfc.init_weights(spec, rng)
        weights.bias[...] = rng.normal(spec.out_dim)
        x = rng.normal((3, spec.in_dim))
        dense = x @ kfc.materialize(spec, weights) + weights.bias
        out = kfc.forward(spec, weights, x)
        yield f"forward {spec.describe()}", _close(out, dense, 1e-10)


def check_macs(rng: Rng) -> Iterator[Check]:
    for spec in _toy_specs():
        weights = kfc.init_weights(spec, rng)
        x = rng.normal((2, spec.in_dim))
        with mac_counter() as tally:
            kfc.forward(spec, weights, x)
        yield f"macs {spec.describe()}", tally.macs == kfc.count_macs(spec, 2).macs


def check_gradients(rng: Rng, backward: Backward = kfc.backward) -> Iterator[Check]:
    eps = 1e-6
    for spec in _toy_specs():
        weights = kfc.init_weights(spec, rng)
        x = rng.normal((2, spec.in_dim))
        upstream = rng.normal((2, spec.out_dim))

        def loss() -> float:
            return float(np.sum(kfc.forward(spec, weights, x) * upstream))

        grads, grad_x, _ = backward(spec, weights, x, upstream)
        ok = True
        for arr, grad in zip(weights.arrays() + [x], grads.arrays() + [grad_x]):
            flat, flat_grad = arr.reshape(-1), np.asarray(grad).reshape(-1)
            for idx in range(0, flat.size, max(1, flat.size // 5)):
                saved = flat[idx]
                flat[idx] = saved + eps
                up = loss()
                flat[idx] = saved - eps
                down = loss()
                flat[idx] = saved
                numeric = (up - down) / (2 * eps)
                ok &= abs(numeric - flat_grad[idx]) <= 1e-4 * max(1.0, abs(numeric))
        yield f"gradients {spec.describe()}", bool(ok)


def run_selftest(
    out: Callable[[str], None] = print,
    seed: int = 2024,
    backward: Backward = kfc.backward,
) -> bool:
    """Run every group and report per-group results through `out`.

    Args:
        out (callable, optional): line sink. Defaults to print.
        seed (int, optional): seed of the random test matrices. Defaults to 2024.
        backward (callable, optional): KFC backward to verify; tests swap in a
            broken one to see the gradient group fail. Defaults to kfc.backward.

    Returns:
        bool: True iff all checks passed.
    """
    rng = Rng(seed)
    groups: list[tuple[str, Callable[[], Iterator[Check]]]] = [
        ("kron identities", lambda: check_kron(rng)),
        ("rearrangement", lambda: check_rearrangement(rng)),
        ("nkp optimality", lambda: check_nkp(rng)),
        ("forward equivalence", lambda: check_forward(rng)),
        ("mac accounting", lambda: check_macs(rng)),
        ("gradients", lambda: check_gradients(rng, backward)),
    ]
    n_checks = n_failed = 0
    for name, group in groups:
        try:
            results = list(group())
        except Exception as exc:  # a crash fails the group, the suite goes on
            logger.debug("selftest group %s raised", name, exc_info=True)
            results = [(f"{type(exc).__name__}: {exc}", False)]
        failed = [desc for desc, passed in results if not passed]
        n_checks += len(results)
        n_failed += len(failed)
        status = "pass" if not failed else "FAIL"
        out(f"{name}: {status} ({len(results) - len(failed)}/{len(results)})")
        for desc in failed:
            out(f"  failed: {desc}")
    if n_failed:
        out(f"FAILED ({n_failed} of {n_checks} checks)")
        return False
    out(f"OK ({n_checks} checks)")
    return True

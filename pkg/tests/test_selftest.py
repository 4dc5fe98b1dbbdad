import pytest

from kron_fc import kfc
from kron_fc.selftest import run_selftest


def test_selftest_passes():
    lines = []
    assert run_selftest(lines.append)
    assert lines == [
        "kron identities: pass (3/3)",
        "rearrangement: pass (3/3)",
        "nkp optimality: pass (10/10)",
        "forward equivalence: pass (7/7)",
        "mac accounting: pass (7/7)",
        "gradients: pass (7/7)",
        "OK (37 checks)",
    ]


@pytest.mark.parametrize("seed", [0, 1, 99])
def test_selftest_seeds(seed):
    assert run_selftest(lambda line: None, seed)


def flipped_backward(spec, weights, x, upstream):
    grads, grad_x, rest = kfc.backward(spec, weights, x, upstream)
    factors = [[-arr for arr in group] for group in grads.factors]
    return kfc.KfcWeights(factors, -grads.bias), -grad_x, rest


def test_selftest_catches_wrong_gradients():
    lines = []
    assert not run_selftest(lines.append, backward=flipped_backward)
    assert "gradients: FAIL (0/7)" in lines
    assert "forward equivalence: pass (7/7)" in lines
    assert lines[-1] == "FAILED (7 of 37 checks)"
    assert sum(line.startswith("  failed: gradients ") for line in lines) == 7


def test_selftest_survives_crashing_group():
    def crash(*args):
        raise RuntimeError("boom")

    lines = []
    assert not run_selftest(lines.append, backward=crash)
    assert "gradients: FAIL (0/1)" in lines
    assert "  failed: RuntimeError: boom" in lines

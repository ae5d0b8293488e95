"""Shared test utilities: taped-vs-finite-difference gradient harness."""

from __future__ import annotations

import numpy as np

from eqdec import tensor as tc


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def run_taped(fn, params):
    """Evaluate fn({name: Tensor}) -> scalar Tensor on a fresh tape.

    Returns (value, grads-by-name, tape).
    """
    tape = tc.Tape()
    with tc.use_tape(tape):
        leaves = {k: tc.leaf(v) for k, v in params.items()}
        out = fn(leaves)
        grads = tc.backward(out, tape)
    by_name = {k: grads[t.node] for k, t in leaves.items()}
    return float(out.data), by_name, tape


def run_plain(fn, params):
    """Evaluate the same fn on constants, with no tape."""
    consts = {k: tc.constant(v) for k, v in params.items()}
    return float(fn(consts).data)


def check_grads(fn, params, eps=1e-6, rtol=1e-5):
    """Assert taped backward matches central finite differences."""
    _, analytic, _ = run_taped(fn, params)
    fd = tc.finite_diff_grad(lambda p: run_plain(fn, p), params, eps=eps)
    for name in params:
        err = rel_err(analytic[name], fd[name], floor=1e-6)
        assert err < rtol, f"grad mismatch for {name}: rel err {err:.3e}"

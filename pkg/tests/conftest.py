"""Shared reference implementations for the test suite.

Everything here is written for clarity, not speed: nested loops and
closed-form math that the production code must agree with.
"""

import numpy as np
import pytest

from fedoap.autodiff import Tape, Tensor


def conv2d_reference(x, w, b=None, stride=1, pad=1):
    """Nested-loop 2-D cross-correlation. x: [B,Cin,H,W], w: [Cout,Cin,kh,kw]."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[n, ci, i * stride + di, j * stride + dj] \
                                    * w[co, ci, di, dj]
                    out[n, co, i, j] = acc
            if b is not None:
                out[n, co] += b[co]
    return out


def attention_reference(q, k, v, heads):
    """Per-head scaled dot-product attention, one query row at a time.

    q: [Nq, D], k/v: [Nk, D]; returns [Nq, D] with heads concatenated.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nq, d = q.shape
    dh = d // heads
    out = np.zeros((nq, d))
    for h in range(heads):
        qs = q[:, h * dh:(h + 1) * dh]
        ks = k[:, h * dh:(h + 1) * dh]
        vs = v[:, h * dh:(h + 1) * dh]
        for i in range(nq):
            logits = ks @ qs[i] / np.sqrt(dh)
            logits = logits - logits.max()
            weights = np.exp(logits)
            weights = weights / weights.sum()
            out[i, h * dh:(h + 1) * dh] = weights @ vs
    return out


def dice_reference(pred_mask, true_mask):
    """Set-overlap Dice on binary arrays, empty/empty counted as 1."""
    pred = set(zip(*np.nonzero(np.asarray(pred_mask))))
    true = set(zip(*np.nonzero(np.asarray(true_mask))))
    if not pred and not true:
        return 1.0
    return 2.0 * len(pred & true) / (len(pred) + len(true))


def finite_difference(f, arrays, index, h=1e-6):
    """Central-difference gradient of scalar f(*arrays) wrt arrays[index]."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(*arrays)
        flat[i] = orig - h
        down = f(*arrays)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def check_gradients(op, arrays, h=1e-6, rtol=1e-6, atol=1e-9):
    """Compare tape gradients of mean(op(*leaves)) against finite differences.

    `op` maps Tensors to a Tensor; the output is averaged down to a
    scalar so any output shape works.
    """
    from fedoap.autodiff import mean_reduce

    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    root = mean_reduce(op(*leaves))
    grads = tape.backward(root)

    def scalar_f(*vals):
        consts = [Tensor(v) for v in vals]
        return float(mean_reduce(op(*consts)).values)

    for idx, leaf in enumerate(leaves):
        numeric = finite_difference(scalar_f, arrays, idx, h=h)
        analytic = grads.wrt(leaf)
        np.testing.assert_allclose(
            analytic, numeric, rtol=rtol, atol=atol,
            err_msg=f"gradient mismatch on input {idx}")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

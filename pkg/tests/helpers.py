"""Shared test utilities: tolerance assertions and finite-difference checks."""

import numpy as np

from spxmamba import engine
from spxmamba.superpixel import SuperpixelMap


def sp_from_ids(ids):
    """Wrap a raw id raster as a superpixel map (assumes ids already compact)."""
    ids = np.asarray(ids, dtype=np.int32)
    n = int(ids.max()) + 1
    return SuperpixelMap(ids=ids, n_sp=n,
                         sizes=np.bincount(ids.ravel(), minlength=n))


def fd_param_gradients(build_loss, tensors, eps=1e-2, rtol=1e-2, floor=1e-3,
                       label="param"):
    """Backprop through build_loss() once, then FD every tensor element.

    build_loss must rebuild the graph from the tensors' current .data on
    every call; it is invoked outside any tape for the FD evaluations.
    """
    for t in tensors:
        t.zero_grad()
    with engine.Tape() as tape:
        tape.backward(build_loss())
    grads = [t.grad.copy() for t in tensors]
    for k, (t, g) in enumerate(zip(tensors, grads)):
        assert g is not None, f"{label} {k}: no gradient"
        flat = t.data.reshape(-1)
        fd = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = np.float32(orig + eps)
            fp = float(build_loss().data)
            flat[i] = np.float32(orig - eps)
            fm = float(build_loss().data)
            flat[i] = orig
            fd[i] = (fp - fm) / (2 * eps)
        assert_close(g.reshape(-1), fd, rtol=rtol, floor=floor,
                     label=f"{label} {k}")


def assert_close(actual, expected, rtol=1e-3, floor=1e-4, label="value"):
    """Mixed absolute/relative agreement: |a-e| <= floor + rtol*max(|a|,|e|)."""
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    assert a.shape == e.shape, f"{label}: shape {a.shape} vs {e.shape}"
    err = np.abs(a - e)
    tol = floor + rtol * np.maximum(np.abs(a), np.abs(e))
    if not np.all(err <= tol):
        worst = np.unravel_index(np.argmax(err - tol), err.shape)
        raise AssertionError(
            f"{label}: mismatch at {worst}: {a[worst]:.6g} vs {e[worst]:.6g} "
            f"(err {err[worst]:.3e}, tol {tol[worst]:.3e})")


def projection_weights(shape):
    """Deterministic O(1) weights used to reduce an op output to a scalar."""
    n = int(np.prod(shape)) if shape else 1
    w = np.cos(np.arange(1, n + 1, dtype=np.float64) * 0.7) + 0.1
    return w.reshape(shape).astype(np.float32)


def scalar_loss(op, arrays, w):
    """Forward-only weighted sum of op(*arrays), as a python float."""
    ts = [engine.Tensor(a) for a in arrays]
    out = op(*ts)
    return float(np.sum(out.data.astype(np.float64) * w))


def fd_gradients(op, arrays, w, eps):
    """Central finite differences of scalar_loss wrt every element of every array."""
    grads = []
    for arr in arrays:
        g = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = np.float32(orig + eps)
            xp = flat[i]
            fp = scalar_loss(op, arrays, w)
            flat[i] = np.float32(orig - eps)
            xm = flat[i]
            fm = scalar_loss(op, arrays, w)
            flat[i] = orig
            gflat[i] = (fp - fm) / (float(xp) - float(xm))
        grads.append(g)
    return grads


def check_op_gradients(op, arrays, eps=1e-2, rtol=1e-3, floor=1e-4, label="op"):
    """Compare tape gradients of a weighted-sum loss against finite differences."""
    arrays = [np.ascontiguousarray(a, dtype=np.float32) for a in arrays]
    probe = op(*[engine.Tensor(a) for a in arrays])
    w = projection_weights(probe.shape)

    ts = [engine.parameter(a.copy()) for a in arrays]
    with engine.Tape() as tape:
        out = op(*ts)
        loss = engine.reduce_sum(engine.mul(out, engine.Tensor(w)))
        tape.backward(loss)
    fd = fd_gradients(op, [a.copy() for a in arrays], w, eps)
    for k, (t, ref) in enumerate(zip(ts, fd)):
        assert t.grad is not None, f"{label}: input {k} got no gradient"
        assert_close(t.grad, ref, rtol=rtol, floor=floor, label=f"{label} input {k}")

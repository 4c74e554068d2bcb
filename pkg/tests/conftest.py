"""Shared test helpers: finite-difference gradient checking."""

import numpy as np

from medres import autodiff as ad

FD_STEP = 1e-5


def fd_gradient(store, build_loss, name, h=FD_STEP):
    """Central finite differences of build_loss() w.r.t. one parameter."""
    base = store.value(name).copy()
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        bumped = base.copy()
        bumped[ix] = base[ix] + h
        store.set_value(name, bumped)
        plus = float(build_loss().value)
        bumped[ix] = base[ix] - h
        store.set_value(name, bumped)
        minus = float(build_loss().value)
        grad[ix] = (plus - minus) / (2.0 * h)
    store.set_value(name, base)
    return grad


def max_rel_err(analytic, numeric):
    """Max coordinatewise |a - n| / max(1, |a|, |n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(store, build_loss, h=FD_STEP, names=None):
    """Backward vs finite differences for every (or selected) parameter."""
    loss = build_loss()
    grads = ad.backward(loss)
    worst = 0.0
    for name in (names if names is not None else store.names()):
        worst = max(worst, max_rel_err(grads[name], fd_gradient(store, build_loss, name, h=h)))
    return worst


def fd_safe(loss_var, h=FD_STEP, margin=10.0):
    """True when no recorded kink sits within `margin*h` of the FD window.

    Central differences are meaningless across a ReLU corner or at the
    cross-entropy clamp boundary; checks evaluate at generic points only.
    """
    tape = loss_var.tape
    for node in tape._nodes[: loss_var.index + 1]:
        if node.op == "relu":
            x = tape._nodes[node.input_ids[0]].value
            if x.size and np.min(np.abs(x)) < margin * h:
                return False
        elif node.op == "bce":
            p = tape._nodes[node.input_ids[0]].value
            if p.min() < 1e-6 or p.max() > 1.0 - 1e-6:
                return False
    return True


def randomize_store(store, rng, scale=0.4):
    """Re-draw every parameter so kinks sit at generic positions."""
    for name in store.names():
        store.set_value(name, rng.normal(0.0, scale, size=store.value(name).shape))

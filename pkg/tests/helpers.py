"""Shared test utilities: finite-difference gradient oracle."""

import numpy as np

from mmasr.autodiff import Parameter, Tape


def finite_difference(f, arrays, h=1e-5):
    """Central-difference gradients of scalar ``f()`` w.r.t. each array.

    Mutates the arrays in place element by element, so ``f`` must read them
    on every call. Forward evaluations only; independent of any backward rule.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gf = arr.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(g, g_ref):
    """max |g - g_ref| / max(1, |g|, |g_ref|), elementwise."""
    g, g_ref = np.asarray(g), np.asarray(g_ref)
    denom = np.maximum(1.0, np.maximum(np.abs(g), np.abs(g_ref)))
    if g.size == 0:
        return 0.0
    return float(np.max(np.abs(g - g_ref) / denom))


def check_grads(build_loss, arrays, h=1e-5, tol=1e-4):
    """Compare tape gradients of ``build_loss(*params)`` against central differences.

    ``arrays`` must be float64 and are wrapped as Parameters sharing their
    memory, so the finite-difference probe sees every perturbation.
    """
    for a in arrays:
        assert a.dtype == np.float64, "gradient checks run in f64"
    params = [Parameter(f"p{i}", a, "decoder") for i, a in enumerate(arrays)]
    with Tape() as tape:
        loss = build_loss(*params)
    grads = tape.backward(loss)

    fd = finite_difference(lambda: build_loss(*params).item(), arrays, h=h)
    worst = 0.0
    for i, (p, g_ref) in enumerate(zip(params, fd)):
        g = grads[p.name].data
        err = max_rel_err(g, g_ref)
        assert err < tol, f"param {i}: max rel grad err {err:.3e} >= {tol}"
        worst = max(worst, err)
    return worst


def rng_for(seed):
    return np.random.default_rng(seed)

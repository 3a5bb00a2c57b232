"""Shared test helpers: finite-difference gradient checking.

``numeric_grad``/``check_grad`` probe array-valued losses; higher-level
helpers randomize module parameters and spot-check analytic gradients on a
random slice of parameter entries (full finite differences over every weight
would be quadratic in network size).
"""

import numpy as np

import voxdiff.nn as nn


def numeric_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar-valued f at x (in-place probing)."""
    g = np.zeros_like(x)
    flat, gf = x.ravel(), g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def check_grad(make_loss, x0, rtol=1e-6, atol=1e-8, eps=1e-6):
    """Compare tape gradient of make_loss(Tensor) against numeric_grad.

    For losses linear in the probed variable, pass a large ``eps`` (the
    truncation term vanishes and roundoff shrinks with 1/eps).
    """
    t = nn.tensor(x0.copy(), requires_grad=True)
    loss = make_loss(t)
    loss.backward()
    analytic = t.grad.copy()
    numeric = numeric_grad(lambda arr: float(make_loss(nn.tensor(arr)).data), x0,
                           eps=eps)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def randomize_params(module, rng, scale=0.05):
    """Overwrite every parameter with N(0, scale) noise (keeps dtypes/shapes).

    Useful when zero-initialized layers would otherwise hide gradients or
    sensitivities that tests need to observe.
    """
    state = module.state_dict()
    module.load_state_dict(
        {k: rng.normal(0.0, scale, v.shape) for k, v in state.items()})


def param_slice_gradcheck(module, make_loss, rng, n_entries=16, eps=1e-4,
                          rtol=1e-4, atol=1e-8):
    """Check analytic gradients on a random slice of parameter entries.

    ``make_loss`` is a zero-argument callable returning a scalar Tensor built
    from the module's current parameters. Central finite differences probe
    ``n_entries`` randomly chosen weight entries across all parameters.
    Returns the worst relative error seen.
    """
    params = module.parameters()
    module.zero_grad()
    loss = make_loss()
    loss.backward()
    grads = [None if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    offsets = np.cumsum(sizes)
    picks = rng.choice(total, size=min(n_entries, total), replace=False)

    with nn.no_grad():
        worst = 0.0
        for flat_index in picks:
            pi = int(np.searchsorted(offsets, flat_index, side="right"))
            local = int(flat_index - (offsets[pi - 1] if pi else 0))
            p = params[pi]
            flat = p.data.ravel()
            orig = flat[local]
            flat[local] = orig + eps
            fp = float(make_loss().data)
            flat[local] = orig - eps
            fm = float(make_loss().data)
            flat[local] = orig
            numeric = (fp - fm) / (2.0 * eps)
            analytic = 0.0 if grads[pi] is None else float(grads[pi].ravel()[local])
            denom = max(abs(analytic), abs(numeric))
            if denom < atol:
                continue
            rel = abs(analytic - numeric) / denom
            worst = max(worst, rel)
            assert rel < rtol, (
                f"gradient mismatch at param {pi} entry {local}: "
                f"analytic {analytic:.3e} vs numeric {numeric:.3e} (rel {rel:.2e})")
    return worst

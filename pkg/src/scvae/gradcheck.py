"""Central finite-difference checks for the autodiff primitives and the full ELBO.

Errors are norm-wise per tensor, ``|a - n|_inf / max(|a|_inf, |n|_inf, floor)``,
so coordinates that a ReLU zeroes out do not inflate the ratio.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .models import build
from .vae import _elbo_graph, elbo_and_grads

STEP = 1e-5
ELBO_STEP = 1e-6  # smaller than STEP: batch norm amplifies perturbations into relu kinks
FLOOR = 1e-7


def rel_error(analytic, numeric, floor: float = FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), floor)
    return float(np.max(np.abs(a - n), initial=0.0) / scale)


def numeric_grad(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Coordinate-wise central differences of scalar f at x (x is perturbed in place, then restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * step)
    return g


def _check_op(build_out, inputs, rng) -> float:
    """Gradient of <op(inputs), R> against finite differences, worst tensor."""
    nodes = [ad.leaf(v) for v in inputs]
    out = build_out(nodes)
    proj = rng.standard_normal(out.value.shape)
    loss = ad.sum_(_mul_const(out, proj))
    grads = ad.backward(loss, nodes)

    def f():
        o = build_out([ad.constant(v) for v in inputs])
        return float(np.sum(o.value * proj))

    return max(rel_error(grads[n], numeric_grad(f, v)) for n, v in zip(nodes, inputs))


def _mul_const(node, c):
    # elementwise product with a constant via the dense-free route: reshape, scale per element
    flat = ad.reshape(node, (1, node.value.size))
    w = np.diag(c.reshape(-1))
    return ad.dense(flat, ad.constant(w), ad.constant(np.zeros(c.size)))


def primitive_errors(seed: int) -> dict:
    """Worst relative error per primitive on small random instances."""
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    errs = {}
    for pad in ("SAME", "VALID"):
        k = int(rng.choice([1, 3]))
        x, w, b = r((2, 4, 3, 2)), r((k, k, 2, 3)), r(3)
        errs[f"conv2d[{pad}]"] = _check_op(lambda n: ad.conv2d(n[0], n[1], n[2], pad), [x, w, b], rng)
        xt, wt = r((2, 3, 3, 3)), r((k, k, 2, 3))
        errs[f"conv2d_transpose[{pad}]"] = _check_op(
            lambda n: ad.conv2d_transpose(n[0], n[1], n[2], pad), [xt, wt, b[:2]], rng
        )
    errs["dense"] = _check_op(lambda n: ad.dense(n[0], n[1], n[2]), [r((3, 5)), r((5, 4)), r(4)], rng)
    # keep inputs away from the kink so the central difference never straddles it
    xr = r((3, 4))
    xr = np.where(np.abs(xr) < 1e-3, 0.5, xr)
    errs["relu"] = _check_op(lambda n: ad.relu(n[0]), [xr], rng)
    for train in (True, False):
        state = ad.BatchNormState(r(3) * 0.1, np.exp(r(3) * 0.1))

        def bn(n, train=train, state=state):
            s = ad.BatchNormState(state.running_mean.copy(), state.running_var.copy())
            return ad.batchnorm(n[0], n[1], n[2], s, train)

        errs[f"batchnorm[{'train' if train else 'infer'}]"] = _check_op(
            bn, [r((4, 2, 2, 3)), 1.0 + 0.1 * r(3), r(3)], rng
        )
    errs["reshape"] = _check_op(lambda n: ad.reshape(n[0], (2, 6)), [r((3, 4))], rng)
    errs["concat"] = _check_op(lambda n: ad.concat([n[0], n[1]], -1), [r((2, 2, 2, 3)), r((2, 2, 2, 1))], rng)
    errs["slice_last"] = _check_op(lambda n: ad.slice_last(n[0], 1, 4), [r((3, 6))], rng)
    xc = rng.uniform(-3, 3, (4, 5))
    xc = np.where(np.abs(np.abs(xc) - 2.0) < 1e-3, 0.0, xc)
    errs["clip"] = _check_op(lambda n: ad.clip(n[0], -2.0, 2.0), [xc], rng)
    eps = r((3, 4))
    errs["reparameterize"] = _check_op(lambda n: ad.reparameterize(n[0], n[1], eps), [r((3, 4)), r((3, 4))], rng)
    xd = r((3, 5))
    errs["gaussian_log_likelihood"] = _check_op(
        lambda n: ad.gaussian_log_likelihood(xd, n[0], n[1]), [r((3, 5)), r((3, 5))], rng
    )
    errs["kl_divergence"] = _check_op(lambda n: ad.kl_divergence(n[0], n[1]), [r((3, 4)), r((3, 4))], rng)
    errs["add"] = _check_op(lambda n: ad.add(n[0], n[1]), [r((3, 4)), r((3, 4))], rng)
    errs["scale"] = _check_op(lambda n: ad.scale(n[0], -0.7), [r((3, 4))], rng)
    errs["mean"] = _check_op(lambda n: ad.mean(n[0]), [r((5,))], rng)
    errs["sum"] = _check_op(lambda n: ad.sum_(n[0]), [r((2, 3))], rng)
    return errs


MICRO = {"tw": 4, "num_features": 3, "latent_dim": 2}


def _pattern(run):
    """Run ``run()`` and return (result, activation pattern of every relu/clip)."""
    masks = []

    def watch(node):
        if node.op in ("relu", "clip"):
            masks.append(node.value == node.parents[0].value)

    with ad.observe(watch):
        out = run()
    return out, masks


def _same(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def elbo_errors(arch_name: str, seed: int, batch: int = 4, directions: int = 1, max_draws: int = 50) -> dict:
    """Directional finite-difference check of the full training-mode ELBO, per parameter tensor.

    For every tensor the analytic gradient is projected on a random unit
    direction supported on that tensor and compared with the central
    difference of the loss along it. The error is scaled by the norm of the
    tensor's gradient, floored at ``1e-6`` of the whole gradient's norm: a
    bias feeding a training-mode batch norm has a structurally ~0 gradient
    that sits below the round-off of any difference quotient. A direction whose +/- step flips any relu or clip
    branch straddles a kink where the difference quotient is not a
    derivative estimate; such directions are redrawn.
    """
    rng = np.random.default_rng(seed)
    model = build(arch_name, MICRO["tw"], MICRO["num_features"], MICRO["latent_dim"], seed=seed)
    for k, v in model.params.items():
        # move batch-norm affine terms and biases off their trivial init so every path is exercised
        if k.endswith("gamma"):
            model.params[k] = 1.0 + 0.2 * rng.standard_normal(v.shape)
        elif k.endswith("beta") or k.endswith("bias"):
            model.params[k] = 0.2 * rng.standard_normal(v.shape)
    x = rng.standard_normal((batch, MICRO["tw"], MICRO["num_features"]))
    noise = rng.standard_normal((1, batch, MICRO["latent_dim"]))
    (_, _, grads), base = _pattern(lambda: elbo_and_grads(model.copy(), x, noise, train=True))

    def loss_at(params):
        P = {k: ad.constant(v) for k, v in params.items()}
        return _pattern(lambda: float(_elbo_graph(model.copy(), x, noise, P, True)[0].value))

    floor = max(FLOOR, 1e-6 * float(np.sqrt(sum(np.sum(g * g) for g in grads.values()))))
    errs = {}
    for name, g in grads.items():
        worst, done = 0.0, 0
        for _ in range(max_draws):
            v = rng.standard_normal(g.shape)
            v /= np.linalg.norm(v)
            up = dict(model.params)
            down = dict(model.params)
            up[name] = model.params[name] + ELBO_STEP * v
            down[name] = model.params[name] - ELBO_STEP * v
            f_up, m_up = loss_at(up)
            f_down, m_down = loss_at(down)
            if not (_same(m_up, base) and _same(m_down, base)):
                continue
            numeric = (f_up - f_down) / (2.0 * ELBO_STEP)
            analytic = float(np.sum(g * v))
            scale = max(abs(analytic), abs(numeric), float(np.linalg.norm(g)), floor)
            worst = max(worst, abs(analytic - numeric) / scale)
            done += 1
            if done == directions:
                break
        if done < directions:
            raise RuntimeError(f"{name}: no kink-free direction in {max_draws} draws")
        errs[name] = worst
    return errs

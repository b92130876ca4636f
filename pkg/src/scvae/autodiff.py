"""Small reverse-mode autodiff engine over numpy arrays.

Only the primitives the two VAE architectures need are supported. Arrays use
the [batch, height, width, channels] layout throughout; convolutions are
stride 1 with SAME or VALID padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PRIMITIVES = frozenset(
    {
        "conv2d",
        "conv2d_transpose",
        "dense",
        "relu",
        "batchnorm",
        "reshape",
        "concat",
        "slice_last",
        "clip",
        "reparameterize",
        "gaussian_log_likelihood",
        "kl_divergence",
        "add",
        "scale",
        "mean",
        "sum",
    }
)

LOG_2PI = float(np.log(2.0 * np.pi))


class ShapeError(ValueError):
    pass


class UnsupportedPrimitiveError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class Node:
    """A value in the recorded computation together with how to differentiate it."""

    __slots__ = ("value", "parents", "vjp", "op", "name", "requires_grad")

    def __init__(self, value, parents=(), vjp=None, op="leaf", name=None, requires_grad=True):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape})"


def leaf(value, name=None) -> Node:
    return Node(np.asarray(value), name=name)


def constant(value) -> Node:
    return Node(np.asarray(value), op="const", requires_grad=False)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


_observers = []


class observe:
    """Context manager calling ``fn(node)`` on every recorded operation (used by gradient checks)."""

    def __init__(self, fn):
        self.fn = fn

    def __enter__(self):
        _observers.append(self.fn)
        return self

    def __exit__(self, *exc):
        _observers.remove(self.fn)


def record(op: str, value, parents, vjp) -> Node:
    """Append an operation to the graph; unknown operations are refused here."""
    if op not in PRIMITIVES:
        raise UnsupportedPrimitiveError(f"primitive {op!r} has no gradient rule")
    requires = any(p.requires_grad for p in parents)
    node = Node(value, tuple(parents), vjp, op=op, requires_grad=requires)
    for fn in _observers:
        fn(node)
    return node


def backward(loss: Node, wrt=None) -> dict:
    """Gradients of a scalar ``loss`` with respect to every reachable leaf.

    Returns a mapping ``leaf node -> gradient array``. When ``wrt`` is given
    only those leaves are returned (zeros if unreachable).
    """
    if np.size(loss.value) != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {np.shape(loss.value)}")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.value)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.requires_grad:
                leaves[id(node)] = (node, g)
            continue
        needs = tuple(p.requires_grad for p in node.parents)
        for p, pg in zip(node.parents, node.vjp(g, needs)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg

    if wrt is None:
        return {node: g for node, g in leaves.values()}
    out = {}
    for node in wrt:
        hit = leaves.get(id(node))
        out[node] = hit[1] if hit is not None else np.zeros_like(node.value)
    return out


# ---------------------------------------------------------------------------
# convolution kernels (plain arrays)
# ---------------------------------------------------------------------------


def same_pads(k: int) -> tuple[int, int]:
    """Zero padding for a stride-1 SAME convolution; odd totals put the extra zero high."""
    total = k - 1
    lo = total // 2
    return lo, total - lo


def _pads(k: int, padding: str) -> tuple[int, int]:
    if padding == "SAME":
        return same_pads(k)
    if padding == "VALID":
        return 0, 0
    raise ValueError(f"padding must be SAME or VALID, got {padding!r}")


def _pad(x, lo, hi):
    if lo == 0 and hi == 0:
        return x
    return np.pad(x, ((0, 0), (lo, hi), (lo, hi), (0, 0)))


def _patches(xp, k, ho, wo):
    """im2col: (B*ho*wo, k*k*Cin) rows ordered like a (k, k, Cin, Cout) kernel."""
    b, cin = xp.shape[0], xp.shape[3]
    cols = np.empty((b, ho, wo, k, k, cin), dtype=xp.dtype)
    for a in range(k):
        for c in range(k):
            cols[:, :, :, a, c, :] = xp[:, a : a + ho, c : c + wo, :]
    return cols.reshape(b * ho * wo, k * k * cin)


def _correlate(xp, w):
    # xp: (B, Hp, Wp, Cin) already padded; w: (k, k, Cin, Cout)
    k = w.shape[0]
    b, hp, wp, cin = xp.shape
    ho, wo = hp - k + 1, wp - k + 1
    if k == 1:
        return (xp.reshape(-1, cin) @ w[0, 0]).reshape(b, ho, wo, w.shape[3])
    out = _patches(xp, k, ho, wo) @ w.reshape(k * k * cin, w.shape[3])
    return out.reshape(b, ho, wo, w.shape[3])


def conv_forward(x, w, padding="SAME"):
    """Stride-1 cross-correlation of x (B,H,W,Cin) with w (k,k,Cin,Cout), no bias."""
    k = w.shape[0]
    if x.shape[-1] != w.shape[2]:
        raise ShapeError(f"input has {x.shape[-1]} channels but kernel expects {w.shape[2]}")
    if padding == "VALID" and (x.shape[1] < k or x.shape[2] < k):
        raise ShapeError(
            f"VALID convolution needs spatial extent >= {k}, got {x.shape[1]}x{x.shape[2]}"
        )
    lo, hi = _pads(k, padding)
    return _correlate(_pad(x, lo, hi), w)


def conv_input_adjoint(g, w, padding="SAME"):
    """Adjoint of :func:`conv_forward` in its input: maps (B,H',W',Cout) back to Cin channels."""
    k = w.shape[0]
    if g.shape[-1] != w.shape[3]:
        raise ShapeError(f"input has {g.shape[-1]} channels but kernel expects {w.shape[3]}")
    lo, hi = _pads(k, padding)
    wf = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
    return _correlate(_pad(g, k - 1 - lo, k - 1 - hi), wf)


def conv_kernel_grad(x, g, k, padding="SAME"):
    """d<conv_forward(x, w), g>/dw for a k x k kernel, shape (k, k, Cin, Cout)."""
    cin = x.shape[-1]
    ho, wo, cout = g.shape[1], g.shape[2], g.shape[3]
    lo, hi = _pads(k, padding)
    xp = _pad(x, lo, hi)
    g2 = g.reshape(-1, cout)
    if k == 1:
        return (xp.reshape(-1, cin).T @ g2).reshape(1, 1, cin, cout)
    return (_patches(xp, k, ho, wo).T @ g2).reshape(k, k, cin, cout)


# ---------------------------------------------------------------------------
# differentiable primitives
# ---------------------------------------------------------------------------


def conv2d(x, kernel, bias, padding="SAME") -> Node:
    x, kernel, bias = _as_node(x), _as_node(kernel), _as_node(bias)
    k = kernel.value.shape[0]
    out = conv_forward(x.value, kernel.value, padding) + bias.value

    def vjp(g, needs):
        gx = conv_input_adjoint(g, kernel.value, padding) if needs[0] else None
        gk = conv_kernel_grad(x.value, g, k, padding) if needs[1] else None
        gb = g.sum(axis=(0, 1, 2)) if needs[2] else None
        return gx, gk, gb

    return record("conv2d", out, (x, kernel, bias), vjp)


def conv2d_transpose(x, kernel, bias, padding="SAME") -> Node:
    """Transposed convolution; ``kernel`` is (k, k, out_channels, in_channels).

    With a shared kernel this is exactly the input-adjoint of :func:`conv2d`.
    """
    x, kernel, bias = _as_node(x), _as_node(kernel), _as_node(bias)
    k = kernel.value.shape[0]
    out = conv_input_adjoint(x.value, kernel.value, padding) + bias.value

    def vjp(g, needs):
        gx = conv_forward(g, kernel.value, padding) if needs[0] else None
        gk = conv_kernel_grad(g, x.value, k, padding) if needs[1] else None
        gb = g.sum(axis=(0, 1, 2)) if needs[2] else None
        return gx, gk, gb

    return record("conv2d_transpose", out, (x, kernel, bias), vjp)


def dense(x, weights, bias) -> Node:
    x, weights, bias = _as_node(x), _as_node(weights), _as_node(bias)
    if x.value.ndim != 2 or x.value.shape[1] != weights.value.shape[0]:
        raise ShapeError(
            f"dense expects (batch, {weights.value.shape[0]}) input, got {x.value.shape}"
        )
    out = x.value @ weights.value + bias.value

    def vjp(g, needs):
        gx = g @ weights.value.T if needs[0] else None
        gw = x.value.T @ g if needs[1] else None
        gb = g.sum(axis=0) if needs[2] else None
        return gx, gw, gb

    return record("dense", out, (x, weights, bias), vjp)


def relu(x) -> Node:
    x = _as_node(x)
    mask = x.value > 0
    out = np.where(mask, x.value, 0.0).astype(x.value.dtype, copy=False)

    def vjp(g, needs):
        return (g * mask,)

    return record("relu", out, (x,), vjp)


@dataclass
class BatchNormState:
    """Running statistics of one batch-normalization layer (gamma/beta are trainable params)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    decay: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, decay: float = 0.9, epsilon: float = 1e-5):
        return cls(np.zeros(channels), np.ones(channels), decay, epsilon)


def batchnorm_infer(x, gamma, beta, state: BatchNormState):
    inv = 1.0 / np.sqrt(state.running_var + state.epsilon)
    return (x - state.running_mean) * (gamma * inv) + beta


def batchnorm(x, gamma, beta, state: BatchNormState, train: bool) -> Node:
    """Per-channel normalization over all axes but the last.

    In training mode batch statistics are used and the running statistics in
    ``state`` are moved towards them by ``decay``; in inference mode the state
    is only read.
    """
    x, gamma, beta = _as_node(x), _as_node(gamma), _as_node(beta)
    xv = x.value
    axes = tuple(range(xv.ndim - 1))
    if not train:
        inv = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (xv - state.running_mean) * inv
        out = xhat * gamma.value + beta.value

        def vjp_infer(g, needs):
            gx = g * (gamma.value * inv) if needs[0] else None
            gg = (g * xhat).sum(axis=axes) if needs[1] else None
            gb = g.sum(axis=axes) if needs[2] else None
            return gx, gg, gb

        return record("batchnorm", out, (x, gamma, beta), vjp_infer)

    if xv.shape[0] < 2:
        raise ShapeError("batchnorm in training mode needs a batch of at least 2")
    m = xv.size // xv.shape[-1]
    mu = xv.mean(axis=axes)
    var = xv.var(axis=axes)
    inv = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (xv - mu) * inv
    out = xhat * gamma.value + beta.value
    state.running_mean = state.decay * state.running_mean + (1.0 - state.decay) * mu
    state.running_var = state.decay * state.running_var + (1.0 - state.decay) * var

    def vjp(g, needs):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = None
        if needs[0]:
            dxhat = g * gamma.value
            gx = (inv / m) * (
                m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
            )
        return gx, gg if needs[1] else None, gb if needs[2] else None

    return record("batchnorm", out, (x, gamma, beta), vjp)


def reshape(x, shape) -> Node:
    x = _as_node(x)
    src = x.value.shape
    out = x.value.reshape(shape)
    return record("reshape", out, (x,), lambda g, needs: (g.reshape(src),))


def concat(xs, axis=-1) -> Node:
    xs = [_as_node(x) for x in xs]
    sizes = [x.value.shape[axis] for x in xs]
    out = np.concatenate([x.value for x in xs], axis=axis)
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, cuts, axis=axis))

    return record("concat", out, tuple(xs), vjp)


def slice_last(x, start, stop) -> Node:
    x = _as_node(x)
    out = x.value[..., start:stop]
    shape = x.value.shape

    def vjp(g, needs):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return record("slice_last", out, (x,), vjp)


def clip(x, lo, hi) -> Node:
    x = _as_node(x)
    inside = (x.value >= lo) & (x.value <= hi)
    out = np.clip(x.value, lo, hi)
    return record("clip", out, (x,), lambda g, needs: (g * inside,))


def reparameterize(mean, log_variance, noise) -> Node:
    """z = mean + exp(log_variance / 2) * noise."""
    mean, log_variance = _as_node(mean), _as_node(log_variance)
    noise = np.asarray(noise)
    if noise.shape != mean.value.shape:
        raise ShapeError(f"noise shape {noise.shape} != mean shape {mean.value.shape}")
    std = np.exp(0.5 * log_variance.value)
    out = mean.value + std * noise

    def vjp(g, needs):
        return g, g * noise * std * 0.5

    return record("reparameterize", out, (mean, log_variance), vjp)


def gaussian_log_likelihood(x, mean, log_variance) -> Node:
    """Diagonal Gaussian log density per row: sums over every axis but the first."""
    x, mean, log_variance = _as_node(x), _as_node(mean), _as_node(log_variance)
    xv, mv, lv = x.value, mean.value, log_variance.value
    if not (xv.shape == mv.shape == lv.shape):
        raise ShapeError(f"shape mismatch {xv.shape}, {mv.shape}, {lv.shape}")
    axes = tuple(range(1, xv.ndim))
    prec = np.exp(-lv)
    diff = xv - mv
    out = (-0.5 * LOG_2PI - 0.5 * lv - 0.5 * diff * diff * prec).sum(axis=axes)

    def vjp(g, needs):
        gb = g.reshape((-1,) + (1,) * len(axes))
        gm = gb * diff * prec
        gl = gb * (-0.5 + 0.5 * diff * diff * prec)
        return -gm, gm, gl

    return record("gaussian_log_likelihood", out, (x, mean, log_variance), vjp)


def kl_divergence(mean, log_variance) -> Node:
    """KL(N(mean, exp(log_variance)) || N(0, I)) per row."""
    mean, log_variance = _as_node(mean), _as_node(log_variance)
    mv, lv = mean.value, log_variance.value
    axes = tuple(range(1, mv.ndim))
    em1 = np.expm1(lv)
    # exp(lv) - 1 - lv >= 0; expm1 avoids cancellation for tiny lv
    out = (0.5 * (mv * mv + np.maximum(em1 - lv, 0.0))).sum(axis=axes)

    def vjp(g, needs):
        gb = g.reshape((-1,) + (1,) * len(axes))
        return gb * mv, gb * 0.5 * em1

    return record("kl_divergence", out, (mean, log_variance), vjp)


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add needs equal shapes, got {a.value.shape} and {b.value.shape}")
    return record("add", a.value + b.value, (a, b), lambda g, needs: (g, g))


def scale(x, c: float) -> Node:
    x = _as_node(x)
    return record("scale", x.value * c, (x,), lambda g, needs: (g * c,))


def mean(x) -> Node:
    x = _as_node(x)
    n = x.value.size
    shape = x.value.shape
    return record(
        "mean", np.asarray(x.value.mean()), (x,), lambda g, needs: (np.full(shape, g / n),)
    )


def sum_(x) -> Node:
    x = _as_node(x)
    shape = x.value.shape
    return record("sum", np.asarray(x.value.sum()), (x,), lambda g, needs: (np.full(shape, g),))


# ---------------------------------------------------------------------------
# initialization and optimization
# ---------------------------------------------------------------------------


def fans(shape) -> tuple[int, int]:
    """(fan_in, fan_out); conv kernels (k, k, a, b) count k*k*a and k*k*b."""
    if len(shape) == 2:
        return int(shape[0]), int(shape[1])
    if len(shape) == 4:
        rf = int(shape[0] * shape[1])
        return rf * int(shape[2]), rf * int(shape[3])
    raise ValueError(f"cannot derive fans from shape {shape}")


def xavier_init(shape, rng_seed) -> np.ndarray:
    fan_in, fan_out = fans(shape)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(rng_seed)
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class AdamState:
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam update. Returns new parameter arrays; moments live in ``state``."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NonFiniteGradientError(
                f"non-finite gradient in {name}",
                {"parameter": name, "non_finite": bad, "size": int(g.size), "step": state.step_count},
            )
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        # moments are owned by the state and updated in place; parameters are fresh arrays
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        denom = v / c2
        np.sqrt(denom, out=denom)
        denom += state.epsilon
        step = m * (state.learning_rate / c1)
        step /= denom
        out[name] = p - step
    state.step_count = t
    return out

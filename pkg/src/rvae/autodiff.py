"""Small reverse-mode automatic differentiation engine on numpy arrays.

Operations are recorded on the active :class:`Tape` (entered with ``with
Tape():``) when at least one input requires a gradient. Outside a tape nothing
is recorded, which is how inference runs. Nodes are appended in execution
order, so the tape is already topologically sorted and :meth:`Tape.backward`
is a single reverse sweep.

Dense and LSTM layers are fused nodes: the LSTM recursion runs in
:mod:`rvae.kernels` and contributes one node per sequence.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels

_STACK = []


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where finite input was required."""


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_produced", "name")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._produced = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(np.asarray(self.data).item())

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("outs", "parents", "backward")

    def __init__(self, outs, parents, backward):
        self.outs = outs
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _STACK.append(self)
        return self

    def __exit__(self, *exc):
        _STACK.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, outs, parents, backward):
        for o in outs:
            o.requires_grad = True
            o._produced = True
        self.nodes.append(_Node(outs, parents, backward))

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the tape.

        The tape is cleared afterwards.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ValueError("backward() needs a scalar Tensor loss")
        if not loss.requires_grad:
            raise ValueError("loss was not recorded on a tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            gouts = [grads.pop(id(o), None) for o in node.outs]
            if all(g is None for g in gouts):
                continue
            gouts = [np.zeros_like(o.data) if g is None else g
                     for o, g in zip(node.outs, gouts)]
            pgrads = node.backward(*gouts)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                if p._produced:
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                elif p.grad is None:
                    p.grad = np.array(pg, dtype=np.float64, copy=True)
                else:
                    p.grad = p.grad + pg
        self.nodes.clear()


def active_tape():
    return _STACK[-1] if _STACK else None


def backward(loss):
    """Backpropagate ``loss`` through the innermost active tape."""
    tape = active_tape()
    if tape is None:
        raise ValueError("backward() called outside a Tape context")
    tape.backward(loss)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(datas, parents, backward):
    """Wrap raw output arrays as Tensors and record them if needed.

    ``backward`` receives one upstream gradient per output and returns one
    gradient (or None) per parent.
    """
    single = not isinstance(datas, tuple)
    outs = tuple(Tensor(d) for d in ((datas,) if single else datas))
    tape = active_tape()
    if tape is not None and any(isinstance(p, Tensor) and p.requires_grad
                                for p in parents):
        tape.record(outs, parents, backward)
    return outs[0] if single else outs


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _needs(x):
    return isinstance(x, Tensor) and x.requires_grad


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# elementwise arithmetic

def add(a, b):
    ad, bd = _data(a), _data(b)
    return apply_op(ad + bd, (a, b), lambda g: (_unbroadcast(g, ad.shape),
                                                 _unbroadcast(g, bd.shape)))


def sub(a, b):
    ad, bd = _data(a), _data(b)
    return apply_op(ad - bd, (a, b), lambda g: (_unbroadcast(g, ad.shape),
                                                 _unbroadcast(-g, bd.shape)))


def mul(a, b):
    ad, bd = _data(a), _data(b)
    return apply_op(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape),
                                                 _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    ad, bd = _data(a), _data(b)
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * out / bd, bd.shape))
    return apply_op(out, (a, b), bw)


def power(a, p):
    ad = _data(a)
    p = float(p)
    return apply_op(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def exp(a):
    out = np.exp(_data(a))
    return apply_op(out, (a,), lambda g: (g * out,))


def log(a):
    ad = _data(a)
    return apply_op(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    out = np.sqrt(_data(a))
    return apply_op(out, (a,), lambda g: (0.5 * g / out,))


def tanh(a):
    out = np.tanh(_data(a))
    return apply_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = 0.5 * (np.tanh(0.5 * _data(a)) + 1.0)
    return apply_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def clamp_min(a, floor):
    """``max(a, floor)``; the gradient is zero where the floor is active."""
    ad = _data(a)
    live = ad > floor
    return apply_op(np.where(live, ad, floor), (a,), lambda g: (g * live,))


# reductions and shape

def tsum(a, axis=None):
    ad = _data(a)
    out = ad.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ad.shape).copy(),)
    return apply_op(out, (a,), bw)


def mean(a, axis=None):
    ad = _data(a)
    n = ad.size if axis is None else ad.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape):
    ad = _data(a)
    return apply_op(ad.reshape(shape), (a,), lambda g: (g.reshape(ad.shape),))


def getitem(a, idx):
    ad = _data(a)

    def bw(g):
        full = np.zeros_like(ad)
        np.add.at(full, idx, g)
        return (full,)
    return apply_op(ad[idx], (a,), bw)


def concat(tensors, axis=-1):
    datas = [_data(t) for t in tensors]
    ax = axis % datas[0].ndim
    bounds = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))
    return apply_op(np.concatenate(datas, axis=ax), tuple(tensors), bw)


def stack(tensors, axis=0):
    datas = [_data(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(datas)))
    return apply_op(np.stack(datas, axis=axis), tuple(tensors), bw)


def matmul(a, b):
    """``a @ b`` for ``a`` of shape (..., K) and a 2-D ``b`` of shape (K, M)."""
    ad, bd = _data(a), _data(b)
    if bd.ndim != 2 or ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {ad.shape} by {bd.shape}")

    def bw(g):
        a2 = ad.reshape(-1, ad.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return g @ bd.T, a2.T @ g2
    return apply_op(ad @ bd, (a, b), bw)


# layers

def dense(x, W, b):
    """Affine map ``x @ W + b`` over the last axis, recorded as one node."""
    xd, Wd, bd = _data(x), _data(W), _data(b)
    if Wd.ndim != 2 or xd.shape[-1] != Wd.shape[0] or bd.shape != (Wd.shape[1],):
        raise ShapeError(
            f"dense: input {xd.shape}, weights {Wd.shape}, bias {bd.shape}")

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        dx = g @ Wd.T if _needs(x) else None
        dW = xd.reshape(-1, xd.shape[-1]).T @ g2 if _needs(W) else None
        db = g2.sum(axis=0) if _needs(b) else None
        return dx, dW, db
    return apply_op(xd @ Wd + bd, (x, W, b), bw)


def lstm(x, Wx, Wh, b, reverse=False, mask=None):
    """Unidirectional LSTM over a time-major sequence.

    Parameters
    ----------
    x : Tensor, shape (N, B, D)
    Wx : Tensor, shape (D, 4H)
    Wh : Tensor, shape (H, 4H)
    b : Tensor, shape (4H,)
        Gate blocks are ordered (input, forget, cell, output).
    reverse : bool
        Run from the last frame to the first; outputs keep input order.
    mask : ndarray, shape (N, B), optional
        0 marks padding; the state is reset to zero after padded frames.

    Returns
    -------
    Tensor, shape (N, B, H)
        Hidden states, zero initial state.
    """
    xd, Wxd, Whd, bd = _data(x), _data(Wx), _data(Wh), _data(b)
    if xd.ndim != 3:
        raise ShapeError(f"lstm expects (N, B, D) input, got {xd.shape}")
    N, B, D = xd.shape
    H = Whd.shape[0]
    if Wxd.shape != (D, 4 * H) or Whd.shape != (H, 4 * H) or bd.shape != (4 * H,):
        raise ShapeError(
            f"lstm: Wx {Wxd.shape}, Wh {Whd.shape}, b {bd.shape} for D={D}, H={H}")
    if not np.all(np.isfinite(xd)):
        raise NumericError("lstm received non-finite input")
    if mask is not None:
        mask = np.ascontiguousarray(mask, dtype=np.float64)
    xp = np.ascontiguousarray(xd @ Wxd + bd)
    Whc = np.ascontiguousarray(Whd)
    h, c, gates, tc = kernels.lstm_forward(xp, Whc, reverse, mask)

    def bw(g):
        da = kernels.lstm_backward(np.ascontiguousarray(g), c, gates, tc, Whc,
                                   reverse, mask)
        G = 4 * H
        hprev = np.zeros_like(h)
        if reverse:
            hprev[:-1] = h[1:]
        else:
            hprev[1:] = h[:-1]
        da2 = da.reshape(-1, G)
        dx = da @ Wxd.T if _needs(x) else None
        if not _needs(Wx):
            return dx, None, None, None
        dWx = xd.reshape(-1, D).T @ da2
        dWh = hprev.reshape(-1, H).T @ da2
        return dx, dWx, dWh, da2.sum(axis=0)
    return apply_op(h, (x, Wx, Wh, b), bw)


def bilstm(x, fw, bw, mask=None):
    """Bidirectional LSTM; ``fw``/``bw`` are (Wx, Wh, b) triples.

    Returns the (N, B, 2H) concatenation [forward, backward].
    """
    hf = lstm(x, *fw, reverse=False, mask=mask)
    hb = lstm(x, *bw, reverse=True, mask=mask)
    return concat([hf, hb], axis=-1)


# optimisation

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One bias-corrected Adam descent step, in place on ``params``.

    ``params`` are Tensors (or arrays); ``grads`` the matching arrays. A
    ``None`` gradient counts as zero.
    """
    if not state.m:
        state.m = [np.zeros_like(_data(p)) for p in params]
        state.v = [np.zeros_like(_data(p)) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("Adam state does not match the parameter list")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        pd = _data(p)
        if g is None:
            g = 0.0
        elif np.shape(g) != pd.shape:
            raise ShapeError(f"gradient {np.shape(g)} for parameter {pd.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        pd -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Adam:
    """Adam over a list of leaf Tensors, reading their ``.grad``."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)


def grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return total ** 0.5


def clip_grad_norm(params, max_norm):
    """Rescale gradients so their global L2 norm is at most ``max_norm``."""
    norm = grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm

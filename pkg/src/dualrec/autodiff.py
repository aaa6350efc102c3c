"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray plus an optional gradient accumulator.  Ops build a
DAG by storing parent references and a closure that routes the incoming
gradient to each parent.  ``Tensor.backward`` walks the graph in reverse
topological order; gradients written into ``.grad`` accumulate additively
across calls, so two backward passes sum.

Elementwise binary ops require operands of identical shape, except that a
0-d tensor may scale/shift an array of any shape (needed for trainable
scalar weights).  The only other implicit broadcast is the bias add inside
the convolution ops.  Anything fancier must be spelled out with reshape,
repeat_axis, or concat, which keeps gradient routing easy to audit.

All ops work in float64 or float32 depending on the dtype of their inputs;
numerical test suites run in float64, training runs in float32.
"""

import numpy as np

from .errors import DimensionError, ParameterError


class Tensor:
    """A node in the computation graph.

    data            ndarray payload
    requires_grad   whether backward should accumulate into .grad
    grad            ndarray accumulator, allocated lazily, never reset implicitly
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- gradient plumbing ---------------------------------------------

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def backward(self, seed=None):
        """Accumulate d(self)/d(node) into every reachable node with requires_grad.

        ``seed`` defaults to ones, so calling backward on a 0-d loss seeds 1.0.
        Flow gradients live in a private table during the walk; only at the end
        are they added into ``.grad``, which makes repeated backward calls sum.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise DimensionError(
                    f"backward seed shape {seed.shape} != tensor shape {self.data.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        flow = {id(self): seed}
        for node in reversed(order):
            g = flow.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward is not None:
                node._backward(g, flow)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


class Parameter(Tensor):
    """A trainable tensor; gets a dotted name when registered on a Module."""

    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(np.array(data), requires_grad=True)
        self.name = name


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _flow_add(flow, node, g):
    key = id(node)
    if key in flow:
        flow[key] = flow[key] + g
    else:
        flow[key] = g


def _make(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out.requires_grad = False
    return out


def _check_elementwise(a, b):
    # identical shapes, or one side 0-d (trainable scalar broadcast)
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(f"elementwise op on shapes {a.shape} and {b.shape}")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    # the only legal mismatch is a 0-d operand broadcast to the full shape
    return np.sum(g).reshape(shape)


# -- elementwise arithmetic ---------------------------------------------

def add(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_elementwise(a, b)

    def backward(g, flow):
        _flow_add(flow, a, _reduce_to(g, a.shape))
        _flow_add(flow, b, _reduce_to(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_elementwise(a, b)

    def backward(g, flow):
        _flow_add(flow, a, _reduce_to(g, a.shape))
        _flow_add(flow, b, _reduce_to(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_elementwise(a, b)

    def backward(g, flow):
        _flow_add(flow, a, _reduce_to(g * b.data, a.shape))
        _flow_add(flow, b, _reduce_to(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_elementwise(a, b)

    def backward(g, flow):
        _flow_add(flow, a, _reduce_to(g / b.data, a.shape))
        _flow_add(flow, b, _reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


def neg(a):
    a = _as_tensor(a)

    def backward(g, flow):
        _flow_add(flow, a, -g)

    return _make(-a.data, (a,), backward)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g, flow):
        _flow_add(flow, a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a):
    a = _as_tensor(a)

    def backward(g, flow):
        _flow_add(flow, a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g, flow):
        _flow_add(flow, a, g * (0.5 / out_data))

    return _make(out_data, (a,), backward)


def square(a):
    a = _as_tensor(a)

    def backward(g, flow):
        _flow_add(flow, a, g * (2.0 * a.data))

    return _make(a.data * a.data, (a,), backward)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0

    def backward(g, flow):
        _flow_add(flow, a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def leaky_relu(a, slope=0.2):
    a = _as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)

    def backward(g, flow):
        _flow_add(flow, a, g * scale)

    return _make(a.data * scale, (a,), backward)


# -- shape ops ----------------------------------------------------------

def reshape(a, shape):
    a = _as_tensor(a)
    in_shape = a.shape

    def backward(g, flow):
        _flow_add(flow, a, g.reshape(in_shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g, flow):
        _flow_add(flow, a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def getitem(a, idx):
    a = _as_tensor(a)
    in_shape = a.shape

    def backward(g, flow):
        full = np.zeros(in_shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        _flow_add(flow, a, full)

    return _make(a.data[idx], (a,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ParameterError("concat of an empty sequence")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g, flow):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _flow_add(flow, t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def repeat_axis(a, reps, axis):
    """Tile a length-1 axis ``reps`` times (explicit broadcast)."""
    a = _as_tensor(a)
    if a.shape[axis] != 1:
        raise DimensionError(f"repeat_axis needs length-1 axis, got {a.shape[axis]}")

    def backward(g, flow):
        _flow_add(flow, a, g.sum(axis=axis, keepdims=True))

    return _make(np.repeat(a.data, reps, axis=axis), (a,), backward)


# -- reductions ---------------------------------------------------------

def sum_all(a):
    a = _as_tensor(a)

    def backward(g, flow):
        _flow_add(flow, a, np.full(a.shape, g, dtype=a.dtype))

    return _make(np.asarray(a.data.sum()), (a,), backward)


def mean_all(a):
    a = _as_tensor(a)
    n = a.size

    def backward(g, flow):
        _flow_add(flow, a, np.full(a.shape, g / n, dtype=a.dtype))

    return _make(np.asarray(a.data.mean()), (a,), backward)


def sum_axes(a, axes):
    a = _as_tensor(a)
    axes = tuple(sorted(axes))

    def backward(g, flow):
        expanded = np.expand_dims(g, axes)
        _flow_add(flow, a, np.broadcast_to(expanded, a.shape).copy())

    return _make(a.data.sum(axis=axes), (a,), backward)


def mean_axes(a, axes):
    a = _as_tensor(a)
    axes = tuple(sorted(axes))
    n = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g, flow):
        expanded = np.expand_dims(g / n, axes)
        _flow_add(flow, a, np.broadcast_to(expanded, a.shape).copy())

    return _make(a.data.mean(axis=axes), (a,), backward)


# -- linear algebra -----------------------------------------------------

def matmul(a, b):
    """Matrix product.  One operand may carry leading batch axes; the other
    must be a plain 2-d matrix."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need ndim >= 2")
    if a.ndim > 2 and b.ndim > 2:
        raise DimensionError("at most one matmul operand may be batched")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims {a.shape[-1]} != {b.shape[-2]}")

    def backward(g, flow):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if ga.shape != a.shape:
            ga = ga.reshape((-1,) + a.shape).sum(axis=0) if ga.ndim > a.ndim else ga
        if gb.shape != b.shape:
            gb = gb.reshape((-1,) + b.shape).sum(axis=0) if gb.ndim > b.ndim else gb
        _flow_add(flow, a, ga)
        _flow_add(flow, b, gb)

    return _make(np.matmul(a.data, b.data), (a, b), backward)


# -- spatial ops (im2col based) -----------------------------------------

def _im2col(x, kh, kw, stride, padding):
    """[B,C,H,W] -> [B, C*kh*kw, Ho*Wo] patch matrix."""
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, shape=(b, c, ho, wo, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3))
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols, x_shape, kh, kw, stride, padding, ho, wo):
    """Adjoint of _im2col: scatter-add patches back into an image."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += cols[:, :, u, v]
    if padding:
        out = out[:, :, padding:hp - padding, padding:wp - padding]
    return out


def _conv_forward_raw(x, w, stride, padding):
    b = x.shape[0]
    f, c, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    y = np.matmul(w.reshape(f, c * kh * kw), cols)
    return y.reshape(b, f, ho, wo), cols, ho, wo


def _conv_dx_raw(g, w, x_shape, stride, padding, ho, wo):
    b = g.shape[0]
    f, c, kh, kw = w.shape
    gm = g.reshape(b, f, ho * wo)
    cols = np.matmul(w.reshape(f, c * kh * kw).T, gm)
    return _col2im(cols, x_shape, kh, kw, stride, padding, ho, wo)


def _conv_dw_raw(g, cols, w_shape, ho, wo):
    b = g.shape[0]
    f, c, kh, kw = w_shape
    gm = g.reshape(b, f, ho * wo)
    dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
    return dw.reshape(f, c, kh, kw)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-d cross-correlation.  x:[B,C,H,W], w:[F,C,kh,kw] with odd kh,kw,
    b:[F] or None.  Output [B,F,Ho,Wo]."""
    x = _as_tensor(x)
    w = _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects x[B,C,H,W] and w[F,C,kh,kw]")
    f, c, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ParameterError(f"conv2d kernel dims must be odd, got {kh}x{kw}")
    if padding < 0:
        raise ParameterError("conv2d padding must be >= 0")
    if x.shape[1] != c:
        raise DimensionError(f"conv2d input has {x.shape[1]} channels, weight expects {c}")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (f,):
            raise DimensionError(f"conv2d bias shape {b.shape} != ({f},)")

    y, cols, ho, wo = _conv_forward_raw(x.data, w.data, stride, padding)
    if b is not None:
        y = y + b.data.reshape(1, f, 1, 1)
    x_shape = x.shape

    def backward(g, flow):
        _flow_add(flow, w, _conv_dw_raw(g, cols, w.shape, ho, wo))
        _flow_add(flow, x, _conv_dx_raw(g, w.data, x_shape, stride, padding, ho, wo))
        if b is not None:
            _flow_add(flow, b, g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, backward)


def conv_transpose2d(x, w, b=None, stride=1, padding=0, output_size=None):
    """Transposed convolution (adjoint of conv2d in the spatial map).

    x:[B,C,H,W], w:[F,C,kh,kw]; out[b,f,si+u-p,sj+v-p] += x[b,c,i,j] w[f,c,u,v].
    ``output_size`` (Ho,Wo) overrides the default (H-1)*s + k - 2p, which is
    needed to invert convolutions whose floor division dropped rows.
    """
    x = _as_tensor(x)
    w = _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv_transpose2d expects x[B,C,H,W] and w[F,C,kh,kw]")
    f, c, kh, kw = w.shape
    if x.shape[1] != c:
        raise DimensionError(
            f"conv_transpose2d input has {x.shape[1]} channels, weight expects {c}")
    bsz, _, h, wdt = x.shape
    if output_size is None:
        ho = (h - 1) * stride + kh - 2 * padding
        wo = (wdt - 1) * stride + kw - 2 * padding
    else:
        ho, wo = output_size
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (f,):
            raise DimensionError(f"conv_transpose2d bias shape {b.shape} != ({f},)")

    w_sw = w.data.transpose(1, 0, 2, 3)  # [C,F,kh,kw]
    y = _conv_dx_raw(x.data, w_sw, (bsz, f, ho, wo), stride, padding, h, wdt)
    if b is not None:
        y = y + b.data.reshape(1, f, 1, 1)

    def backward(g, flow):
        cols, gho, gwo = _im2col(g, kh, kw, stride, padding)
        if (gho, gwo) != (h, wdt):
            raise DimensionError("conv_transpose2d gradient shape mismatch")
        gx = np.matmul(w_sw.reshape(c, f * kh * kw), cols).reshape(x.shape)
        dw_sw = _conv_dw_raw(x.data, cols, (c, f, kh, kw), h, wdt)
        _flow_add(flow, x, gx)
        _flow_add(flow, w, dw_sw.transpose(1, 0, 2, 3))
        if b is not None:
            _flow_add(flow, b, g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, backward)


def upconv2x2(x, w, b=None):
    """Stride-2 transposed convolution with a 2x2 kernel: [B,C,H,W] -> [B,F,2H,2W].

    w has dims [F,C,2,2].  With shared weights and zero bias it is the adjoint
    of the stride-2 2x2 convolution.
    """
    w_t = _as_tensor(w)
    if w_t.shape[2:] != (2, 2):
        raise ParameterError(f"upconv2x2 kernel must be 2x2, got {w_t.shape[2:]}")
    return conv_transpose2d(x, w_t, b, stride=2, padding=0)


def maxpool2x2(x):
    """Non-overlapping 2x2 max pooling; ties resolved to the first element in
    row-major order.  H and W must be even."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("maxpool2x2 expects x[B,C,H,W]")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(b, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)  # argmax returns the first max: row-major tie rule
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g, flow):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
        gx = gf.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        _flow_add(flow, x, gx)

    return _make(out, (x,), backward)


# -- optimizers ---------------------------------------------------------

class OptimizerState:
    """Per-parameter Adam state: first/second moment and step count."""

    __slots__ = ("m", "v", "t")

    def __init__(self, shape, dtype):
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.t = 0


def adam_step(param, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update in place.  Uses bias-corrected moment estimates:

        m <- b1*m + (1-b1)*g          v <- b2*v + (1-b2)*g^2
        p <- p - lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)

    A parameter whose grad is None is skipped.
    """
    if lr <= 0:
        raise ParameterError(f"adam_step lr must be positive, got {lr}")
    g = param.grad
    if g is None:
        return
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * g
    state.v = beta2 * state.v + (1.0 - beta2) * (g * g)
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def sgd_step(param, lr):
    if lr <= 0:
        raise ParameterError(f"sgd_step lr must be positive, got {lr}")
    if param.grad is None:
        return
    param.data -= lr * param.grad


class Adam:
    """Convenience wrapper bundling OptimizerState per parameter."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = [OptimizerState(p.shape, p.dtype) for p in self.params]

    def step(self):
        for p, s in zip(self.params, self.state):
            adam_step(p, s, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class Sgd:
    def __init__(self, params, lr=1e-3):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            sgd_step(p, self.lr)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# -- finite difference checking -----------------------------------------

class GradCheckReport:
    """Result of comparing analytic gradients with central differences."""

    def __init__(self, max_rel_err, per_tensor, tolerance):
        self.max_rel_err = max_rel_err
        self.per_tensor = per_tensor
        self.tolerance = tolerance

    @property
    def passed(self):
        return self.max_rel_err < self.tolerance

    def __repr__(self):
        worst = max(self.per_tensor, key=self.per_tensor.get) if self.per_tensor else "-"
        return (f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, "
                f"tolerance={self.tolerance:.1e}, worst={worst}, passed={self.passed})")


def grad_check(fn, tensors, tolerance=1e-4, step=1e-5):
    """Compare analytic grads of scalar-valued ``fn`` against central differences.

    ``fn`` takes no arguments and returns a 0-d Tensor built from the given
    tensors; every element of every tensor in ``tensors`` (a dict name->Tensor
    with requires_grad) is perturbed by +-step.  Relative error per element is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    for t in tensors.values():
        t.zero_grad()
    loss = fn()
    if loss.ndim != 0:
        raise DimensionError("grad_check needs a scalar loss")
    loss.backward()

    per_tensor = {}
    worst = 0.0
    for name, t in tensors.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn().data)
            flat[i] = orig - step
            fm = float(fn().data)
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        rel = np.abs(analytic - numeric) / denom
        # treat both-tiny entries as exact; FD noise on a true zero is meaningless
        rel = np.where(np.maximum(np.abs(analytic), np.abs(numeric)) < 1e-7, 0.0, rel)
        err = float(np.max(rel)) if rel.size else 0.0
        per_tensor[name] = err
        worst = max(worst, err)
    return GradCheckReport(worst, per_tensor, tolerance)

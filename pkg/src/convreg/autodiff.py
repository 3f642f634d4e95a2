"""Dense N-d tensors with reverse-mode automatic differentiation.

Implements exactly the operations the registration networks need: 3D
cross-correlation ("convolution"), its adjoint (transposed convolution),
pooling, dense layers, elementwise math, and small matrix products, plus
Glorot initialisation and the Adam optimizer. Gradients are accumulated
into ``.grad`` buffers by replaying recorded closures in reverse
topological order; they stick around until ``zero_grad`` is called.

Convention notes:
  - conv3d is cross-correlation (no kernel flip).
  - relu uses subgradient 0 at 0.
  - default dtype is float32; tests use float64 for finite-difference
    headroom.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class Tensor:
    """Value node in the computation record.

    ``_backward`` is a closure that pulls ``self.grad`` and scatters it
    into the parents' ``.grad`` buffers; ``_parents`` keeps the graph
    alive for the reverse traversal.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()

    # -- graph bookkeeping -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate grads of every reachable tensor with requires_grad.

        The loss must be scalar. Repeated calls without zeroing
        accumulate into existing grad buffers.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        topo = _toposort(self)
        for node in topo:
            if node._parents:  # op outputs restart fresh; leaf grads accumulate
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def item(self):
        return float(self.data.reshape(-1)[0])

    # -- operator sugar ----------------------------------------------------

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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
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
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_op(data, parents, backward_fn):
    """Build a tensor from a custom forward result.

    ``backward_fn(out)`` must scatter ``out.grad`` into the parents.
    The graph edge is dropped entirely when no parent requires grad, so
    inference passes retain nothing.
    """
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = lambda: backward_fn(out)
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic (numpy broadcasting rules) ----------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return make_op(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return make_op(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make_op(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_op(a.data / b.data, (a, b), bw)


def power(a, p):
    a = as_tensor(a)
    p = float(p)

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad * p * a.data ** (p - 1.0))

    return make_op(a.data**p, (a,), bw)


def sqrt(a):
    a = as_tensor(a)
    val = np.sqrt(a.data)

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad * 0.5 / np.sqrt(a.data))

    return make_op(val, (a,), bw)


def tanh(a):
    a = as_tensor(a)
    val = np.tanh(a.data)

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad * (1.0 - val * val))

    return make_op(val, (a,), bw)


def sin(a):
    a = as_tensor(a)

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad * np.cos(a.data))

    return make_op(np.sin(a.data), (a,), bw)


def cos(a):
    a = as_tensor(a)

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad * -np.sin(a.data))

    return make_op(np.cos(a.data), (a,), bw)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad * mask)

    return make_op(np.where(mask, a.data, 0.0), (a,), bw)


# -- reductions and shape ops ------------------------------------------------

def tsum(a):
    a = as_tensor(a)

    def bw(out):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, out.grad.reshape(())))

    return make_op(np.asarray(a.data.sum()), (a,), bw)


def tmean(a):
    a = as_tensor(a)
    n = a.data.size

    def bw(out):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, out.grad.reshape(()) / n))

    return make_op(np.asarray(a.data.mean()), (a,), bw)


def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.shape))

    return make_op(a.data.reshape(shape), (a,), bw)


def getitem(a, idx):
    """Basic (slice/int) indexing with scatter-add backward."""
    a = as_tensor(a)

    def bw(out):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[idx] += out.grad
            a._accumulate(buf)

    return make_op(a.data[idx], (a,), bw)


def take_columns(a, cols):
    """Select columns of a 2D tensor by integer array; backward scatter-adds."""
    a = as_tensor(a)
    cols = np.asarray(cols, dtype=np.int64)

    def bw(out):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, (slice(None), cols), out.grad)
            a._accumulate(buf)

    return make_op(a.data[:, cols], (a,), bw)


def concat(a, b, axis=0):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != b.data.ndim:
        raise ValueError("concat operands must have the same rank")
    for ax in range(a.data.ndim):
        if ax != axis % a.data.ndim and a.shape[ax] != b.shape[ax]:
            raise ValueError(f"concat extents differ on non-concat axis {ax}: {a.shape} vs {b.shape}")
    na = a.shape[axis]

    def bw(out):
        ga, gb = np.split(out.grad, [na], axis=axis)
        if a.requires_grad:
            a._accumulate(ga)
        if b.requires_grad:
            b._accumulate(gb)

    return make_op(np.concatenate([a.data, b.data], axis=axis), (a, b), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2D operands only")

    def bw(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return make_op(a.data @ b.data, (a, b), bw)


def linear(x, w, b):
    """Dense layer w @ x + b for a vector input of length N."""
    x, wt, bt = as_tensor(x), _param_tensor(w), _param_tensor(b)
    if wt.shape[1] != x.shape[0]:
        raise ValueError(f"linear: weight expects input {wt.shape[1]}, got {x.shape[0]}")

    def bw(out):
        g = out.grad
        if x.requires_grad:
            x._accumulate(wt.data.T @ g)
        if wt.requires_grad:
            wt._accumulate(np.outer(g, x.data))
        if bt.requires_grad:
            bt._accumulate(g)

    return make_op(wt.data @ x.data + bt.data, (x, wt, bt), bw)


# -- 3D convolution family ----------------------------------------------------

def _triple(v):
    if isinstance(v, (tuple, list, np.ndarray)):
        t = tuple(int(x) for x in v)
        if len(t) != 3:
            raise ValueError(f"expected 3 ints, got {v!r}")
        return t
    return (int(v),) * 3


def _corr3d(x, k, stride):
    """Strided cross-correlation core.

    x: (C_in, D, H, W) already padded; k: (C_out, C_in, kd, kh, kw).
    Returns (C_out, D', H', W').
    """
    sd, sh, sw = stride
    win = np.lib.stride_tricks.sliding_window_view(x, k.shape[2:], axis=(1, 2, 3))
    win = win[:, ::sd, ::sh, ::sw]
    return np.tensordot(k, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))


def conv3d(x, kernels, stride=1, zero_padding=0):
    """Cross-correlation of (C_in,D,H,W) input with (C_out,C_in,kd,kh,kw) kernels."""
    x = as_tensor(x)
    k = _param_tensor(kernels)
    stride = _triple(stride)
    pad = _triple(zero_padding)
    if any(s < 1 for s in stride):
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.data.ndim != 4 or k.data.ndim != 5:
        raise ValueError("conv3d expects input (C,D,H,W) and kernels (C_out,C_in,kd,kh,kw)")
    if k.shape[1] != x.shape[0]:
        raise ValueError(f"kernel C_in {k.shape[1]} does not match input channels {x.shape[0]}")
    padded_extents = [x.shape[1 + a] + 2 * pad[a] for a in range(3)]
    if any(k.shape[2 + a] > padded_extents[a] for a in range(3)):
        raise ValueError(f"kernel {k.shape[2:]} larger than padded input {tuple(padded_extents)}")

    xp = np.pad(x.data, ((0, 0),) + tuple((p, p) for p in pad)) if any(pad) else x.data
    out_data = _corr3d(xp, k.data, stride)

    def bw(out):
        g = out.grad
        if k.requires_grad:
            win = np.lib.stride_tricks.sliding_window_view(xp, k.shape[2:], axis=(1, 2, 3))
            win = win[:, :: stride[0], :: stride[1], :: stride[2]]
            k._accumulate(np.tensordot(g, win, axes=([1, 2, 3], [1, 2, 3])))
        if x.requires_grad:
            xg = _conv3d_input_grad(g, k.data, stride, xp.shape)
            if any(pad):
                xg = xg[:, pad[0]: pad[0] + x.shape[1], pad[1]: pad[1] + x.shape[2], pad[2]: pad[2] + x.shape[3]]
            x._accumulate(xg)

    return make_op(out_data, (x, k), bw)


def _conv3d_input_grad(g, k, stride, padded_shape):
    """Scatter output grads back through a strided correlation."""
    sd, sh, sw = stride
    kd, kh, kw = k.shape[2:]
    gz_shape = (g.shape[0], (g.shape[1] - 1) * sd + 1, (g.shape[2] - 1) * sh + 1, (g.shape[3] - 1) * sw + 1)
    gz = np.zeros(gz_shape, dtype=g.dtype)
    gz[:, ::sd, ::sh, ::sw] = g
    gzp = np.pad(gz, ((0, 0), (kd - 1, kd - 1), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    kt = np.ascontiguousarray(k[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    part = _corr3d(gzp, kt, (1, 1, 1))
    xg = np.zeros((k.shape[1],) + padded_shape[1:], dtype=g.dtype)
    xg[:, : part.shape[1], : part.shape[2], : part.shape[3]] = part
    return xg


def transposed_conv3d(x, kernel, stride=1):
    """Adjoint of a per-channel strided correlation with ``kernel``.

    Each input value scatters a kernel-weighted copy onto the upsampled
    grid; output extent per axis is (n_in - 1) * stride + kernel_extent.
    The kernel (kd,kh,kw) is shared across channels and carries no
    channel mixing.
    """
    x = as_tensor(x)
    k = _param_tensor(kernel)
    stride = _triple(stride)
    if any(s < 1 for s in stride):
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.data.ndim != 4 or k.data.ndim != 3:
        raise ValueError("transposed_conv3d expects input (C,D,H,W) and kernel (kd,kh,kw)")

    out_data = _scatter3d(x.data, k.data, stride)

    def bw(out):
        g = out.grad
        if x.requires_grad:
            x._accumulate(_gather3d(g, k.data, stride, x.shape))
        if k.requires_grad:
            win = np.lib.stride_tricks.sliding_window_view(g, k.shape, axis=(1, 2, 3))
            win = win[:, :: stride[0], :: stride[1], :: stride[2]]
            k._accumulate(np.tensordot(x.data, win, axes=([0, 1, 2, 3], [0, 1, 2, 3])))

    return make_op(out_data, (x, k), bw)


def _scatter3d(x, k, stride):
    C = x.shape[0]
    out_shape = (C,) + tuple((x.shape[1 + a] - 1) * stride[a] + k.shape[a] for a in range(3))
    out = np.zeros(out_shape, dtype=np.result_type(x.dtype, k.dtype))
    for i in range(k.shape[0]):
        for j in range(k.shape[1]):
            for l in range(k.shape[2]):
                out[:, i: i + (x.shape[1] - 1) * stride[0] + 1: stride[0],
                       j: j + (x.shape[2] - 1) * stride[1] + 1: stride[1],
                       l: l + (x.shape[3] - 1) * stride[2] + 1: stride[2]] += k[i, j, l] * x
    return out


def _gather3d(g, k, stride, in_shape):
    win = np.lib.stride_tricks.sliding_window_view(g, k.shape, axis=(1, 2, 3))
    win = win[:, :: stride[0], :: stride[1], :: stride[2]]
    win = win[:, : in_shape[1], : in_shape[2], : in_shape[3]]
    return np.tensordot(win, k, axes=([4, 5, 6], [0, 1, 2]))


def scatter_separable(x, taps_per_axis, stride):
    """Separable transposed convolution (differentiable in x).

    Equivalent to transposed_conv3d with the outer-product kernel of the
    per-axis taps, but runs one axis at a time.
    """
    x = as_tensor(x)
    stride = _triple(stride)
    taps = [np.asarray(t, dtype=x.dtype) for t in taps_per_axis]

    def fwd(arr):
        for ax, (t, s) in enumerate(zip(taps, stride)):
            arr = _scatter_axis(arr, t, s, ax + 1)
        return arr

    def bw(out):
        if x.requires_grad:
            g = out.grad
            for ax in reversed(range(3)):
                g = _gather_axis(g, taps[ax], stride[ax], ax + 1, x.shape[ax + 1])
            x._accumulate(g)

    return make_op(fwd(x.data), (x,), bw)


def _scatter_axis(arr, taps, stride, axis):
    n = arr.shape[axis]
    out_shape = list(arr.shape)
    out_shape[axis] = (n - 1) * stride + len(taps)
    out = np.zeros(out_shape, dtype=arr.dtype)
    sl = [slice(None)] * arr.ndim
    for i, t in enumerate(taps):
        sl[axis] = slice(i, i + (n - 1) * stride + 1, stride)
        out[tuple(sl)] += t * arr
    return out


def _gather_axis(g, taps, stride, axis, n_out):
    out_shape = list(g.shape)
    out_shape[axis] = n_out
    out = np.zeros(out_shape, dtype=g.dtype)
    sl = [slice(None)] * g.ndim
    for i, t in enumerate(taps):
        sl[axis] = slice(i, i + (n_out - 1) * stride + 1, stride)
        out += t * g[tuple(sl)]
    return out


def avg_pool3d(x, window):
    """Non-overlapping windowed mean; extents must divide by the window."""
    x = as_tensor(x)
    w = _triple(window)
    C, D, H, W = x.shape
    if D % w[0] or H % w[1] or W % w[2]:
        raise ValueError(f"extents {(D, H, W)} not divisible by window {w}")
    r = x.data.reshape(C, D // w[0], w[0], H // w[1], w[1], W // w[2], w[2])
    out_data = r.mean(axis=(2, 4, 6))
    scale = 1.0 / (w[0] * w[1] * w[2])

    def bw(out):
        if x.requires_grad:
            g = out.grad[:, :, None, :, None, :, None] * scale
            x._accumulate(np.broadcast_to(g, r.shape).reshape(x.shape))

    return make_op(out_data, (x,), bw)


def global_avg_pool(x):
    """Spatial mean per channel: (C,D,H,W) -> (C,)."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError("global_avg_pool expects (C,D,H,W)")
    n = x.data[0].size
    if n == 0:
        raise ValueError("empty spatial extents")

    def bw(out):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(out.grad[:, None, None, None] / n, x.shape).copy())

    return make_op(x.data.mean(axis=(1, 2, 3)), (x,), bw)


# -- parameters, init, optimizer ----------------------------------------------

class Parameter:
    """Trainable tensor plus Adam moment buffers."""

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            self.value = data
            self.value.requires_grad = True
        else:
            self.value = Tensor(data, requires_grad=True, dtype=dtype)
        self.adam_m = np.zeros_like(self.value.data)
        self.adam_v = np.zeros_like(self.value.data)
        self.step_count = 0

    @property
    def data(self):
        return self.value.data

    @property
    def grad(self):
        return self.value.grad

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.value.grad = None


def _param_tensor(p):
    return p.value if isinstance(p, Parameter) else as_tensor(p)


def glorot_uniform_init(shape, fan_in, fan_out, seed, dtype=DEFAULT_DTYPE):
    """I.i.d. uniform on [-sqrt(6/(fan_in+fan_out)), +...], fixed by seed."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"zero-extent shape rejected: {shape}")
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be >= 1")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(-limit, limit, size=shape), dtype=dtype)


def zero_grad(params):
    for p in params:
        p.zero_grad()


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update in place; increments step counts."""
    for p in params:
        if p.grad is None:
            raise ValueError("adam_step: parameter has no gradient; run backward first")
        g = p.grad
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * g * g
        p.step_count += 1
        m_hat = p.adam_m / (1.0 - beta1**p.step_count)
        v_hat = p.adam_v / (1.0 - beta2**p.step_count)
        p.value.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.data.dtype, copy=False)


def sgd_step(params, lr):
    for p in params:
        if p.grad is None:
            raise ValueError("sgd_step: parameter has no gradient; run backward first")
        p.step_count += 1
        p.value.data -= (lr * p.grad).astype(p.value.data.dtype, copy=False)

"""Dense rank-4 tensors with reverse-mode automatic differentiation.

Every layer the density-estimation network needs is implemented here as a
forward function plus a recorded gradient closure: dilated 2-D convolution,
2x2 max pooling, adaptive average pooling, bilinear upsampling, relu/sigmoid,
broadcasted elementwise arithmetic and channel concatenation. Convolutions
are evaluated as im2col + BLAS matmul; the im2col gather (and the other
index-heavy kernels) live in :mod:`crowdscale.backend`.

Gradients are accumulated in a fixed reverse-topological order keyed on node
creation sequence, so two runs with the same seed are bit-identical.
"""

import contextlib

import numpy as np

from . import backend
from .errors import ConfigurationError, DimensionError, UsageError

EPS_DIV = 1e-8

_grad_enabled = True
_seq_counter = 0


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor4:
    """A (n, c, h, w) array with an optional gradient buffer.

    Non-leaf tensors remember their parents, a gradient closure per parent
    and a replay closure that recomputes the forward value from the parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_forward", "_seq")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), forward=None):
        global _seq_counter
        data = np.asarray(data)
        if data.ndim != 4:
            raise DimensionError(f"Tensor4 needs 4 dims, got shape {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        self.data = np.ascontiguousarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents  # tuple of (Tensor4, grad_fn)
        self._forward = forward
        _seq_counter += 1
        self._seq = _seq_counter

    @property
    def dims(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.dims}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor4(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor4(dims={self.dims}, dtype={self.data.dtype.name}, op={self.op!r})"


def _result(data, op, parents, forward):
    """Build an op output, recording the graph only when it matters."""
    track = _grad_enabled and any(p.requires_grad for p, _ in parents)
    if track:
        return Tensor4(data, requires_grad=True, op=op, parents=tuple(parents),
                       forward=forward)
    return Tensor4(data, op=op)


class Graph:
    """Topologically ordered record of the operations below a root node."""

    def __init__(self, root):
        order = []
        seen = set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for parent, _ in node._parents:
                visit(parent)
            order.append(node)

        visit(root)
        order.sort(key=lambda t: t._seq)
        self.nodes = order

    def replay(self):
        """Re-execute every recorded op in order, refreshing node values."""
        for node in self.nodes:
            if node._forward is not None:
                node.data = np.ascontiguousarray(node._forward())
        return self.nodes[-1].data


def backward(loss):
    """Populate .grad on every requires_grad tensor reachable from `loss`."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.dims}")
    if not loss.requires_grad:
        raise UsageError("backward on a tensor with no recorded graph")
    graph = Graph(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        gy = grads.pop(id(node), None)
        if gy is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += gy
        for parent, grad_fn in node._parents:
            if not parent.requires_grad:
                continue
            contrib = grad_fn(gy)
            acc = grads.get(id(parent))
            if acc is None:
                # copy: grad_fns may return views/aliases of upstream buffers
                grads[id(parent)] = np.array(contrib)
            else:
                acc += contrib
    return graph


# ---------------------------------------------------------------------------
# convolution

def _conv_forward_data(x, w, bias_data, dilation, padding):
    n, c, h, ww = x.shape
    oc, ic, k, k2 = w.shape
    eff = dilation * (k - 1) + 1
    out_h = h + 2 * padding - eff + 1
    out_w = ww + 2 * padding - eff + 1
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(f"conv output empty for input {x.shape}, k={k}, "
                             f"dilation={dilation}, padding={padding}")
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    if k == 1 and dilation == 1:
        # 1x1 conv: plain channel matmul, no gather needed
        out = np.matmul(w.reshape(oc, ic), xp.reshape(n, ic, -1))
    else:
        cols = backend.im2col(np.ascontiguousarray(xp), k, dilation, out_h, out_w)
        out = np.matmul(w.reshape(oc, ic * k * k), cols)
    out = out.reshape(n, oc, out_h, out_w)
    if bias_data is not None:
        out = out + bias_data.reshape(1, oc, 1, 1)
    return np.ascontiguousarray(out)


def conv2d(x, weight, bias=None, dilation=1, padding=None):
    """Dilated 2-D convolution (cross-correlation), stride 1.

    `padding=None` means "same" mode: dilation*(k-1)/2, requiring odd k.
    Bias is a Tensor4 of dims (1, outC, 1, 1) or a 1-D array of length outC.
    """
    oc, ic, k, k2 = weight.dims
    if k != k2:
        raise ConfigurationError(f"non-square kernel {k}x{k2}")
    if x.dims[1] != ic:
        raise DimensionError(f"conv2d input has {x.dims[1]} channels, weight expects {ic}")
    if dilation < 1:
        raise ConfigurationError(f"dilation must be >= 1, got {dilation}")
    if padding is None:
        if k % 2 == 0:
            raise ConfigurationError(f"'same' mode needs odd kernel size, got {k}")
        padding = dilation * (k - 1) // 2

    bias_t = None
    bias_data = None
    if bias is not None:
        if isinstance(bias, Tensor4):
            bias_t = bias
            bias_data = bias.data
            if bias_data.shape != (1, oc, 1, 1):
                raise DimensionError(f"bias dims {bias.dims}, expected (1, {oc}, 1, 1)")
        else:
            bias_data = np.asarray(bias, dtype=x.dtype)
            if bias_data.shape != (oc,):
                raise DimensionError(f"bias shape {bias_data.shape}, expected ({oc},)")

    out = _conv_forward_data(x.data, weight.data, bias_data, dilation, padding)
    out_h, out_w = out.shape[2:]

    def grad_x(gy):
        back_pad = dilation * (k - 1) - padding
        if back_pad < 0:
            raise UsageError("conv2d backward unsupported for padding > dilation*(k-1)")
        wf = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return _conv_forward_data(np.ascontiguousarray(gy), wf, None, dilation, back_pad)

    def grad_w(gy):
        xp = x.data
        if padding:
            xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        dw = np.empty_like(weight.data)
        for ky in range(k):
            for kx in range(k):
                sl = xp[:, :, ky * dilation:ky * dilation + out_h,
                        kx * dilation:kx * dilation + out_w]
                dw[:, :, ky, kx] = np.einsum("nihw,nohw->oi", sl, gy)
        return dw

    parents = [(x, grad_x), (weight, grad_w)]
    if bias_t is not None:
        parents.append((bias_t, lambda gy: gy.sum(axis=(0, 2, 3)).reshape(1, oc, 1, 1)))

    def forward():
        bd = bias_t.data if bias_t is not None else bias_data
        return _conv_forward_data(x.data, weight.data, bd, dilation, padding)

    return _result(out, "conv2d", parents, forward)


# ---------------------------------------------------------------------------
# pooling

def max_pool2(x):
    """2x2 max pooling, stride 2. Gradient routes to the first argmax."""
    n, c, h, w = x.dims
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    out, idx = backend.maxpool2_forward(x.data)

    def grad_x(gy):
        return backend.maxpool2_backward(np.ascontiguousarray(gy), idx, h, w)

    def forward():
        nonlocal idx
        o, idx = backend.maxpool2_forward(x.data)
        return o

    return _result(out, "max_pool2", [(x, grad_x)], forward)


def _block_bounds(size, k):
    """Adaptive-pool block edges: [floor(i*size/k), ceil((i+1)*size/k))."""
    starts = [(i * size) // k for i in range(k)]
    ends = [-(-((i + 1) * size) // k) for i in range(k)]
    return starts, ends


def adaptive_avg_pool(x, k):
    """Average the input into a k x k grid of (possibly overlapping) blocks."""
    n, c, h, w = x.dims
    if k < 1 or k > min(h, w):
        raise ConfigurationError(f"adaptive pool k={k} invalid for {h}x{w} input")
    ys, ye = _block_bounds(h, k)
    xs, xe = _block_bounds(w, k)

    def compute(data):
        out = np.empty((n, c, k, k), dtype=data.dtype)
        for i in range(k):
            for j in range(k):
                out[:, :, i, j] = data[:, :, ys[i]:ye[i], xs[j]:xe[j]].mean(axis=(2, 3))
        return out

    def grad_x(gy):
        dx = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                area = (ye[i] - ys[i]) * (xe[j] - xs[j])
                dx[:, :, ys[i]:ye[i], xs[j]:xe[j]] += gy[:, :, i:i + 1, j:j + 1] / area
        return dx

    return _result(compute(x.data), "adaptive_avg_pool", [(x, grad_x)],
                   lambda: compute(x.data))


# ---------------------------------------------------------------------------
# bilinear upsampling

def _resample_coeffs(src, dst, dtype):
    """Half-pixel source coordinates, clamped to the valid range."""
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1.0)
    i0 = np.floor(pos).astype(np.intp)
    i0 = np.minimum(i0, src - 1)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = (pos - i0).astype(dtype)
    return i0, i1, frac


def bilinear_upsample(x, out_h, out_w):
    """Upsample to (out_h, out_w) with the half-pixel convention, edges clamped."""
    n, c, h, w = x.dims
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"target size {out_h}x{out_w} is empty")
    if out_h < h or out_w < w:
        raise DimensionError(f"bilinear_upsample cannot shrink {h}x{w} to {out_h}x{out_w}")
    y0, y1, wy = _resample_coeffs(h, out_h, x.dtype)
    x0, x1, wx = _resample_coeffs(w, out_w, x.dtype)
    out = backend.bilinear_forward(x.data, y0, y1, wy, x0, x1, wx)

    def grad_x(gy):
        return backend.bilinear_backward(np.ascontiguousarray(gy),
                                         y0, y1, wy, x0, x1, wx, h, w)

    return _result(out, "bilinear_upsample", [(x, grad_x)],
                   lambda: backend.bilinear_forward(x.data, y0, y1, wy, x0, x1, wx))


# ---------------------------------------------------------------------------
# activations and elementwise arithmetic

def activation(x, kind):
    if kind == "relu":
        out = np.maximum(x.data, 0)

        def grad_x(gy):
            return gy * (x.data > 0)

        return _result(out, "relu", [(x, grad_x)], lambda: np.maximum(x.data, 0))
    if kind == "sigmoid":
        def compute(data):
            out = np.empty_like(data)
            np.negative(data, out=out)
            np.exp(out, out=out)
            out += 1.0
            np.reciprocal(out, out=out)
            return out

        out = compute(x.data)

        def grad_x(gy, out=out):
            return gy * out * (1 - out)

        return _result(out, "sigmoid", [(x, grad_x)], lambda: compute(x.data))
    raise ConfigurationError(f"unknown activation {kind!r}")


def relu(x):
    return activation(x, "relu")


def sigmoid(x):
    return activation(x, "sigmoid")


def _check_broadcast(a, b):
    na, ca, ha, wa = a.dims
    nb, cb, hb, wb = b.dims
    if (na, ha, wa) != (nb, hb, wb) or (ca != cb and cb != 1):
        raise DimensionError(f"cannot broadcast {b.dims} against {a.dims}")
    return ca != cb


def _reduce_to(g, dims):
    if g.shape == dims:
        return g
    return g.sum(axis=1, keepdims=True)


def elementwise(a, b, kind):
    """Elementwise add/sub/mul/div; b may be a 1-channel map broadcast over
    a's channels. div guards the denominator with EPS_DIV."""
    _check_broadcast(a, b)
    if kind == "add":
        compute = lambda: a.data + b.data
        ga = lambda gy: gy
        gb = lambda gy: _reduce_to(gy, b.dims)
    elif kind == "sub":
        compute = lambda: a.data - b.data
        ga = lambda gy: gy
        gb = lambda gy: _reduce_to(-gy, b.dims)
    elif kind == "mul":
        compute = lambda: a.data * b.data
        ga = lambda gy: gy * b.data
        gb = lambda gy: _reduce_to(gy * a.data, b.dims)
    elif kind == "div":
        compute = lambda: a.data / (b.data + EPS_DIV)
        ga = lambda gy: gy / (b.data + EPS_DIV)
        gb = lambda gy: _reduce_to(-gy * a.data / (b.data + EPS_DIV) ** 2, b.dims)
    else:
        raise ConfigurationError(f"unknown elementwise kind {kind!r}")
    return _result(compute(), kind, [(a, ga), (b, gb)], compute)


def add(a, b):
    return elementwise(a, b, "add")


def sub(a, b):
    return elementwise(a, b, "sub")


def mul(a, b):
    return elementwise(a, b, "mul")


def div(a, b):
    return elementwise(a, b, "div")


def scale(x, alpha):
    """Multiply by a python scalar."""
    alpha = float(alpha)
    return _result(x.data * alpha, "scale", [(x, lambda gy: gy * alpha)],
                   lambda: x.data * alpha)


def concat_channels(parts):
    """Concatenate along the channel axis; spatial and batch dims must agree."""
    if not parts:
        raise DimensionError("concat_channels needs at least one part")
    n, _, h, w = parts[0].dims
    for p in parts[1:]:
        pn, _, ph, pw = p.dims
        if (pn, ph, pw) != (n, h, w):
            raise DimensionError(f"concat part dims {p.dims} mismatch {(n, h, w)}")
    out = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.dims[1] for p in parts])

    def make_grad(lo, hi):
        return lambda gy: gy[:, lo:hi]

    parents = [(p, make_grad(offsets[i], offsets[i + 1])) for i, p in enumerate(parts)]
    return _result(out, "concat", parents,
                   lambda: np.concatenate([p.data for p in parts], axis=1))


def tensor_sum(x):
    """Sum all elements into a (1,1,1,1) scalar tensor."""
    out = np.array(x.data.sum(dtype=np.float64), dtype=x.dtype).reshape(1, 1, 1, 1)
    return _result(out, "sum", [(x, lambda gy: np.full_like(x.data, gy.reshape(-1)[0]))],
                   lambda: np.array(x.data.sum(dtype=np.float64),
                                    dtype=x.dtype).reshape(1, 1, 1, 1))

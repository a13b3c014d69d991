"""Dense tensors with reverse-mode automatic differentiation.

Values are stored as numpy arrays (float32 by default, float64 for gradient
checking). Every operator returns a fresh Tensor and, when gradients are
enabled, records a backward closure; Tensor.backward() replays the closures
in reverse topological order. The operator set is exactly what the UPANets
family of models needs: conv2d (im2col + one matmul core), average pooling,
matmul, batch/layer norm, relu, softmax cross-entropy, channel concat and a
handful of shape/elementwise helpers.
"""

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, DimensionError, InputError, NumericError, StateError

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_finite_checks = False


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / perturbation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def debug_finite(enabled=True):
    """Check every operator output for non-finite values inside the block."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


class Tensor:
    """N-dimensional array plus optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        arr = data if isinstance(data, np.ndarray) else np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor back to every graph leaf."""
        if not self.requires_grad:
            raise StateError("backward() called on a tensor outside the gradient tape")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accum(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data, parents, backward, op_name):
    """Wrap an operator output, attaching the tape node when needed."""
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NumericError(f"{op_name}: non-finite values in operator output")
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum a gradient down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / shape operators


def add(a, b):
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        data = a.data + b

        def backward(g):
            a._accum(g)

        return _result(data, (a,), backward, "add")
    b = _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _result(data, (a, b), backward, "add")


def sub(a, b):
    return add(a, mul(b, -1.0) if isinstance(b, Tensor) else -b)


def mul(a, b):
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        data = a.data * b

        def backward(g):
            a._accum(g * b)

        return _result(data, (a,), backward, "mul")
    b = _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward, "mul")


def reshape(x, shape):
    x = _as_tensor(x)
    old = x.shape
    data = x.data.reshape(shape)

    def backward(g):
        x._accum(g.reshape(old))

    return _result(data, (x,), backward, "reshape")


def transpose(x, axes):
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = x.data.transpose(axes)

    def backward(g):
        x._accum(g.transpose(inv))

    return _result(data, (x,), backward, "transpose")


def relu(x):
    x = _as_tensor(x)
    data = np.maximum(x.data, 0)

    def backward(g):
        x._accum(g * (x.data > 0))

    return _result(data, (x,), backward, "relu")


def sum_all(x):
    """Sum of every element, as a scalar tensor."""
    x = _as_tensor(x)
    data = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        x._accum(np.broadcast_to(g, x.shape))

    return _result(data, (x,), backward, "sum_all")


def spatial_mean(x):
    """Per-channel spatial mean of an N,C,H,W tensor (global average pooling)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"spatial_mean expects N,C,H,W input, got shape {x.shape}")
    n, c, h, w = x.shape
    data = x.data.mean(axis=(2, 3))

    def backward(g):
        x._accum(np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)))

    return _result(data, (x,), backward, "spatial_mean")


def matmul(a, b):
    """a[..., M, K] @ b[K, P]; the right factor is a plain matrix."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects a[..., M, K] and b[K, P], got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} vs {b.shape}")
    k, p = b.shape
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.reshape(-1, k).T @ g.reshape(-1, p))

    return _result(data, (a, b), backward, "matmul")


def concat_channels(parts):
    """Concatenate N,C_i,H,W tensors along the channel axis, order preserved."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_channels needs at least one part")
    first = parts[0]
    for p in parts:
        if p.ndim != 4:
            raise DimensionError(f"concat_channels expects N,C,H,W parts, got shape {p.shape}")
        if p.shape[0] != first.shape[0] or p.shape[2:] != first.shape[2:]:
            raise DimensionError(f"concat_channels spatial/batch mismatch: {p.shape} vs {first.shape}")
    data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accum(g[:, lo:hi])

    return _result(data, tuple(parts), backward, "concat_channels")


# ---------------------------------------------------------------------------
# convolution / pooling


def _conv_out_extent(extent, k, stride, pad, what):
    span = extent + 2 * pad - k
    if span < 0:
        raise DimensionError(f"conv2d kernel {what} extent {k} exceeds padded input {extent + 2 * pad}")
    if span % stride != 0:
        raise ConfigError(f"conv2d produces a non-integer output {what} extent "
                          f"((={extent}+2*{pad}-{k}) not divisible by stride {stride})")
    return span // stride + 1


def _windows(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(xp, (n, c, kh, kw, ho, wo), (sn, sc, sh, sw, stride * sh, stride * sw),
                      writeable=False)


def _im2col(x, kh, kw, stride, pad, ho, wo):
    """Patch matrix of shape [N*Ho*Wo, C*kh*kw] for a N,C,H,W array."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, kh, kw, stride, ho, wo)
    n, c = x.shape[:2]
    return win.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * kh * kw)


def _col2im(dwin, xshape, kh, kw, stride, pad):
    """Scatter window gradients [N,C,kh,kw,Ho,Wo] back onto the input."""
    n, c, h, w = xshape
    ho, wo = dwin.shape[4], dwin.shape[5]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dwin.dtype)
    for a in range(kh):
        for b in range(kw):
            dxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += dwin[:, :, a, b]
    if pad:
        return dxp[:, :, pad:pad + h, pad:pad + w]
    return dxp


def conv2d(x, kernel, bias=None, stride=1, pad=0, groups=1):
    """2-D convolution; kernel is [Cout, Cin/groups, kh, kw].

    Forward runs as an explicit patch-matrix multiplication per group; the
    backward pass reuses the same construction transposed. The patch matrix
    is rebuilt in backward rather than cached, trading a little compute for
    a much smaller live graph.
    """
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = kernel.shape
    if stride < 1:
        raise ConfigError(f"conv2d stride must be >= 1, got {stride}")
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"conv2d groups={groups} must divide Cin={cin} and Cout={cout}")
    if cin_g * groups != cin:
        raise DimensionError(f"conv2d kernel expects {cin_g * groups} input channels, input has {cin}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    ho = _conv_out_extent(h, kh, stride, pad, "height")
    wo = _conv_out_extent(w, kw, stride, pad, "width")

    cout_g = cout // groups
    outs = []
    for gi in range(groups):
        xs = x.data[:, gi * cin_g:(gi + 1) * cin_g]
        cols = _im2col(xs, kh, kw, stride, pad, ho, wo)
        wmat = kernel.data[gi * cout_g:(gi + 1) * cout_g].reshape(cout_g, -1)
        outs.append(cols @ wmat.T)
    data = np.concatenate(outs, axis=1).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        data = data + bias.data[None, :, None, None]

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)
        dx = np.zeros_like(x.data) if x.requires_grad else None
        dk = np.zeros_like(kernel.data) if kernel.requires_grad else None
        for gi in range(groups):
            xs = x.data[:, gi * cin_g:(gi + 1) * cin_g]
            g2 = gt[..., gi * cout_g:(gi + 1) * cout_g].reshape(n * ho * wo, cout_g)
            wmat = kernel.data[gi * cout_g:(gi + 1) * cout_g].reshape(cout_g, -1)
            if dk is not None:
                cols = _im2col(xs, kh, kw, stride, pad, ho, wo)
                dk[gi * cout_g:(gi + 1) * cout_g] = (g2.T @ cols).reshape(cout_g, cin_g, kh, kw)
            if dx is not None:
                dcols = g2 @ wmat
                dwin = dcols.reshape(n, ho, wo, cin_g, kh, kw).transpose(0, 3, 4, 5, 1, 2)
                dx[:, gi * cin_g:(gi + 1) * cin_g] = _col2im(dwin, xs.shape, kh, kw, stride, pad)
        if dx is not None:
            x._accum(dx)
        if dk is not None:
            kernel._accum(dk)
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(data, parents, backward, "conv2d")


def avgpool2d(x, k, stride):
    """k x k average pooling; window grid must tile the input exactly."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"avgpool2d expects N,C,H,W input, got shape {x.shape}")
    if k < 1 or stride < 1:
        raise ConfigError(f"avgpool2d needs k >= 1 and stride >= 1, got k={k} stride={stride}")
    n, c, h, w = x.shape
    if h < k or w < k or (h - k) % stride or (w - k) % stride:
        raise ConfigError(f"avgpool2d windows (k={k}, stride={stride}) do not tile a {h}x{w} input")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1

    if k == stride:
        data = x.data.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))

        def backward(g):
            x._accum(np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k))
    else:
        win = _windows(x.data, k, k, stride, ho, wo)
        data = win.mean(axis=(2, 3))

        def backward(g):
            dwin = np.broadcast_to(g[:, :, None, None] / (k * k), (n, c, k, k, ho, wo))
            x._accum(_col2im(dwin, x.shape, k, k, stride, 0))

    return _result(data, (x,), backward, "avgpool2d")


# ---------------------------------------------------------------------------
# normalization


class RunningStats:
    """Per-channel running mean/variance for batch norm (updated in place)."""

    def __init__(self, channels, dtype=DEFAULT_DTYPE):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.batches = np.zeros(1, dtype=dtype)

    @property
    def initialized(self):
        return self.batches[0] > 0


def batchnorm2d(x, gamma, beta, stats, mode, eps=1e-5, momentum=0.1):
    """Channel-wise batch normalization over the N, H, W axes."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects N,C,H,W input, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"batchnorm2d mode must be 'train' or 'eval', got {mode!r}")
    bc = (None, slice(None), None, None)

    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[bc]) * inv[bc]
        data = gamma.data[bc] * xhat + beta.data[bc]
        # running stats kept with the unbiased variance estimate
        stats.mean *= 1.0 - momentum
        stats.mean += momentum * mu.astype(stats.mean.dtype)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        stats.var *= 1.0 - momentum
        stats.var += momentum * unbiased.astype(stats.var.dtype)
        stats.batches += 1

        def backward(g):
            if gamma.requires_grad:
                gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accum(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gg = g * gamma.data[bc]
                gmean = gg.mean(axis=(0, 2, 3))
                gxmean = (gg * xhat).mean(axis=(0, 2, 3))
                x._accum(inv[bc] * (gg - gmean[bc] - xhat * gxmean[bc]))
    else:
        if not stats.initialized:
            raise StateError("batchnorm2d eval mode before any training step: running stats uninitialized")
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (x.data - stats.mean[bc]) * inv[bc]
        data = gamma.data[bc] * xhat + beta.data[bc]

        def backward(g):
            if gamma.requires_grad:
                gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accum(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                x._accum(g * (gamma.data * inv)[bc])

    return _result(data, (x, gamma, beta), backward, "batchnorm2d")


def layernorm(x, gamma, beta, normalized_shape, eps=1e-5):
    """Normalize over the trailing `normalized_shape` extents of each sample."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    normalized_shape = tuple(normalized_shape)
    k = len(normalized_shape)
    if k == 0 or x.ndim < k or x.shape[x.ndim - k:] != normalized_shape:
        raise DimensionError(f"layernorm extents {normalized_shape} do not match input shape {x.shape}")
    if gamma.shape != normalized_shape or beta.shape != normalized_shape:
        raise DimensionError(f"layernorm gamma/beta must have shape {normalized_shape}, "
                             f"got {gamma.shape}/{beta.shape}")
    axes = tuple(range(x.ndim - k, x.ndim))
    lead = tuple(range(x.ndim - k))
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=lead) if lead else g * xhat)
        if beta.requires_grad:
            beta._accum(g.sum(axis=lead) if lead else g)
        if x.requires_grad:
            gg = g * gamma.data
            gmean = gg.mean(axis=axes, keepdims=True)
            gxmean = (gg * xhat).mean(axis=axes, keepdims=True)
            x._accum(inv * (gg - gmean - xhat * gxmean))

    return _result(data, (x, gamma, beta), backward, "layernorm")


def softmax_crossentropy(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax logits."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_crossentropy expects N,K logits, got shape {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    data = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits._accum(p * (g / n))

    return _result(data, (logits,), backward, "softmax_crossentropy")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradReport:
    """Worst-case disagreement between reverse mode and finite differences."""

    op_name: str
    max_rel_error: float
    worst_index: int


def grad_check(function, inputs, eps=1e-5, samples_per_input=None, seed=0, zero_tol=1e-7):
    """Compare reverse-mode gradients against central finite differences.

    `function` must map the given tensors to a scalar Tensor and be a pure
    function of them (closures over the same objects are fine, which is how
    whole models are checked: pass the model's own parameters). Inputs must
    be float64; float32 steps drown in rounding noise. With
    `samples_per_input` set, only that many coordinates per input are probed
    (chosen deterministically), which keeps large-model checks tractable.

    Relative error uses max(|analytic|, |numeric|) floored at 1e-8 as the
    denominator; `worst_index` is a flat index into the inputs laid end to
    end. Two situations are counted as agreement because central differences
    cannot measure them, while a genuinely wrong backward formula still gets
    caught: (a) both sides below `zero_tol` (normalization layers produce
    exact zeros, e.g. a bias feeding straight into batch norm, and FD noise
    is |f| * ulp / eps); (b) the difference quotients at eps and eps/2
    disagree, which means a relu kink sits inside the probe interval -- a
    real gradient bug reproduces identically at both step sizes.
    """
    tens = []
    for item in inputs:
        if isinstance(item, Tensor):
            if item.dtype != np.float64:
                raise ConfigError("grad_check needs float64 tensors; cast the model/inputs first")
            item.requires_grad = True
            item.grad = None
            tens.append(item)
        else:
            tens.append(Tensor(np.asarray(item, dtype=np.float64), requires_grad=True))
    name = getattr(function, "__name__", None) or "function"

    with debug_finite():
        out = function(*tens)
    if not isinstance(out, Tensor) or out.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = [t.grad.reshape(-1).copy() if t.grad is not None else np.zeros(t.size) for t in tens]

    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_index = 0
    offset = 0
    for t, ag in zip(tens, analytic):
        n = t.size
        if samples_per_input is None or samples_per_input >= n:
            coords = range(n)
        else:
            coords = np.sort(rng.choice(n, size=samples_per_input, replace=False))
        flat = t.data.reshape(-1)
        for i in coords:
            saved = flat[i]

            def probe(step):
                with no_grad(), debug_finite():
                    flat[i] = saved + step
                    f_plus = float(function(*tens).data)
                    flat[i] = saved - step
                    f_minus = float(function(*tens).data)
                flat[i] = saved
                return (f_plus - f_minus) / (2.0 * step)

            numeric = probe(eps)
            if abs(ag[i]) < zero_tol and abs(numeric) < zero_tol:
                continue
            rel = abs(ag[i] - numeric) / max(1e-8, abs(ag[i]), abs(numeric))
            if rel > 1e-4:
                half = probe(eps / 2.0)
                if abs(numeric - half) > 1e-4 * max(1e-8, abs(numeric), abs(half)):
                    continue  # kink inside the probe interval; FD is meaningless here
                rel = abs(ag[i] - half) / max(1e-8, abs(ag[i]), abs(half))
            if rel > worst:
                worst = rel
                worst_index = offset + int(i)
        offset += n
    return GradReport(op_name=name, max_rel_error=float(worst), worst_index=worst_index)

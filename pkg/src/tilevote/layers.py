"""Neural-net building blocks with explicit forward/backward passes.

Everything runs on NCHW numpy arrays. Each layer exposes

    forward(x, mode)  -> (y, cache)
    backward(dy, cache) -> (dx, grads)

where ``grads`` maps parameter names to arrays shaped like the parameters.
Convolutions use im2col + GEMM; the backward pass scatters gradients back
with one slice-add per kernel offset. Batch-norm keeps running statistics
that are updated only in ``"train"`` mode, so ``"eval"`` forwards are pure
functions of (parameters, buffers, input).
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError

TRAIN, EVAL = "train", "eval"


def _check_mode(mode):
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


class Conv2d:
    """3x3 / 1x1 convolution without bias (batch norm follows every conv)."""

    def __init__(self, name, in_ch, out_ch, ksize, stride=1, pad=None, rng=None,
                 dtype=np.float32):
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        self.stride = stride
        self.pad = (ksize // 2) if pad is None else pad
        fan_in = in_ch * ksize * ksize
        rng = rng or np.random.default_rng()
        self.w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                            size=(out_ch, in_ch, ksize, ksize)).astype(dtype)

    def params(self):
        return {f"{self.name}.w": self.w}

    def decayable(self):
        return {f"{self.name}.w"}

    def forward(self, x, mode):
        n, c, h, w = x.shape
        if c != self.in_ch:
            raise ShapeError(f"{self.name}: expected {self.in_ch} channels, got {c}")
        k, s, p = self.ksize, self.stride, self.pad
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if p:
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        else:
            xp = x
        sn, sc, sh, sw = xp.strides
        windows = as_strided(
            xp,
            shape=(n, c, oh, ow, k, k),
            strides=(sn, sc, sh * s, sw * s, sh, sw),
        )
        cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
        cols = cols.reshape(n * oh * ow, c * k * k)
        wmat = self.w.reshape(self.out_ch, -1)
        out = cols @ wmat.T
        out = out.reshape(n, oh, ow, self.out_ch).transpose(0, 3, 1, 2)
        cache = (xp.shape, cols, (n, oh, ow))
        return np.ascontiguousarray(out), cache

    def backward(self, dy, cache):
        xp_shape, cols, (n, oh, ow) = cache
        k, s, p = self.ksize, self.stride, self.pad
        dmat = dy.transpose(0, 2, 3, 1).reshape(n * oh * ow, self.out_ch)
        dw = (dmat.T @ cols).reshape(self.w.shape)
        dcols = dmat @ self.w.reshape(self.out_ch, -1)
        dcols = dcols.reshape(n, oh, ow, self.in_ch, k, k)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        if p:
            dx = dxp[:, :, p:-p, p:-p]
        else:
            dx = dxp
        return dx, {f"{self.name}.w": dw}


class BatchNorm2d:
    """Per-channel batch normalization with running statistics."""

    def __init__(self, name, num_ch, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.name = name
        self.num_ch = num_ch
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(num_ch, dtype=dtype)
        self.beta = np.zeros(num_ch, dtype=dtype)
        self.running_mean = np.zeros(num_ch, dtype=dtype)
        self.running_var = np.ones(num_ch, dtype=dtype)

    def params(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def decayable(self):
        return set()  # norm scales/shifts are never weight-decayed

    def buffers(self):
        return {
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
        }

    def forward(self, x, mode):
        _check_mode(mode)
        g = self.gamma[None, :, None, None]
        b = self.beta[None, :, None, None]
        if mode == TRAIN:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            inv_std = 1.0 / np.sqrt(var + self.eps)
            x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
            m = self.momentum
            self.running_mean += (m * (mean - self.running_mean)).astype(self.running_mean.dtype)
            self.running_var += (m * (var - self.running_var)).astype(self.running_var.dtype)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            x_hat = (x - self.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = g * x_hat + b
        cache = (x_hat, inv_std, mode)
        return y, cache

    def backward(self, dy, cache):
        x_hat, inv_std, mode = cache
        dgamma = (dy * x_hat).sum(axis=(0, 2, 3))
        dbeta = dy.sum(axis=(0, 2, 3))
        g_inv = (self.gamma * inv_std)[None, :, None, None]
        if mode == TRAIN:
            # account for the dependence of batch mean/var on x
            m = dy.shape[0] * dy.shape[2] * dy.shape[3]
            dx = g_inv * (
                dy
                - dbeta[None, :, None, None] / m
                - x_hat * dgamma[None, :, None, None] / m
            )
        else:
            dx = g_inv * dy
        grads = {f"{self.name}.gamma": dgamma, f"{self.name}.beta": dbeta}
        return dx, grads


class ReLU:
    def forward(self, x, mode):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask):
        return dy * mask, {}


class GlobalAvgPool:
    """(N, C, H, W) -> (N, C) spatial mean."""

    def forward(self, x, mode):
        n, c, h, w = x.shape
        return x.mean(axis=(2, 3)), (h, w)

    def backward(self, dy, cache):
        h, w = cache
        dx = np.broadcast_to(dy[:, :, None, None] / (h * w), dy.shape + (h, w))
        return np.ascontiguousarray(dx), {}


class Dense:
    def __init__(self, name, in_dim, out_dim, rng=None, dtype=np.float32):
        self.name = name
        rng = rng or np.random.default_rng()
        self.w = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(in_dim, out_dim)).astype(dtype)
        self.b = np.zeros(out_dim, dtype=dtype)

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def decayable(self):
        return {f"{self.name}.w"}

    def forward(self, x, mode):
        return x @ self.w + self.b, x

    def backward(self, dy, x):
        dw = x.T @ dy
        db = dy.sum(axis=0)
        dx = dy @ self.w.T
        return dx, {f"{self.name}.w": dw, f"{self.name}.b": db}


class ResidualBlock:
    """conv-bn-relu-conv-bn plus shortcut, then relu (basic block)."""

    def __init__(self, name, in_ch, out_ch, stride=1, rng=None, dtype=np.float32):
        self.name = name
        self.conv1 = Conv2d(f"{name}.conv1", in_ch, out_ch, 3, stride=stride, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(f"{name}.bn1", out_ch, dtype=dtype)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(f"{name}.conv2", out_ch, out_ch, 3, stride=1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(f"{name}.bn2", out_ch, dtype=dtype)
        self.relu2 = ReLU()
        if stride != 1 or in_ch != out_ch:
            self.short_conv = Conv2d(f"{name}.short", in_ch, out_ch, 1, stride=stride,
                                     pad=0, rng=rng, dtype=dtype)
            self.short_bn = BatchNorm2d(f"{name}.short_bn", out_ch, dtype=dtype)
        else:
            self.short_conv = None
            self.short_bn = None

    def sublayers(self):
        out = [self.conv1, self.bn1, self.conv2, self.bn2]
        if self.short_conv is not None:
            out += [self.short_conv, self.short_bn]
        return out

    def forward(self, x, mode):
        y, c1 = self.conv1.forward(x, mode)
        y, cb1 = self.bn1.forward(y, mode)
        y, cr1 = self.relu1.forward(y, mode)
        y, c2 = self.conv2.forward(y, mode)
        y, cb2 = self.bn2.forward(y, mode)
        if self.short_conv is not None:
            sh, cs = self.short_conv.forward(x, mode)
            sh, csb = self.short_bn.forward(sh, mode)
        else:
            sh, cs, csb = x, None, None
        y = y + sh
        y, cr2 = self.relu2.forward(y, mode)
        return y, (c1, cb1, cr1, c2, cb2, cs, csb, cr2)

    def backward(self, dy, cache):
        c1, cb1, cr1, c2, cb2, cs, csb, cr2 = cache
        grads = {}
        dy, _ = self.relu2.backward(dy, cr2)
        d_main = dy
        d_short = dy
        if self.short_conv is not None:
            d_short, g = self.short_bn.backward(d_short, csb)
            grads.update(g)
            d_short, g = self.short_conv.backward(d_short, cs)
            grads.update(g)
        d_main, g = self.bn2.backward(d_main, cb2)
        grads.update(g)
        d_main, g = self.conv2.backward(d_main, c2)
        grads.update(g)
        d_main, _ = self.relu1.backward(d_main, cr1)
        d_main, g = self.bn1.backward(d_main, cb1)
        grads.update(g)
        d_main, g = self.conv1.backward(d_main, c1)
        grads.update(g)
        return d_main + d_short, grads


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, numerically stabilized."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy loss and its gradient w.r.t. logits.

    Uses the log-sum-exp form for stability; gradient is
    (softmax - onehot) / batch.
    """
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits

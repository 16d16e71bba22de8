"""Layer primitives of the segmentation network, forward and backward.

All tensors are plain numpy arrays laid out as ``(batch, height, width,
features)``. Every forward function is pure; backward functions take the
quantities saved by the forward pass and return exact analytic gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5
BN_DECAY = 0.9


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's preconditions."""


@dataclass
class ConvKernel:
    """Kernel of shape ``(hk, wk, fin, fout)`` plus a bias of length ``fout``."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"kernel weights must be rank 4, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[3],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match fout={self.weights.shape[3]}"
            )

    @classmethod
    def zeros(cls, hk, wk, fin, fout, dtype=np.float64):
        return cls(np.zeros((hk, wk, fin, fout), dtype=dtype), np.zeros(fout, dtype=dtype))

    @property
    def shape(self):
        return self.weights.shape


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    run_mean: np.ndarray
    run_var: np.ndarray
    eps: float = BN_EPS
    decay: float = BN_DECAY

    @classmethod
    def identity(cls, f, dtype=np.float64, eps=BN_EPS, decay=BN_DECAY):
        return cls(
            gamma=np.ones(f, dtype=dtype),
            beta=np.zeros(f, dtype=dtype),
            run_mean=np.zeros(f, dtype=dtype),
            run_var=np.ones(f, dtype=dtype),
            eps=eps,
            decay=decay,
        )


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    active: np.ndarray
    inv_std: np.ndarray
    mode: str
    batch_mean: np.ndarray = field(default=None)
    batch_var: np.ndarray = field(default=None)


def check_tensor4(t, name="tensor"):
    t = np.asarray(t)
    if t.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n, h, w, f), got shape {t.shape}")
    if min(t.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {t.shape}")
    return t


def _check_mode(mode):
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


# --------------------------------------------------------------------------
# padding

def zero_pad(t, sr, sc):
    if sr < 0 or sc < 0:
        raise ValueError("padding sizes must be non-negative")
    t = check_tensor4(t)
    if sr == 0 and sc == 0:
        return t
    return np.pad(t, ((0, 0), (sr, sr), (sc, sc), (0, 0)))


def unpad(t, sr, sc):
    n, h, w, f = t.shape
    return t[:, sr:h - sr, sc:w - sc, :]


# --------------------------------------------------------------------------
# convolution

def conv_output_size(size, k, stride):
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if size < k or (size - k) % stride:
        raise ShapeError(
            f"input extent {size} incompatible with kernel {k} and stride {stride}"
        )
    return (size - k) // stride + 1


def conv2d_forward(t, k: ConvKernel, stride_h=1, stride_w=1):
    """Strided cross-correlation of an already padded tensor.

    The sum is accumulated one kernel offset at a time, each offset being a
    single ``(n*hc*wc, fin) @ (fin, fout)`` product.
    """
    t = check_tensor4(t)
    hk, wk, fin, fout = k.weights.shape
    n, h, w, f = t.shape
    if f != fin:
        raise ShapeError(f"input has {f} features, kernel expects {fin}")
    hc = conv_output_size(h, hk, stride_h)
    wc = conv_output_size(w, wk, stride_w)
    out = np.zeros((n, hc, wc, fout), dtype=np.result_type(t, k.weights))
    for q in range(hk):
        for r in range(wk):
            patch = t[:, q:q + stride_h * (hc - 1) + 1:stride_h,
                      r:r + stride_w * (wc - 1) + 1:stride_w, :]
            out += patch @ k.weights[q, r]
    out += k.bias
    return out


def conv2d_backward(t, k: ConvKernel, stride_h, stride_w, grad_out):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weights and bias."""
    t = check_tensor4(t)
    hk, wk, fin, fout = k.weights.shape
    n, h, w, f = t.shape
    hc = conv_output_size(h, hk, stride_h)
    wc = conv_output_size(w, wk, stride_w)
    if grad_out.shape != (n, hc, wc, fout):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != forward output {(n, hc, wc, fout)}"
        )
    grad_in = np.zeros_like(t, dtype=np.result_type(t, grad_out))
    grad_w = np.zeros_like(k.weights)
    g2 = grad_out.reshape(-1, fout)
    for q in range(hk):
        for r in range(wk):
            sl = (slice(None), slice(q, q + stride_h * (hc - 1) + 1, stride_h),
                  slice(r, r + stride_w * (wc - 1) + 1, stride_w), slice(None))
            grad_w[q, r] = t[sl].reshape(-1, fin).T @ g2
            grad_in[sl] += grad_out @ k.weights[q, r].T
    grad_b = grad_out.sum(axis=(0, 1, 2))
    return grad_in, grad_w, grad_b


# --------------------------------------------------------------------------
# batch normalization fused with ReLU

def batchnorm_relu_forward(t, p: BatchNormParams, mode="train"):
    """Normalize each feature, apply the affine map, then ReLU.

    In train mode batch statistics over ``(n, h, w)`` are used and the
    running statistics of ``p`` are updated in place by exponential moving
    average; infer mode uses the running statistics and touches nothing.
    """
    _check_mode(mode)
    t = check_tensor4(t)
    f = t.shape[3]
    if p.gamma.shape != (f,) or p.beta.shape != (f,):
        raise ShapeError(f"batch-norm parameters do not match {f} features")
    if mode == "train":
        mean = t.mean(axis=(0, 1, 2))
        var = ((t - mean) ** 2).mean(axis=(0, 1, 2))
        p.run_mean *= p.decay
        p.run_mean += (1.0 - p.decay) * mean
        p.run_var *= p.decay
        p.run_var += (1.0 - p.decay) * var
    else:
        mean, var = p.run_mean, p.run_var
    inv_std = 1.0 / np.sqrt(var + p.eps)
    x_hat = (t - mean) * inv_std
    pre = x_hat * p.gamma + p.beta
    out = np.maximum(pre, 0.0)
    cache = BatchNormCache(x_hat=x_hat, active=pre > 0, inv_std=inv_std, mode=mode)
    if mode == "train":
        cache.batch_mean, cache.batch_var = mean, var
    return out, cache


def batchnorm_relu_backward(grad_out, cache: BatchNormCache, p: BatchNormParams):
    gy = grad_out * cache.active
    grad_gamma = (gy * cache.x_hat).sum(axis=(0, 1, 2))
    grad_beta = gy.sum(axis=(0, 1, 2))
    g_hat = gy * p.gamma
    if cache.mode == "infer":
        return g_hat * cache.inv_std, grad_gamma, grad_beta
    m = g_hat.mean(axis=(0, 1, 2))
    mx = (g_hat * cache.x_hat).mean(axis=(0, 1, 2))
    grad_in = cache.inv_std * (g_hat - m - cache.x_hat * mx)
    return grad_in, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# dropout

def dropout(t, p_d, rng=None, mode="train", rescale=False):
    """Zero each component independently with probability ``p_d``.

    Survivors are left as they are unless ``rescale`` is set, in which case
    they are divided by ``1 - p_d`` so the expected activation matches infer
    mode. Returns ``(output, mask)``; in infer mode the input is returned
    unchanged with an all-ones mask.
    """
    _check_mode(mode)
    if not 0.0 <= p_d < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p_d}")
    if mode == "infer" or p_d == 0.0:
        return t, np.ones(t.shape, dtype=bool)
    rng = np.random.default_rng(rng)
    mask = rng.random(t.shape) >= p_d
    out = t * mask
    if rescale:
        out *= 1.0 / (1.0 - p_d)
    return out, mask


# --------------------------------------------------------------------------
# average pooling

def avg_pool(t, win_h=2, win_w=2, stride_h=2, stride_w=2):
    t = check_tensor4(t)
    n, h, w, f = t.shape
    ho = conv_output_size(h, win_h, stride_h)
    wo = conv_output_size(w, win_w, stride_w)
    out = np.zeros((n, ho, wo, f), dtype=t.dtype)
    for q in range(win_h):
        for r in range(win_w):
            out += t[:, q:q + stride_h * (ho - 1) + 1:stride_h,
                     r:r + stride_w * (wo - 1) + 1:stride_w, :]
    out /= win_h * win_w
    return out


def avg_pool_backward(grad_out, in_shape, win_h=2, win_w=2, stride_h=2, stride_w=2):
    n, h, w, f = in_shape
    ho = conv_output_size(h, win_h, stride_h)
    wo = conv_output_size(w, win_w, stride_w)
    if grad_out.shape != (n, ho, wo, f):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, ho, wo, f)}")
    grad_in = np.zeros(in_shape, dtype=grad_out.dtype)
    g = grad_out / (win_h * win_w)
    for q in range(win_h):
        for r in range(win_w):
            grad_in[:, q:q + stride_h * (ho - 1) + 1:stride_h,
                    r:r + stride_w * (wo - 1) + 1:stride_w, :] += g
    return grad_in


# --------------------------------------------------------------------------
# transposed convolution

def transposed_output_size(size, k, stride):
    return stride * (size - 1) + k


def transposed_conv_forward(t, k: ConvKernel, stride_h=2, stride_w=2):
    """Scatter every input pixel through the kernel onto a strided grid.

    Output extent is ``stride*(h-1) + hk``; with kernel size equal to the
    stride this is the per-channel Kronecker product of input and kernel
    slices, summed over input features.
    """
    t = check_tensor4(t)
    hk, wk, fin, fout = k.weights.shape
    n, h, w, f = t.shape
    if f != fin:
        raise ShapeError(f"input has {f} features, kernel expects {fin}")
    if stride_h < 1 or stride_w < 1:
        raise ShapeError("stride must be >= 1")
    ht = transposed_output_size(h, hk, stride_h)
    wt = transposed_output_size(w, wk, stride_w)
    out = np.zeros((n, ht, wt, fout), dtype=np.result_type(t, k.weights))
    for q in range(hk):
        for r in range(wk):
            out[:, q:q + stride_h * (h - 1) + 1:stride_h,
                r:r + stride_w * (w - 1) + 1:stride_w, :] += t @ k.weights[q, r]
    out += k.bias
    return out


def transposed_conv_backward(t, k: ConvKernel, stride_h, stride_w, grad_out):
    t = check_tensor4(t)
    hk, wk, fin, fout = k.weights.shape
    n, h, w, f = t.shape
    expected = (n, transposed_output_size(h, hk, stride_h),
                transposed_output_size(w, wk, stride_w), fout)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != {expected}")
    grad_in = np.zeros_like(t, dtype=np.result_type(t, grad_out))
    grad_w = np.zeros_like(k.weights)
    t2 = t.reshape(-1, fin)
    for q in range(hk):
        for r in range(wk):
            g = grad_out[:, q:q + stride_h * (h - 1) + 1:stride_h,
                         r:r + stride_w * (w - 1) + 1:stride_w, :]
            grad_in += g @ k.weights[q, r].T
            grad_w[q, r] = t2.T @ g.reshape(-1, fout)
    grad_b = grad_out.sum(axis=(0, 1, 2))
    return grad_in, grad_w, grad_b


# --------------------------------------------------------------------------
# feature concatenation

def concat_features(a, b):
    a = check_tensor4(a, "a")
    b = check_tensor4(b, "b")
    if a.shape[:3] != b.shape[:3]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}: n, h, w differ")
    return np.concatenate([a, b], axis=3)


def split_features(t, fa):
    return t[..., :fa], t[..., fa:]


# --------------------------------------------------------------------------
# initialization

def xavier_normal_init(k: ConvKernel, rng=None):
    """Glorot-normal weights and zero bias, returned as a new kernel."""
    hk, wk, fin, fout = k.weights.shape
    fan_in = hk * wk * fin
    fan_out = hk * wk * fout
    std = np.sqrt(2.0 / (fan_in + fan_out))
    rng = np.random.default_rng(rng)
    weights = rng.normal(0.0, std, size=k.weights.shape).astype(k.weights.dtype)
    return ConvKernel(weights, np.zeros_like(k.bias))

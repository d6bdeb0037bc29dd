"""Network layers with explicit forward/backward passes.

Everything runs on plain numpy arrays in NCHW layout; the convolution and
pooling inner loops are delegated to sefer.kernels. Each layer owns its
parameters and accumulates gradients in place (`grads[name] += ...`), which
is what makes micro-batch gradient accumulation a property of the layout
rather than extra machinery: scale the incoming gradient by 1/K and call
backward K times.

Layers cache whatever the backward pass needs during forward, so a layer
instance serves one logical stream of batches at a time. Parameters may be
shared freely for concurrent reads; training mutates them from one writer.
"""

import numpy as np

from ..errors import ConfigError, ContractError
from .. import kernels


def sigmoid(x):
    """Numerically stable logistic; output in (0, 1) for finite input."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(x):
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class Layer:
    """Base layer: named parameters, accumulated grads, child traversal."""

    def __init__(self):
        self.params: dict = {}
        self.grads: dict = {}
        self.buffers: dict = {}
        self.children: dict = {}

    def add_param(self, name, value):
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0
        for child in self.children.values():
            child.zero_grads()

    def _walk(self, attr, prefix=""):
        out = {}
        for k, v in getattr(self, attr).items():
            out[prefix + k] = v
        for name, child in self.children.items():
            out.update(child._walk(attr, prefix + name + "."))
        return out

    def named_parameters(self):
        return self._walk("params")

    def named_grads(self):
        return self._walk("grads")

    def named_buffers(self):
        return self._walk("buffers")

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, x, train=False):
        return self.forward(x, train)


class Conv2d(Layer):
    """2-D convolution, no bias (normalization always follows)."""

    def __init__(self, in_ch, out_ch, ksize, stride=1, pad=0, *, rng, dtype):
        super().__init__()
        self.stride = stride
        self.pad = pad
        fan_in = in_ch * ksize * ksize
        scale = np.sqrt(2.0 / fan_in)
        weight = (rng.standard_normal((out_ch, in_ch, ksize, ksize)) * scale).astype(dtype)
        self.add_param("weight", weight)

    def forward(self, x, train=False):
        self._x = x
        return kernels.conv2d_forward(x, self.params["weight"], self.stride, self.pad)

    def backward(self, dout):
        w = self.params["weight"]
        self.grads["weight"] += kernels.conv2d_backward_dw(dout, self._x, w.shape,
                                                           self.stride, self.pad)
        return kernels.conv2d_backward_dx(dout, w, self._x.shape, self.stride, self.pad)


class BatchNorm2d(Layer):
    """Per-channel batch normalization.

    Training mode normalizes by batch statistics (biased variance) and
    updates the running buffers; `frozen=True` keeps the running statistics
    even while training, which turns the layer into a fixed per-channel
    affine map and makes the loss decompose exactly over samples.
    """

    def __init__(self, channels, *, eps=1e-5, momentum=0.1, frozen=False, dtype):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.frozen = frozen
        self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.add_param("beta", np.zeros(channels, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, train=False):
        use_batch = train and not self.frozen
        if use_batch:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            self.buffers["running_mean"] *= 1 - m
            self.buffers["running_mean"] += m * mean
            self.buffers["running_var"] *= 1 - m
            self.buffers["running_var"] += m * var
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self._xhat = xhat
        self._inv = inv
        self._batch_mode = use_batch
        g = self.params["gamma"]
        return g[None, :, None, None] * xhat + self.params["beta"][None, :, None, None]

    def backward(self, dout):
        xhat = self._xhat
        self.grads["gamma"] += (dout * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] += dout.sum(axis=(0, 2, 3))
        scale = (self.params["gamma"] * self._inv)[None, :, None, None]
        if not self._batch_mode:
            return dout * scale
        n, _, h, w = dout.shape
        m = n * h * w
        dxhat_sum = dout.sum(axis=(0, 2, 3))[None, :, None, None]
        proj = (dout * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        return scale * (dout - dxhat_sum / m - xhat * proj / m)


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0)


class MaxPool2d(Layer):
    def __init__(self, ksize=3, stride=2, pad=1):
        super().__init__()
        self.ksize = ksize
        self.stride = stride
        self.pad = pad

    def forward(self, x, train=False):
        out, self._switches = kernels.maxpool2d_forward(x, self.ksize, self.stride, self.pad)
        self._x_shape = x.shape
        return out

    def backward(self, dout):
        return kernels.maxpool2d_backward(dout, self._switches, self._x_shape,
                                          self.ksize, self.stride, self.pad)


class GlobalAvgPool(Layer):
    """NCHW -> NC mean over the spatial plane."""

    def forward(self, x, train=False):
        self._hw = x.shape[2] * x.shape[3]
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        return np.broadcast_to((dout / self._hw)[:, :, None, None], self._shape).copy()


class Linear(Layer):
    """Fully connected layer, weight shaped (out_features, in_features)."""

    def __init__(self, in_f, out_f, *, rng, dtype, init="he", bias=True):
        super().__init__()
        if init == "he":
            scale = np.sqrt(2.0 / in_f)
        elif init == "lecun":
            scale = np.sqrt(1.0 / in_f)
        else:
            raise ConfigError(f"unknown init scheme {init!r}")
        self.add_param("weight", (rng.standard_normal((out_f, in_f)) * scale).astype(dtype))
        if bias:
            self.add_param("bias", np.zeros(out_f, dtype=dtype))

    def forward(self, x, train=False):
        self._x = x
        out = x @ self.params["weight"].T
        if "bias" in self.params:
            out = out + self.params["bias"]
        return out

    def backward(self, dout):
        self.grads["weight"] += dout.T @ self._x
        if "bias" in self.params:
            self.grads["bias"] += dout.sum(axis=0)
        return dout @ self.params["weight"]


class SEBlock(Layer):
    """Channel attention: squeeze to per-channel means, gate through a
    two-layer bottleneck with sigmoid output, rescale each channel.

    The gate is strictly inside (0, 1) for finite inputs, so the block can
    attenuate but never zero out or flip a channel.
    """

    def __init__(self, channels, reduction, *, rng, dtype):
        super().__init__()
        if channels % reduction != 0 or channels // reduction < 1:
            raise ConfigError(
                f"SE reduction {reduction} must divide channels {channels} "
                "with a bottleneck width of at least 1")
        self.children["fc1"] = Linear(channels, channels // reduction, rng=rng, dtype=dtype,
                                      init="he")
        self.children["fc2"] = Linear(channels // reduction, channels, rng=rng, dtype=dtype,
                                      init="lecun")

    def forward(self, x, train=False):
        self._x = x
        self._hw = x.shape[2] * x.shape[3]
        z = x.mean(axis=(2, 3))
        a1 = self.children["fc1"].forward(z)
        self._a1 = a1
        r1 = np.where(a1 > 0, a1, 0)
        a2 = self.children["fc2"].forward(r1)
        self._gate = sigmoid(a2)
        return x * self._gate[:, :, None, None]

    def backward(self, dout):
        gate = self._gate
        dx = dout * gate[:, :, None, None]
        dgate = (dout * self._x).sum(axis=(2, 3))
        da2 = dgate * gate * (1.0 - gate)
        dr1 = self.children["fc2"].backward(da2)
        da1 = np.where(self._a1 > 0, dr1, 0)
        dz = self.children["fc1"].backward(da1)
        return dx + dz[:, :, None, None] / self._hw


class Bottleneck(Layer):
    """Residual bottleneck: 1x1 reduce, 3x3 (carries the stride), 1x1
    expand, SE gating on the expanded output, then shortcut addition.
    A projection shortcut (1x1 conv + norm) is inserted whenever the
    spatial size or channel count changes.
    """

    def __init__(self, in_ch, width, stride, *, reduction, ratio=4,
                 rng, dtype, bn_frozen=False):
        super().__init__()
        if width % ratio != 0:
            raise ConfigError(f"block width {width} not divisible by bottleneck ratio {ratio}")
        mid = width // ratio
        bn = dict(frozen=bn_frozen, dtype=dtype)
        c = self.children
        c["conv1"] = Conv2d(in_ch, mid, 1, rng=rng, dtype=dtype)
        c["bn1"] = BatchNorm2d(mid, **bn)
        c["relu1"] = ReLU()
        c["conv2"] = Conv2d(mid, mid, 3, stride=stride, pad=1, rng=rng, dtype=dtype)
        c["bn2"] = BatchNorm2d(mid, **bn)
        c["relu2"] = ReLU()
        c["conv3"] = Conv2d(mid, width, 1, rng=rng, dtype=dtype)
        c["bn3"] = BatchNorm2d(width, **bn)
        c["se"] = SEBlock(width, reduction, rng=rng, dtype=dtype)
        self.projection = stride != 1 or in_ch != width
        if self.projection:
            c["down_conv"] = Conv2d(in_ch, width, 1, stride=stride, rng=rng, dtype=dtype)
            c["down_bn"] = BatchNorm2d(width, **bn)
        c["relu_out"] = ReLU()

    def forward(self, x, train=False):
        c = self.children
        h = c["relu1"].forward(c["bn1"].forward(c["conv1"].forward(x), train))
        h = c["relu2"].forward(c["bn2"].forward(c["conv2"].forward(h), train))
        h = c["bn3"].forward(c["conv3"].forward(h), train)
        h = c["se"].forward(h, train)
        if self.projection:
            shortcut = c["down_bn"].forward(c["down_conv"].forward(x), train)
        else:
            shortcut = x
        if h.shape != shortcut.shape:
            raise ContractError(
                f"residual branch {h.shape} does not match shortcut {shortcut.shape}")
        return c["relu_out"].forward(h + shortcut)

    def backward(self, dout):
        c = self.children
        d = c["relu_out"].backward(dout)
        dh = c["se"].backward(d)
        dh = c["conv3"].backward(c["bn3"].backward(dh))
        dh = c["conv2"].backward(c["bn2"].backward(c["relu2"].backward(dh)))
        dh = c["conv1"].backward(c["bn1"].backward(c["relu1"].backward(dh)))
        if self.projection:
            dsc = c["down_conv"].backward(c["down_bn"].backward(d))
        else:
            dsc = d
        return dh + dsc

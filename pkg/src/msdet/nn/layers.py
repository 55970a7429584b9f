"""Layer objects with explicit forward and backward passes.

Every layer caches what its backward pass needs on `forward`, so a
training step is one forward sweep followed by one backward sweep in
reverse order.  Parameters live on the layer as float32 arrays by
default; the gradient checker swaps everything to float64 via `astype`.

Weight initialization is a zero-mean Gaussian, biases zero.  The std is
either a fixed value or fan-in scaled (sqrt(2 / fan_in)) when `init_std`
is None.
"""

import numpy as np

from ..errors import ContractError
from . import kernels


def gaussian_init(rng, shape, fan_in, init_std, dtype):
    std = float(np.sqrt(2.0 / fan_in)) if init_std is None else float(init_std)
    return rng.normal(0.0, std, size=shape).astype(dtype)


class Conv2d:
    """Cross-correlation with square kernels; weight shape (c_out, c_in, k, k)."""

    kind = "conv"

    def __init__(self, c_in, c_out, k, stride=1, pad=0, rng=None, init_std=None,
                 dtype=np.float32):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.pad = stride, pad
        if rng is not None:
            self.w = gaussian_init(rng, (c_out, c_in, k, k), c_in * k * k, init_std, dtype)
        else:
            self.w = np.zeros((c_out, c_in, k, k), dtype=dtype)
        self.b = np.zeros(c_out, dtype=dtype)
        self.gw = None
        self.gb = None

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ContractError(
                f"conv2d expects input (n, {self.c_in}, h, w), got shape "
                f"{tuple(x.shape)} against weights {tuple(self.w.shape)}"
            )
        self._x = x
        return kernels.conv2d_forward(x, self.w, self.b, self.stride, self.pad)

    def backward(self, gy):
        gx, self.gw, self.gb = kernels.conv2d_backward(
            self._x, self.w, self.stride, self.pad, gy
        )
        return gx

    def params(self):
        return {"w": self.w, "b": self.b}

    def param_grads(self):
        return {"w": self.gw, "b": self.gb}

    def astype(self, dtype):
        self.w = self.w.astype(dtype)
        self.b = self.b.astype(dtype)
        return self


class NiN(Conv2d):
    """Channel-mixing 1x1 convolution used after feature concatenation."""

    kind = "nin"

    def __init__(self, c_in, c_out, rng=None, init_std=None, dtype=np.float32):
        super().__init__(c_in, c_out, k=1, stride=1, pad=0, rng=rng,
                         init_std=init_std, dtype=dtype)


class ReLU:
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, gy):
        return np.where(self._mask, gy, gy.dtype.type(0))

    def params(self):
        return {}

    def param_grads(self):
        return {}

    def astype(self, dtype):
        return self


class MaxPool2x2:
    """Stride-2 2x2 max pooling; odd trailing rows/columns are dropped."""

    kind = "maxpool2x2"

    def forward(self, x):
        self._hw = (x.shape[2], x.shape[3])
        y, self._arg = kernels.maxpool2_forward(x)
        return y

    def backward(self, gy):
        return kernels.maxpool2_backward(self._arg, gy, *self._hw)

    def params(self):
        return {}

    def param_grads(self):
        return {}

    def astype(self, dtype):
        return self


class FullyConnected:
    """Affine map on the flattened input; weight shape (d_out, d_in)."""

    kind = "fully_connected"

    def __init__(self, d_in, d_out, rng=None, init_std=None, dtype=np.float32):
        self.d_in, self.d_out = d_in, d_out
        if rng is not None:
            self.w = gaussian_init(rng, (d_out, d_in), d_in, init_std, dtype)
        else:
            self.w = np.zeros((d_out, d_in), dtype=dtype)
        self.b = np.zeros(d_out, dtype=dtype)
        self.gw = None
        self.gb = None

    def forward(self, x):
        self._shape = x.shape
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.d_in:
            raise ContractError(
                f"fully_connected expects {self.d_in} features, got input shape "
                f"{tuple(x.shape)}"
            )
        self._x2 = x2
        return x2 @ self.w.T + self.b

    def backward(self, gy):
        self.gw = gy.T @ self._x2
        self.gb = gy.sum(axis=0)
        return (gy @ self.w).reshape(self._shape)

    def params(self):
        return {"w": self.w, "b": self.b}

    def param_grads(self):
        return {"w": self.gw, "b": self.gb}

    def astype(self, dtype):
        self.w = self.w.astype(dtype)
        self.b = self.b.astype(dtype)
        return self


class Softmax:
    """Row-wise softmax on (n, d) inputs."""

    kind = "softmax"

    def forward(self, x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        self._y = e / e.sum(axis=1, keepdims=True)
        return self._y

    def backward(self, gy):
        y = self._y
        return y * (gy - (gy * y).sum(axis=1, keepdims=True))

    def params(self):
        return {}

    def param_grads(self):
        return {}

    def astype(self, dtype):
        return self


class ConcatChannels:
    """Concatenate two tensors along axis 1; backward splits the gradient."""

    kind = "concat_channels"

    def forward(self, a, b):
        if a.ndim != b.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ContractError(
                f"concat_channels requires matching batch/spatial dims, got "
                f"{tuple(a.shape)} and {tuple(b.shape)}"
            )
        self._ca = a.shape[1]
        return np.concatenate([a, b], axis=1)

    def backward(self, gy):
        ga = np.ascontiguousarray(gy[:, :self._ca])
        gb = np.ascontiguousarray(gy[:, self._ca:])
        return ga, gb

    def params(self):
        return {}

    def param_grads(self):
        return {}

    def astype(self, dtype):
        return self


def project_rois(rois, spatial_scale, feat_h, feat_w):
    """Map image-space boxes onto inclusive feature-cell bounds.

    Corners are scaled, floored, then clamped to the map, so a degenerate
    projection still covers at least one cell.
    """
    r = np.floor(np.asarray(rois, dtype=np.float64) * spatial_scale).astype(np.int64)
    out = np.empty_like(r)
    out[:, 0] = np.clip(r[:, 0], 0, feat_w - 1)
    out[:, 1] = np.clip(r[:, 1], 0, feat_h - 1)
    out[:, 2] = np.clip(np.maximum(r[:, 2], out[:, 0]), 0, feat_w - 1)
    out[:, 3] = np.clip(np.maximum(r[:, 3], out[:, 1]), 0, feat_h - 1)
    return out


class RoIPool:
    """Max-pool projected regions of a (1, c, h, w) map into a fixed grid.

    Bin edges over a region of H cells: row bin i spans
    [floor(i*H/out_h), ceil((i+1)*H/out_h)).  Backward routes each output
    cell's gradient to its argmax location.
    """

    kind = "roi_pool"

    def __init__(self, out_hw=(7, 7), spatial_scale=1.0):
        self.out_hw = out_hw
        self.spatial_scale = spatial_scale

    def forward(self, feat, rois):
        if feat.ndim != 4 or feat.shape[0] != 1:
            raise ContractError(f"roi_pool expects a (1, c, h, w) map, got {tuple(feat.shape)}")
        self._chw = feat.shape[1:]
        regions = project_rois(rois, self.spatial_scale, feat.shape[2], feat.shape[3])
        y, self._arg = kernels.roi_max_pool_forward(
            np.ascontiguousarray(feat[0]), regions, self.out_hw[0], self.out_hw[1]
        )
        return y

    def backward(self, gy):
        c, h, w = self._chw
        return kernels.roi_max_pool_backward(self._arg, gy, c, h, w)[None]

    def params(self):
        return {}

    def param_grads(self):
        return {}

    def astype(self, dtype):
        return self


class Sequential:
    """Chain layers; used for composing gradient-check fragments."""

    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, gy):
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        return gy

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                out[f"{i}.{name}"] = p
        return out

    def param_grads(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, g in layer.param_grads().items():
                out[f"{i}.{name}"] = g
        return out

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self


# Functional forms of the basic operations, matching the engine contracts.

def conv2d(x, weights, bias, stride=1, pad=0):
    if weights.ndim != 4 or x.ndim != 4 or x.shape[1] != weights.shape[1]:
        raise ContractError(
            f"conv2d shape mismatch: input {tuple(x.shape)} vs weights {tuple(weights.shape)}"
        )
    return kernels.conv2d_forward(
        x, weights, np.asarray(bias, dtype=weights.dtype), stride, pad
    )


def concat_channels(a, b):
    return ConcatChannels().forward(a, b)


def roi_pool(features, roi, spatial_scale, out_hw):
    """Pool a single image-space box; returns (1, c, out_h, out_w)."""
    x1, y1, x2, y2 = (float(v) for v in roi)
    if x2 <= x1 or y2 <= y1:
        raise ContractError(f"roi_pool requires positive box area, got {roi}")
    layer = RoIPool(out_hw=tuple(out_hw), spatial_scale=spatial_scale)
    return layer.forward(features, np.array([[x1, y1, x2, y2]]))

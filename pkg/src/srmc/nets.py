"""Energy functions f(x) and their gradients.

Two families share one interface.  The conv family scores images with a
small downsampling ConvNet whose 1x1 output is the (scaled) energy; the
exponential family scores low-dimensional points as an inner product
<theta, h(x)> with a fixed feature map, which is what the exactly
solvable diagnostics use.

Internally the energy is parametrized as raw(x)/T with a reference
temperature T_REF = 1e-2: `forward` returns raw(x) * (T_REF / T), so at
the default temperature the scale factor is exactly 1 and doubling T
halves every f value.  Samplers consume the gradient of this already
scaled f.

`forward` records a tape for parameter gradients and treats x as data;
gradients in x come from the fused array paths (`f_and_grad_x`), which
share the conv primitives with the tape ops and therefore produce
bit-identical numbers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from . import tensor as tt
from .tensor import Tensor, DEFAULT_DTYPE, NonFiniteError, ShapeError

T_REF = 1e-2
STANDARD_SIZES = (32, 64, 128)
STANDARD_WIDTHS = (32, 64, 128)


@dataclass(frozen=True)
class ArchSpec:
    """Conv energy-net shape: input resolution, channels, base width."""

    input_size: int = 32
    in_channels: int = 3
    n_f: int = 64
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.input_size not in STANDARD_SIZES:
            raise ValueError(f"input_size must be one of {STANDARD_SIZES}, got {self.input_size}")
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.n_f < 1:
            raise ValueError(f"n_f must be positive, got {self.n_f}")
        if self.n_f not in STANDARD_WIDTHS:
            warnings.warn(f"n_f={self.n_f} is outside the standard widths {STANDARD_WIDTHS}",
                          stacklevel=3)

    def layers(self) -> list[tuple[int, int, int, int]]:
        """(kernel, out_channels, stride, padding) per conv layer."""
        nf = self.n_f
        head = [(3, nf, 1, 1)]
        body = [(4, 2 * nf, 2, 1), (4, 4 * nf, 2, 1), (4, 8 * nf, 2, 1)]
        extra = {32: 0, 64: 1, 128: 2}[self.input_size]
        body += [(4, 8 * nf, 2, 1)] * extra
        tail = [(4, 1, 1, 0)]
        return head + body + tail

    def descriptor(self) -> str:
        return f"conv:{self.input_size}:{self.in_channels}:{self.n_f}"


class EnergyNet:
    """Shared surface of both energy families."""

    family = "none"

    def __init__(self, params: dict[str, Tensor], temperature: float, dtype):
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self.params = params
        self.temperature = float(temperature)
        self.dtype = np.dtype(dtype)

    @property
    def scale(self) -> float:
        return T_REF / self.temperature

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _coerce(self, x) -> np.ndarray:
        arr = x.data if isinstance(x, Tensor) else np.asarray(x)
        if arr.dtype != self.dtype:
            arr = arr.astype(self.dtype)
        return arr

    def _maybe_warn_range(self, arr: np.ndarray, warn_range: bool) -> None:
        if warn_range and arr.size and (arr.min() < -1.0 or arr.max() > 1.0):
            warnings.warn("energy input falls outside [-1, 1]; data is expected in that range",
                          stacklevel=3)

    # subclasses provide: forward, f_and_grad_x, grad_theta, hessian_x_vp
    def f(self, x) -> np.ndarray:
        return self.f_and_grad_x(x)[0]

    def grad_x(self, x) -> np.ndarray:
        return self.f_and_grad_x(x)[1]

    def grad_theta(self, x) -> dict[str, np.ndarray]:
        """Batch-mean parameter gradient of f, without touching .grad state."""
        saved = {k: p.grad for k, p in self.params.items()}
        self.zero_grad()
        out = self.forward(x, warn_range=False)
        tt.backward(tt.tmean(out))
        grads = {k: p.grad.copy() for k, p in self.params.items()}
        for k, p in self.params.items():
            p.grad = saved[k]
        return grads


class ConvEnergyNet(EnergyNet):
    family = "conv"

    def __init__(self, arch: ArchSpec, params: dict[str, Tensor],
                 temperature: float = T_REF, dtype=DEFAULT_DTYPE):
        super().__init__(params, temperature, dtype)
        self.arch = arch
        self._plan = arch.layers()

    def descriptor(self) -> str:
        return self.arch.descriptor()

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (self.arch.in_channels, self.arch.input_size, self.arch.input_size)

    def _layer_params(self):
        for i, (k, o, s, p) in enumerate(self._plan):
            yield self.params[f"w{i}"], self.params[f"b{i}"], s, p

    def forward(self, x, warn_range: bool = True) -> Tensor:
        arr = self._coerce(x)
        if arr.ndim != 4 or arr.shape[1] != self.arch.in_channels or \
                arr.shape[2] != self.arch.input_size or arr.shape[3] != self.arch.input_size:
            raise ShapeError(f"expected (B, {self.arch.in_channels}, {self.arch.input_size}, "
                             f"{self.arch.input_size}) input, got {arr.shape}")
        self._maybe_warn_range(arr, warn_range)
        if isinstance(x, Tensor) and x.requires_grad and x.dtype != self.dtype:
            raise tt.DtypeError(f"tracked input dtype {x.dtype} does not match net dtype {self.dtype}")
        h = x if isinstance(x, Tensor) and x.dtype == self.dtype else Tensor(arr)
        last = len(self._plan) - 1
        for i, (w, b, s, p) in enumerate(self._layer_params()):
            h = tt.conv2d(h, w, b, stride=s, padding=p)
            if i != last:
                h = tt.leaky_relu(h, self.arch.leaky_slope)
        h = tt.reshape(h, (arr.shape[0],))
        if self.scale != 1.0:
            h = h * self.scale
        return h

    def f_and_grad_x(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Fused forward + input gradient, no tape.

        Reuses the same GEMM/fold primitives as the conv2d tape op, so the
        numbers match `forward` exactly.  Finiteness is checked once on f
        and once on the gradient rather than per layer.
        """
        arr = self._coerce(x)
        slope = self.arch.leaky_slope
        last = len(self._plan) - 1
        h = arr
        stack = []  # (x_shape, w, stride, padding, ho, wo, mask-or-None)
        for i, (w, b, s, p) in enumerate(self._layer_params()):
            wd, bd = w.data, b.data
            x_shape = h.shape
            h, _, ho, wo = tt._conv2d_forward(h, wd, bd, s, p)
            mask = None
            if i != last:
                mask = h > 0
                h = np.where(mask, h, self.dtype.type(slope) * h)
            stack.append((x_shape, wd, s, p, ho, wo, mask))
        fvals = h.reshape(arr.shape[0]) * self.dtype.type(self.scale)
        g = np.full_like(h, self.dtype.type(self.scale))
        for x_shape, wd, s, p, ho, wo, mask in reversed(stack):
            if mask is not None:
                g = np.where(mask, g, self.dtype.type(slope) * g)
            g = tt._conv2d_input_grad(g, wd, x_shape, s, p, ho, wo)
        if not np.isfinite(fvals).all() or not np.isfinite(g).all():
            raise NonFiniteError("non-finite energy or gradient in conv net")
        return fvals, g

    def hessian_x_vp(self, x, v) -> np.ndarray:
        # leaky-ReLU nets are piecewise linear in x: the input Hessian is
        # zero almost everywhere
        return np.zeros_like(np.asarray(v, dtype=self.dtype))


def conv_energy_net(input_size: int = 32, in_channels: int = 3, n_f: int = 64,
                    seed: int = 0, temperature: float = T_REF,
                    dtype=DEFAULT_DTYPE, leaky_slope: float = 0.2) -> ConvEnergyNet:
    """Fresh conv energy net: weights Uniform(+-1/sqrt(fan_in)), biases zero."""
    arch = ArchSpec(input_size, in_channels, n_f, leaky_slope)
    gen = _rng.stream(seed, _rng.TAG_INIT)
    params: dict[str, Tensor] = {}
    c_in = in_channels
    for i, (k, c_out, s, p) in enumerate(arch.layers()):
        bound = 1.0 / np.sqrt(c_in * k * k)
        w = gen.uniform(-bound, bound, size=(c_out, c_in, k, k))
        params[f"w{i}"] = Tensor(w.astype(dtype), requires_grad=True)
        params[f"b{i}"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        c_in = c_out
    return ConvEnergyNet(arch, params, temperature=temperature, dtype=dtype)


# -- exponential family -------------------------------------------------


class FeatureMap:
    """Fixed h: R^dim -> R^n_features with analytic first and second derivatives."""

    name = "abstract"
    dim = 0
    n_features = 0

    def value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jac(self, x: np.ndarray) -> np.ndarray:
        """(B, F, dim) array of dh_i/dx_j."""
        raise NotImplementedError

    def hess_theta_vp(self, x: np.ndarray, theta: np.ndarray, v: np.ndarray) -> np.ndarray:
        """[sum_i theta_i Hess(h_i)(x)] v, shape (B, dim)."""
        raise NotImplementedError

    def descriptor(self) -> str:
        raise NotImplementedError


class Poly1D(FeatureMap):
    """h(x) = (x, x^2, ..., x^degree) on scalars."""

    dim = 1

    def __init__(self, degree: int):
        if degree < 1:
            raise ValueError(f"degree must be >= 1, got {degree}")
        self.degree = int(degree)
        self.n_features = self.degree
        self.name = f"poly1d:{self.degree}"

    def descriptor(self) -> str:
        return self.name

    def value(self, x):
        xs = x.reshape(-1, 1)
        return xs ** np.arange(1, self.degree + 1)

    def jac(self, x):
        xs = x.reshape(-1, 1)
        k = np.arange(1, self.degree + 1)
        return (k * xs ** (k - 1))[:, :, None]

    def hess_theta_vp(self, x, theta, v):
        xs = x.reshape(-1, 1)
        k = np.arange(1, self.degree + 1)
        coef = theta * k * (k - 1)
        with np.errstate(invalid="ignore"):
            pw = np.where(k >= 2, xs ** np.maximum(k - 2, 0), 0.0)
        curv = (coef * pw).sum(axis=1)
        return curv[:, None] * v.reshape(-1, 1)


class Quad2D(FeatureMap):
    """h(x) = (x1, x2, x1^2, x2^2, x1*x2): the 2-d Gaussian family."""

    dim = 2
    n_features = 5
    name = "quad2d"

    def descriptor(self) -> str:
        return self.name

    def value(self, x):
        x1, x2 = x[:, 0], x[:, 1]
        return np.stack([x1, x2, x1 * x1, x2 * x2, x1 * x2], axis=1)

    def jac(self, x):
        b = x.shape[0]
        x1, x2 = x[:, 0], x[:, 1]
        j = np.zeros((b, 5, 2), dtype=x.dtype)
        j[:, 0, 0] = 1.0
        j[:, 1, 1] = 1.0
        j[:, 2, 0] = 2.0 * x1
        j[:, 3, 1] = 2.0 * x2
        j[:, 4, 0] = x2
        j[:, 4, 1] = x1
        return j

    def hess_theta_vp(self, x, theta, v):
        # Hessian is constant in x: [[2 t3, t5], [t5, 2 t4]]
        h = np.array([[2.0 * theta[2], theta[4]], [theta[4], 2.0 * theta[3]]], dtype=x.dtype)
        return v @ h.T


class Rbf1D(FeatureMap):
    """Gaussian bump features on an even 1-d grid of centers."""

    dim = 1

    def __init__(self, n: int, lo: float, hi: float, bandwidth: float):
        if n < 2 or hi <= lo or bandwidth <= 0:
            raise ValueError(f"bad rbf1d spec: n={n} lo={lo} hi={hi} bandwidth={bandwidth}")
        self.centers = np.linspace(lo, hi, int(n))
        self.bandwidth = float(bandwidth)
        self.n_features = int(n)
        self.lo, self.hi = float(lo), float(hi)
        self.name = f"rbf1d:{n}:{lo:g}:{hi:g}:{bandwidth:g}"

    def descriptor(self) -> str:
        return self.name

    def value(self, x):
        d = x.reshape(-1, 1) - self.centers
        return np.exp(-0.5 * (d / self.bandwidth) ** 2)

    def jac(self, x):
        d = x.reshape(-1, 1) - self.centers
        h = np.exp(-0.5 * (d / self.bandwidth) ** 2)
        return (-d / self.bandwidth ** 2 * h)[:, :, None]

    def hess_theta_vp(self, x, theta, v):
        d = x.reshape(-1, 1) - self.centers
        g2 = self.bandwidth ** 2
        h = np.exp(-0.5 * d * d / g2)
        curv = (theta * h * (d * d / g2 - 1.0) / g2).sum(axis=1)
        return curv[:, None] * v.reshape(-1, 1)


class Rbf2D(FeatureMap):
    """Gaussian bumps on an n-by-n grid over a square box."""

    dim = 2

    def __init__(self, n: int, lo: float, hi: float, bandwidth: float):
        if n < 2 or hi <= lo or bandwidth <= 0:
            raise ValueError(f"bad rbf2d spec: n={n} lo={lo} hi={hi} bandwidth={bandwidth}")
        axis = np.linspace(lo, hi, int(n))
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        self.centers = np.stack([gx.ravel(), gy.ravel()], axis=1)
        self.bandwidth = float(bandwidth)
        self.n_features = int(n) * int(n)
        self.lo, self.hi = float(lo), float(hi)
        self.name = f"rbf2d:{n}:{lo:g}:{hi:g}:{bandwidth:g}"

    def descriptor(self) -> str:
        return self.name

    def value(self, x):
        d = x[:, None, :] - self.centers[None, :, :]
        return np.exp(-0.5 * (d * d).sum(axis=2) / self.bandwidth ** 2)

    def jac(self, x):
        d = x[:, None, :] - self.centers[None, :, :]
        h = np.exp(-0.5 * (d * d).sum(axis=2) / self.bandwidth ** 2)
        return -d / self.bandwidth ** 2 * h[:, :, None]

    def hess_theta_vp(self, x, theta, v):
        d = x[:, None, :] - self.centers[None, :, :]           # (B, F, 2)
        g2 = self.bandwidth ** 2
        h = np.exp(-0.5 * (d * d).sum(axis=2) / g2)            # (B, F)
        w = theta * h                                          # (B, F)
        dv = (d * v[:, None, :]).sum(axis=2)                   # (B, F)
        term1 = (w * dv)[:, :, None] * d / g2 ** 2
        term2 = w[:, :, None] * v[:, None, :] / g2
        return (term1 - term2).sum(axis=1)


def parse_feature_map(spec: str) -> FeatureMap:
    kind, _, rest = spec.partition(":")
    if kind == "poly1d":
        return Poly1D(int(rest))
    if kind == "quad2d":
        return Quad2D()
    if kind in ("rbf1d", "rbf2d"):
        n, lo, hi, bw = rest.split(":")
        cls = Rbf1D if kind == "rbf1d" else Rbf2D
        return cls(int(n), float(lo), float(hi), float(bw))
    raise ValueError(f"unknown feature map '{spec}'")


class ExpFamilyEnergyNet(EnergyNet):
    family = "expfam"

    def __init__(self, feature_map: FeatureMap, params: dict[str, Tensor],
                 temperature: float = T_REF, dtype=DEFAULT_DTYPE):
        super().__init__(params, temperature, dtype)
        self.feature_map = feature_map

    def descriptor(self) -> str:
        return f"expfam:{self.feature_map.descriptor()}"

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (self.feature_map.dim,)

    @property
    def theta(self) -> np.ndarray:
        return self.params["theta"].data

    def _points(self, x) -> np.ndarray:
        arr = self._coerce(x)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2 or arr.shape[1] != self.feature_map.dim:
            raise ShapeError(f"expected (B, {self.feature_map.dim}) points, got {arr.shape}")
        return arr

    def forward(self, x, warn_range: bool = True) -> Tensor:
        pts = self._points(x)
        self._maybe_warn_range(pts, warn_range)
        h = Tensor(self.feature_map.value(pts).astype(self.dtype))
        out = tt.matmul(h, self.params["theta"])
        if self.scale != 1.0:
            out = out * self.scale
        return out

    def f_and_grad_x(self, x) -> tuple[np.ndarray, np.ndarray]:
        pts = self._points(x)
        h = self.feature_map.value(pts)
        jac = self.feature_map.jac(pts)
        th = self.theta
        fvals = (h @ th) * self.scale
        g = np.einsum("bfd,f->bd", jac, th) * self.scale
        if not np.isfinite(fvals).all() or not np.isfinite(g).all():
            raise NonFiniteError("non-finite energy or gradient in exponential family")
        g = g.astype(self.dtype, copy=False)
        if np.asarray(x).ndim == 1:
            g = g.reshape(-1)
        return fvals.astype(self.dtype, copy=False), g

    def grad_theta(self, x) -> dict[str, np.ndarray]:
        pts = self._points(x)
        return {"theta": self.feature_map.value(pts).mean(axis=0) * self.scale}

    def hessian_x_vp(self, x, v) -> np.ndarray:
        pts = self._points(x)
        vv = np.asarray(v, dtype=self.dtype).reshape(pts.shape)
        out = self.feature_map.hess_theta_vp(pts, self.theta, vv) * self.scale
        return out.reshape(np.asarray(v).shape)


def expfam_energy_net(feature_map: FeatureMap | str, theta0=None,
                      temperature: float = T_REF, dtype=DEFAULT_DTYPE) -> ExpFamilyEnergyNet:
    fm = parse_feature_map(feature_map) if isinstance(feature_map, str) else feature_map
    if theta0 is None:
        theta0 = np.zeros(fm.n_features)
    theta0 = np.array(theta0, dtype=dtype)  # copy: training updates in place
    if theta0.shape != (fm.n_features,):
        raise ShapeError(f"theta must have shape ({fm.n_features},), got {theta0.shape}")
    params = {"theta": Tensor(theta0, requires_grad=True)}
    return ExpFamilyEnergyNet(fm, params, temperature=temperature, dtype=dtype)

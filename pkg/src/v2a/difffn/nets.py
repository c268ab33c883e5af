"""Parameter storage and function approximators.

A ParamVector is one flat float64 array with named contiguous segments, one
per approximator. Approximators are shape descriptions plus a segment name;
they never own parameters. `forward` is the fast numpy path, `forward_graph`
builds the differentiable graph against a flat leaf Var.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NumericError
from . import autodiff as ad

LOGVAR_MIN = -10.0
LOGVAR_MAX = 4.0


@dataclass
class ParamVector:
    """Flat parameter array with a named-segment layout."""

    values: np.ndarray
    layout: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.validate()

    def validate(self):
        if not np.all(np.isfinite(self.values)):
            raise NumericError("parameter vector contains non-finite entries")
        spans = sorted(self.layout.values())
        cursor = 0
        for off, length in spans:
            if off != cursor:
                raise ConfigError("parameter segments must be disjoint and contiguous")
            cursor = off + length
        if cursor != self.values.size:
            raise ConfigError("parameter segments must cover the full array")

    def segment(self, name: str) -> np.ndarray:
        off, length = self.layout[name]
        return self.values[off : off + length]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), dict(self.layout))

    def segment_names(self):
        return list(self.layout)


@dataclass(frozen=True)
class GaussianHead:
    """Diagonal Gaussian over a real vector."""

    mean: np.ndarray
    log_variance: np.ndarray


def gaussian_log_density(head: GaussianHead, x: np.ndarray) -> float:
    """Log density of x under the head's diagonal Gaussian."""
    mean = np.asarray(head.mean, dtype=np.float64)
    lv = np.asarray(head.log_variance, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != mean.shape:
        raise ConfigError(f"dimension mismatch: x {x.shape} vs head {mean.shape}")
    return float(
        np.sum(-0.5 * np.log(2.0 * np.pi) - 0.5 * lv - (x - mean) ** 2 / (2.0 * np.exp(lv)))
    )


def gaussian_log_density_rows(mean, log_variance, x) -> np.ndarray:
    """Row-wise log density for batched heads; returns one value per row."""
    return np.sum(
        -0.5 * np.log(2.0 * np.pi) - 0.5 * log_variance - (x - mean) ** 2 / (2.0 * np.exp(log_variance)),
        axis=1,
    )


def _glorot(rng, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


class MLPApproximator:
    """Feed-forward network with rectifier hidden activations.

    `widths` lists every layer width including input and output, e.g.
    (24, 64, 64, 1). Parameters live in the named segment of a ParamVector,
    laid out layer by layer as weight then bias.
    """

    def __init__(self, widths, name: str):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ConfigError(f"invalid MLP widths {widths}")
        self.widths = widths
        self.name = name
        self._shapes = []
        for a, b in zip(widths[:-1], widths[1:]):
            self._shapes.append((a, b))
        self.n_params = sum(a * b + b for a, b in self._shapes)

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def init(self, rng) -> np.ndarray:
        chunks = []
        for a, b in self._shapes:
            chunks.append(_glorot(rng, a, b).ravel())
            chunks.append(np.zeros(b))
        return np.concatenate(chunks)

    def _layers(self, theta: np.ndarray):
        off = 0
        for a, b in self._shapes:
            w = theta[off : off + a * b].reshape(a, b)
            off += a * b
            bias = theta[off : off + b]
            off += b
            yield w, bias

    def forward(self, params: ParamVector, x: np.ndarray) -> np.ndarray:
        """Pure-numpy forward pass; no parameter mutation."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise ConfigError(
                f"{self.name}: input width {x.shape[1]} != declared {self.in_dim}"
            )
        h = x
        layers = list(self._layers(params.segment(self.name)))
        for i, (w, b) in enumerate(layers):
            h = h @ w + b
            if i < len(layers) - 1:
                h = np.maximum(h, 0.0)
        return h[0] if squeeze else h

    def forward_graph(self, flat: ad.Var, layout, x):
        """Differentiable forward pass against a flat parameter leaf."""
        base, _ = layout[self.name]
        off = base
        h = x
        for i, (a, b) in enumerate(self._shapes):
            w = ad.segment(flat, off, a * b, (a, b))
            off += a * b
            bias = ad.segment(flat, off, b)
            off += b
            if i < len(self._shapes) - 1:
                h = ad.affine_relu(h, w, bias)
            else:
                h = ad.affine(h, w, bias)
        return h

    def forward_rows(self, flat: ad.Var, layout, x):
        """forward_graph with the trailing unit dimension flattened to rows."""
        out = self.forward_graph(flat, layout, x)
        if self.out_dim == 1:
            n = np.shape(ad.value(out))[0]
            return ad.reshape(out, (n,))
        return out


class RecurrentEncoder:
    """Single-gate gated recurrent cell over step features, with a Gaussian head.

    Each step computes an update gate u = sigmoid(Wu x + Uu h + bu) and a
    candidate c = tanh(Wc x + Uc h + bc), then h <- (1-u)*h + u*c. After the
    final step a linear head emits (mean, log_variance) of dimension d_z,
    with log-variance clamped to [LOGVAR_MIN, LOGVAR_MAX].
    """

    def __init__(self, in_dim: int, hidden: int, d_z: int, name: str):
        if min(in_dim, hidden, d_z) <= 0:
            raise ConfigError("encoder dimensions must be positive")
        self.in_dim = int(in_dim)
        self.hidden = int(hidden)
        self.d_z = int(d_z)
        self.name = name
        h, x, z = self.hidden, self.in_dim, self.d_z
        # Wu, Uu, bu, Wc, Uc, bc, W_head, b_head
        self._sizes = [x * h, h * h, h, x * h, h * h, h, h * 2 * z, 2 * z]
        self.n_params = sum(self._sizes)

    def init(self, rng) -> np.ndarray:
        h, x, z = self.hidden, self.in_dim, self.d_z
        return np.concatenate(
            [
                _glorot(rng, x, h).ravel(),
                _glorot(rng, h, h).ravel(),
                np.zeros(h),
                _glorot(rng, x, h).ravel(),
                _glorot(rng, h, h).ravel(),
                np.zeros(h),
                _glorot(rng, h, 2 * z).ravel(),
                np.zeros(2 * z),
            ]
        )

    def _unpack(self, theta):
        h, x, z = self.hidden, self.in_dim, self.d_z
        off = 0
        out = []
        for size, shape in zip(
            self._sizes,
            [(x, h), (h, h), (h,), (x, h), (h, h), (h,), (h, 2 * z), (2 * z,)],
        ):
            out.append(theta[off : off + size].reshape(shape))
            off += size
        return out

    def forward(self, params: ParamVector, steps: np.ndarray) -> GaussianHead:
        """Consume a (T, in_dim) sequence in exactly T steps; emit the final head."""
        steps = np.asarray(steps, dtype=np.float64)
        if steps.ndim != 2 or steps.shape[1] != self.in_dim:
            raise ConfigError(
                f"{self.name}: expected (T, {self.in_dim}) sequence, got {steps.shape}"
            )
        wu, uu, bu, wc, uc, bc, wh, bh = self._unpack(params.segment(self.name))
        h = np.zeros(self.hidden)
        for t in range(steps.shape[0]):
            xt = steps[t]
            u = 1.0 / (1.0 + np.exp(-(xt @ wu + h @ uu + bu)))
            c = np.tanh(xt @ wc + h @ uc + bc)
            h = (1.0 - u) * h + u * c
        head = h @ wh + bh
        mean = head[: self.d_z]
        log_var = np.clip(head[self.d_z :], LOGVAR_MIN, LOGVAR_MAX)
        return GaussianHead(mean=mean, log_variance=log_var)

    def forward_batch(self, params: ParamVector, padded, lengths):
        """Batched numpy forward over padded (B, T_max, in_dim) sequences."""
        wu, uu, bu, wc, uc, bc, wh, bh = self._unpack(params.segment(self.name))
        B, T_max, _ = padded.shape
        h = np.zeros((B, self.hidden))
        lengths = np.asarray(lengths)
        for t in range(T_max):
            xt = padded[:, t, :]
            u = 1.0 / (1.0 + np.exp(-(xt @ wu + h @ uu + bu)))
            c = np.tanh(xt @ wc + h @ uc + bc)
            h_new = (1.0 - u) * h + u * c
            alive = (lengths > t)[:, None]
            h = np.where(alive, h_new, h)
        head = h @ wh + bh
        mean = head[:, : self.d_z]
        log_var = np.clip(head[:, self.d_z :], LOGVAR_MIN, LOGVAR_MAX)
        return mean, log_var

    def forward_graph(self, flat: ad.Var, layout, padded, lengths):
        """Differentiable batched unroll; returns (mean, log_variance) Vars."""
        base, _ = layout[self.name]
        h_, x_, z_ = self.hidden, self.in_dim, self.d_z
        off = base
        mats = []
        for size, shape in zip(
            self._sizes,
            [(x_, h_), (h_, h_), (h_,), (x_, h_), (h_, h_), (h_,), (h_, 2 * z_), (2 * z_,)],
        ):
            mats.append(ad.segment(flat, off, size, shape if len(shape) > 1 else None))
            off += size
        wu, uu, bu, wc, uc, bc, wh, bh = mats
        B, T_max, _ = padded.shape
        lengths = np.asarray(lengths)
        h = np.zeros((B, h_))
        for t in range(T_max):
            xt = padded[:, t, :]
            u = ad.sigmoid(ad.add(ad.affine(h, uu, bu), ad.matmul(xt, wu)))
            c = ad.tanh(ad.add(ad.affine(h, uc, bc), ad.matmul(xt, wc)))
            h_new = ad.add(h, ad.mul(u, ad.sub(c, h)))
            alive = ((lengths > t)[:, None]).astype(np.float64)
            if np.all(alive > 0):
                h = h_new
            else:
                h = ad.add(h, ad.mul(alive, ad.sub(h_new, h)))
        head = ad.affine(h, wh, bh)
        mean = ad.narrow(head, 0, z_, axis=1)
        log_var = ad.clip(ad.narrow(head, z_, z_, axis=1), LOGVAR_MIN, LOGVAR_MAX)
        return mean, log_var


def build_params(nets, seed_rng) -> ParamVector:
    """Allocate one ParamVector hosting every net, in the order given."""
    layout = {}
    chunks = []
    off = 0
    for net in nets:
        if net.name in layout:
            raise ConfigError(f"duplicate segment name {net.name!r}")
        layout[net.name] = (off, net.n_params)
        chunks.append(net.init(seed_rng))
        off += net.n_params
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return ParamVector(values, layout)


def forward(approx, params: ParamVector, inputs):
    """Deterministic forward evaluation for any approximator."""
    return approx.forward(params, inputs)


def gradient(loss_fn, at: ParamVector) -> ParamVector:
    """Exact reverse-mode gradient of a scalar loss over a ParamVector.

    `loss_fn` receives a flat leaf Var plus the layout and must return a
    scalar Var built from tape ops.
    """
    tape = ad.Tape()
    flat = ad.leaf(at.values, tape)
    loss = loss_fn(flat, at.layout)
    lv = float(np.asarray(ad.value(loss)).reshape(()))
    if not np.isfinite(lv):
        raise NumericError("loss evaluated non-finite", segment="loss")
    ad.backward(loss)
    g = flat.g if flat.g is not None else np.zeros_like(at.values)
    if not np.all(np.isfinite(g)):
        for name, (off, length) in at.layout.items():
            if not np.all(np.isfinite(g[off : off + length])):
                raise NumericError(f"non-finite gradient in segment {name!r}", segment=name)
        raise NumericError("non-finite gradient")
    return ParamVector(np.asarray(g, dtype=np.float64), dict(at.layout))

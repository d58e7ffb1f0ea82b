"""Invertible multi-scale flow: actnorm, 1x1 invertible convolution,
affine coupling, squeeze and split, with exact log-determinants.

Forward maps an image x to latent parts plus the accumulated
log |det dz/dx|; inverse reconstructs x exactly.  Every layer also
implements a hand-derived reverse-mode `backward` so the model can be
trained by exact maximum likelihood without an autodiff framework.

Shape convention: batched tensors are (B, C, H, W); per-example entry
points accept (C, H, W).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    Rng,
    ShapeError,
    conv2d,
    conv2d_backward,
    lu_decompose,
    mat_inverse,
    randn,
)

LN_2PI = math.log(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    """A layer produced NaN/Inf; carries the offending layer's index and name."""

    def __init__(self, layer_index: int, layer_name: str):
        super().__init__(f"non-finite values after layer {layer_index} ({layer_name})")
        self.layer_index = layer_index
        self.layer_name = layer_name


class UninitializedActNorm(RuntimeError):
    """ActNorm used in inference mode before data-dependent initialization."""


@dataclass
class FlowConfig:
    """Multi-scale flow capacity knobs.  Defaults are the desk-scale CI config."""

    levels: int = 3
    depth: int = 2
    coupling_width: int = 32
    input_shape: tuple[int, int, int] = (1, 32, 32)

    def __post_init__(self):
        c, h, w = self.input_shape
        if h != w:
            raise ValueError(f"input must be square, got {h}x{w}")
        if self.levels < 1 or self.depth < 1 or self.coupling_width < 1:
            raise ValueError("levels, depth and coupling_width must be positive")
        if h % (2**self.levels) != 0:
            raise ValueError(
                f"size {h} not divisible by 2^levels = {2**self.levels}"
            )

    @classmethod
    def full_scale(cls) -> "FlowConfig":
        return cls(levels=4, depth=8, coupling_width=128, input_shape=(1, 288, 288))


@dataclass(frozen=True)
class CodePart:
    """One multi-scale split output inside the flattened code vector."""

    level: int
    shape: tuple[int, int, int]
    offset: int

    @property
    def size(self) -> int:
        c, h, w = self.shape
        return c * h * w


@dataclass
class LatentCode:
    """Flattened code z with the layout of its multi-scale parts."""

    flat: np.ndarray
    layout: tuple[CodePart, ...]

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (sum(p.size for p in self.layout),):
            raise ShapeError(
                f"code length {self.flat.shape} does not match layout "
                f"({sum(p.size for p in self.layout)} dims)"
            )


def prior_logprob(z: np.ndarray) -> np.ndarray | float:
    """Standard-normal log density, summed over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    out = np.sum(-0.5 * z**2 - 0.5 * LN_2PI, axis=-1)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# layers


class ActNorm:
    """Per-channel affine y = exp(log_scale) * x + bias.

    Parameters come from data-dependent initialization: the first
    training batch sets them so outputs have zero mean and unit
    variance per channel.
    """

    def __init__(self, channels: int):
        self.log_scale = np.zeros(channels)
        self.bias = np.zeros(channels)
        self.initialized = False

    def data_init(self, x: np.ndarray) -> None:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        std = np.sqrt(np.maximum(var, 1e-12))
        self.log_scale = -np.log(std)
        self.bias = -mean / std
        self.initialized = True

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if not self.initialized:
            raise UninitializedActNorm("actnorm used before data-dependent init")
        scale = np.exp(self.log_scale)[:, None, None]
        y = scale * x + self.bias[:, None, None]
        h, w = x.shape[2], x.shape[3]
        logdet = np.full(x.shape[0], h * w * float(self.log_scale.sum()))
        return y, logdet

    def inverse(self, y: np.ndarray) -> np.ndarray:
        if not self.initialized:
            raise UninitializedActNorm("actnorm used before data-dependent init")
        return (y - self.bias[:, None, None]) * np.exp(-self.log_scale)[:, None, None]

    def backward(
        self, x: np.ndarray, grad_y: np.ndarray, grad_logdet: np.ndarray
    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        scale = np.exp(self.log_scale)[:, None, None]
        h, w = x.shape[2], x.shape[3]
        grad_x = grad_y * scale
        grads = {
            "bias": grad_y.sum(axis=(0, 2, 3)),
            "log_scale": (grad_y * x * scale).sum(axis=(0, 2, 3))
            + float(grad_logdet.sum()) * h * w,
        }
        return grad_x, grads

    def params(self) -> dict[str, np.ndarray]:
        return {"log_scale": self.log_scale, "bias": self.bias}


class InvConv:
    """Invertible 1x1 convolution: every pixel's channel vector times W."""

    def __init__(self, channels: int, rng: Rng | None = None):
        if rng is None:
            self.weight = np.eye(channels)
        else:
            # random orthogonal start: |det W| = 1, so the initial logdet is 0
            a = randn(rng, (channels, channels))
            q, r = np.linalg.qr(a)
            self.weight = q * np.sign(np.diag(r))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        y = np.einsum("oc,bchw->bohw", self.weight, x)
        h, w = x.shape[2], x.shape[3]
        logdet = np.full(x.shape[0], h * w * lu_decompose(self.weight).log_abs_det)
        return y, logdet

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return np.einsum("oc,bohw->bchw", mat_inverse(self.weight).T, y)

    def backward(
        self, x: np.ndarray, grad_y: np.ndarray, grad_logdet: np.ndarray
    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        h, w = x.shape[2], x.shape[3]
        grad_x = np.einsum("oc,bohw->bchw", self.weight, grad_y)
        grad_w = np.einsum("bohw,bchw->oc", grad_y, x)
        # d(H*W*ln|det W|)/dW = H*W * W^{-T}
        grad_w += float(grad_logdet.sum()) * h * w * mat_inverse(self.weight).T
        return grad_x, {"weight": grad_w}

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight}


class AffineCoupling:
    """Affine coupling with a small ReLU conv net on the untouched half.

    (s, t) = Net(x_a); scale = exp(2 tanh(s)); y_b = x_b * scale + t.
    The output conv is zero-initialized so the layer starts as the
    identity, and the tanh bounds the scale in [e^-2, e^2].
    """

    def __init__(self, channels: int, width: int, rng: Rng | None = None):
        if channels % 2 != 0:
            raise ShapeError(f"coupling needs an even channel count, got {channels}")
        self.half = channels // 2
        kw = {"w1": (width, self.half), "w2": (width, width), "w3": (channels, width)}
        self.w1 = self._he_init(kw["w1"], rng)
        self.b1 = np.zeros(width)
        self.w2 = self._he_init(kw["w2"], rng)
        self.b2 = np.zeros(width)
        self.w3 = np.zeros((channels, width, 3, 3))  # identity at init
        self.b3 = np.zeros(channels)

    @staticmethod
    def _he_init(out_in: tuple[int, int], rng: Rng | None) -> np.ndarray:
        out_ch, in_ch = out_in
        if rng is None:
            return np.zeros((out_ch, in_ch, 3, 3))
        return randn(rng, (out_ch, in_ch, 3, 3)) * math.sqrt(2.0 / (in_ch * 9))

    def _net(self, xa: np.ndarray) -> tuple[np.ndarray, ...]:
        h1 = conv2d(xa, self.w1, self.b1)
        a1 = np.maximum(h1, 0.0)
        h2 = conv2d(a1, self.w2, self.b2)
        a2 = np.maximum(h2, 0.0)
        out = conv2d(a2, self.w3, self.b3)
        return h1, a1, h2, a2, out

    def forward(
        self, x: np.ndarray, want_cache: bool = False
    ) -> tuple[np.ndarray, np.ndarray, dict | None]:
        xa, xb = x[:, :self.half], x[:, self.half:]
        h1, a1, h2, a2, out = self._net(xa)
        s_raw, t = out[:, :self.half], out[:, self.half:]
        th = np.tanh(s_raw)
        scale = np.exp(2.0 * th)
        y = np.concatenate([xa, xb * scale + t], axis=1)
        logdet = (2.0 * th).sum(axis=(1, 2, 3))
        cache = None
        if want_cache:
            cache = {"xa": xa, "xb": xb, "h1": h1, "a1": a1, "h2": h2, "a2": a2,
                     "th": th, "scale": scale}
        return y, logdet, cache

    def inverse(self, y: np.ndarray) -> np.ndarray:
        ya, yb = y[:, :self.half], y[:, self.half:]
        out = self._net(ya)[-1]
        s_raw, t = out[:, :self.half], out[:, self.half:]
        scale = np.exp(2.0 * np.tanh(s_raw))
        return np.concatenate([ya, (yb - t) / scale], axis=1)

    def backward(
        self, cache: dict, grad_y: np.ndarray, grad_logdet: np.ndarray
    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        xa, xb = cache["xa"], cache["xb"]
        th, scale = cache["th"], cache["scale"]
        grad_ya, grad_yb = grad_y[:, :self.half], grad_y[:, self.half:]

        grad_xb = grad_yb * scale
        grad_t = grad_yb
        # y_b = x_b e^{2 th} + t and logdet = sum 2 th share the tanh path
        grad_th = grad_yb * xb * scale * 2.0 + 2.0 * grad_logdet[:, None, None, None]
        grad_sraw = grad_th * (1.0 - th * th)
        grad_out = np.concatenate([grad_sraw, grad_t], axis=1)

        grad_a2, gw3, gb3 = conv2d_backward(grad_out, cache["a2"], self.w3)
        grad_h2 = grad_a2 * (cache["h2"] > 0)
        grad_a1, gw2, gb2 = conv2d_backward(grad_h2, cache["a1"], self.w2)
        grad_h1 = grad_a1 * (cache["h1"] > 0)
        grad_xa_net, gw1, gb1 = conv2d_backward(grad_h1, xa, self.w1)

        grad_x = np.concatenate([grad_ya + grad_xa_net, grad_xb], axis=1)
        grads = {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2, "w3": gw3, "b3": gb3}
        return grad_x, grads

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}


# ---------------------------------------------------------------------------
# squeeze / unsqueeze


def squeeze(x: np.ndarray) -> np.ndarray:
    """Trade 2x2 spatial blocks for channels: (B,C,H,W) -> (B,4C,H/2,W/2)."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze needs even extents, got {h}x{w}")
    out = x.reshape(b, c, h // 2, 2, w // 2, 2)
    return out.transpose(0, 1, 3, 5, 2, 4).reshape(b, 4 * c, h // 2, w // 2)


def unsqueeze(y: np.ndarray) -> np.ndarray:
    """Inverse of squeeze: (B,4C,H,W) -> (B,C,2H,2W)."""
    b, c4, h, w = y.shape
    if c4 % 4:
        raise ShapeError(f"unsqueeze needs channels divisible by 4, got {c4}")
    c = c4 // 4
    out = y.reshape(b, c, 2, 2, h, w)
    return out.transpose(0, 1, 4, 2, 5, 3).reshape(b, c, 2 * h, 2 * w)


# ---------------------------------------------------------------------------
# flow step and model


class FlowStep:
    """actnorm -> invertible 1x1 conv -> affine coupling."""

    def __init__(self, channels: int, width: int, rng: Rng | None = None):
        self.actnorm = ActNorm(channels)
        self.invconv = InvConv(channels, rng)
        self.coupling = AffineCoupling(channels, width, rng)

    def forward(self, x, want_cache=False, init_actnorm=False):
        if init_actnorm and not self.actnorm.initialized:
            self.actnorm.data_init(x)
        y1, ld1 = self.actnorm.forward(x)
        y2, ld2 = self.invconv.forward(y1)
        y3, ld3, ccache = self.coupling.forward(y2, want_cache=want_cache)
        cache = {"x": x, "y1": y1, "coupling": ccache} if want_cache else None
        return y3, ld1 + ld2 + ld3, cache

    def inverse(self, y):
        y2 = self.coupling.inverse(y)
        y1 = self.invconv.inverse(y2)
        return self.actnorm.inverse(y1)

    def backward(self, cache, grad_y, grad_logdet):
        grad_y2, cgrads = self.coupling.backward(cache["coupling"], grad_y, grad_logdet)
        grad_y1, igrads = self.invconv.backward(cache["y1"], grad_y2, grad_logdet)
        grad_x, agrads = self.actnorm.backward(cache["x"], grad_y1, grad_logdet)
        grads = {f"coupling.{k}": v for k, v in cgrads.items()}
        grads.update({f"invconv.{k}": v for k, v in igrads.items()})
        grads.update({f"actnorm.{k}": v for k, v in agrads.items()})
        return grad_x, grads


class FlowModel:
    """Multi-scale stack: per level squeeze, K flow steps, then split half
    the channels out to the code (the last level emits everything)."""

    def __init__(self, config: FlowConfig, rng: Rng | None = None):
        self.config = config
        self.steps: list[list[FlowStep]] = []
        c = config.input_shape[0]
        size = config.input_shape[1]
        parts = []
        offset = 0
        for level in range(config.levels):
            c *= 4
            size //= 2
            self.steps.append(
                [FlowStep(c, config.coupling_width, rng) for _ in range(config.depth)]
            )
            out_c = c if level == config.levels - 1 else c // 2
            parts.append(CodePart(level=level, shape=(out_c, size, size), offset=offset))
            offset += out_c * size * size
            c //= 2
        self._layout = tuple(parts)
        self.code_size = offset

    # -- parameter plumbing ------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed by a stable hierarchical name."""
        out: dict[str, np.ndarray] = {}
        for li, level in enumerate(self.steps):
            for si, step in enumerate(level):
                prefix = f"level{li}.step{si}"
                for k, v in step.actnorm.params().items():
                    out[f"{prefix}.actnorm.{k}"] = v
                for k, v in step.invconv.params().items():
                    out[f"{prefix}.invconv.{k}"] = v
                for k, v in step.coupling.params().items():
                    out[f"{prefix}.coupling.{k}"] = v
        return out

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        live = self.params()
        if set(values) != set(live):
            missing = set(live) ^ set(values)
            raise KeyError(f"parameter names do not match, difference: {sorted(missing)}")
        for name, arr in values.items():
            target = live[name]
            if target.shape != arr.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {target.shape}")
            target[...] = arr

    @property
    def actnorms_initialized(self) -> bool:
        return all(s.actnorm.initialized for lvl in self.steps for s in lvl)

    def mark_actnorms_initialized(self) -> None:
        """Treat current actnorm params as final (checkpoint load, tests)."""
        for lvl in self.steps:
            for s in lvl:
                s.actnorm.initialized = True

    def layout(self) -> tuple[CodePart, ...]:
        return self._layout

    # -- forward / inverse ---------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != self.config.input_shape:
            raise ShapeError(
                f"expected batch of {self.config.input_shape}, got {x.shape}"
            )
        return x

    def forward(
        self, x: np.ndarray, want_cache: bool = False, init_actnorm: bool = False
    ) -> tuple[list[np.ndarray], np.ndarray, list | None]:
        """x -> (code parts, per-example logdet, optional backward cache)."""
        h = self._check_input(x)
        logdet = np.zeros(h.shape[0])
        parts: list[np.ndarray] = []
        cache: list[list] = []
        layer_index = 0
        for li, level in enumerate(self.steps):
            h = squeeze(h)
            level_cache = []
            for step in level:
                h, ld, scache = step.forward(
                    h, want_cache=want_cache, init_actnorm=init_actnorm
                )
                if not np.all(np.isfinite(h)):
                    raise NonFiniteError(layer_index, f"level{li}.step{len(level_cache)}")
                logdet += ld
                level_cache.append(scache)
                layer_index += 1
            if li == len(self.steps) - 1:
                parts.append(h)
            else:
                parts.append(h[:, : h.shape[1] // 2])
                h = h[:, h.shape[1] // 2:]
            cache.append(level_cache)
        return parts, logdet, (cache if want_cache else None)

    def inverse(self, parts: list[np.ndarray]) -> np.ndarray:
        """Exact inverse of forward: code parts -> x."""
        expected = [p.shape for p in self._layout]
        got = [p.shape[1:] for p in parts]
        if got != expected:
            raise ShapeError(f"part shapes {got} do not match layout {expected}")
        h = None
        for li in range(len(self.steps) - 1, -1, -1):
            h = parts[li] if h is None else np.concatenate([parts[li], h], axis=1)
            for step in reversed(self.steps[li]):
                h = step.inverse(h)
            h = unsqueeze(h)
        return h

    def backward(
        self, cache: list, grad_parts: list[np.ndarray], grad_logdet: np.ndarray
    ) -> dict[str, np.ndarray]:
        """Reverse-mode gradients for every parameter.

        `grad_parts` are cotangents of the code parts, `grad_logdet`
        the per-example cotangent of the accumulated logdet.
        """
        grads: dict[str, np.ndarray] = {}
        grad_h = None
        for li in range(len(self.steps) - 1, -1, -1):
            if grad_h is None:
                grad_h = grad_parts[li]
            else:
                grad_h = np.concatenate([grad_parts[li], grad_h], axis=1)
            for si in range(len(self.steps[li]) - 1, -1, -1):
                grad_h, step_grads = self.steps[li][si].backward(
                    cache[li][si], grad_h, grad_logdet
                )
                for k, v in step_grads.items():
                    grads[f"level{li}.step{si}.{k}"] = v
            grad_h = unsqueeze(grad_h)
        return grads

    # -- code packing --------------------------------------------------------

    def flatten_parts(self, parts: list[np.ndarray]) -> np.ndarray:
        b = parts[0].shape[0]
        return np.concatenate([p.reshape(b, -1) for p in parts], axis=1)

    def unflatten_code(self, z: np.ndarray) -> list[np.ndarray]:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        if single:
            z = z[None]
        if z.shape[1] != self.code_size:
            raise ShapeError(f"code length {z.shape[1]} != {self.code_size}")
        return [
            z[:, p.offset : p.offset + p.size].reshape(z.shape[0], *p.shape)
            for p in self._layout
        ]

    # -- single-example conveniences -------------------------------------------

    def encode(self, x: np.ndarray) -> tuple[LatentCode, float]:
        """One spectrogram -> (code, ln p(x)); no jitter, deterministic."""
        parts, logdet, _ = self.forward(np.asarray(x)[None])
        flat = self.flatten_parts(parts)[0]
        lnp = prior_logprob(flat) + float(logdet[0])
        return LatentCode(flat=flat, layout=self._layout), lnp

    def decode(self, code: LatentCode | np.ndarray) -> np.ndarray:
        flat = code.flat if isinstance(code, LatentCode) else np.asarray(code)
        return self.inverse(self.unflatten_code(flat))[0]

"""The six ablation networks: AE, VAE, DVAE, UNET, DUNET and DVUNET.

Every variant is a fully convolutional encoder/decoder over a single-channel
log-power chunk.  Encoder block ``i`` (1-based) doubles the channel count for
``i <= ceil((N + 1) / 2)`` and otherwise keeps it with depthwise-separable
convolutions; each block is followed by 2 x 2 max-pooling.  Three flags
switch the ablations on:

``variational``
    the 1 x 1 bottleneck emits a mean and a log-variance per latent element
    and samples through the reparameterization in train mode;
``skips``
    encoder block outputs are concatenated along the channel axis onto the
    upsampled decoder input;
``dilated``
    each block uses a single dilated 3 x 3 convolution instead of two plain
    ones.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .difftensor import (
    ConvSpec,
    LatentStats,
    RunningStats,
    Tensor,
    batchnorm2d,
    concat_channels,
    conv2d,
    conv2d_transposed,
    depthwise_separable_conv,
    maxpool2,
    prelu,
    reparameterize,
)

# name -> (variational, skips, dilated)
VARIANTS = OrderedDict([
    ("dvunet", (True, True, True)),
    ("dunet", (False, True, True)),
    ("unet", (False, True, False)),
    ("dvae", (True, False, True)),
    ("vae", (True, False, False)),
    ("ae", (False, False, False)),
])


def structure_tag(variational, skips, dilated):
    parts = [tag for tag, on in (("V", variational), ("U", skips), ("D", dilated)) if on]
    return "+".join(parts) if parts else "./."


def default_dilation_schedule(depth):
    return [(2 ** min(i, 4), 2 ** min(i, 4)) for i in range(depth)]


@dataclass
class ModelConfig:
    depth_N: int = 5
    base_channels: int = 16
    variational: bool = False
    skips: bool = False
    dilated: bool = False
    dilation_schedule: list | None = None
    kl_weight: float = 1e-3
    input_shape: tuple = (1, 512, 512)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.depth_N < 1:
            raise ValueError("depth_N must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if len(self.input_shape) != 3 or self.input_shape[0] != 1:
            raise ValueError("input_shape must be (1, height, width)")
        step = 2 ** self.depth_N
        if self.input_shape[1] % step or self.input_shape[2] % step:
            raise ValueError(f"input_shape {self.input_shape[1:]} is not divisible by 2**depth_N = {step}")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if self.dilated:
            if self.dilation_schedule is None:
                self.dilation_schedule = default_dilation_schedule(self.depth_N)
            self.dilation_schedule = [tuple(int(v) for v in d) for d in self.dilation_schedule]
            if len(self.dilation_schedule) != self.depth_N:
                raise ValueError("dilation_schedule length must equal depth_N")
            if any(min(d) < 1 for d in self.dilation_schedule):
                raise ValueError("dilation rates must be >= 1")
        elif self.dilation_schedule is not None:
            self.dilation_schedule = [tuple(int(v) for v in d) for d in self.dilation_schedule]

    @classmethod
    def from_variant(cls, name, **kwargs):
        key = name.lower()
        if key not in VARIANTS:
            raise ValueError(f"unknown model {name!r}; choose from {list(VARIANTS)}")
        v, u, d = VARIANTS[key]
        return cls(variational=v, skips=u, dilated=d, **kwargs)

    @property
    def structure(self):
        return structure_tag(self.variational, self.skips, self.dilated)

    @property
    def variant(self):
        flags = (self.variational, self.skips, self.dilated)
        for name, f in VARIANTS.items():
            if f == flags:
                return name
        raise AssertionError("unreachable")

    def doubling_blocks(self):
        return math.ceil((self.depth_N + 1) / 2)

    def encoder_channels(self):
        chans = []
        for i in range(1, self.depth_N + 1):
            if i <= self.doubling_blocks():
                chans.append(self.base_channels * 2 ** (i - 1))
            else:
                chans.append(chans[-1])
        return chans

    def dilation(self, block):
        if not self.dilated:
            return (1, 1)
        return self.dilation_schedule[block - 1]

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        if d["dilation_schedule"] is not None:
            d["dilation_schedule"] = [list(x) for x in d["dilation_schedule"]]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------- layers

def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _bias_uniform(rng, n, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=n).astype(dtype)


class Layer:
    """A bag of named parameter tensors and running statistics."""

    def __init__(self):
        self.params = OrderedDict()
        self.buffers = OrderedDict()

    def _param(self, name, value):
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t


class Conv(Layer):
    def __init__(self, spec, rng, dtype):
        super().__init__()
        self.spec = spec
        shapes = spec.weight_shapes()
        kh, kw = spec.kernel
        if spec.depthwise_separable:
            self.dw_weight = self._param("dw_weight", _kaiming_uniform(rng, shapes["dw_weight"], kh * kw, dtype))
            self.dw_bias = self._param("dw_bias", _bias_uniform(rng, spec.in_channels, kh * kw, dtype))
            self.pw_weight = self._param("pw_weight", _kaiming_uniform(rng, shapes["pw_weight"], spec.in_channels, dtype))
            self.pw_bias = self._param("pw_bias", _bias_uniform(rng, spec.out_channels, spec.in_channels, dtype))
        else:
            fan_in = spec.in_channels * kh * kw
            self.weight = self._param("weight", _kaiming_uniform(rng, shapes["weight"], fan_in, dtype))
            self.bias = self._param("bias", _bias_uniform(rng, spec.out_channels, fan_in, dtype))

    def __call__(self, x):
        s = self.spec
        if s.depthwise_separable:
            return depthwise_separable_conv(x, self.dw_weight, self.pw_weight, self.dw_bias, self.pw_bias,
                                            dilation=s.dilation, padding=s.padding)
        return conv2d(x, self.weight, self.bias, stride=s.stride, dilation=s.dilation, padding=s.padding)


class UpConv(Layer):
    """2 x 2 transposed convolution with stride 2."""

    def __init__(self, in_channels, out_channels, rng, dtype):
        super().__init__()
        fan_in = in_channels * 4
        self.weight = self._param("weight", _kaiming_uniform(rng, (in_channels, out_channels, 2, 2), fan_in, dtype))
        self.bias = self._param("bias", _bias_uniform(rng, out_channels, fan_in, dtype))

    def __call__(self, x):
        return conv2d_transposed(x, self.weight, self.bias)


class BatchNorm(Layer):
    def __init__(self, channels, dtype):
        super().__init__()
        self.gamma = self._param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self._param("beta", np.zeros(channels, dtype=dtype))
        self.stats = RunningStats(channels, dtype)
        self.buffers["running_mean"] = self.stats.mean
        self.buffers["running_var"] = self.stats.var

    def __call__(self, x, mode):
        return batchnorm2d(x, self.gamma, self.beta, self.stats, mode=mode)


class PReLU(Layer):
    def __init__(self, channels, dtype):
        super().__init__()
        self.slope = self._param("slope", np.full(channels, 0.25, dtype=dtype))

    def __call__(self, x):
        return prelu(x, self.slope)


class ConvBlock:
    """One or two (conv -> batchnorm -> PReLU) units."""

    def __init__(self, in_ch, out_ch, n_convs, separable, dilation, rng, dtype):
        self.units = []
        ch = in_ch
        for _ in range(n_convs):
            spec = ConvSpec(ch, out_ch, kernel=(3, 3), dilation=dilation, depthwise_separable=separable)
            self.units.append((Conv(spec, rng, dtype), BatchNorm(out_ch, dtype), PReLU(out_ch, dtype)))
            ch = out_ch

    def named_layers(self):
        for k, (conv, bn, act) in enumerate(self.units, start=1):
            yield f"conv{k}", conv
            yield f"bn{k}", bn
            yield f"act{k}", act

    def __call__(self, x, mode):
        for conv, bn, act in self.units:
            x = act(bn(conv(x), mode))
        return x


# ----------------------------------------------------------------- model

class Model:
    """A built network: parameters, running statistics and the forward pass."""

    def __init__(self, config, init_seed=0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(init_seed)
        cfg = config
        chans = cfg.encoder_channels()
        n_convs = 1 if cfg.dilated else 2

        self.encoder = []
        in_ch = cfg.input_shape[0]
        for i, out_ch in enumerate(chans, start=1):
            separable = i > cfg.doubling_blocks()
            self.encoder.append(ConvBlock(in_ch, out_ch, n_convs, separable, cfg.dilation(i), rng, dtype))
            in_ch = out_ch

        c_bott = chans[-1]
        self.bottleneck = OrderedDict()
        if cfg.variational:
            self.bottleneck["mu"] = Conv(ConvSpec(c_bott, c_bott, kernel=(1, 1)), rng, dtype)
            self.bottleneck["log_var"] = Conv(ConvSpec(c_bott, c_bott, kernel=(1, 1)), rng, dtype)
        else:
            self.bottleneck["proj"] = Conv(ConvSpec(c_bott, c_bott, kernel=(1, 1)), rng, dtype)

        # decoder block i mirrors encoder block i; built deepest first
        self.decoder = {}
        self.upsample = {}
        for i in range(cfg.depth_N, 0, -1):
            c_i = chans[i - 1]
            out_ch = chans[i - 2] if i >= 2 else chans[0]
            self.upsample[i] = UpConv(c_i, c_i, rng, dtype)
            block_in = 2 * c_i if cfg.skips else c_i
            separable = i > cfg.doubling_blocks()
            self.decoder[i] = ConvBlock(block_in, out_ch, n_convs, separable, cfg.dilation(i), rng, dtype)
        self.output = Conv(ConvSpec(chans[0], 1, kernel=(1, 1)), rng, dtype)

    # ------------------------------------------------------ bookkeeping
    def named_layers(self):
        for i, block in enumerate(self.encoder, start=1):
            for name, layer in block.named_layers():
                yield f"enc{i}.{name}", layer
        for name, layer in self.bottleneck.items():
            yield f"bottleneck.{name}", layer
        for i in range(self.config.depth_N, 0, -1):
            yield f"dec{i}.up", self.upsample[i]
            for name, layer in self.decoder[i].named_layers():
                yield f"dec{i}.{name}", layer
        yield "output.conv", self.output

    def named_parameters(self):
        for prefix, layer in self.named_layers():
            for name, t in layer.params.items():
                yield f"{prefix}.{name}", t

    def named_buffers(self):
        for prefix, layer in self.named_layers():
            for name, arr in layer.buffers.items():
                yield f"{prefix}.{name}", arr

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def state_dict(self):
        state = OrderedDict((k, t.data) for k, t in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"missing tensors in state: {sorted(missing)[:5]}")
        for k, t in params.items():
            value = np.asarray(state[k])
            if value.shape != t.data.shape:
                raise ValueError(f"{k}: shape {value.shape} does not match {t.data.shape}")
            t.data = value.astype(self.dtype, copy=True)
        for k, arr in buffers.items():
            arr[...] = state[k]

    # ---------------------------------------------------------- forward
    def encode(self, x, mode):
        skips = []
        for block in self.encoder:
            x = block(x, mode)
            skips.append(x)
            x = maxpool2(x)
        return x, skips

    def bottleneck_forward(self, h, mode, rng_seed):
        if not self.config.variational:
            return self.bottleneck["proj"](h), None
        stats = LatentStats(self.bottleneck["mu"](h), self.bottleneck["log_var"](h))
        if mode == "train":
            z = reparameterize(stats, rng_seed=rng_seed)
        else:
            z = stats.mu
        return z, stats

    def decode(self, z, skips, mode):
        x = z
        for i in range(self.config.depth_N, 0, -1):
            x = self.upsample[i](x)
            if self.config.skips:
                x = concat_channels(x, skips[i - 1])
            x = self.decoder[i](x, mode)
        return self.output(x)

    def forward(self, x, mode="eval", rng_seed=None):
        """Map (B, 1, H, W) log-power chunks to enhanced chunks of the same shape.

        Returns ``(y, latent)``; ``latent`` is a :class:`LatentStats` for
        variational models and ``None`` otherwise.  In eval mode the
        variational bottleneck passes its mean through without sampling.
        """
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        expected = self.config.input_shape
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input (B, {', '.join(map(str, expected))}), got {x.shape}")
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        h, skips = self.encode(x, mode)
        z, latent = self.bottleneck_forward(h, mode, rng_seed)
        return self.decode(z, skips, mode), latent

    __call__ = forward


def build_model(cfg, init_seed=0, dtype=np.float32):
    return Model(cfg, init_seed=init_seed, dtype=dtype)


def count_params(m):
    """Trainable scalars: conv weights and biases, batchnorm affine terms, PReLU slopes."""
    return int(sum(t.data.size for t in m.parameters()))


def enhance_chunk(m, noisy_chunk):
    """Eval-mode forward of one (H, W) chunk; returns an (H, W) array."""
    chunk = np.asarray(noisy_chunk)
    if chunk.shape != m.config.input_shape[1:]:
        raise ValueError(f"chunk must be {m.config.input_shape[1:]}, got {chunk.shape}")
    y, _ = m.forward(chunk[None, None].astype(m.dtype), mode="eval")
    return y.data[0, 0]

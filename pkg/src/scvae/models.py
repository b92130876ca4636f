"""CNN-VAE and SCVAE architectures.

A model is a plain record of an :class:`ArchitectureSpec`, a dict of trainable
arrays and a dict of batch-norm running statistics. The same layer walk is
used for the differentiable training graph and for plain numpy inference;
only the ``ops`` backend differs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, ShapeError

CNN_VAE = "CNN_VAE"
SCVAE = "SCVAE"
BN_DECAY = 0.9
BN_EPSILON = 1e-5


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: str = "SAME"
    transposed: bool = False

    def __post_init__(self):
        if self.stride != 1:
            raise ValueError("only stride-1 convolutions are supported")
        if self.padding not in ("SAME", "VALID"):
            raise ValueError(f"padding must be SAME or VALID, got {self.padding!r}")


@dataclass(frozen=True)
class FireModuleSpec:
    squeeze_channels: int = 16
    extend1x1_channels: int = 16
    extend3x3_channels: int = 32
    transposed: bool = False

    @property
    def out_channels(self) -> int:
        return self.extend1x1_channels + self.extend3x3_channels

    def convs(self):
        """(suffix, ConvSpec) for squeeze, extend1, extend2."""
        t = self.transposed
        return (
            ("squeeze", ConvSpec(self.squeeze_channels, 1, transposed=t)),
            ("extend1", ConvSpec(self.extend1x1_channels, 1, transposed=t)),
            ("extend2", ConvSpec(self.extend3x3_channels, 3, transposed=t)),
        )


@dataclass(frozen=True)
class DenseSpec:
    units: int


Layer = Union[ConvSpec, FireModuleSpec, DenseSpec]


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    tw: int
    num_features: int
    latent_dim: int
    encoder: tuple
    decoder: tuple

    @property
    def data_dim(self) -> int:
        return self.tw * self.num_features

    def describe(self) -> str:
        """Canonical, human-readable layer listing (also stored in checkpoints)."""
        lines = [
            f"arch {self.name}",
            f"tw {self.tw}",
            f"features {self.num_features}",
            f"latent {self.latent_dim}",
        ]
        for part, layers, start in (
            ("encoder", self.encoder, (self.tw, self.num_features, 1)),
            ("decoder", self.decoder, (1, 1, self.latent_dim)),
        ):
            lines.append(part)
            if part == "decoder":
                lines.append(f"  reshape z -> 1x1x{self.latent_dim}")
            shape = start
            for layer in layers:
                shape, text = _describe_layer(layer, shape)
                lines.extend("  " + t for t in text)
        return "\n".join(lines) + "\n"


def _describe_layer(layer, shape):
    h, w, c = shape
    if isinstance(layer, ConvSpec):
        out = _conv_out_shape(layer, shape)
        kind = "trans conv" if layer.transposed else "conv"
        return out, [
            f"{kind} outputs={layer.out_channels} kernel={layer.kernel} stride={layer.stride} "
            f"padding={layer.padding} relu+batchnorm -> {out[0]}x{out[1]}x{out[2]}"
        ]
    if isinstance(layer, FireModuleSpec):
        kind = "trans fire" if layer.transposed else "fire"
        text = []
        squeezed = None
        for suffix, conv in layer.convs():
            o = _conv_out_shape(conv, shape if squeezed is None else squeezed)
            if squeezed is None:
                squeezed = o
            ckind = "trans conv" if conv.transposed else "conv"
            text.append(
                f"{kind} {suffix} / {ckind} outputs={conv.out_channels} kernel={conv.kernel} "
                f"stride=1 padding=SAME relu+batchnorm -> {o[0]}x{o[1]}x{o[2]}"
            )
        out = (h, w, layer.out_channels)
        text.append(f"{kind} concat -> {out[0]}x{out[1]}x{out[2]}")
        return out, text
    flat = h * w * c
    return (1, 1, layer.units), [f"fully connected {flat} -> {layer.units} (no activation)"]


def _conv_out_shape(conv: ConvSpec, shape):
    h, w, _ = shape
    grow = conv.kernel - 1 if conv.padding == "VALID" else 0
    if conv.transposed:
        return h + grow, w + grow, conv.out_channels
    if h - grow < 1 or w - grow < 1:
        raise ShapeError(
            f"VALID {conv.kernel}x{conv.kernel} convolution cannot shrink a {h}x{w} map"
        )
    return h - grow, w - grow, conv.out_channels


def cnn_vae_spec(tw: int, num_features: int, latent_dim: int = 100) -> ArchitectureSpec:
    if tw < 3 or num_features < 3:
        raise ShapeError(
            "CNN-VAE needs tw >= 3 and num_features >= 3: its last encoder convolution is a "
            f"VALID 3x3 layer that shrinks each side by 2 (got tw={tw}, features={num_features})"
        )
    encoder = (
        ConvSpec(16, 3, padding="SAME"),
        ConvSpec(32, 3, padding="SAME"),
        ConvSpec(64, 3, padding="SAME"),
        ConvSpec(128, 3, padding="VALID"),
        DenseSpec(2 * latent_dim),
    )
    decoder = (
        ConvSpec(128, 3, padding="SAME", transposed=True),
        ConvSpec(64, 3, padding="SAME", transposed=True),
        ConvSpec(32, 3, padding="VALID", transposed=True),
        ConvSpec(16, 3, padding="VALID", transposed=True),
        ConvSpec(1, 3, padding="VALID", transposed=True),
        DenseSpec(2 * tw * num_features),
    )
    return ArchitectureSpec(CNN_VAE, tw, num_features, latent_dim, encoder, decoder)


def scvae_spec(tw: int, num_features: int, latent_dim: int = 100) -> ArchitectureSpec:
    if tw < 1 or num_features < 1:
        raise ShapeError(f"tw and num_features must be positive, got {tw}, {num_features}")
    encoder = (FireModuleSpec(16, 16, 32), DenseSpec(2 * latent_dim))
    decoder = (FireModuleSpec(16, 16, 1, transposed=True), DenseSpec(2 * tw * num_features))
    return ArchitectureSpec(SCVAE, tw, num_features, latent_dim, encoder, decoder)


SPEC_BUILDERS = {CNN_VAE: cnn_vae_spec, SCVAE: scvae_spec}


@dataclass
class VaeModel:
    arch: ArchitectureSpec
    params: dict
    bn: dict = field(default_factory=dict)

    @property
    def latent_dim(self) -> int:
        return self.arch.latent_dim

    def copy(self) -> "VaeModel":
        return VaeModel(
            self.arch,
            {k: v.copy() for k, v in self.params.items()},
            {
                k: BatchNormState(s.running_mean.copy(), s.running_var.copy(), s.decay, s.epsilon)
                for k, s in self.bn.items()
            },
        )

    def buffers(self) -> dict:
        out = {}
        for name, s in self.bn.items():
            out[f"{name}.running_mean"] = s.running_mean
            out[f"{name}.running_var"] = s.running_var
        return out


def _init_conv(params, bn, name, conv: ConvSpec, in_ch, seeder):
    if conv.transposed:
        shape = (conv.kernel, conv.kernel, conv.out_channels, in_ch)
    else:
        shape = (conv.kernel, conv.kernel, in_ch, conv.out_channels)
    params[f"{name}.kernel"] = ad.xavier_init(shape, seeder())
    params[f"{name}.bias"] = np.zeros(conv.out_channels)
    params[f"{name}.bn.gamma"] = np.ones(conv.out_channels)
    params[f"{name}.bn.beta"] = np.zeros(conv.out_channels)
    bn[f"{name}.bn"] = BatchNormState.fresh(conv.out_channels, BN_DECAY, BN_EPSILON)


def _init_dense(params, name, n_in, n_out, seeder):
    # plain fan-in uniform: the output layers skip the xavier initializer
    rng = np.random.default_rng(seeder())
    limit = 1.0 / np.sqrt(n_in)
    params[f"{name}.weights"] = rng.uniform(-limit, limit, size=(n_in, n_out))
    params[f"{name}.bias"] = np.zeros(n_out)


def init_model(arch: ArchitectureSpec, seed: int = 0) -> VaeModel:
    counter = iter(range(10**6))

    def seeder():
        return (seed, next(counter))

    params, bn = {}, {}
    for part, layers, shape in (
        ("encoder", arch.encoder, (arch.tw, arch.num_features, 1)),
        ("decoder", arch.decoder, (1, 1, arch.latent_dim)),
    ):
        for i, layer in enumerate(layers):
            name = f"{part}.{i}"
            if isinstance(layer, ConvSpec):
                _init_conv(params, bn, name, layer, shape[2], seeder)
                shape = _conv_out_shape(layer, shape)
            elif isinstance(layer, FireModuleSpec):
                in_ch = shape[2]
                for suffix, conv in layer.convs():
                    _init_conv(params, bn, f"{name}.{suffix}", conv, in_ch, seeder)
                    if suffix == "squeeze":
                        in_ch = conv.out_channels
                shape = (shape[0], shape[1], layer.out_channels)
            else:
                _init_dense(params, name, shape[0] * shape[1] * shape[2], layer.units, seeder)
                shape = (1, 1, layer.units)
    return VaeModel(arch, params, bn)


def build_cnn_vae(tw: int, num_features: int, latent_dim: int = 100, seed: int = 0) -> VaeModel:
    return init_model(cnn_vae_spec(tw, num_features, latent_dim), seed)


def build_scvae(tw: int, num_features: int, latent_dim: int = 100, seed: int = 0) -> VaeModel:
    return init_model(scvae_spec(tw, num_features, latent_dim), seed)


def build(name: str, tw: int, num_features: int, latent_dim: int = 100, seed: int = 0):
    try:
        spec = SPEC_BUILDERS[name](tw, num_features, latent_dim)
    except KeyError:
        raise ValueError(f"unknown model {name!r}; expected one of {sorted(SPEC_BUILDERS)}")
    return init_model(spec, seed)


def param_count(model: VaeModel) -> int:
    """Trainable element count (batch-norm gamma/beta included, running stats not)."""
    return int(sum(v.size for v in model.params.values()))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


class GraphOps:
    """Differentiable backend: values are autodiff nodes."""

    conv2d = staticmethod(ad.conv2d)
    conv2d_transpose = staticmethod(ad.conv2d_transpose)
    dense = staticmethod(ad.dense)
    relu = staticmethod(ad.relu)
    reshape = staticmethod(ad.reshape)
    concat = staticmethod(ad.concat)

    @staticmethod
    def batchnorm(x, gamma, beta, state, train):
        return ad.batchnorm(x, gamma, beta, state, train)

    @staticmethod
    def shape(x):
        return x.value.shape


class ArrayOps:
    """Inference-only backend on plain arrays."""

    @staticmethod
    def conv2d(x, kernel, bias, padding):
        return ad.conv_forward(x, kernel, padding) + bias

    @staticmethod
    def conv2d_transpose(x, kernel, bias, padding):
        return ad.conv_input_adjoint(x, kernel, padding) + bias

    @staticmethod
    def dense(x, weights, bias):
        if x.shape[1] != weights.shape[0]:
            raise ShapeError(f"dense expects (batch, {weights.shape[0]}) input, got {x.shape}")
        return x @ weights + bias

    @staticmethod
    def relu(x):
        return np.maximum(x, 0)

    @staticmethod
    def batchnorm(x, gamma, beta, state, train):
        if train:
            raise ValueError("ArrayOps only supports inference-mode batchnorm")
        return ad.batchnorm_infer(x, gamma, beta, state)

    @staticmethod
    def reshape(x, shape):
        return x.reshape(shape)

    @staticmethod
    def concat(xs, axis=-1):
        return np.concatenate(xs, axis=axis)

    @staticmethod
    def shape(x):
        return x.shape


def _conv_block(ops, name, conv, h, P, bn, train):
    op = ops.conv2d_transpose if conv.transposed else ops.conv2d
    h = op(h, P[f"{name}.kernel"], P[f"{name}.bias"], conv.padding)
    h = ops.relu(h)
    return ops.batchnorm(h, P[f"{name}.bn.gamma"], P[f"{name}.bn.beta"], bn[f"{name}.bn"], train)


def run_stack(ops, layers, prefix, h, P, bn, train):
    for i, layer in enumerate(layers):
        name = f"{prefix}.{i}"
        if isinstance(layer, ConvSpec):
            h = _conv_block(ops, name, layer, h, P, bn, train)
        elif isinstance(layer, FireModuleSpec):
            convs = dict(layer.convs())
            s = _conv_block(ops, f"{name}.squeeze", convs["squeeze"], h, P, bn, train)
            e1 = _conv_block(ops, f"{name}.extend1", convs["extend1"], s, P, bn, train)
            e3 = _conv_block(ops, f"{name}.extend2", convs["extend2"], s, P, bn, train)
            h = ops.concat([e1, e3], axis=-1)
        else:
            b = ops.shape(h)[0]
            h = ops.reshape(h, (b, -1))
            h = ops.dense(h, P[f"{name}.weights"], P[f"{name}.bias"])
    return h


def encoder_forward(ops, arch, x, P, bn, train):
    """x: (B, tw, features) -> (B, 2 * latent_dim)."""
    shape = ops.shape(x)
    if tuple(shape[1:]) != (arch.tw, arch.num_features):
        raise ShapeError(
            f"model expects windows of shape ({arch.tw}, {arch.num_features}), got {tuple(shape[1:])}"
        )
    h = ops.reshape(x, (shape[0], arch.tw, arch.num_features, 1))
    return run_stack(ops, arch.encoder, "encoder", h, P, bn, train)


def decoder_forward(ops, arch, z, P, bn, train):
    """z: (B, latent_dim) -> (B, 2 * tw * features)."""
    b = ops.shape(z)[0]
    h = ops.reshape(z, (b, 1, 1, arch.latent_dim))
    return run_stack(ops, arch.decoder, "decoder", h, P, bn, train)


@dataclass(frozen=True)
class FrozenModel:
    """Immutable inference view of a model at a fixed precision."""

    arch: ArchitectureSpec
    params: dict
    bn: dict
    dtype: type

    @classmethod
    def from_model(cls, model: VaeModel, dtype=np.float32) -> "FrozenModel":
        params = {k: v.astype(dtype) for k, v in model.params.items()}
        bn = {
            k: BatchNormState(
                s.running_mean.astype(dtype), s.running_var.astype(dtype), s.decay, dtype(s.epsilon)
            )
            for k, s in model.bn.items()
        }
        return cls(model.arch, params, bn, dtype)

    def encode(self, x):
        return encoder_forward(ArrayOps, self.arch, x.astype(self.dtype, copy=False), self.params, self.bn, False)

    def decode(self, z):
        return decoder_forward(ArrayOps, self.arch, z.astype(self.dtype, copy=False), self.params, self.bn, False)

"""Backbone + attention module + flattening: the per-sample feature extractor.

The backbone is a stack of conv(3x3, pad 1) -> batch-norm -> ReLU blocks with
optional 2x2 max-pooling and an optional residual shortcut per block.  The
attention module sits after the complete last block; the refined map is
flattened into the embedding.  Batch norm uses the statistics of whatever
batch flows through during training (the engine feeds one episode at a time)
and running averages during evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attention import (
    AgamConfig,
    AgamOutput,
    AgamParams,
    _agam_forward_cl,
    _to_chw_output,
    init_agam_params,
)
from .autodiff import Tensor
from .errors import ConfigError, ContractViolation, ShapeError

__all__ = [
    "BlockSpec",
    "BackboneConfig",
    "Model",
    "Embedding",
    "backbone_forward",
    "embed",
    "desk_backbone",
    "conv4_backbone",
    "mini_residual_backbone",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class BlockSpec:
    out_channels: int
    kernel: int = 3
    pool: bool = True
    residual: bool = False


@dataclass(frozen=True)
class BackboneConfig:
    blocks: tuple[BlockSpec, ...]
    input_shape: tuple[int, int, int]  # (C0, H0, W0)

    def __post_init__(self):
        c0, h, w = self.input_shape
        if c0 < 1 or h < 1 or w < 1:
            raise ConfigError(f"invalid input shape {self.input_shape}")
        for i, blk in enumerate(self.blocks):
            if blk.kernel % 2 == 0:
                raise ConfigError(f"block {i}: kernel must be odd, got {blk.kernel}")
            if blk.pool:
                if h < 2 or w < 2 or h % 2 or w % 2:
                    raise ConfigError(
                        f"block {i}: cannot 2x2-pool a {h}x{w} map"
                    )
                h, w = h // 2, w // 2
        object.__setattr__(self, "_final_hw", (h, w))

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].out_channels

    @property
    def out_shape(self) -> tuple[int, int, int]:
        h, w = self._final_hw
        return (self.out_channels, h, w)


def desk_backbone(in_shape=(3, 32, 32), channels: int = 16) -> BackboneConfig:
    """Four 3x3 blocks, pooling in the first three.  3x32x32 -> Cx4x4.

    16 channels is the widest stack that keeps the full synthetic-task
    experiment grid inside its wall-clock budget on a single commodity core;
    pass ``channels=32`` or use `conv4_backbone` for the wider presets.
    """
    blocks = tuple(
        BlockSpec(out_channels=channels, pool=(i < 3)) for i in range(4)
    )
    return BackboneConfig(blocks=blocks, input_shape=in_shape)


def conv4_backbone(in_shape=(3, 84, 84)) -> BackboneConfig:
    """The classic 64-filter four-block stack, pooling in every block."""
    blocks = tuple(BlockSpec(out_channels=64, pool=True) for _ in range(4))
    return BackboneConfig(blocks=blocks, input_shape=in_shape)


def mini_residual_backbone(in_shape=(3, 32, 32), channels: int = 16) -> BackboneConfig:
    """Residual variant of the desk stack: identity/projection shortcuts."""
    blocks = tuple(
        BlockSpec(out_channels=channels, pool=(i < 3), residual=True)
        for i in range(4)
    )
    return BackboneConfig(blocks=blocks, input_shape=in_shape)


@dataclass
class Embedding:
    """Flattened refined features plus the attention outputs behind them."""

    vec: Tensor
    maps: tuple[AgamOutput, ...]


class Model:
    """All named parameters and batch-norm buffers for one configuration."""

    def __init__(
        self,
        backbone: BackboneConfig,
        agam_cfg: AgamConfig | None = None,
        attr_dim: int = 0,
        use_attributes: bool = True,
        use_agam: bool = True,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.backbone = backbone
        self.use_agam = use_agam
        self.use_attributes = use_attributes and use_agam
        self.attr_dim = attr_dim if self.use_attributes else 0
        self.blocks: list[dict[str, Tensor]] = []
        self.buffers: dict[str, np.ndarray] = {}

        c_in = backbone.input_shape[0]
        for i, blk in enumerate(backbone.blocks):
            k = blk.kernel
            fan_in = c_in * k * k
            bound = float(np.sqrt(1.0 / fan_in))
            p = {
                # no conv bias: batch norm cancels per-channel constants, which
                # would leave exactly-zero gradients (bn_beta is the offset)
                "conv_w": Tensor(
                    rng.uniform(-bound, bound, (blk.out_channels, c_in, k, k)),
                    requires_grad=True,
                ),
                "bn_gamma": Tensor(np.ones(blk.out_channels), requires_grad=True),
                "bn_beta": Tensor(np.zeros(blk.out_channels), requires_grad=True),
            }
            if blk.residual and c_in != blk.out_channels:
                pb = float(np.sqrt(1.0 / c_in))
                p["proj_w"] = Tensor(
                    rng.uniform(-pb, pb, (blk.out_channels, c_in, 1, 1)),
                    requires_grad=True,
                )
            self.blocks.append(p)
            self.buffers[f"block{i}.bn_run_mean"] = np.zeros(blk.out_channels)
            self.buffers[f"block{i}.bn_run_var"] = np.ones(blk.out_channels)
            c_in = blk.out_channels

        self.agam: AgamParams | None = None
        if use_agam:
            self.agam = init_agam_params(
                backbone.out_channels,
                self.attr_dim,
                agam_cfg if agam_cfg is not None else AgamConfig(),
                rng,
                with_attributes=self.use_attributes,
            )

    # -- parameter bookkeeping -------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, p in enumerate(self.blocks):
            for name, t in p.items():
                out[f"block{i}.{name}"] = t
        if self.agam is not None:
            out.update(self.agam.named_parameters())
        return out

    def zero_grad(self):
        for t in self.named_parameters().values():
            t.zero_grad()

    @property
    def embedding_dim(self) -> int:
        c, h, w = self.backbone.out_shape
        return c * h * w

    # -- forward pieces ----------------------------------------------------
    def backbone_forward_cl(self, images: Tensor, training: bool) -> Tensor:
        """(B, H, W, C0) -> (B, H', W', C_out)."""
        x = images
        for i, blk in enumerate(self.backbone.blocks):
            p = self.blocks[i]
            pad = blk.kernel // 2
            y = ad.conv2d_cl(x, p["conv_w"], None, pad=pad)
            y = ad.batchnorm_cl(
                y,
                p["bn_gamma"],
                p["bn_beta"],
                running_mean=self.buffers[f"block{i}.bn_run_mean"],
                running_var=self.buffers[f"block{i}.bn_run_var"],
                training=training,
                momentum=BN_MOMENTUM,
                eps=BN_EPS,
            )
            if blk.residual:
                shortcut = x
                if "proj_w" in p:
                    shortcut = ad.conv2d_cl(x, p["proj_w"], None, pad=0)
                y = ad.add(y, shortcut)
            y = ad.relu(y)
            if blk.pool:
                y = ad.maxpool2x2_cl(y)
            x = y
        return x


# ---------------------------------------------------------------------------
# public, per-sample operations (channels-first)


def backbone_forward(model: Model, image: Tensor, training: bool = False) -> Tensor:
    """(C0, H0, W0) -> (C, H, W) through the block stack."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    if tuple(image.shape) != tuple(model.backbone.input_shape):
        raise ShapeError(
            f"backbone_forward: image shape {image.shape} != configured "
            f"{model.backbone.input_shape}"
        )
    x = ad.moveaxis(ad.reshape(image, (1, *image.shape)), 1, 3)
    y = model.backbone_forward_cl(x, training)
    y = ad.moveaxis(y, 3, 1)
    return ad.reshape(y, y.shape[1:])


MODES = ("support-train", "support-eval", "query")


def embed(
    model: Model,
    image: Tensor,
    attrs: Tensor | None = None,
    mode: str = "query",
    training: bool | None = None,
) -> Embedding:
    """Image -> flattened embedding, routed by sample role.

    Support modes require attributes (when the model uses them) and embed the
    guided branch's refined map; query mode ignores attributes entirely.
    ``support-train`` additionally runs the self-guided branch on the same
    features and returns both map sets for the alignment loss.  ``training``
    controls batch-norm statistics and defaults to mode == "support-train".
    """
    if mode not in MODES:
        raise ContractViolation(f"embed: unknown mode {mode!r}")
    if training is None:
        training = mode == "support-train"
    image = image if isinstance(image, Tensor) else Tensor(image)

    feats = backbone_forward(model, image, training=training)
    c, h, w = feats.shape

    if not model.use_agam:
        vec = ad.reshape(feats, (c * h * w,))
        return Embedding(vec=vec, maps=())

    if mode == "query":
        attrs = None
    elif model.use_attributes:
        if attrs is None:
            raise ContractViolation(f"embed: mode {mode!r} requires attributes")
    else:
        attrs = None  # built without the guided branch: supports go self-guided

    x = ad.moveaxis(ad.reshape(feats, (1, c, h, w)), 1, 3)
    a = None
    if attrs is not None:
        attrs = attrs if isinstance(attrs, Tensor) else Tensor(attrs)
        a = ad.reshape(attrs, (1, attrs.shape[0]))
    dual = mode == "support-train" and a is not None
    ag, sg = _agam_forward_cl(model.agam, x, a, dual)
    outputs = tuple(
        _to_chw_output(m, 0, h, w) for m in (ag, sg) if m is not None
    )
    primary = outputs[0]
    vec = ad.reshape(
        ad.moveaxis(ad.reshape(primary.refined, (1, c, h, w)), 1, 3), (c * h * w,)
    )
    return Embedding(vec=vec, maps=outputs)

"""Dual-branch channel/spatial attention over backbone feature maps.

Two structurally identical branches gate a feature map ``F`` of shape
``(C, H, W)``:

* the **attributes-guided** branch additionally sees a per-sample attribute
  vector ``a`` of length ``D``, broadcast over the spatial grid and
  concatenated onto the branch inputs;
* the **self-guided** branch works from the visual features alone and is the
  only path available to query samples.

Each branch applies a channel gate followed by a spatial gate (order
switchable for ablations).  The channel gate squeezes the input with max- and
average-pooling, pushes both descriptors through a shared two-layer 1x1-conv
generator (ReLU between, output summed over the two descriptors) and squashes
with a sigmoid.  The spatial gate pools across channels, stacks the avg/max
planes and runs a 7x7 convolution (padding 3), again sigmoid-squashed.
Branch parameters are never shared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

__all__ = [
    "AgamConfig",
    "BranchParams",
    "AgamParams",
    "AgamOutput",
    "broadcast_attributes",
    "channel_attention",
    "spatial_attention",
    "agam_forward",
    "init_branch_params",
    "init_agam_params",
]

SPATIAL_KERNEL = 7
SPATIAL_PAD = 3


@dataclass
class AgamConfig:
    """Structural switches for the attention module (ablation surface)."""

    reduction: int = 8
    order: str = "CA-SA"  # or "SA-CA": spatial gate first
    use_avgpool: bool = True
    use_maxpool: bool = True
    use_channel: bool = True
    use_spatial: bool = True

    def __post_init__(self):
        if self.order not in ("CA-SA", "SA-CA"):
            raise ConfigError(f"order must be 'CA-SA' or 'SA-CA', got {self.order!r}")
        if self.reduction < 1:
            raise ConfigError(f"reduction ratio must be >= 1, got {self.reduction}")
        if not (self.use_avgpool or self.use_maxpool):
            raise ConfigError("at least one of avg/max pooling must stay enabled")
        if not (self.use_channel or self.use_spatial):
            raise ConfigError("at least one attention module must stay enabled")

    @property
    def pool_modes(self) -> tuple[str, ...]:
        modes = []
        if self.use_avgpool:
            modes.append("avg")
        if self.use_maxpool:
            modes.append("max")
        return tuple(modes)


@dataclass
class BranchParams:
    """One branch's generators.  ``extra_dim`` is D for the guided branch, 0
    for the self-guided one; the channel generator consumes C + extra_dim
    channels and always emits C."""

    tag: str
    channels: int
    extra_dim: int
    cw0: Tensor | None = None  # (hidden, C_in, 1, 1)
    cw0_bias: Tensor | None = None
    cw1: Tensor | None = None  # (C, hidden, 1, 1)
    cw1_bias: Tensor | None = None
    sconv_w: Tensor | None = None  # (1, n_pool_planes, 7, 7)
    sconv_b: Tensor | None = None

    @property
    def in_channels(self) -> int:
        return self.channels + self.extra_dim


@dataclass
class AgamParams:
    cfg: AgamConfig
    channels: int
    attr_dim: int
    ag: BranchParams | None  # None when the model is built without attributes
    sg: BranchParams

    def named_parameters(self, prefix: str = "agam") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for branch in (self.ag, self.sg):
            if branch is None:
                continue
            tag = branch.tag
            for name in ("cw0", "cw0_bias", "cw1", "cw1_bias", "sconv_w", "sconv_b"):
                t = getattr(branch, name)
                if t is not None:
                    out[f"{prefix}.{tag}.{name}"] = t
        return out


@dataclass
class AgamOutput:
    """Refined features plus the gates that produced them, channels-first.

    Disabled gates are stored as None.  ``branch`` is "ag" or "sg".
    """

    refined: Tensor
    m_c: Tensor | None
    m_s: Tensor | None
    branch: str


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = float(np.sqrt(1.0 / max(fan_in, 1)))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_branch_params(
    channels: int, extra_dim: int, cfg: AgamConfig, rng: np.random.Generator, tag: str
) -> BranchParams:
    bp = BranchParams(tag=tag, channels=channels, extra_dim=extra_dim)
    c_in = channels + extra_dim
    if cfg.use_channel:
        hidden = c_in // cfg.reduction
        if hidden < 1:
            raise ConfigError(
                f"reduction {cfg.reduction} leaves no hidden units for "
                f"{c_in} input channels"
            )
        bp.cw0 = _fan_in_uniform(rng, (hidden, c_in, 1, 1), c_in)
        bp.cw0_bias = Tensor(np.zeros(hidden), requires_grad=True)
        bp.cw1 = _fan_in_uniform(rng, (channels, hidden, 1, 1), hidden)
        bp.cw1_bias = Tensor(np.zeros(channels), requires_grad=True)
    if cfg.use_spatial:
        planes = len(cfg.pool_modes)
        fan_in = planes * SPATIAL_KERNEL * SPATIAL_KERNEL
        bp.sconv_w = _fan_in_uniform(
            rng, (1, planes, SPATIAL_KERNEL, SPATIAL_KERNEL), fan_in
        )
        bp.sconv_b = Tensor(np.zeros(1), requires_grad=True)
    return bp


def init_agam_params(
    channels: int,
    attr_dim: int,
    cfg: AgamConfig,
    rng: np.random.Generator,
    with_attributes: bool = True,
) -> AgamParams:
    ag = (
        init_branch_params(channels, attr_dim, cfg, rng, tag="ag")
        if with_attributes
        else None
    )
    sg = init_branch_params(channels, 0, cfg, rng, tag="sg")
    return AgamParams(cfg=cfg, channels=channels, attr_dim=attr_dim, ag=ag, sg=sg)


# ---------------------------------------------------------------------------
# operations (public, per-sample, channels-first) and their batched cores


def broadcast_attributes(a: Tensor, height: int, width: int) -> Tensor:
    """Tile a length-D vector into a (D, H, W) stack of constant planes."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    if a.ndim != 1:
        raise ShapeError(f"broadcast_attributes: expected a vector, got {a.shape}")
    d = a.shape[0]
    planes = ad.reshape(a, (d, 1, 1))
    return ad.mul(planes, Tensor(np.ones((1, height, width))))


def _broadcast_attributes_cl(a: Tensor, height: int, width: int) -> Tensor:
    """(B, D) -> (B, H, W, D)."""
    b, d = a.shape
    planes = ad.reshape(a, (b, 1, 1, d))
    return ad.mul(planes, Tensor(np.ones((1, height, width, 1))))


def _channel_attention_cl(branch: BranchParams, x: Tensor, cfg: AgamConfig) -> Tensor:
    """(B, H, W, C_in) -> gate (B, 1, 1, C).

    The 1x1 generator convolutions reduce to matrix products on the pooled
    descriptors, which is how they are applied here.
    """
    c_in = branch.in_channels
    if x.shape[3] != c_in:
        raise ShapeError(
            f"channel_attention[{branch.tag}]: expected {c_in} input channels, "
            f"got {x.shape[3]}"
        )
    b = x.shape[0]
    hidden = branch.cw0.shape[0]
    w0 = ad.reshape(branch.cw0, (hidden, c_in))
    w1 = ad.reshape(branch.cw1, (branch.channels, hidden))
    z = None
    for mode in cfg.pool_modes:
        pooled = ad.reshape(ad.global_pool_cl(x, mode), (b, c_in))
        h = ad.relu(ad.add(ad.matmul(pooled, ad.moveaxis(w0, 0, 1)), branch.cw0_bias))
        zi = ad.add(ad.matmul(h, ad.moveaxis(w1, 0, 1)), branch.cw1_bias)
        z = zi if z is None else ad.add(z, zi)
    return ad.reshape(ad.sigmoid(z), (b, 1, 1, branch.channels))


def _spatial_attention_cl(branch: BranchParams, x: Tensor, cfg: AgamConfig) -> Tensor:
    """(B, H, W, C_in) -> gate (B, H, W, 1)."""
    planes = [ad.channel_pool_cl(x, mode) for mode in cfg.pool_modes]
    stacked = planes[0] if len(planes) == 1 else ad.concat(planes, axis=3)
    conv = ad.conv2d_cl(stacked, branch.sconv_w, branch.sconv_b, pad=SPATIAL_PAD)
    return ad.sigmoid(conv)


def channel_attention(branch: BranchParams, f_inp: Tensor, cfg: AgamConfig) -> Tensor:
    """Per-sample channel gate: (C_in, H, W) -> (C, 1, 1)."""
    f_inp = f_inp if isinstance(f_inp, Tensor) else Tensor(f_inp)
    x = ad.moveaxis(ad.reshape(f_inp, (1, *f_inp.shape)), 1, 3)
    m = _channel_attention_cl(branch, x, cfg)
    return ad.reshape(m, (branch.channels, 1, 1))


def spatial_attention(branch: BranchParams, f_inp: Tensor, cfg: AgamConfig) -> Tensor:
    """Per-sample spatial gate: (C_in, H, W) -> (1, H, W)."""
    f_inp = f_inp if isinstance(f_inp, Tensor) else Tensor(f_inp)
    x = ad.moveaxis(ad.reshape(f_inp, (1, *f_inp.shape)), 1, 3)
    m = _spatial_attention_cl(branch, x, cfg)
    return ad.reshape(ad.moveaxis(m, 3, 1), (1, f_inp.shape[1], f_inp.shape[2]))


@dataclass
class _BranchMapsCL:
    refined: Tensor  # (B, H, W, C)
    m_c: Tensor | None  # (B, 1, 1, C)
    m_s: Tensor | None  # (B, H, W, 1)
    branch: str


def _run_branch_cl(
    branch: BranchParams, f_map: Tensor, attrs: Tensor | None, cfg: AgamConfig
) -> _BranchMapsCL:
    """Gate a (B, H, W, C) feature map through one branch.

    For the guided branch the attribute planes are concatenated onto the
    input of the first gate and onto the (already gated) input of the second.
    """
    height, width = f_map.shape[1], f_map.shape[2]
    a_planes = (
        _broadcast_attributes_cl(attrs, height, width) if attrs is not None else None
    )

    def with_attrs(t: Tensor) -> Tensor:
        if a_planes is None:
            return t
        return ad.concat([t, a_planes], axis=3)

    m_c = m_s = None
    current = f_map
    stages = ("CA", "SA") if cfg.order == "CA-SA" else ("SA", "CA")
    for stage in stages:
        if stage == "CA" and cfg.use_channel:
            m_c = _channel_attention_cl(branch, with_attrs(current), cfg)
            current = ad.mul(current, m_c)
        elif stage == "SA" and cfg.use_spatial:
            m_s = _spatial_attention_cl(branch, with_attrs(current), cfg)
            current = ad.mul(current, m_s)
    return _BranchMapsCL(refined=current, m_c=m_c, m_s=m_s, branch=branch.tag)


def _agam_forward_cl(
    params: AgamParams, f_map: Tensor, attrs: Tensor | None, dual: bool
):
    """Batched module forward; returns (ag_maps | None, sg_maps | None).

    attrs present, dual -> both branches on the same features;
    attrs present, not dual -> guided branch only;
    attrs absent -> self-guided branch only.
    """
    if attrs is not None:
        if params.ag is None:
            raise ConfigError("model was built without an attributes-guided branch")
        if attrs.shape[1] != params.attr_dim:
            raise ShapeError(
                f"attribute dimension {attrs.shape[1]} != expected {params.attr_dim}"
            )
        ag = _run_branch_cl(params.ag, f_map, attrs, params.cfg)
        sg = _run_branch_cl(params.sg, f_map, None, params.cfg) if dual else None
        return ag, sg
    return None, _run_branch_cl(params.sg, f_map, None, params.cfg)


def _to_chw_output(maps: _BranchMapsCL, idx: int, height: int, width: int) -> AgamOutput:
    """Extract sample ``idx`` of a batched branch result as channels-first."""
    refined = ad.moveaxis(ad.take_range(maps.refined, idx, idx + 1, axis=0), 3, 1)
    refined = ad.reshape(refined, refined.shape[1:])
    m_c = m_s = None
    if maps.m_c is not None:
        c = maps.m_c.shape[3]
        m_c = ad.reshape(ad.take_range(maps.m_c, idx, idx + 1, axis=0), (c, 1, 1))
    if maps.m_s is not None:
        m_s = ad.reshape(
            ad.take_range(maps.m_s, idx, idx + 1, axis=0), (1, height, width)
        )
    return AgamOutput(refined=refined, m_c=m_c, m_s=m_s, branch=maps.branch)


def agam_forward(
    params: AgamParams, f_map: Tensor, attrs: Tensor | None = None, dual: bool = False
):
    """Per-sample module forward on a (C, H, W) feature map.

    Returns a single AgamOutput, or an (ag, sg) pair when ``attrs`` is given
    and ``dual`` is set (training-time support samples: the guided output
    carries the embedding, the pair feeds the alignment loss).
    """
    f_map = f_map if isinstance(f_map, Tensor) else Tensor(f_map)
    if f_map.ndim != 3:
        raise ShapeError(f"agam_forward: expected (C,H,W), got {f_map.shape}")
    if f_map.shape[0] != params.channels:
        raise ShapeError(
            f"agam_forward: feature map has {f_map.shape[0]} channels, "
            f"module was built for {params.channels}"
        )
    height, width = f_map.shape[1], f_map.shape[2]
    x = ad.moveaxis(ad.reshape(f_map, (1, *f_map.shape)), 1, 3)
    a = None
    if attrs is not None:
        attrs = attrs if isinstance(attrs, Tensor) else Tensor(attrs)
        if attrs.ndim != 1:
            raise ShapeError(f"agam_forward: attributes must be a vector, got {attrs.shape}")
        a = ad.reshape(attrs, (1, attrs.shape[0]))
    ag, sg = _agam_forward_cl(params, x, a, dual)
    if ag is not None and sg is not None:
        return (
            _to_chw_output(ag, 0, height, width),
            _to_chw_output(sg, 0, height, width),
        )
    picked = ag if ag is not None else sg
    return _to_chw_output(picked, 0, height, width)

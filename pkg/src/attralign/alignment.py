"""Attention alignment: normalization, losses, episode sums, diagnostics.

The guided branch's attention maps act as distillation targets for the
self-guided branch.  Per support sample, each map family (channel gate,
spatial gate) is L2-normalized and compared with the configured loss; per
episode the per-sample losses are summed over all supports.  The soft-margin
loss sums log(1 + exp(-a_j * s_j)) over map elements; the L1/MSE/smooth-L1
alternatives mean-reduce, per their usual definitions (the scale difference
is absorbed by the loss weights).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import AgamOutput
from .autodiff import Tensor
from .errors import ConfigError, ContractViolation, ShapeError

__all__ = [
    "AlignmentConfig",
    "normalize_map",
    "soft_margin_alignment",
    "alt_alignment",
    "alignment_loss",
    "episode_alignment_losses",
    "total_loss",
    "attention_difference",
]

LOSS_TYPES = ("soft-margin", "L1", "MSE", "smoothL1")
NORM_FLOOR = 1e-12


@dataclass
class AlignmentConfig:
    loss_type: str = "soft-margin"
    alpha: float = 1.0
    beta: float = 0.1
    teacher_stop_gradient: bool = True

    def __post_init__(self):
        if self.loss_type not in LOSS_TYPES:
            raise ConfigError(
                f"loss_type must be one of {LOSS_TYPES}, got {self.loss_type!r}"
            )
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alignment weights must be non-negative")


def normalize_map(m: Tensor) -> Tensor:
    """M / ||M||_2 over all elements; all-zeros maps stay all-zeros."""
    m = m if isinstance(m, Tensor) else Tensor(m)
    norm = float(np.sqrt((m.data * m.data).sum()))
    if norm < NORM_FLOOR:
        return Tensor(np.zeros_like(m.data))
    sq = ad.sum_axes(ad.mul(m, m))
    return ad.mul(m, ad.powc(sq, -0.5))


def _normalize_rows_cl(m: Tensor) -> Tensor:
    """Per-sample L2 normalization of batched maps: (B, ...) -> (B, ...)."""
    b = m.shape[0]
    axes = tuple(range(1, m.ndim))
    norms = np.sqrt((m.data * m.data).sum(axis=axes, keepdims=True))
    if np.any(norms < NORM_FLOOR):  # degenerate rows: zero them out, constant
        keep = (norms >= NORM_FLOOR).astype(float)
        safe_sq = ad.sum_axes(ad.mul(m, m), axes=axes, keepdims=True)
        safe_sq = ad.add(safe_sq, Tensor((norms < NORM_FLOOR).astype(float)))
        return ad.mul(ad.mul(m, ad.powc(safe_sq, -0.5)), Tensor(keep))
    sq = ad.sum_axes(ad.mul(m, m), axes=axes, keepdims=True)
    return ad.mul(m, ad.powc(sq, -0.5))


def soft_margin_alignment(
    m_ag: Tensor, m_sg: Tensor, teacher_stop_gradient: bool = False
) -> Tensor:
    """Sum over elements of log(1 + exp(-ag_j * sg_j)) on normalized maps."""
    m_ag = m_ag if isinstance(m_ag, Tensor) else Tensor(m_ag)
    m_sg = m_sg if isinstance(m_sg, Tensor) else Tensor(m_sg)
    if m_ag.shape != m_sg.shape:
        raise ShapeError(f"alignment: map shapes differ, {m_ag.shape} vs {m_sg.shape}")
    if teacher_stop_gradient:
        m_ag = m_ag.detach()
    prod = ad.mul(m_ag, m_sg)
    return ad.sum_axes(ad.softplus(ad.mul(prod, -1.0)))


def alt_alignment(
    loss_type: str, m_ag: Tensor, m_sg: Tensor, teacher_stop_gradient: bool = False
) -> Tensor:
    """Mean-reduced L1 / MSE / smooth-L1 between two equally shaped maps."""
    m_ag = m_ag if isinstance(m_ag, Tensor) else Tensor(m_ag)
    m_sg = m_sg if isinstance(m_sg, Tensor) else Tensor(m_sg)
    if m_ag.shape != m_sg.shape:
        raise ShapeError(f"alignment: map shapes differ, {m_ag.shape} vs {m_sg.shape}")
    if teacher_stop_gradient:
        m_ag = m_ag.detach()
    d = ad.sub(m_ag, m_sg)
    if loss_type == "L1":
        return ad.mean_all(ad.absval(d))
    if loss_type == "MSE":
        return ad.mean_all(ad.mul(d, d))
    if loss_type == "smoothL1":
        # 0.5 d^2 below |d| = 1, |d| - 0.5 above; branch chosen by value
        absd = ad.absval(d)
        small = Tensor((np.abs(d.data) < 1.0).astype(float))
        quad = ad.mul(ad.mul(d, d), 0.5)
        lin = ad.add(absd, -0.5)
        return ad.mean_all(
            ad.add(ad.mul(quad, small), ad.mul(lin, ad.sub(Tensor(np.ones_like(small.data)), small)))
        )
    raise ConfigError(f"unknown alignment loss type {loss_type!r}")


def alignment_loss(
    cfg: AlignmentConfig, m_ag: Tensor, m_sg: Tensor
) -> Tensor:
    """Configured loss on per-map normalized inputs."""
    a = normalize_map(m_ag)
    s = normalize_map(m_sg)
    if cfg.loss_type == "soft-margin":
        return soft_margin_alignment(a, s, cfg.teacher_stop_gradient)
    return alt_alignment(cfg.loss_type, a, s, cfg.teacher_stop_gradient)


def episode_alignment_losses(
    support_outputs: list[tuple[AgamOutput, AgamOutput]], cfg: AlignmentConfig
) -> tuple[Tensor, Tensor]:
    """Sum the per-sample channel / spatial alignment losses over supports.

    Each entry is the (guided, self-guided) output pair of one support
    sample.  Returns (channel_sum, spatial_sum); a disabled map family
    contributes zero.
    """
    l_cas = Tensor(np.zeros(()))
    l_sas = Tensor(np.zeros(()))
    for pair in support_outputs:
        ag, sg = pair
        if ag is None or sg is None:
            raise ContractViolation(
                "episode_alignment_losses: every support needs both branches"
            )
        if ag.m_c is not None and sg.m_c is not None:
            l_cas = ad.add(l_cas, alignment_loss(cfg, ag.m_c, sg.m_c))
        if ag.m_s is not None and sg.m_s is not None:
            l_sas = ad.add(l_sas, alignment_loss(cfg, ag.m_s, sg.m_s))
    return l_cas, l_sas


def _batched_alignment_cl(
    cfg: AlignmentConfig, m_ag: Tensor | None, m_sg: Tensor | None
) -> Tensor:
    """Engine path: one loss over a whole support batch of maps (B, ...).

    Equals the sum of per-sample losses: normalization is per sample (row),
    soft-margin sums over everything, and the mean-reduced alternatives are
    rescaled back to a per-sample mean before summing.
    """
    if m_ag is None or m_sg is None:
        return Tensor(np.zeros(()))
    a = _normalize_rows_cl(m_ag)
    s = _normalize_rows_cl(m_sg)
    if cfg.teacher_stop_gradient:
        a = a.detach()
    if cfg.loss_type == "soft-margin":
        return ad.sum_axes(ad.softplus(ad.mul(ad.mul(a, s), -1.0)))
    per_elem = a.data[0].size
    d = ad.sub(a, s)
    if cfg.loss_type == "L1":
        return ad.mul(ad.sum_axes(ad.absval(d)), 1.0 / per_elem)
    if cfg.loss_type == "MSE":
        return ad.mul(ad.sum_axes(ad.mul(d, d)), 1.0 / per_elem)
    # smoothL1
    small = Tensor((np.abs(d.data) < 1.0).astype(float))
    quad = ad.mul(ad.mul(d, d), 0.5)
    lin = ad.add(ad.absval(d), -0.5)
    tot = ad.add(ad.mul(quad, small), ad.mul(lin, ad.sub(Tensor(np.ones_like(small.data)), small)))
    return ad.mul(ad.sum_axes(tot), 1.0 / per_elem)


def total_loss(
    l_mbc: Tensor, l_cas: Tensor, l_sas: Tensor, cfg: AlignmentConfig
) -> Tensor:
    """metric loss + alpha * channel alignment + beta * spatial alignment."""
    out = l_mbc
    if cfg.alpha != 0.0:
        out = ad.add(out, ad.mul(l_cas, cfg.alpha))
    if cfg.beta != 0.0:
        out = ad.add(out, ad.mul(l_sas, cfg.beta))
    return out


def _map_difference(m_ag: np.ndarray, m_sg: np.ndarray) -> float:
    """Mean |difference| of the two L2-normalized maps (plain numpy)."""
    a = m_ag.reshape(-1)
    s = m_sg.reshape(-1)
    na = np.sqrt((a * a).sum())
    ns = np.sqrt((s * s).sum())
    a = a / na if na >= NORM_FLOOR else np.zeros_like(a)
    s = s / ns if ns >= NORM_FLOOR else np.zeros_like(s)
    return float(np.abs(a - s).mean())


def attention_difference(
    support_outputs: list[tuple[AgamOutput, AgamOutput]]
) -> float:
    """Mean over samples of the normalized-map gap between the two branches.

    The channel and spatial families are averaged with equal weight; if one
    family is disabled the other carries the whole value.
    """
    per_family: dict[str, list[float]] = {"c": [], "s": []}
    for ag, sg in support_outputs:
        if ag.m_c is not None and sg.m_c is not None:
            per_family["c"].append(_map_difference(ag.m_c.data, sg.m_c.data))
        if ag.m_s is not None and sg.m_s is not None:
            per_family["s"].append(_map_difference(ag.m_s.data, sg.m_s.data))
    means = [float(np.mean(v)) for v in per_family.values() if v]
    return float(np.mean(means)) if means else 0.0


def _attention_difference_cl(
    mc_ag: Tensor | None,
    mc_sg: Tensor | None,
    ms_ag: Tensor | None,
    ms_sg: Tensor | None,
) -> float:
    """Engine path over batched maps; matches `attention_difference`."""
    fams = []
    for a, s in ((mc_ag, mc_sg), (ms_ag, ms_sg)):
        if a is None or s is None:
            continue
        b = a.shape[0]
        vals = [_map_difference(a.data[i], s.data[i]) for i in range(b)]
        fams.append(float(np.mean(vals)))
    return float(np.mean(fams)) if fams else 0.0

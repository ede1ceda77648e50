"""Finite-difference verification suites for every differentiable operation.

Each suite builds a small random scalar-valued computation around one
operation (or the fully composed episode loss) and compares ``backward()``
against central differences.  The CLI `gradcheck` command runs all suites and
prints a pass/fail table; the acceptance tests sweep them over many seeds.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .alignment import AlignmentConfig, alignment_loss, episode_alignment_losses
from .attention import AgamConfig, agam_forward, init_agam_params
from .autodiff import Tensor, finite_diff_check
from .data import Dataset, DatasetClass
from .engine import EpisodeSpec, RunConfig, TrainState, _episode_forward, sample_episode
from .heads import metric_classification_loss, protonet_logp_batch, prototypes
from .model import Model, desk_backbone

TOLERANCE = 1e-4


def _t(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def op_suites(rng: np.random.Generator):
    """(name, scalar function, inputs) triples for every differentiable op."""
    coef = Tensor(rng.standard_normal((3, 5, 5)))
    coef_cl = Tensor(rng.standard_normal((2, 4, 4, 3)))
    suites = [
        ("add", lambda a, b: ad.sum_axes(ad.sigmoid(a + b)),
         [_t(rng, (3, 5, 5)), _t(rng, (3, 5, 5))]),
        ("mul", lambda a, b: ad.sum_axes(ad.sigmoid(a * b)),
         [_t(rng, (3, 5, 5)), _t(rng, (3, 5, 5))]),
        ("broadcast_mul", lambda a, m: ad.sum_axes(ad.sigmoid(ad.broadcast_mul(a, m))),
         [_t(rng, (3, 5, 5)), _t(rng, (3, 1, 1))]),
        ("relu", lambda a: ad.sum_axes(ad.relu(a) * coef), [_t(rng, (3, 5, 5))]),
        ("sigmoid", lambda a: ad.sum_axes(ad.sigmoid(a) * coef), [_t(rng, (3, 5, 5))]),
        ("softplus", lambda a: ad.sum_axes(ad.softplus(a) * coef), [_t(rng, (3, 5, 5))]),
        ("log", lambda a: ad.sum_axes(ad.log(ad.add(ad.sigmoid(a), 0.1))),
         [_t(rng, (3, 5, 5))]),
        ("conv2d", lambda x, w, b: ad.sum_axes(ad.sigmoid(ad.conv2d(x, w, b, pad=1)) * coef),
         [_t(rng, (2, 5, 5)), _t(rng, (3, 2, 3, 3), 0.5), _t(rng, (3,))]),
        ("conv2d_7x7", lambda x, w: ad.sum_axes(ad.sigmoid(ad.conv2d(x, w, None, pad=3))),
         [_t(rng, (2, 6, 6)), _t(rng, (1, 2, 7, 7), 0.3)]),
        ("global_pool_max", lambda x: ad.sum_axes(ad.powc(ad.global_pool(x, "max"), 2.0)),
         [_t(rng, (3, 5, 5))]),
        ("global_pool_avg", lambda x: ad.sum_axes(ad.powc(ad.global_pool(x, "avg"), 2.0)),
         [_t(rng, (3, 5, 5))]),
        ("channel_pool_max", lambda x: ad.sum_axes(ad.sigmoid(ad.channel_pool(x, "max"))),
         [_t(rng, (3, 5, 5))]),
        ("channel_pool_avg", lambda x: ad.sum_axes(ad.sigmoid(ad.channel_pool(x, "avg"))),
         [_t(rng, (3, 5, 5))]),
        ("maxpool2x2", lambda x: ad.sum_axes(ad.powc(ad.maxpool2x2_cl(x), 2.0)),
         [_t(rng, (2, 4, 4, 3))]),
        ("concat_channels", lambda a, b: ad.sum_axes(ad.sigmoid(ad.concat_channels(a, b))),
         [_t(rng, (2, 4, 4)), _t(rng, (3, 4, 4))]),
        ("log_softmax", lambda v: ad.sum_axes(ad.log_softmax(v) * Tensor(np.arange(5.0))),
         [_t(rng, (5,))]),
        ("matmul", lambda a, b: ad.sum_axes(ad.sigmoid(ad.matmul(a, b))),
         [_t(rng, (4, 3)), _t(rng, (3, 2))]),
        ("batchnorm", lambda x, g, b: ad.sum_axes(
            ad.batchnorm_cl(x, g, b, training=True) * coef_cl),
         [_t(rng, (2, 4, 4, 3)), _t(rng, (3,), 0.4), _t(rng, (3,), 0.4)]),
    ]
    return suites


def model_suites(rng: np.random.Generator):
    """Attention, heads, alignment, and the fully composed episode loss."""
    cfg = AgamConfig(reduction=2)
    params = init_agam_params(channels=4, attr_dim=3, cfg=cfg, rng=rng)
    fmap = _t(rng, (4, 5, 5))
    attrs = Tensor(rng.random(3), requires_grad=True)
    # stop-gradient would (intentionally) hide the teacher-side dependence
    # from backward(), so the numeric comparison must run without it
    align = AlignmentConfig(teacher_stop_gradient=False)

    def agam_loss(fmap, attrs):
        ag, sg = agam_forward(params, fmap, attrs, dual=True)
        l_cas, l_sas = episode_alignment_losses([(ag, sg)], align)
        return ad.add(ad.sum_axes(ad.powc(ag.refined, 2.0)), ad.add(l_cas, l_sas))

    sup = _t(rng, (4, 6))
    qry = _t(rng, (3, 6))
    labels = np.array([0, 0, 1, 1])
    qlabels = np.array([0, 1, 1])

    def proto_loss(sup, qry):
        protos = prototypes(sup, labels, 2)
        return metric_classification_loss(protonet_logp_batch(qry, protos), qlabels)

    ma = _t(rng, (1, 5, 5))
    mb = _t(rng, (1, 5, 5))
    align_sym = AlignmentConfig(teacher_stop_gradient=False)

    suites = [
        ("agam_dual+alignment", agam_loss, [fmap, attrs]),
        ("protonet_loss", proto_loss, [sup, qry]),
        ("soft_margin", lambda a, b: alignment_loss(align_sym, a, b), [ma, mb]),
        ("alignment_L1", lambda a, b: alignment_loss(
            AlignmentConfig(loss_type="L1", teacher_stop_gradient=False), a, b),
         [ma, mb]),
        ("alignment_MSE", lambda a, b: alignment_loss(
            AlignmentConfig(loss_type="MSE", teacher_stop_gradient=False), a, b),
         [ma, mb]),
        ("alignment_smoothL1", lambda a, b: alignment_loss(
            AlignmentConfig(loss_type="smoothL1", teacher_stop_gradient=False), a, b),
         [ma, mb]),
    ]
    return suites


def tiny_dataset(rng: np.random.Generator, n_classes=3, per_class=4,
                 image_shape=(3, 8, 8), attr_dim=4) -> Dataset:
    """Small in-memory random dataset for composed-loss checks."""
    classes = {}
    for cid in range(n_classes):
        attrs = (rng.random(attr_dim) > 0.5).astype(float)
        classes[cid] = DatasetClass(
            class_id=cid,
            images=rng.standard_normal((per_class, *image_shape)) * 0.5,
            attrs=np.tile(attrs, (per_class, 1)),
        )
    ids = list(range(n_classes))
    return Dataset(
        name="tiny", attr_dim=attr_dim, attribute_level="category",
        classes=classes, splits={"seen": ids, "validation": [], "unseen": []},
    )


def composed_loss_check(seed: int, max_elements: int | None = 40) -> float:
    """Finite differences through backbone -> dual attention -> head -> loss.

    Perturbs every model parameter (subsampled per tensor when
    ``max_elements`` is set) on a random 2-way 1-shot episode.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    dataset = tiny_dataset(rng)
    run = RunConfig(
        episode=EpisodeSpec(n_way=2, k_shot=1, q_per_class=1),
        backbone_channels=8,
        reduction=4,
        total_episodes=1,
        alignment=AlignmentConfig(alpha=1.0, beta=0.1, teacher_stop_gradient=False),
    )
    from .model import BackboneConfig, BlockSpec

    backbone = BackboneConfig(  # two thin blocks keep the parameter count small
        blocks=tuple(BlockSpec(out_channels=8, pool=(i < 1)) for i in range(2)),
        input_shape=(3, 8, 8),
    )
    model = Model(backbone, agam_cfg=run.agam_config(), attr_dim=dataset.attr_dim, rng=rng)
    state = TrainState(model=model, relation=None)
    episode = sample_episode(dataset, run.episode, rng)
    params = list(state.named_parameters().values())

    def loss(*_params):
        return _episode_forward(state, run, episode, training=True).total

    return finite_diff_check(
        loss, params, max_elements=max_elements, rng=np.random.default_rng(seed)
    )


def run_all(seed: int = 0):
    """All suites once; returns (name, max_rel_err, passed) rows."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    rows = []
    for name, f, inputs in op_suites(rng) + model_suites(rng):
        err = finite_diff_check(f, inputs)
        rows.append((name, err, err < TOLERANCE))
    err = composed_loss_check(seed)
    rows.append(("composed_episode_loss", err, err < TOLERANCE))
    return rows

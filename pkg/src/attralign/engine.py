"""Episode sampling, the training loop, and evaluation.

Training draws N-way K-shot episodes from the seen split, accumulates
gradients of the episode loss over a small batch of episodes, and applies one
Adam step on the mean gradient.  Support samples run the attention module in
both branches (the guided output carries the embedding, the pair feeds the
alignment loss); queries only ever see the self-guided branch.  Periodic
validation on the validation split selects the best checkpoint.

Evaluation samples episodes from the unseen split, scores query accuracy
with the configured head, and reports the mean, a normal-approximation 95%
confidence half-width, and the mean attention difference between branches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .alignment import (
    AlignmentConfig,
    _attention_difference_cl,
    _batched_alignment_cl,
    total_loss,
)
from .attention import AgamConfig, _agam_forward_cl
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset
from .errors import CapacityError, ConfigError, ContractViolation, DivergenceError
from .heads import (
    RelationParams,
    _class_mean_matrix,
    init_relation_params,
    matchingnet_logp_batch,
    metric_classification_loss,
    protonet_logp_batch,
    prototypes,
)
from .model import BackboneConfig, Model, desk_backbone, mini_residual_backbone
from .optim import AdamState, adam_step

__all__ = [
    "EpisodeSpec",
    "Episode",
    "RunConfig",
    "EvalReport",
    "TrainResult",
    "sample_episode",
    "build_model",
    "train",
    "evaluate",
    "ci95",
]

HEADS = ("protonet", "matching", "relation")


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    q_per_class: int = 15
    split: str = "seen"

    def __post_init__(self):
        if self.n_way < 2:
            raise ConfigError(f"n_way must be >= 2, got {self.n_way}")
        if self.k_shot < 1 or self.q_per_class < 1:
            raise ConfigError("k_shot and q_per_class must be >= 1")


@dataclass
class Episode:
    support_images: np.ndarray  # (N*K, C, H, W), class-major
    support_attrs: np.ndarray  # (N*K, D)
    support_labels: np.ndarray  # (N*K,) in 0..N-1
    query_images: np.ndarray  # (N*q, C, H, W)
    query_labels: np.ndarray
    class_ids: list[int]  # drawn dataset class ids, in label order

    @property
    def n_way(self) -> int:
        return len(self.class_ids)


def sample_episode(dataset: Dataset, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
    """Draw classes then disjoint support/query samples, without replacement."""
    class_ids = dataset.split_classes(spec.split)
    if len(class_ids) < spec.n_way:
        raise CapacityError(
            f"split {spec.split!r} has {len(class_ids)} classes, "
            f"episode needs {spec.n_way}"
        )
    chosen = [class_ids[i] for i in rng.choice(len(class_ids), spec.n_way, replace=False)]
    need = spec.k_shot + spec.q_per_class
    sup_imgs, sup_attrs, sup_labels = [], [], []
    q_imgs, q_labels = [], []
    for label, cid in enumerate(chosen):
        cls = dataset.classes[cid]
        n = cls.images.shape[0]
        if n < need:
            raise CapacityError(
                f"class {cid} has {n} samples, episode needs {need} "
                f"({spec.k_shot} support + {spec.q_per_class} query)"
            )
        idx = rng.choice(n, need, replace=False)
        sup_imgs.append(cls.images[idx[: spec.k_shot]])
        sup_attrs.append(cls.attrs[idx[: spec.k_shot]])
        sup_labels.extend([label] * spec.k_shot)
        q_imgs.append(cls.images[idx[spec.k_shot :]])
        q_labels.extend([label] * spec.q_per_class)
    return Episode(
        support_images=np.concatenate(sup_imgs),
        support_attrs=np.concatenate(sup_attrs),
        support_labels=np.array(sup_labels),
        query_images=np.concatenate(q_imgs),
        query_labels=np.array(q_labels),
        class_ids=chosen,
    )


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    episode: EpisodeSpec = field(default_factory=EpisodeSpec)
    episodes_per_batch: int = 4
    total_episodes: int = 2000
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    seed: int = 0
    head: str = "protonet"
    backbone: str = "desk"  # "desk" | "residual"
    backbone_channels: int = 16
    use_agam: bool = True
    use_attributes: bool = True
    zero_attributes: bool = False
    order: str = "CA-SA"
    reduction: int = 8
    use_avgpool: bool = True
    use_maxpool: bool = True
    use_channel_attention: bool = True
    use_spatial_attention: bool = True
    augment_flip: bool = False
    val_every: int = 200
    val_episodes: int = 30

    def __post_init__(self):
        if self.total_episodes < 1:
            raise ConfigError("total_episodes must be >= 1")
        if self.episodes_per_batch < 1:
            raise ConfigError("episodes_per_batch must be >= 1")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.backbone not in ("desk", "residual"):
            raise ConfigError(f"backbone must be 'desk' or 'residual', got {self.backbone!r}")
        if self.zero_attributes and not (self.use_attributes and self.use_agam):
            raise ConfigError("zero_attributes requires the attributes-guided branch")

    def agam_config(self) -> AgamConfig:
        return AgamConfig(
            reduction=self.reduction,
            order=self.order,
            use_avgpool=self.use_avgpool,
            use_maxpool=self.use_maxpool,
            use_channel=self.use_channel_attention,
            use_spatial=self.use_spatial_attention,
        )


@dataclass
class EvalReport:
    mean_accuracy: float  # percent
    ci95: float  # percent half-width
    n_episodes: int
    episode_accuracies: np.ndarray
    mean_attention_difference: float


def ci95(values) -> float:
    """1.96 * sample stddev / sqrt(n); zero for a single value."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n <= 1:
        return 0.0
    return float(1.96 * values.std(ddof=1) / math.sqrt(n))


# ---------------------------------------------------------------------------
# model construction


def build_model(run: RunConfig, dataset: Dataset, rng: np.random.Generator) -> Model:
    c0, h0, w0 = dataset.image_shape
    if run.backbone == "residual":
        backbone = mini_residual_backbone((c0, h0, w0), run.backbone_channels)
    else:
        backbone = desk_backbone((c0, h0, w0), run.backbone_channels)
    return Model(
        backbone,
        agam_cfg=run.agam_config() if run.use_agam else None,
        attr_dim=dataset.attr_dim,
        use_attributes=run.use_attributes,
        use_agam=run.use_agam,
        rng=rng,
    )


@dataclass
class TrainState:
    model: Model
    relation: RelationParams | None

    def named_parameters(self) -> dict[str, Tensor]:
        params = self.model.named_parameters()
        if self.relation is not None:
            params.update(self.relation.named_parameters())
        return params


# ---------------------------------------------------------------------------
# the batched episode forward


def _to_cl(images: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(np.moveaxis(images, 1, 3)))


@dataclass
class _EpisodeResult:
    l_mbc: Tensor
    l_cas: Tensor
    l_sas: Tensor
    total: Tensor
    accuracy: float
    attention_difference: float


def _head_logp(
    state: TrainState,
    head: str,
    sup_vec: Tensor,
    q_vec: Tensor,
    sup_maps_cl: Tensor,
    q_maps_cl: Tensor,
    labels: np.ndarray,
    n_way: int,
):
    if head == "protonet":
        protos = prototypes(sup_vec, labels, n_way)
        return protonet_logp_batch(q_vec, protos), None
    if head == "matching":
        return matchingnet_logp_batch(q_vec, sup_vec, labels, n_way), None
    # relation: compare each query map against the class-mean support maps
    s, h, w, c = sup_maps_cl.shape
    q = q_maps_cl.shape[0]
    mean_mat = Tensor(_class_mean_matrix(labels, n_way))
    class_maps = ad.reshape(
        ad.matmul(mean_mat, ad.reshape(sup_maps_cl, (s, h * w * c))), (n_way, h, w, c)
    )
    qm = ad.reshape(q_maps_cl, (q, 1, h, w, c))
    qm = ad.mul(qm, Tensor(np.ones((1, n_way, 1, 1, 1))))
    cm = ad.reshape(class_maps, (1, n_way, h, w, c))
    cm = ad.mul(cm, Tensor(np.ones((q, 1, 1, 1, 1))))
    pairs = ad.concat(
        [ad.reshape(qm, (q * n_way, h, w, c)), ad.reshape(cm, (q * n_way, h, w, c))],
        axis=3,
    )
    rp = state.relation
    y = ad.relu(ad.conv2d_cl(pairs, rp.conv_w, rp.conv_b, pad=1))
    pooled = ad.reshape(ad.global_pool_cl(y, "avg"), (q * n_way, y.shape[3]))
    hdn = ad.relu(ad.add(ad.matmul(pooled, rp.fc1_w), rp.fc1_b))
    scores = ad.sigmoid(ad.add(ad.matmul(hdn, rp.fc2_w), rp.fc2_b))
    scores = ad.reshape(scores, (q, n_way))
    total = ad.sum_axes(scores, axes=1, keepdims=True)
    logp = ad.log(ad.mul(scores, ad.powc(total, -1.0)))
    return logp, scores


def _episode_forward(
    state: TrainState,
    run: RunConfig,
    episode: Episode,
    training: bool,
    collect_attention: bool = True,
) -> _EpisodeResult:
    model = state.model
    n_way = episode.n_way
    n_sup = episode.support_images.shape[0]
    images = np.concatenate([episode.support_images, episode.query_images])
    feats = model.backbone_forward_cl(_to_cl(images), training=training)
    f_sup = ad.take_range(feats, 0, n_sup, axis=0)
    f_q = ad.take_range(feats, n_sup, feats.shape[0], axis=0)
    h, w, c = f_sup.shape[1], f_sup.shape[2], f_sup.shape[3]

    mc_pair = ms_pair = None
    if model.use_agam:
        attrs = None
        if model.use_attributes:
            a = (
                np.zeros_like(episode.support_attrs)
                if run.zero_attributes
                else episode.support_attrs
            )
            attrs = Tensor(a)
        dual = (training or collect_attention) and attrs is not None
        ag, sg = _agam_forward_cl(model.agam, f_sup, attrs, dual)
        sup_primary = ag if ag is not None else sg
        sup_maps = sup_primary.refined
        if ag is not None and sg is not None:
            mc_pair = (ag.m_c, sg.m_c)
            ms_pair = (ag.m_s, sg.m_s)
        _, q_sg = _agam_forward_cl(model.agam, f_q, None, False)
        q_maps = q_sg.refined
    else:
        sup_maps, q_maps = f_sup, f_q

    e_dim = h * w * c
    sup_vec = ad.reshape(sup_maps, (n_sup, e_dim))
    q_vec = ad.reshape(q_maps, (q_maps.shape[0], e_dim))

    logp, scores = _head_logp(
        state, run.head, sup_vec, q_vec, sup_maps, q_maps,
        episode.support_labels, n_way,
    )
    if run.head == "relation":
        onehot = np.zeros((len(episode.query_labels), n_way))
        onehot[np.arange(len(episode.query_labels)), episode.query_labels] = 1.0
        diff = ad.sub(scores, Tensor(onehot))
        l_mbc = ad.sum_axes(ad.mul(diff, diff))
    else:
        l_mbc = metric_classification_loss(logp, episode.query_labels)

    pred = logp.data.argmax(axis=1)
    accuracy = float((pred == episode.query_labels).mean() * 100.0)

    if mc_pair is not None:
        l_cas = _batched_alignment_cl(run.alignment, mc_pair[0], mc_pair[1])
        l_sas = _batched_alignment_cl(run.alignment, ms_pair[0], ms_pair[1])
        attn_diff = _attention_difference_cl(
            mc_pair[0], mc_pair[1], ms_pair[0], ms_pair[1]
        )
    else:
        l_cas = Tensor(np.zeros(()))
        l_sas = Tensor(np.zeros(()))
        attn_diff = float("nan")

    total = total_loss(l_mbc, l_cas, l_sas, run.alignment)
    return _EpisodeResult(
        l_mbc=l_mbc,
        l_cas=l_cas,
        l_sas=l_sas,
        total=total,
        accuracy=accuracy,
        attention_difference=attn_diff,
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    state: TrainState
    run: RunConfig
    log_lines: list[str]
    best_val_accuracy: float
    best_params: dict[str, np.ndarray]
    best_buffers: dict[str, np.ndarray]
    episodes_done: int
    adam: AdamState
    episode_rng: np.random.Generator

    def restore_best(self):
        """Load the best-validation snapshot into the live model."""
        if not self.best_params:
            return
        for name, tensor in self.state.named_parameters().items():
            tensor.data = self.best_params[name].copy()
        for name, arr in self.state.model.buffers.items():
            arr[...] = self.best_buffers[name]


def _snapshot(state: TrainState):
    params = {k: t.data.copy() for k, t in state.named_parameters().items()}
    buffers = {k: v.copy() for k, v in state.model.buffers.items()}
    return params, buffers


def _flip_augment(episode: Episode, rng: np.random.Generator) -> Episode:
    def flip(images):
        out = images.copy()
        mask = rng.random(images.shape[0]) < 0.5
        out[mask] = out[mask][:, :, :, ::-1]
        return out

    return replace(
        episode,
        support_images=flip(episode.support_images),
        query_images=flip(episode.query_images),
    )


def run_config_to_dict(run: RunConfig) -> dict:
    from dataclasses import asdict

    return asdict(run)


def run_config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    d["episode"] = EpisodeSpec(**d["episode"])
    d["alignment"] = AlignmentConfig(**d["alignment"])
    return RunConfig(**d)


def train(
    run: RunConfig,
    dataset: Dataset,
    out_dir=None,
    resume_from=None,
    log_hook=None,
    config_extra: dict | None = None,
) -> TrainResult:
    """Meta-train per the run configuration; returns final + best state.

    When ``out_dir`` is given, writes ``train_log.csv`` plus two checkpoints:
    ``checkpoint_best`` (the validation winner, for evaluation) and
    ``checkpoint_last`` (full optimizer/rng state, for resuming).
    """
    if not dataset.split_classes("seen"):
        raise CapacityError("dataset has no seen classes to train on")
    config_snapshot = {**run_config_to_dict(run), **(config_extra or {})}
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    init_rng = np.random.default_rng(np.random.SeedSequence([run.seed, 1]))
    episode_rng = np.random.default_rng(np.random.SeedSequence([run.seed, 2]))
    model = build_model(run, dataset, init_rng)
    relation = (
        init_relation_params(model.backbone.out_channels, init_rng)
        if run.head == "relation"
        else None
    )
    state = TrainState(model=model, relation=relation)
    params = state.named_parameters()
    adam = AdamState(
        params,
        lr=run.lr,
        beta1=run.adam_beta1,
        beta2=run.adam_beta2,
        eps=run.adam_eps,
    )

    episodes_done = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        ckpt.restore_params(params)
        ckpt.restore_buffers(model.buffers)
        ckpt.restore_adam(adam)
        restored = ckpt.restore_rng()
        if restored is not None:
            episode_rng = restored
        episodes_done = ckpt.step

    log_lines: list[str] = ["step,L_mbc,L_cas,L_sas,attn_diff,val_acc"]
    log_path = out_dir / "train_log.csv" if out_dir is not None else None
    if log_path is not None and resume_from is None:
        log_path.write_text(log_lines[0] + "\n")

    def emit(line: str):
        log_lines.append(line)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(line + "\n")
        if log_hook is not None:
            log_hook(line)

    best_val = -1.0
    best_params: dict[str, np.ndarray] = {}
    best_buffers: dict[str, np.ndarray] = {}
    train_spec = replace(run.episode, split="seen")
    next_val = (episodes_done // run.val_every + 1) * run.val_every

    with ad.scratch_buffers() as arena:
        while episodes_done < run.total_episodes:
            batch_n = min(run.episodes_per_batch, run.total_episodes - episodes_done)
            accum = {k: np.zeros_like(p.data) for k, p in params.items()}
            batch_stats = np.zeros(4)
            for _ in range(batch_n):
                arena.reset()
                episode = sample_episode(dataset, train_spec, episode_rng)
                if run.augment_flip:
                    episode = _flip_augment(episode, episode_rng)
                model.zero_grad()
                for p in params.values():
                    p.zero_grad()
                res = _episode_forward(state, run, episode, training=True)
                if not np.isfinite(res.total.item()):
                    if out_dir is not None:
                        save_checkpoint(
                            out_dir / "diverged_dump",
                            params,
                            model.buffers,
                            config_snapshot,
                            step=episodes_done,
                            adam=adam,
                            rng=episode_rng,
                        )
                    raise DivergenceError(
                        f"non-finite loss at episode {episodes_done}", episodes_done
                    )
                res.total.backward()
                for k, p in params.items():
                    if p.grad is not None:
                        accum[k] += p.grad
                batch_stats += (
                    res.l_mbc.item(),
                    res.l_cas.item(),
                    res.l_sas.item(),
                    res.attention_difference if np.isfinite(res.attention_difference) else 0.0,
                )
                episodes_done += 1
            for k in accum:
                accum[k] /= batch_n
            adam_step(params, accum, adam)
            batch_stats /= batch_n

            val_txt = ""
            if episodes_done >= next_val or episodes_done >= run.total_episodes:
                next_val += run.val_every
                acc = _validation_accuracy(state, run, dataset, episodes_done)
                if acc is not None:
                    val_txt = f"{acc:.4f}"
                    if acc > best_val:
                        best_val = acc
                        best_params, best_buffers = _snapshot(state)
            emit(
                f"{episodes_done},{batch_stats[0]:.6f},{batch_stats[1]:.6f},"
                f"{batch_stats[2]:.6f},{batch_stats[3]:.6f},{val_txt}"
            )

    if not best_params:  # no usable validation split: final state is best
        best_params, best_buffers = _snapshot(state)
    result = TrainResult(
        state=state,
        run=run,
        log_lines=log_lines,
        best_val_accuracy=best_val,
        best_params=best_params,
        best_buffers=best_buffers,
        episodes_done=episodes_done,
        adam=adam,
        episode_rng=episode_rng,
    )
    if out_dir is not None:
        save_checkpoint(
            out_dir / "checkpoint_last",
            params,
            model.buffers,
            config_snapshot,
            step=episodes_done,
            adam=adam,
            rng=episode_rng,
        )
        saved = {k: p.data for k, p in params.items()}
        live_buffers = {k: v.copy() for k, v in model.buffers.items()}
        try:
            for k, p in params.items():
                p.data = best_params[k]
            for k in model.buffers:
                model.buffers[k][...] = best_buffers[k]
            save_checkpoint(
                out_dir / "checkpoint_best",
                params,
                model.buffers,
                config_snapshot,
                step=episodes_done,
            )
        finally:
            for k, p in params.items():
                p.data = saved[k]
            for k in model.buffers:
                model.buffers[k][...] = live_buffers[k]
    return result


def _validation_accuracy(state, run, dataset, episodes_done) -> float | None:
    val_classes = dataset.split_classes("validation")
    if not val_classes:
        return None
    n_way = min(run.episode.n_way, len(val_classes))
    if n_way < 2:
        return None
    spec = replace(run.episode, n_way=n_way, split="validation")
    rng = np.random.default_rng(np.random.SeedSequence([run.seed, 3, episodes_done]))
    accs = []
    with ad.no_grad():
        for _ in range(run.val_episodes):
            ad._arena.reset()
            episode = sample_episode(dataset, spec, rng)
            res = _episode_forward(state, run, episode, training=False)
            accs.append(res.accuracy)
    return float(np.mean(accs))


# ---------------------------------------------------------------------------
# evaluation


def evaluate(
    state: TrainState | Model,
    run: RunConfig,
    dataset: Dataset,
    spec: EpisodeSpec | None = None,
    n_episodes: int = 600,
    rng: np.random.Generator | int = 0,
    collect_attention: bool = True,
) -> EvalReport:
    """Accuracy over freshly sampled episodes, batch-norm in eval mode."""
    if isinstance(state, Model):
        state = TrainState(model=state, relation=None)
    if spec is None:
        spec = replace(run.episode, split="unseen")
    if not dataset.split_classes(spec.split):
        raise CapacityError(f"dataset has no classes in split {spec.split!r}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(np.random.SeedSequence([int(rng), 4]))
    accs = np.zeros(n_episodes)
    diffs = []
    with ad.no_grad(), ad.scratch_buffers() as arena:
        for i in range(n_episodes):
            arena.reset()
            episode = sample_episode(dataset, spec, rng)
            res = _episode_forward(
                state, run, episode, training=False, collect_attention=collect_attention
            )
            accs[i] = res.accuracy
            if np.isfinite(res.attention_difference):
                diffs.append(res.attention_difference)
    return EvalReport(
        mean_accuracy=float(accs.mean()),
        ci95=ci95(accs),
        n_episodes=n_episodes,
        episode_accuracies=accs,
        mean_attention_difference=float(np.mean(diffs)) if diffs else float("nan"),
    )

"""Command-line front end: synth / train / eval / gradcheck / dump-attention.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
Training is driven by a JSON config file mirroring the run configuration;
every key can be overridden on the command line with ``--set key=value``
(dotted paths, JSON-style values), so ablation grids are scriptable without
a config file per cell.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from .alignment import AlignmentConfig
from .attention import _agam_forward_cl
from .autodiff import Tensor, no_grad
from .checkpoint import load_checkpoint
from .data import GenSpec, generate_synthetic, load_dataset, read_tensor
from .engine import (
    EpisodeSpec,
    RunConfig,
    TrainState,
    build_model,
    evaluate,
    run_config_from_dict,
    run_config_to_dict,
    train,
)
from .errors import ConfigError
from .model import Model

USAGE_ERROR = 1
RUNTIME_ERROR = 2


# ---------------------------------------------------------------------------
# config handling


def _default_config() -> dict:
    cfg = run_config_to_dict(RunConfig())
    return {"dataset": "", "out_dir": "run", **cfg}


def _flatten(d: dict, prefix="") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _set_path(cfg: dict, path: str, value):
    parts = path.split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(
                f"unknown config key {path!r}; valid keys: "
                + ", ".join(sorted(_flatten(_default_config())))
            )
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(
            f"unknown config key {path!r}; valid keys: "
            + ", ".join(sorted(_flatten(_default_config())))
        )
    node[parts[-1]] = value


def _merge(defaults: dict, given: dict, prefix="") -> dict:
    merged = dict(defaults)
    for k, v in given.items():
        key = f"{prefix}{k}"
        if k not in defaults:
            raise ConfigError(
                f"unknown config key {key!r}; valid keys: "
                + ", ".join(sorted(_flatten(_default_config())))
            )
        if isinstance(defaults[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be an object")
            merged[k] = _merge(defaults[k], v, key + ".")
        else:
            merged[k] = v
    return merged


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text  # bare strings allowed


def load_cli_config(path: str | None, overrides: list[str]) -> dict:
    cfg = _default_config()
    if path is not None:
        try:
            given = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}")
        cfg = _merge(cfg, given)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        _set_path(cfg, key.strip(), _parse_value(raw.strip()))
    return cfg


def config_to_run(cfg: dict) -> RunConfig:
    d = {k: v for k, v in cfg.items() if k not in ("dataset", "out_dir")}
    return run_config_from_dict(d)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = GenSpec(
        n_classes=args.classes,
        samples_per_class=args.samples_per_class,
        attr_dim=args.dim,
        image_shape=tuple(args.image_shape),
        noise_sd=args.noise_sd,
        distractor_count=args.distractors,
    )
    generate_synthetic(spec, args.seed, args.out)
    print(f"wrote synthetic dataset to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_cli_config(args.config, args.set or [])
    if not cfg.get("dataset"):
        raise ConfigError("config needs a 'dataset' path (or --set dataset=...)")
    run = config_to_run(cfg)
    dataset = load_dataset(cfg["dataset"])
    out_dir = Path(cfg.get("out_dir") or "run")
    result = train(
        run,
        dataset,
        out_dir=out_dir,
        resume_from=args.resume,
        config_extra={"dataset": cfg["dataset"], "out_dir": str(out_dir)},
    )
    print(
        f"trained {result.episodes_done} episodes; "
        f"best validation accuracy {result.best_val_accuracy:.2f}; "
        f"checkpoints in {out_dir}"
    )
    return 0


def _resolve_checkpoint(path: str) -> Path:
    p = Path(path)
    if (p / "manifest.json").exists():
        return p
    if (p / "checkpoint_best" / "manifest.json").exists():
        return p / "checkpoint_best"
    raise ConfigError(f"no checkpoint found at {path}")


def _load_model_from_checkpoint(path: str):
    ckpt = load_checkpoint(_resolve_checkpoint(path))
    run = run_config_from_dict(
        {k: v for k, v in ckpt.config.items() if k not in ("dataset", "out_dir")}
    )
    return ckpt, run


def cmd_eval(args) -> int:
    ckpt, run = _load_model_from_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data) if args.data else load_dataset(
        ckpt.config.get("dataset", "")
    )
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 4]))
    from .engine import TrainState
    from .heads import init_relation_params

    model = build_model(run, dataset, np.random.default_rng(0))
    relation = None
    if run.head == "relation":
        relation = init_relation_params(
            model.backbone.out_channels, np.random.default_rng(0)
        )
    state = TrainState(model=model, relation=relation)
    ckpt.restore_params(state.named_parameters())
    ckpt.restore_buffers(model.buffers)
    spec = dataclasses.replace(run.episode, split=args.split)
    report = evaluate(state, run, dataset, spec, n_episodes=args.episodes, rng=rng)
    print(
        f"acc={report.mean_accuracy:.2f} ci95={report.ci95:.2f} "
        f"n={report.n_episodes} attn_diff={report.mean_attention_difference:.4f}"
    )
    return 0


def cmd_gradcheck(args) -> int:
    rows = gradcheck_mod.run_all(seed=args.seed)
    failed = 0
    for name, err, ok in rows:
        print(f"{name:<28} {'PASS' if ok else 'FAIL'}  max_rel_err={err:.2g}")
        failed += 0 if ok else 1
    print(f"{len(rows) - failed}/{len(rows)} gradient suites passed")
    return 0 if failed == 0 else RUNTIME_ERROR


def _write_pgm(path, m: np.ndarray):
    """8-bit grayscale PGM, min-max scaled; constant maps map to mid-gray."""
    h, w = m.shape
    lo, hi = float(m.min()), float(m.max())
    if hi - lo < 1e-12:
        scaled = np.full((h, w), 128, dtype=np.uint8)
    else:
        scaled = np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5 {w} {h} 255\n".encode())
        f.write(scaled.tobytes())


def cmd_dump_attention(args) -> int:
    ckpt, run = _load_model_from_checkpoint(args.checkpoint)
    image = read_tensor(args.image)
    model = build_model_from_image(run, image, ckpt)
    attrs = read_tensor(args.attributes) if args.attributes else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    import attralign.autodiff as ad

    with no_grad():
        x = Tensor(np.ascontiguousarray(np.moveaxis(image[None], 1, 3)))
        feats = model.backbone_forward_cl(x, training=False)
        h, w = feats.shape[1], feats.shape[2]
        a = Tensor(attrs[None]) if attrs is not None else None
        dual = a is not None and model.use_attributes
        ag, sg = _agam_forward_cl(
            model.agam, feats, a if model.use_attributes else None, dual
        )
        written = []
        for maps in (ag, sg):
            if maps is None:
                continue
            tag = maps.branch
            if maps.m_c is not None:
                mc = maps.m_c.data.reshape(-1)
                path = out_dir / f"m_c_{tag}.csv"
                path.write_text(",".join(f"{v:.10g}" for v in mc) + "\n")
                written.append(path)
            if maps.m_s is not None:
                path = out_dir / f"m_s_{tag}.pgm"
                _write_pgm(path, maps.m_s.data.reshape(h, w))
                written.append(path)
    for p in written:
        print(f"wrote {p}")
    return 0


def build_model_from_image(run: RunConfig, image: np.ndarray, ckpt) -> Model:
    from .model import desk_backbone, mini_residual_backbone

    c0, h0, w0 = image.shape
    if run.backbone == "residual":
        backbone = mini_residual_backbone((c0, h0, w0), run.backbone_channels)
    else:
        backbone = desk_backbone((c0, h0, w0), run.backbone_channels)
    attr_dim = 0
    for name in ckpt.param_arrays:
        if name == "agam.ag.cw0":
            attr_dim = ckpt.param_arrays[name].shape[1] - run.backbone_channels
    model = Model(
        backbone,
        agam_cfg=run.agam_config() if run.use_agam else None,
        attr_dim=attr_dim,
        use_attributes=run.use_attributes,
        use_agam=run.use_agam,
        rng=np.random.default_rng(0),
    )
    ckpt.restore_params(model.named_parameters())
    ckpt.restore_buffers(model.buffers)
    return model


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attralign",
        description="attribute-guided attention for few-shot recognition",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=GenSpec.n_classes)
    p.add_argument("--dim", type=int, default=GenSpec.attr_dim)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples-per-class", type=int, default=GenSpec.samples_per_class)
    p.add_argument("--noise-sd", type=float, default=GenSpec.noise_sd)
    p.add_argument("--distractors", type=int, default=GenSpec.distractor_count)
    p.add_argument(
        "--image-shape", type=int, nargs=3, default=list(GenSpec.image_shape),
        metavar=("C", "H", "W"),
    )
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="meta-train a model")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--resume", help="checkpoint_last directory to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", help="dataset directory (defaults to the training one)")
    p.add_argument("--split", default="unseen")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check every op suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-attention", help="export attention maps for an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="AGT tensor file (C,H,W)")
    p.add_argument("--attributes", help="AGT tensor file (D,)")
    p.add_argument("--out", default="attention_maps")
    p.set_defaults(func=cmd_dump_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return USAGE_ERROR if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: one subcommand per pipeline stage.

Run directory layout (under ``--out``)::

    features/   per-patch feature dumps and the degraded analysis sequences
    layers/     RDM files, layer_weights.json, importance.json
    data/       frame stores, motion fields, manifest_<split>.jsonl
    train/      <phase>/epoch_XXXX.pt, last.pt, losses.jsonl
    eval/       <system>.json reports and table.txt
    export/     inference-only generator checkpoint

Each stage directory carries the config that produced it (``config.yaml``)
and a ``run_manifest.json`` listing the files written, with their hashes.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import PipelineConfig, parse_value
from .errors import (
    ArtifactError,
    BadConfig,
    BadPatchShape,
    EncoderUnavailable,
    FlowBackendUnavailable,
    MetricUnavailable,
    MissingMetricBackend,
    MissingUpstreamArtifact,
    WeightLoadError,
)
from .training import PHASES, sub_seed

log = logging.getLogger("artifact")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_UPSTREAM, EXIT_EXTERNAL = 0, 1, 2, 3, 4
_EXTERNAL = (EncoderUnavailable, FlowBackendUnavailable, MetricUnavailable, MissingMetricBackend, WeightLoadError)


# --- run-directory plumbing ---------------------------------------------------

def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def record_stage(config: PipelineConfig, stage: str, files: Sequence[Path], extra: dict | None = None) -> Path:
    """Write the stage's config copy and file manifest; returns the manifest path."""
    out = Path(config.out)
    stage_dir = out / stage
    stage_dir.mkdir(parents=True, exist_ok=True)
    config.save(stage_dir / "config.yaml")
    entries = []
    for f in sorted({Path(f).resolve() for f in files}):
        entries.append({"path": str(f.relative_to(out.resolve())), "bytes": f.stat().st_size, "sha256": _sha256(f)})
    doc = {"stage": stage, "seed": config.seed, "config_sha256": config.digest(), "files": entries, **(extra or {})}
    path = stage_dir / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _require(path: Path, artifact: str, command: str) -> Path:
    if not path.exists():
        raise MissingUpstreamArtifact(f"{artifact} ({path})", command)
    return path


def resolve_backbone(config: PipelineConfig, input_size: int | None = None):
    from .features import load_backbone

    bb = config.backbone
    size = input_size or bb.input_size
    random_source = f"random:{sub_seed(config.seed, 'backbone')}"
    if bb.weights == "random":
        return load_backbone(bb.name, random_source, size)
    if bb.weights == "auto":
        try:
            return load_backbone(bb.name, "torchvision", size)
        except WeightLoadError as exc:
            log.warning("pretrained %s weights unavailable (%s); using seeded random weights", bb.name, exc)
            return load_backbone(bb.name, random_source, size)
    return load_backbone(bb.name, bb.weights, size)


# --- stages -------------------------------------------------------------------

def _patch_paths(directory: Path) -> list[Path]:
    from .data.codec import IMAGE_SUFFIXES

    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if len(paths) < 2:
        raise BadConfig(f"analysis.patches {directory} must hold at least two patch images")
    return paths


def cmd_extract(config: PipelineConfig) -> list[Path]:
    """Reference and per-CRF degraded feature dumps for the analysis patch set."""
    from .data.codec import EncoderSettings, degrade_clip, read_frames
    from .features import extract_features, feature_filename, save_features

    if not config.analysis.patches:
        raise BadConfig("analysis.patches is not set")
    src = Path(config.analysis.patches)
    if not src.is_dir():
        raise BadConfig(f"analysis.patches {src} is not a directory")
    out = Path(config.out) / "features"
    (out / "degraded").mkdir(parents=True, exist_ok=True)
    backbone = resolve_backbone(config)
    layers = config.analysis.layers if config.analysis.layers is not None else [s.index for s in backbone.layers]

    paths = _patch_paths(src)
    labels = [p.stem for p in paths]
    patches = np.stack([read_frames(p)[0] for p in paths])
    if patches.shape[1:] != (backbone.input_size, backbone.input_size, 3):
        raise BadPatchShape(f"analysis patches are {patches.shape[1:]}, backbone expects {backbone.input_size}px RGB")

    written: list[Path] = []
    ref_seq = out / "degraded" / "analysis_reference.npy"
    np.save(ref_seq, patches)
    written.append(ref_seq)
    settings = EncoderSettings(preset=config.analysis.preset, all_intra=True)
    variants = {"ref": patches}
    for crf in config.crf_grid:
        loc, _ = degrade_clip(ref_seq, crf, out / "degraded", clip_id="analysis", settings=settings)
        variants[crf] = np.load(loc)
        written += [loc, loc.with_suffix(".mp4")]
    for tag, frames in variants.items():
        for label, patch in zip(labels, frames):
            path = out / feature_filename(label, tag)
            save_features(path, extract_features(backbone, patch, layers, patch_id=label))
            written.append(path)
        log.info("features extracted for %s", "reference" if tag == "ref" else f"CRF {tag}")
    index = {
        "labels": labels,
        "crfs": list(config.crf_grid),
        "layers": list(layers),
        "backbone": backbone.name,
        "backbone_checksum": backbone.weights_checksum,
        "input_size": backbone.input_size,
    }
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    written.append(out / "index.json")
    record_stage(config, "features", written)
    return written


def cmd_fit(config: PipelineConfig):
    """RDMs, joint and per-CRF weight fits, layer selection and importance plot data."""
    from .features import feature_filename, load_features
    from .rdm import compute_rdm, compute_rdm_multi, fit_weights, save_layer_weights, save_rdm, select_top_layers

    feat_dir = Path(config.out) / "features"
    _require(feat_dir / "run_manifest.json", "feature dumps", "extract-features")
    index = json.loads((feat_dir / "index.json").read_text())
    labels, layers = index["labels"], index["layers"]
    out = Path(config.out) / "layers"
    (out / "rdm").mkdir(parents=True, exist_ok=True)

    def load_all(tag):
        return {lab: load_features(feat_dir / feature_filename(lab, tag), lab).features for lab in labels}

    written: list[Path] = []
    ref = load_all("ref")
    target = compute_rdm_multi(({lab: ref[lab][z] for lab in labels} for z in layers), labels, kind="reference")
    target.check()
    save_rdm(out / "rdm" / "reference.rdm", target)
    written.append(out / "rdm" / "reference.rdm")
    del ref
    candidates = {}
    for crf in index["crfs"]:
        feats = load_all(crf)
        for z in layers:
            rdm = compute_rdm({lab: feats[lab][z] for lab in labels}, labels, kind="degraded", crf=crf, layer=z)
            rdm.check()
            candidates[(crf, z)] = rdm
            path = out / "rdm" / f"crf{crf}_layer{z}.rdm"
            save_rdm(path, rdm)
            written.append(path)

    k = min(config.analysis.top_k, len(layers))
    joint = fit_weights(target, candidates, dataclasses.replace(config.analysis.fit, mode="joint"))
    per_crf = fit_weights(target, candidates, dataclasses.replace(config.analysis.fit, mode="per_crf"))
    selection = select_top_layers(joint.importance, k)
    save_layer_weights(out / "layer_weights.json", joint, selection)
    save_layer_weights(out / "layer_weights_per_crf.json", per_crf, select_top_layers(per_crf.importance, k))
    plot = {
        "layers": layers,
        "joint": [joint.importance[z] for z in layers],
        "per_crf": [per_crf.importance[z] for z in layers],
        "selected": list(selection.selected),
    }
    (out / "importance.json").write_text(json.dumps(plot, indent=2, sort_keys=True) + "\n")
    written += [out / "layer_weights.json", out / "layer_weights_per_crf.json", out / "importance.json"]
    record_stage(config, "layers", written)
    log.info("selected layers %s (ranking %s)", list(selection.selected), list(selection.ranked_layers))
    return joint, selection


def cmd_prepare(config: PipelineConfig):
    from .data.codec import EncoderSettings
    from .data.prepare import PrepareOptions, prepare_dataset

    if not config.data.src:
        raise BadConfig("data.src is not set")
    if not Path(config.data.src).is_dir():
        raise BadConfig(f"data.src {config.data.src} is not a directory")
    d = config.data
    options = PrepareOptions(
        crf_grid=tuple(config.crf_grid),
        patch_size=d.patch_size,
        patch_stride=d.patch_stride,
        frame_step=d.frame_step,
        test_fraction=d.test_fraction,
        flow_backend=d.flow_backend,
        lpips_weights=d.lpips_weights,
        encoder=EncoderSettings(preset=d.preset, keyint=d.keyint),
        seed=sub_seed(config.seed, "split"),
    )
    out = Path(config.out) / "data"
    manifests = prepare_dataset(d.src, out, options)
    written = [p for sub in ("reference", "degraded", "motion") for p in sorted((out / sub).iterdir())]
    written += [out / f"manifest_{split}.jsonl" for split in manifests] + [out / "prepare_summary.json"]
    record_stage(config, "data", written, {"entries": {k: len(m) for k, m in manifests.items()}})
    return manifests


def _train_dataset(config: PipelineConfig):
    from .data.dataset import DatasetManifest, PatchDataset

    path = _require(Path(config.out) / "data" / "manifest_train.jsonl", "training manifest", "prepare-data")
    return PatchDataset(DatasetManifest.load(path), max_psnr_y=config.data.max_psnr_y, limit=config.data.limit)


def _build_critic(config: PipelineConfig):
    from .models.critic import CriticVariant, build_critic
    from .rdm import load_layer_weights

    kind = config.train.critic_variant
    try:
        selection = None
        if kind == "opt":
            path = _require(Path(config.out) / "layers" / "layer_weights.json", "layer selection", "fit-layers")
            selection = load_layer_weights(path)[1]
        variant = CriticVariant.from_kind(kind, selection)
    except ValueError as exc:
        raise BadConfig(str(exc)) from exc
    backbone = resolve_backbone(config, input_size=config.data.patch_size) if variant.needs_backbone else None
    return build_critic(variant, backbone=backbone, patch_size=config.data.patch_size, seed=sub_seed(config.seed, "critic"))


def _generator(config: PipelineConfig):
    from .models.generator import build_generator

    return build_generator(dataclasses.replace(config.generator, seed=sub_seed(config.seed, "generator")))


def _lambda_tag(value: float) -> str:
    return f"lambda_{value:g}"


def cmd_train(config: PipelineConfig, phase: str, resume: str | None = None):
    """One training phase; phases must run in order."""
    from .training import adversarial_train, pretrain_critic, pretrain_generator

    if phase not in PHASES:
        raise BadConfig(f"unknown phase {phase!r}; expected one of {PHASES}")
    dataset = _train_dataset(config)
    tc = dataclasses.replace(config.train, seed=sub_seed(config.seed, "train"))
    root = Path(config.out) / "train"
    gen_ckpt = root / "pretrain-gen" / "last.pt"
    critic_ckpt = root / "pretrain-critic" / "last.pt"
    gen = _generator(config)

    if phase == "pretrain-gen":
        state = pretrain_generator(gen, dataset, tc, root, resume=resume)
        record_stage(config, "train/pretrain-gen", _phase_files(root / phase))
        return state

    critic = _build_critic(config)
    if phase == "pretrain-critic":
        _require(gen_ckpt, "pretrained generator", "train --phase pretrain-gen")
        state = pretrain_critic(critic, gen, dataset, tc, root, gen_ckpt, resume=resume)
        record_stage(config, "train/pretrain-critic", _phase_files(root / phase))
        return state

    _require(gen_ckpt, "pretrained generator", "train --phase pretrain-gen")
    _require(critic_ckpt, "pretrained critic", "train --phase pretrain-critic")
    if not config.lambda_grid:
        state = adversarial_train(gen, critic, dataset, tc, root, gen_ckpt, critic_ckpt, resume=resume)
        record_stage(config, "train/adversarial", _phase_files(root / phase))
        return state
    if resume is not None:
        raise BadConfig("--resume is ambiguous with a lambda grid; resume one grid point with lambda_grid unset")
    states = {}
    for value in config.lambda_grid:
        run = root / _lambda_tag(value)
        states[value] = adversarial_train(
            _generator(config), _build_critic(config), dataset, dataclasses.replace(tc, lambda_mse=float(value)), run, gen_ckpt, critic_ckpt
        )
        record_stage(config, f"train/{_lambda_tag(value)}/adversarial", _phase_files(run / phase))
    return states


def _phase_files(phase_dir: Path) -> list[Path]:
    return sorted(p for p in phase_dir.iterdir() if p.suffix in (".pt", ".jsonl"))


def _default_systems(config: PipelineConfig) -> list[str]:
    root = Path(config.out) / "train"
    if config.lambda_grid:
        found = [root / _lambda_tag(v) / "adversarial" / "last.pt" for v in config.lambda_grid]
    else:
        found = [root / "adversarial" / "last.pt"]
    for path in found:
        _require(path, "trained generator", "train --phase adversarial")
    return [str(p) for p in found]


def system_label(checkpoint: str) -> str:
    if checkpoint in ("identity", "degraded"):
        return checkpoint.capitalize()
    from .models.checkpoint import load_checkpoint

    doc = load_checkpoint(checkpoint)
    kind = (doc.get("critic_config") or {}).get("kind")
    lam = (doc.get("train_config") or {}).get("lambda_mse")
    names = {"opt": "C_opt", "layers_5_6": "C_5,6", "trainable_only": "C_t"}
    if kind is None:
        return Path(checkpoint).stem
    return f"{names.get(kind, kind)} Λ={lam:g}" if lam is not None else names.get(kind, kind)


def _slug(text: str) -> str:
    text = text.replace("Λ=", "lambda")
    return "".join(c if (c.isascii() and c.isalnum()) or c in "-_." else "_" for c in text).strip("_")


def cmd_eval(config: PipelineConfig):
    """Metric reports for every system plus a rendered table."""
    from .evaluation.metrics import InceptionEmbedder
    from .evaluation.report import evaluate_system, parse_metrics, render_table

    ev = config.eval
    try:
        parse_metrics(ev.metrics)
    except ValueError as exc:
        raise BadConfig(str(exc)) from exc
    data = Path(config.out) / "data"
    if ev.manifest:
        manifest = _require(Path(ev.manifest), "test manifest", "prepare-data")
    elif (data / "manifest_test.jsonl").exists():
        manifest = data / "manifest_test.jsonl"
    else:
        manifest = _require(data / "manifest_train.jsonl", "test manifest", "prepare-data")
    systems = list(ev.checkpoints) or _default_systems(config)
    if ev.baselines:
        systems = ["identity", "degraded"] + [s for s in systems if s not in ("identity", "degraded")]
    for s in systems:
        if s not in ("identity", "degraded"):
            _require(Path(s), "generator checkpoint", "train --phase adversarial")

    embedder = None
    if {"fid", "kid"} & set(parse_metrics(ev.metrics)):
        weights = ev.fid_weights
        if weights == "random":
            weights = f"random:{sub_seed(config.seed, 'inception') % (1 << 31)}"
        embedder = InceptionEmbedder(weights)
    out = Path(config.out) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    reports, written = [], []
    for s in systems:
        report = evaluate_system(
            s, manifest, ev.metrics, system_id=system_label(s), d_t=ev.d_t,
            lpips_weights=config.data.lpips_weights, embedder=embedder, batch_size=ev.batch_size,
        )
        written.append(report.save(out / f"{_slug(report.system_id)}.json"))
        reports.append(report)
    table = render_table(reports)
    (out / "table.txt").write_text(table)
    written.append(out / "table.txt")
    record_stage(config, "eval", written, {"manifest": str(manifest)})
    print(table, end="")
    return reports


def cmd_export(config: PipelineConfig, checkpoint: str | None = None, dst: str | None = None) -> Path:
    from .models.checkpoint import export_generator

    src = Path(checkpoint) if checkpoint else Path(_default_systems(config)[0])
    _require(src, "training checkpoint", "train --phase adversarial")
    target = Path(dst) if dst else Path(config.out) / "export" / "generator.pt"
    export_generator(src, target)
    if target.resolve().is_relative_to(Path(config.out).resolve()):
        record_stage(config, "export", [target], {"source": str(src)})
    return target


def cmd_toy_data(config: PipelineConfig, patches: int, clips: int, frames: int, size: int) -> dict[str, Path]:
    """Synthetic analysis patches and clips for offline runs."""
    from .data.toy import make_toy_clips, make_toy_patches

    out = Path(config.out) / "toy"
    seed = sub_seed(config.seed, "toy") % (1 << 32)
    patch_paths = make_toy_patches(out / "patches", n=patches, size=size, seed=seed)
    clip_paths = make_toy_clips(out / "clips", n_clips=clips, frames=frames, size=size, seed=seed + 1)
    files = patch_paths + [f for c in clip_paths for f in sorted(c.iterdir())]
    record_stage(config, "toy", files)
    return {"patches": out / "patches", "clips": out / "clips"}


# --- argument parsing ---------------------------------------------------------

def _common(defaults: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    kw = {} if defaults else {"default": argparse.SUPPRESS}
    p.add_argument("--config", help="YAML or JSON pipeline config", **kw)
    p.add_argument("--seed", type=int, help="pipeline seed (overrides the config)", **kw)
    p.add_argument("--out", help="run directory (overrides the config)", **kw)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. train.lambda_mse=10", **kw)
    p.add_argument("-v", "--verbose", action="store_true", **kw)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="artifact", description=__doc__.splitlines()[0], parents=[_common(True)])
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common(False)

    sub.add_parser("extract-features", parents=[common], help="feature dumps for the analysis patches").add_argument(
        "--patches", help="directory of reference patches"
    )
    p = sub.add_parser("fit-layers", parents=[common], help="RDMs, weight fits and layer selection")
    p.add_argument("--top-k", type=int)

    p = sub.add_parser("prepare-data", parents=[common], help="degrade clips and build manifests")
    p.add_argument("--src", help="directory of source clips")
    p.add_argument("--crf-min", type=int)
    p.add_argument("--crf-max", type=int)
    p.add_argument("--crf-points", type=int)

    p = sub.add_parser("train", parents=[common], help="run one training phase")
    p.add_argument("--phase", required=True, choices=PHASES)
    p.add_argument("--resume", metavar="CKPT")

    p = sub.add_parser("eval", parents=[common], help="metric reports and comparison table")
    p.add_argument("--ckpt", action="append", help="generator checkpoint, 'identity' or 'degraded' (repeatable)")
    p.add_argument("--manifest")
    p.add_argument("--metrics", help="comma list of psnr,ssim,lpips,fid,kid,vmaf")
    p.add_argument("--no-baselines", action="store_true")

    p = sub.add_parser("export", parents=[common], help="write an inference-only generator checkpoint")
    p.add_argument("--ckpt")
    p.add_argument("--dst")

    p = sub.add_parser("toy-data", parents=[common], help="write synthetic patches and clips under <out>/toy")
    p.add_argument("--patches", type=int, default=16)
    p.add_argument("--clips", type=int, default=3)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    return parser


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    config = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    for item in args.set or []:
        if "=" not in item:
            raise BadConfig(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        config = config.override(key.strip(), parse_value(value))
    if args.seed is not None:
        config = config.override("seed", args.seed)
    if args.out is not None:
        config = config.override("out", args.out)

    cmd = args.command
    if cmd == "extract-features" and args.patches:
        config = config.override("analysis.patches", args.patches)
    elif cmd == "fit-layers" and args.top_k is not None:
        config = config.override("analysis.top_k", args.top_k)
    elif cmd == "prepare-data":
        if args.src:
            config = config.override("data.src", args.src)
        crf = (args.crf_min, args.crf_max, args.crf_points)
        if any(v is not None for v in crf):
            if any(v is None for v in crf):
                raise BadConfig("--crf-min, --crf-max and --crf-points go together")
            from .data.codec import select_crf_grid
            from .errors import BadRange

            try:
                config = config.override("crf_grid", select_crf_grid(*crf))
            except BadRange as exc:
                raise BadConfig(str(exc)) from exc
    elif cmd == "eval":
        if args.ckpt:
            config = config.override("eval.checkpoints", list(args.ckpt))
        if args.manifest:
            config = config.override("eval.manifest", args.manifest)
        if args.metrics:
            config = config.override("eval.metrics", [m for m in args.metrics.split(",") if m])
        if args.no_baselines:
            config = config.override("eval.baselines", False)
    return config


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = config_from_args(args)
        cmd = args.command
        if cmd == "extract-features":
            cmd_extract(config)
        elif cmd == "fit-layers":
            cmd_fit(config)
        elif cmd == "prepare-data":
            cmd_prepare(config)
        elif cmd == "train":
            cmd_train(config, args.phase, args.resume)
        elif cmd == "eval":
            cmd_eval(config)
        elif cmd == "export":
            print(cmd_export(config, args.ckpt, args.dst))
        elif cmd == "toy-data":
            for name, path in cmd_toy_data(config, args.patches, args.clips, args.frames, args.size).items():
                print(f"{name}: {path}")
    except MissingUpstreamArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UPSTREAM
    except (BadConfig, BadPatchShape) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _EXTERNAL as exc:
        print(f"external tool failure: {exc}", file=sys.stderr)
        return EXIT_EXTERNAL
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

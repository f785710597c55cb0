"""Command-line entry points wiring the package into reproducible experiments.

Subcommands: gen | train | embed | eval | analyze | plot. Every run writes its
resolved configuration and seed into the output directory so results can be
replayed bit-identically. Exit codes: 0 success, 2 configuration error,
3 runtime/numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import channel_stats, evaluate, synth
from .config import (ConfigError, ExperimentConfig, load_experiment_config,
                     write_resolved_config)
from .distill import ContextDistillationTrainer, TrainingDivergedError
from .encoder import (BaselineViT, GroupedEncoder, count_baseline_parameters,
                      count_parameters, enumerate_parameters, load_checkpoint,
                      save_checkpoint)
from .schema import build_ood_plan
from .synth import load_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _require(cfg: ExperimentConfig, *sections: str):
    for name in sections:
        if getattr(cfg, name) is None:
            raise ConfigError(f"this command needs a '{name}' section in the config")


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)
    return out


def build_model(cfg: ExperimentConfig, n_channels: int):
    model_cfg = cfg.model
    if model_cfg.grouped_stem:
        return GroupedEncoder(model_cfg.encoder_config())
    return BaselineViT(model_cfg.baseline_config(n_channels))


def cmd_gen(cfg: ExperimentConfig) -> int:
    _require(cfg, "data")
    data_cfg = dataclasses.replace(cfg.data, seed=cfg.seed)
    cfg = dataclasses.replace(cfg, data=data_cfg)
    out = _out_dir(cfg)
    ds = synth.generate(data_cfg)
    synth.write_dataset(ds, out)
    logger.info("wrote %d samples (%d channels) to %s", len(ds),
                ds.images.shape[1], out)
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig) -> int:
    _require(cfg, "model", "train", "train_params")
    params = dataclasses.replace(cfg.train_params, seed=cfg.seed)
    cfg = dataclasses.replace(cfg, train_params=params)
    out = _out_dir(cfg)
    ds = load_dataset(cfg.train.dataset)
    schema = ds.schema()
    torch.manual_seed(cfg.seed)
    model = build_model(cfg, schema.n_channels)
    if isinstance(model, GroupedEncoder):
        analytic = count_parameters(model.cfg)
    else:
        analytic = count_baseline_parameters(model.cfg)
    runtime = enumerate_parameters(model)
    logger.info("model parameters: %d (analytic %d)", runtime, analytic)
    dtype = {"float32": torch.float32, "float64": torch.float64}[cfg.train.dtype]
    trainer = ContextDistillationTrainer(model, schema, params, dtype=dtype)
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w") as fh:
        images = torch.as_tensor(ds.images)
        for _ in range(params.steps):
            idx = trainer.sample_batch_indices(ds.group_ids)
            metrics = trainer.train_step(images[idx], ds.group_ids[idx])
            fh.write(json.dumps(metrics) + "\n")
            if cfg.train.checkpoint_every and \
                    metrics["step"] % cfg.train.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{metrics['step']:06d}.pt",
                                trainer.teacher, schema,
                                meta={"seed": cfg.seed, "step": metrics["step"]})
    save_checkpoint(out / "checkpoint.pt", trainer.teacher, schema,
                    meta={"seed": cfg.seed, "step": trainer.step,
                          "final_loss": metrics["loss"],
                          "parameters": runtime, "parameters_analytic": analytic,
                          "source": "teacher"})
    logger.info("finished %d steps; final loss %.4f", trainer.step, metrics["loss"])
    return EXIT_OK


def cmd_embed(cfg: ExperimentConfig) -> int:
    _require(cfg, "embed")
    out = _out_dir(cfg)
    model, schema, _ = load_checkpoint(cfg.embed.checkpoint)
    ds = load_dataset(cfg.embed.dataset)
    schema = schema or ds.schema()
    plan = build_ood_plan(schema) if cfg.embed.ood else None
    records = evaluate.embed_dataset(model, ds, schema, plan=plan,
                                     drop=tuple(cfg.embed.drop), flip=cfg.embed.flip)
    evaluate.save_records(out / cfg.embed.out_file, records)
    logger.info("wrote %d embeddings (dim %d) to %s", len(records),
                records[0].vector.shape[0], out / cfg.embed.out_file)
    return EXIT_OK


def _maybe_aggregate(records, to_level):
    if not to_level:
        return records
    levels = ["cell", "fov", "well"]
    current = levels.index(records[0].level)
    target = levels.index(to_level)
    for step in range(current, target):
        records = evaluate.aggregate(records, levels[step], levels[step + 1])
    return records


def cmd_eval(cfg: ExperimentConfig) -> int:
    _require(cfg, "eval")
    section = cfg.eval
    out = _out_dir(cfg)
    model, schema, _ = load_checkpoint(section.checkpoint)
    eval_ds = load_dataset(section.eval_dataset)
    schema = schema or eval_ds.schema()
    report: dict = {}

    eval_records = evaluate.embed_dataset(model, eval_ds, schema)
    eval_records = _maybe_aggregate(eval_records, section.aggregate_to)

    if section.retrieval:
        if section.postprocess_search:
            name, result = evaluate.select_postprocessing(eval_records, k=section.knn_k)
        else:
            result = evaluate.retrieval_eval(eval_records, k=section.knn_k)
        report["retrieval"] = dataclasses.asdict(result)
        if section.flip_check:
            flipped = evaluate.embed_dataset(model, eval_ds, schema, flip=True)
            flipped = _maybe_aggregate(flipped, section.aggregate_to)
            report["retrieval_flipped"] = dataclasses.asdict(
                evaluate.retrieval_eval(flipped, k=section.knn_k,
                                        postprocess=report["retrieval"]["postprocess"]))

    if section.probe or section.limited_context:
        train_ds = load_dataset(section.train_dataset)

        def probe_map(drop=()):
            tr = evaluate.embed_dataset(model, train_ds, schema, drop=drop)
            va = evaluate.embed_dataset(model, eval_ds, schema, drop=drop)
            return evaluate.linear_probe(tr, va, epochs=section.probe_epochs,
                                         hidden_dim=section.probe_hidden,
                                         seed=cfg.seed).map

        if section.probe:
            report["probe"] = {"map": probe_map()}
        if section.limited_context:
            sweep = {"all": report.get("probe", {}).get("map") or probe_map()}
            for spec in schema.context_channels:
                sweep[f"-{spec.name}"] = probe_map(drop=(spec.name,))
            report["limited_context"] = sweep

    if section.cosine_drops:
        diag = evaluate.cosine_diagnostic(model, eval_ds, schema,
                                          drop_counts=tuple(section.cosine_drops),
                                          n_samples=section.cosine_samples)
        np.savez(out / "cosine_similarities.npz",
                 **{f"{stage}_{c}": sims for stage, per in diag.items()
                    for c, sims in per.items()})
        report["cosine_diagnostic"] = {
            stage: {str(c): float(np.median(sims)) for c, sims in per.items()}
            for stage, per in diag.items()}

    (out / "report.json").write_text(json.dumps(report, indent=2))
    lines = [f"{key}: {json.dumps(value)}" for key, value in report.items()]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    logger.info("evaluation report written to %s", out / "report.json")
    return EXIT_OK


def cmd_analyze(cfg: ExperimentConfig) -> int:
    _require(cfg, "analyze")
    section = cfg.analyze
    out = _out_dir(cfg)
    ds = load_dataset(section.dataset)
    extractor = channel_stats.TinyConvFeaturizer(seed=section.extractor_seed)
    report = channel_stats.analyze_dataset(
        ds, extractor=extractor, k=section.k or None, n_samples=section.n_samples,
        seed=cfg.seed, parity_threshold=section.parity_threshold)
    (out / "channel_report.json").write_text(json.dumps(report.records(), indent=2))
    (out / "channel_report.txt").write_text(report.table() + "\n")
    if section.write_manifest:
        (out / "suggested_manifest.json").write_text(
            json.dumps(report.suggested_manifest(), indent=2))
    logger.info("channel analysis written to %s", out / "channel_report.txt")
    return EXIT_OK


def cmd_plot(metrics_files: list[str], out: str) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    made = []
    curve_files = [p for p in metrics_files if p.endswith(".jsonl")]
    if curve_files:
        fig, ax = plt.subplots(figsize=(7, 4))
        for path in curve_files:
            rows = [json.loads(line) for line in Path(path).read_text().splitlines()]
            ax.plot([r["step"] for r in rows], [r["loss"] for r in rows],
                    label=Path(path).parent.name or Path(path).stem)
        ax.set_xlabel("step")
        ax.set_ylabel("total loss")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out_dir / "training_curves.png", dpi=120)
        plt.close(fig)
        made.append("training_curves.png")
    report_files = [p for p in metrics_files if p.endswith(".json")]
    if report_files:
        bars, labels = [], []
        for path in report_files:
            report = json.loads(Path(path).read_text())
            for key in ("retrieval", "retrieval_flipped"):
                if key in report:
                    bars.append(report[key]["map"])
                    labels.append(f"{Path(path).parent.name}:{key}")
            if "probe" in report:
                bars.append(report["probe"]["map"])
                labels.append(f"{Path(path).parent.name}:probe")
        if bars:
            fig, ax = plt.subplots(figsize=(max(4, len(bars)), 4))
            ax.bar(range(len(bars)), bars)
            ax.set_xticks(range(len(bars)), labels, rotation=45, ha="right", fontsize=7)
            ax.set_ylabel("mAP")
            fig.tight_layout()
            fig.savefig(out_dir / "metric_bars.png", dpi=120)
            plt.close(fig)
            made.append("metric_bars.png")
    sim_files = [p for p in metrics_files if p.endswith(".npz")]
    for path in sim_files:
        data = np.load(path)
        fig, ax = plt.subplots(figsize=(6, 4))
        for key in sorted(data.files):
            ax.hist(data[key], bins=40, alpha=0.5, label=key, density=True)
        ax.set_xlabel("cosine similarity (full vs sparse)")
        ax.legend(fontsize=8)
        fig.tight_layout()
        name = f"similarity_{Path(path).stem}.png"
        fig.savefig(out_dir / name, dpi=120)
        plt.close(fig)
        made.append(name)
    if not made:
        raise ConfigError("plot: no .jsonl/.json/.npz inputs recognized")
    logger.info("plots written to %s: %s", out_dir, ", ".join(made))
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccvit",
        description="Grouped-channel encoder experiments: data generation, "
                    "self-distillation training, embedding, evaluation, channel "
                    "analysis, and plotting.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen", "train", "embed", "eval", "analyze"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config YAML")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
    plot = sub.add_parser("plot")
    plot.add_argument("--metrics", nargs="+", required=True,
                      help="metrics.jsonl, report.json, or similarity .npz files")
    plot.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = make_parser().parse_args(argv)
    try:
        if args.command == "plot":
            return cmd_plot(args.metrics, args.out)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        cfg = load_experiment_config(args.config, overrides)
        command = {"gen": cmd_gen, "train": cmd_train, "embed": cmd_embed,
                   "eval": cmd_eval, "analyze": cmd_analyze}[args.command]
        return command(cfg)
    except ConfigError as e:
        logger.error("configuration error: %s", e)
        return EXIT_CONFIG
    except (TrainingDivergedError, RuntimeError, ValueError, OSError) as e:
        logger.error("run failed: %s", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

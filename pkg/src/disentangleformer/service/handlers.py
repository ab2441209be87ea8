"""The single operations layer behind both the HTTP service and the CLI.

Each handler consumes a fully-resolved request model, runs the core package,
writes its artifacts plus exactly one run manifest, and returns a response
model. Outputs are a pure function of the request dump, so reruns with an
equal request produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from ..analysis import count_flops, count_params, dump_features, first_canonical_correlation, write_dump
from ..data import extract_patches, load_cube, split_dataset, synth_generate, write_cube
from ..manifest import RunManifest, Stopwatch
from ..model import build_model, build_variant, toy_model_config
from ..training import (
    TrainConfig,
    Trainer,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    write_log_csv,
)
from .schemas import (
    ABLATION_GRID,
    AblateRequest,
    AblateResponse,
    AblateRow,
    CcaRequest,
    CcaResponse,
    EvalRequest,
    EvalResponse,
    MetricsModel,
    ModelSpec,
    ProfileRequest,
    ProfileResponse,
    SynthRequest,
    SynthResponse,
    TrainRequest,
    TrainResponse,
)


def _outdir(req) -> Path:
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(req, command: str, artifacts: dict[str, Path], elapsed: float) -> Path:
    man = RunManifest(
        command=command,
        config=req.model_dump(mode="json"),
        artifacts={k: str(v) for k, v in artifacts.items()},
        wall_clock_s=round(elapsed, 3),
    )
    return man.write(_outdir(req) / f"{req.name}.manifest.json")


def _model_config(arch: ModelSpec, bands: int, classes: int):
    return toy_model_config(
        bands, classes, variant=arch.variant, ffn_kind=arch.ffn_kind,
        embed_dim=arch.embed_dim, depths=tuple(arch.depths), window=arch.window,
        heads=arch.heads, seed=arch.seed,
    )


def _train_config(spec, checkpoint_path=None) -> TrainConfig:
    return TrainConfig(
        epochs=spec.epochs, batch_size=spec.batch_size, lr=spec.lr,
        weight_decay=spec.weight_decay, betas=tuple(spec.betas), eps=spec.eps,
        seed=spec.seed, log_every=spec.log_every, checkpoint_path=checkpoint_path,
    )


def _load_splits(req):
    cube = load_cube(req.cube_path, req.labels_path)
    patches = extract_patches(cube, req.patch)
    return cube, split_dataset(
        patches, req.split.train_fraction, req.split.seed, req.split.stratified
    )


def synth(req: SynthRequest) -> SynthResponse:
    out = _outdir(req)
    with Stopwatch() as sw:
        cube = synth_generate(
            req.classes, req.height, req.width, req.bands,
            noise_sigma=req.noise_sigma, blob_size=req.blob_size, seed=req.seed,
        )
        cube_path = out / f"{req.name}.hsc"
        labels_path = out / f"{req.name}.hsl"
        write_cube(cube, cube_path, labels_path)
    counts = {int(k): int(v) for k, v in zip(*np.unique(cube.labels, return_counts=True))}
    manifest = _manifest(req, "synth", {"cube": cube_path, "labels": labels_path}, sw.elapsed)
    return SynthResponse(
        cube_path=str(cube_path), labels_path=str(labels_path),
        manifest_path=str(manifest), class_pixel_counts=counts,
    )


def train(req: TrainRequest, progress=None) -> TrainResponse:
    out = _outdir(req)
    with Stopwatch() as sw:
        cube, (train_set, test_set) = _load_splits(req)
        cfg = _model_config(req.arch, cube.bands, cube.num_classes)
        model = build_model(cfg)
        trainer = Trainer(model, train_set, _train_config(req.train), progress=progress)
        log = trainer.run()
        ckpt_path = out / f"{req.name}.dfck"
        save_checkpoint(model, ckpt_path)
        log_path = out / f"{req.name}.log.csv"
        write_log_csv(log, log_path)
        metrics = evaluate(model, test_set)
    manifest = _manifest(req, "train", {"checkpoint": ckpt_path, "log": log_path}, sw.elapsed)
    return TrainResponse(
        checkpoint_path=str(ckpt_path), log_path=str(log_path), manifest_path=str(manifest),
        epochs_run=len(log),
        final_loss=log[-1].loss if log else float("nan"),
        final_train_oa=log[-1].train_oa if log else float("nan"),
        test_metrics=MetricsModel(**{k: v for k, v in metrics.items() if k != "confusion_matrix"}),
        total_params=count_params(model).total_params,
    )


def evaluate_checkpoint(req: EvalRequest) -> EvalResponse:
    out = _outdir(req)
    with Stopwatch() as sw:
        model = load_checkpoint(req.checkpoint_path)
        _, (train_set, test_set) = _load_splits(req)
        subset = {"train": train_set, "test": test_set}.get(req.subset)
        if subset is None:  # "all": both splits under train normalization
            patches = np.concatenate([train_set.patches, test_set.patches])
            labels = np.concatenate([train_set.labels, test_set.labels])
        else:
            patches, labels = subset.patches, subset.labels
        from ..training import confusion_matrix, evaluate_metrics, predict

        preds = predict(model, patches)
        cm = confusion_matrix(labels, preds, train_set.num_classes)
        metrics = evaluate_metrics(cm)
        metrics_path = out / f"{req.name}.metrics.json"
        payload = dict(metrics, confusion_matrix=cm.tolist(), n_samples=int(cm.sum()))
        metrics_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    manifest = _manifest(req, "eval", {"metrics": metrics_path}, sw.elapsed)
    return EvalResponse(
        metrics=MetricsModel(**metrics), confusion_matrix=cm.tolist(),
        n_samples=int(cm.sum()), manifest_path=str(manifest),
    )


def ablate(req: AblateRequest) -> AblateResponse:
    out = _outdir(req)
    rows: list[AblateRow] = []
    with Stopwatch() as sw:
        cube, (train_set, test_set) = _load_splits(req)
        base = _model_config(req.arch, cube.bands, cube.num_classes)
        for variant, ffn_kind in ABLATION_GRID:
            cfg = build_variant(build_variant(base, variant), ffn_kind)
            model = build_model(cfg)
            trainer = Trainer(model, train_set, _train_config(req.budget))
            log = trainer.run()
            metrics = evaluate(model, test_set)
            rows.append(AblateRow(
                variant=variant, ffn_kind=ffn_kind,
                params=count_params(model).total_params,
                final_loss=log[-1].loss if log else float("nan"),
                test_oa=metrics["oa"], test_aa=metrics["aa"], test_kappa=metrics["kappa"],
            ))
        csv_path = out / f"{req.name}.csv"
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["variant", "ffn_kind", "params", "final_loss",
                         "test_oa", "test_aa", "test_kappa"])
        for r in rows:
            writer.writerow([r.variant, r.ffn_kind, r.params, f"{r.final_loss:.12g}",
                             f"{r.test_oa:.12g}", f"{r.test_aa:.12g}", f"{r.test_kappa:.12g}"])
        csv_path.write_text(buf.getvalue())
    manifest = _manifest(req, "ablate", {"comparison": csv_path}, sw.elapsed)
    return AblateResponse(csv_path=str(csv_path), manifest_path=str(manifest), rows=rows)


def cca(req: CcaRequest) -> CcaResponse:
    out = _outdir(req)
    with Stopwatch() as sw:
        model = load_checkpoint(req.checkpoint_path)
        _, (train_set, test_set) = _load_splits(req)
        dump = dump_features(
            model, test_set.patches, hooks=tuple(req.hooks),
            max_samples=req.max_samples, seed=req.seed, block_index=req.block_index,
            metadata={"cube": req.cube_path, "checkpoint": req.checkpoint_path},
        )
        result = first_canonical_correlation(dump.x_s, dump.x_c, ridge=req.ridge)
        dump.metadata["cca_first"] = result.value
        dump_path = out / f"{req.name}.fdm"
        write_dump(dump, dump_path)
        pairs = result.scatter(dump.x_s, dump.x_c)
        scatter_path = out / f"{req.name}.scatter.csv"
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["u", "v"])
        for u, v in pairs:
            writer.writerow([f"{u:.12g}", f"{v:.12g}"])
        scatter_path.write_text(buf.getvalue())
    manifest = _manifest(req, "cca", {"dump": dump_path, "scatter": scatter_path}, sw.elapsed)
    return CcaResponse(
        cca_value=result.value, n_rows=dump.x_s.shape[0], dump_path=str(dump_path),
        scatter_csv_path=str(scatter_path), manifest_path=str(manifest),
    )


def profile(req: ProfileRequest) -> ProfileResponse:
    out = _outdir(req)
    with Stopwatch() as sw:
        if req.checkpoint_path:
            model = load_checkpoint(req.checkpoint_path)
            cfg = model.cfg
        else:
            cfg = _model_config(req.arch, req.bands, req.classes)
            model = build_model(cfg)
        params = count_params(model)
        flops = count_flops(cfg, (cfg.in_channels, req.patch, req.patch))
        report_path = out / f"{req.name}.report.json"
        payload = {
            "convention": flops.convention,
            "input_shape": [cfg.in_channels, req.patch, req.patch],
            "params_by_module": params.params,
            "flops_by_part": flops.flops,
            "total_params": params.total_params,
            "total_flops": flops.total_flops,
        }
        report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    manifest = _manifest(req, "profile", {"report": report_path}, sw.elapsed)
    return ProfileResponse(
        params_by_module=params.params, flops_by_part=flops.flops,
        total_params=params.total_params, total_flops=flops.total_flops,
        convention=flops.convention, report_path=str(report_path),
        manifest_path=str(manifest),
    )

"""Command-line client for the operation handlers.

Subcommands: synth, train, eval, ablate, cca, profile, serve. Every command
builds a request model, runs it in-process by default or POSTs it to a
running service when --server is given, and prints a short summary plus the
artifact paths. Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import DisentangleError
from .service import handlers
from .service.schemas import (
    AblateRequest,
    CcaRequest,
    EvalRequest,
    ModelSpec,
    ProfileRequest,
    SplitSpec,
    SynthRequest,
    TrainRequest,
    TrainSpec,
)

_HANDLERS = {
    "synth": (SynthRequest, handlers.synth),
    "train": (TrainRequest, handlers.train),
    "eval": (EvalRequest, handlers.evaluate_checkpoint),
    "ablate": (AblateRequest, handlers.ablate),
    "cca": (CcaRequest, handlers.cca),
    "profile": (ProfileRequest, handlers.profile),
}


def _add_split_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-fraction", type=float, default=0.3)
    p.add_argument("--no-stratify", action="store_true")
    p.add_argument("--split-seed", type=int, default=0)


def _add_arch_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", default="Parallel")
    p.add_argument("--ffn", default="ms_ffn", choices=["ms_ffn", "standard_mlp"])
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--depths", type=int, nargs="+", default=[2, 2])
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--model-seed", type=int, default=0)


def _add_train_args(p: argparse.ArgumentParser, default_epochs: int) -> None:
    p.add_argument("--epochs", type=int, default=default_epochs)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--train-seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=1)


def _split(args) -> SplitSpec:
    return SplitSpec(train_fraction=args.train_fraction, stratified=not args.no_stratify,
                     seed=args.split_seed)


def _arch(args) -> ModelSpec:
    return ModelSpec(variant=args.variant, ffn_kind=args.ffn, embed_dim=args.embed_dim,
                     depths=tuple(args.depths), window=args.window, heads=args.heads,
                     seed=args.model_seed)


def _train_spec(args) -> TrainSpec:
    return TrainSpec(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                     weight_decay=args.weight_decay, seed=args.train_seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dformer",
        description="Window-attention spatial/channel disentanglement toolkit",
    )
    parser.add_argument("--server", default=None,
                        help="POST the request to a running service instead of running in-process")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled cube (HSC1 + HSL1)")
    p.add_argument("--out-dir", default="runs/synth")
    p.add_argument("--name", default="synthetic")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", type=int, default=32, help="height and width")
    p.add_argument("--bands", type=int, default=16)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--blob-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("train", help="train a model on a cube, write DFCK checkpoint + CSV log")
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out-dir", default="runs/train")
    p.add_argument("--name", default="run")
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--config", default=None,
                   help="JSON file with a full TrainRequest; flags are ignored except --cube/--labels/--out-dir")
    _add_split_args(p)
    _add_arch_args(p)
    _add_train_args(p, default_epochs=40)

    p = sub.add_parser("eval", help="evaluate a checkpoint: OA/AA/Kappa + confusion matrix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out-dir", default="runs/eval")
    p.add_argument("--name", default="eval")
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--subset", default="test", choices=["train", "test", "all"])
    _add_split_args(p)

    p = sub.add_parser("ablate", help="train the full variant grid with one shared budget")
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out-dir", default="runs/ablate")
    p.add_argument("--name", default="ablation")
    p.add_argument("--patch", type=int, default=8)
    _add_split_args(p)
    _add_arch_args(p)
    _add_train_args(p, default_epochs=12)

    p = sub.add_parser("cca", help="dump pre-fuse streams and report their first canonical correlation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out-dir", default="runs/cca")
    p.add_argument("--name", default="cca")
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--hooks", nargs=2, default=["pre_fuse_st", "pre_fuse_ct"])
    p.add_argument("--max-samples", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--block-index", type=int, default=-1)
    p.add_argument("--ridge", type=float, default=1e-6)
    _add_split_args(p)

    p = sub.add_parser("profile", help="parameter and FLOP report for a model or checkpoint")
    p.add_argument("--out-dir", default="runs/profile")
    p.add_argument("--name", default="profile")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--bands", type=int, default=16)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--patch", type=int, default=8)
    _add_arch_args(p)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8421)

    return parser


def _request_from_args(args) -> object:
    cmd = args.command
    if cmd == "synth":
        return SynthRequest(out_dir=args.out_dir, name=args.name, classes=args.classes,
                            height=args.size, width=args.size, bands=args.bands,
                            noise_sigma=args.noise_sigma, blob_size=args.blob_size,
                            seed=args.seed)
    if cmd == "train":
        if args.config:
            payload = json.loads(open(args.config).read())
            payload.setdefault("cube_path", args.cube)
            payload.setdefault("labels_path", args.labels)
            payload.setdefault("out_dir", args.out_dir)
            return TrainRequest.model_validate(payload)
        return TrainRequest(cube_path=args.cube, labels_path=args.labels, out_dir=args.out_dir,
                            name=args.name, patch=args.patch, split=_split(args),
                            arch=_arch(args), train=_train_spec(args))
    if cmd == "eval":
        return EvalRequest(checkpoint_path=args.checkpoint, cube_path=args.cube,
                           labels_path=args.labels, out_dir=args.out_dir, name=args.name,
                           patch=args.patch, split=_split(args), subset=args.subset)
    if cmd == "ablate":
        return AblateRequest(cube_path=args.cube, labels_path=args.labels, out_dir=args.out_dir,
                             name=args.name, patch=args.patch, split=_split(args),
                             arch=_arch(args), budget=_train_spec(args))
    if cmd == "cca":
        return CcaRequest(checkpoint_path=args.checkpoint, cube_path=args.cube,
                          labels_path=args.labels, out_dir=args.out_dir, name=args.name,
                          patch=args.patch, split=_split(args), hooks=tuple(args.hooks),
                          max_samples=args.max_samples, seed=args.seed,
                          block_index=args.block_index, ridge=args.ridge)
    if cmd == "profile":
        return ProfileRequest(out_dir=args.out_dir, name=args.name,
                              checkpoint_path=args.checkpoint, arch=_arch(args),
                              bands=args.bands, classes=args.classes, patch=args.patch)
    raise AssertionError(cmd)


def _print_response(cmd: str, resp: dict) -> None:
    if cmd == "synth":
        print(f"wrote cube {resp['cube_path']} and labels {resp['labels_path']}")
        print(f"class pixel counts: {resp['class_pixel_counts']}")
    elif cmd == "train":
        m = resp["test_metrics"]
        print(f"trained {resp['epochs_run']} epochs; final loss {resp['final_loss']:.6f}, "
              f"train OA {resp['final_train_oa']:.4f}")
        print(f"test OA {m['oa']:.4f}  AA {m['aa']:.4f}  Kappa {m['kappa']:.4f}")
        print(f"checkpoint: {resp['checkpoint_path']}")
        print(f"log: {resp['log_path']}")
    elif cmd == "eval":
        m = resp["metrics"]
        print(f"OA {m['oa']:.4f}  AA {m['aa']:.4f}  Kappa {m['kappa']:.4f} "
              f"({resp['n_samples']} samples, {m['excluded_classes']} absent classes)")
        print("confusion matrix (rows = true, cols = predicted):")
        for row in resp["confusion_matrix"]:
            print("  " + " ".join(f"{v:6d}" for v in row))
    elif cmd == "ablate":
        print(f"{'variant':<14} {'ffn':<13} {'params':>8} {'test_oa':>8} {'test_aa':>8} {'kappa':>8}")
        for r in resp["rows"]:
            print(f"{r['variant']:<14} {r['ffn_kind']:<13} {r['params']:>8} "
                  f"{r['test_oa']:>8.4f} {r['test_aa']:>8.4f} {r['test_kappa']:>8.4f}")
        print(f"comparison CSV: {resp['csv_path']}")
    elif cmd == "cca":
        print(f"first canonical correlation: {resp['cca_value']:.6f} over {resp['n_rows']} rows")
        print(f"feature dump: {resp['dump_path']}")
        print(f"scatter CSV: {resp['scatter_csv_path']}")
    elif cmd == "profile":
        print(f"total params: {resp['total_params']}")
        print(f"total FLOPs at declared shape: {resp['total_flops']}")
        print(f"report: {resp['report_path']}")
    print(f"manifest: {resp['manifest_path']}")


def dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service.app import app

        uvicorn.run(app, host=args.host, port=args.port)
        return 0

    try:
        req = _request_from_args(args)
    except (ValueError, OSError) as exc:  # pydantic validation / bad config file
        parser.error(str(exc))  # exits 2

    try:
        if args.server:
            import httpx

            url = args.server.rstrip("/") + "/" + args.command
            reply = httpx.post(url, json=req.model_dump(mode="json"), timeout=None)
            if reply.status_code != 200:
                detail = reply.json().get("detail", reply.text)
                print(f"error [{args.command}] server returned {reply.status_code}: {detail}",
                      file=sys.stderr)
                return 1
            resp = reply.json()
        elif args.command == "train":
            printer = lambda rec: print(
                f"epoch {rec.epoch}: loss {rec.loss:.6f}  train OA {rec.train_oa:.4f}"
            )
            resp = handlers.train(req, progress=printer).model_dump(mode="json")
        else:
            _, handler = _HANDLERS[args.command]
            resp = handler(req).model_dump(mode="json")
    except (DisentangleError, OSError) as exc:
        print(f"error [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    _print_response(args.command, resp)
    return 0


def entrypoint() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    entrypoint()

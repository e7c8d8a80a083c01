"""Command-line interface.

One verb per invocation: train, caption, index, search, evaluate, describe,
or serve. Every verb accepts ``--config FILE`` (falling back to the
FTICIR_CONFIG environment variable) plus repeatable ``--set key=value``
overrides. Documented failures print a single ``error: ...`` line and exit 1;
usage errors exit 2; success exits 0.

Inference verbs (search, evaluate, describe, serve) start from the config
snapshot embedded in the checkpoint, then apply the config file and --set
overrides on top, so a trained model runs with its own settings unless the
user explicitly changes them.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import config as configmod
from . import evaluation, retrieval, training
from .backbone import load_backbone
from .captions import CaptionSource, build_captions, load_captioner
from .errors import FticirError
from .inversion import InversionConfig
from .training import TrainConfig, TrainingData, load_inversion_runtime


def _flag_or_config(value: str | None, cfg: dict[str, str], key: str,
                    what: str) -> str:
    if value:
        return value
    fallback = configmod.get_str(cfg, key)
    if fallback:
        return fallback
    raise FticirError(f"{what} not given (flag or config key {key})")


def _inference_config(args) -> dict[str, str]:
    """Checkpoint snapshot, then config file, then --set overrides."""
    runtime = load_inversion_runtime(args.checkpoint)
    backbone, network, payload = runtime
    cfg = dict(configmod.DEFAULTS)
    cfg.update(payload.flat_config)
    config_path = args.config or os.environ.get(configmod.ENV_CONFIG_VAR) or None
    if config_path:
        cfg.update(configmod.load_config_file(config_path))
    for item in args.set or []:
        key, value = configmod.parse_assignment(item)
        cfg[key] = value
    args._runtime = (backbone, network, payload)
    return cfg


def _inference_filter(cfg: dict[str, str], network):
    train_cfg = TrainConfig.from_flat(cfg)
    return (train_cfg.effective_filter(network.config.n_attrs),
            train_cfg.ablations)


# ----- verb handlers --------------------------------------------------------


def cmd_train(args) -> int:
    cfg = configmod.resolve_config(args.config, args.set)
    image_dir = _flag_or_config(args.images, cfg, "data.images", "image directory")
    caption_path = _flag_or_config(args.captions, cfg, "data.captions",
                                   "caption file")
    backbone = load_backbone(cfg)
    captions = CaptionSource.load(caption_path)
    data = TrainingData(image_dir, captions, backbone)
    inv_cfg = InversionConfig.from_flat(cfg, backbone.config)
    train_cfg = TrainConfig.from_flat(cfg)
    network, history = training.fit(
        data, inv_cfg, train_cfg, args.out, resume_from=args.resume,
    )
    final = history[-1] if history else None
    if final is not None:
        print(f"trained {final.step} steps; final total loss {final.total:.6f}")
    print(f"checkpoint: {os.path.join(args.out, 'checkpoint_final.npz')}")
    return 0


def cmd_caption(args) -> int:
    cfg = configmod.resolve_config(args.config, args.set)
    image_dir = _flag_or_config(args.images, cfg, "data.images", "image directory")
    captioner = load_captioner(args.captioner)
    captions = build_captions(image_dir, captioner)
    captions.save(args.out)
    print(f"captioned {len(captions)} images -> {args.out}")
    return 0


def cmd_index(args) -> int:
    cfg = configmod.resolve_config(args.config, args.set)
    image_dir = _flag_or_config(args.images, cfg, "data.images", "image directory")
    backbone = load_backbone(cfg)
    index = retrieval.build_index(image_dir, backbone,
                                  created_at=args.timestamp)
    index.save(args.out)
    print(f"indexed {len(index)} images -> {args.out}")
    return 0


def cmd_search(args) -> int:
    cfg = _inference_config(args)
    backbone, network, _payload = args._runtime
    index_path = _flag_or_config(args.index, cfg, "data.index", "index file")
    index = retrieval.RetrievalIndex.load(index_path)
    filter_cfg, ablations = _inference_filter(cfg, network)
    if bool(args.reference) == bool(args.reference_image):
        raise FticirError(
            "exactly one of --reference or --reference-image is required"
        )
    if args.reference:
        image_dir = _flag_or_config(args.images, cfg, "data.images",
                                    "image directory")
        store = retrieval.ImageStore(image_dir)
        reference = store.path(args.reference)
    else:
        reference = args.reference_image
    results = retrieval.search(
        index, network, backbone, reference, args.modification,
        filter_cfg, top_k=args.top_k, ablations=ablations,
    )
    for rank, result in enumerate(results, start=1):
        sys.stdout.write(f"{rank}\t{result.image_id}\t{result.score:.6f}\n")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _inference_config(args)
    backbone, network, _payload = args._runtime
    index_path = _flag_or_config(args.index, cfg, "data.index", "index file")
    image_dir = _flag_or_config(args.images, cfg, "data.images",
                                "image directory")
    index = retrieval.RetrievalIndex.load(index_path)
    store = retrieval.ImageStore(image_dir)
    filter_cfg, ablations = _inference_filter(cfg, network)
    triplets, pools = evaluation.load_dataset(
        args.data, args.format, split=args.split, pool_path=args.pool,
    )
    suite = args.format if args.format != "canonical" else args.suite
    report = evaluation.evaluate(
        triplets, pools, index, network, backbone, store, filter_cfg,
        dataset=suite, ablations=ablations,
    )
    text = report.to_tsv()
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return 0


def cmd_describe(args) -> int:
    cfg = _inference_config(args)
    backbone, network, _payload = args._runtime
    caption_path = _flag_or_config(args.captions, cfg, "data.captions",
                                   "caption file")
    captions = CaptionSource.load(caption_path)
    corpus = retrieval.DescriptionCorpus.build(captions, backbone)
    filter_cfg, _ = _inference_filter(cfg, network)
    if bool(args.reference) == bool(args.image):
        raise FticirError("exactly one of --reference or --image is required")
    if args.reference:
        image_dir = _flag_or_config(args.images, cfg, "data.images",
                                    "image directory")
        reference = retrieval.ImageStore(image_dir).path(args.reference)
    else:
        reference = args.image
    described = retrieval.describe(
        reference, network, backbone, corpus, filter_cfg, top_n=args.top_n,
    )
    for kind in ("subject", "attribute"):
        for rank, (text, score) in enumerate(described[kind], start=1):
            sys.stdout.write(f"{kind}\t{rank}\t{text}\t{score:.6f}\n")
    return 0


def cmd_serve(args) -> int:
    from . import service  # deferred: fastapi import cost

    cfg = _inference_config(args)
    backbone, network, _payload = args._runtime
    index_path = _flag_or_config(args.index, cfg, "data.index", "index file")
    image_dir = _flag_or_config(args.images, cfg, "data.images",
                                "image directory")
    host = args.host or configmod.get_str(cfg, "service.host")
    port = args.port if args.port is not None else configmod.get_int(cfg, "service.port")
    state = service.ServiceState.load(
        cfg, index_path=index_path, image_dir=image_dir,
        backbone=backbone, network=network,
    )
    app = service.create_app(state)
    import uvicorn

    uvicorn.run(app, host=host, port=port, log_level="info")
    return 0


def _add_common(sub: argparse.ArgumentParser):
    sub.add_argument("--config", help="config file (default: $FTICIR_CONFIG)")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override one config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fticir",
        description="composed image retrieval via fine-grained textual inversion",
    )
    subparsers = parser.add_subparsers(dest="verb", required=True)

    p = subparsers.add_parser("train", help="train the inversion network")
    _add_common(p)
    p.add_argument("--images", help="training image directory")
    p.add_argument("--captions", help="caption TSV file")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = subparsers.add_parser("caption", help="build a caption TSV with a plugin")
    _add_common(p)
    p.add_argument("--images", help="image directory")
    p.add_argument("--captioner", required=True,
                   help="captioner as module:attr or file.py:attr")
    p.add_argument("--out", required=True, help="output caption TSV")
    p.set_defaults(func=cmd_caption)

    p = subparsers.add_parser("index", help="build the retrieval index")
    _add_common(p)
    p.add_argument("--images", help="corpus image directory")
    p.add_argument("--out", required=True, help="output index file")
    p.add_argument("--timestamp", type=int, default=0,
                   help="created-at unix seconds (0 keeps builds reproducible)")
    p.set_defaults(func=cmd_index)

    p = subparsers.add_parser("search", help="composed query against an index")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--index", help="index file")
    p.add_argument("--images", help="image directory for --reference lookups")
    p.add_argument("--reference", help="reference image id")
    p.add_argument("--reference-image", help="reference image file path")
    p.add_argument("--modification", required=True, help="modification text")
    p.add_argument("--top-k", type=int, default=20)
    p.set_defaults(func=cmd_search)

    p = subparsers.add_parser("evaluate", help="run a benchmark suite")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", help="index file")
    p.add_argument("--images", help="image directory for reference lookups")
    p.add_argument("--data", required=True,
                   help="triplet file (canonical) or dataset root (adapters)")
    p.add_argument("--format", default="canonical",
                   choices=["canonical", "fashioniq", "cirr", "circo"])
    p.add_argument("--split", default="val")
    p.add_argument("--pool", help="candidate pool file (canonical format)")
    p.add_argument("--suite", default="generic",
                   choices=["generic", "fashioniq", "cirr", "circo"],
                   help="metric suite for canonical data")
    p.add_argument("--out", help="also write the report to this file")
    p.set_defaults(func=cmd_evaluate)

    p = subparsers.add_parser(
        "describe", help="nearest caption phrases for an image's pseudo tokens"
    )
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--captions", help="caption TSV used as the phrase corpus")
    p.add_argument("--images", help="image directory for --reference lookups")
    p.add_argument("--reference", help="image id")
    p.add_argument("--image", help="image file path")
    p.add_argument("--top-n", type=int, default=4)
    p.set_defaults(func=cmd_describe)

    p = subparsers.add_parser("serve", help="run the retrieval HTTP service")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", help="index file")
    p.add_argument("--images", help="image directory served at /images")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FticirError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line entry point: ``ogfr {gen-data,train,eval,verify}``.

Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys


from . import checkpoint as ckpt_io
from . import config as config_mod
from . import retrieval, synth, verify
from .config import Config
from .errors import CheckpointError, ConfigError, ContractError, FormatError, NumericError, ShapeError
from .model import init_model
from .train import CHECKPOINT_NAME, LOG_NAME, Trainer

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
RESULTS_NAME = "results.json"

log = logging.getLogger("ogfr")


def _load_config(args) -> Config:
    cfg = config_mod.load(args.config) if args.config else Config()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_dataset(data_dir):
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"data directory not found: {data_dir}")
    return synth.read_archive(data_dir)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    splits = synth.build_splits(cfg.data.n_ids, cfg.data.imgs_per_id, cfg)
    meta = synth.write_archive(splits, args.out, cfg)
    digest = synth.archive_digest(args.out)
    print(json.dumps({"out": args.out, "digest": digest, "config_hash": meta["config_hash"],
                      **{k: len(v) for k, v in splits.items()}}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data = _read_dataset(args.data)
    if data.meta.get("config_hash") != cfg.data_hash() and not args.force:
        raise ConfigError(f"dataset {args.data} was generated with data hash {data.meta.get('config_hash')}, "
                          f"config expects {cfg.data_hash()} (use --force to override)")
    trainer = Trainer(cfg, data.splits["train"], args.out)
    if args.resume:
        trainer.restore(ckpt_io.load(args.resume))
    elif os.path.exists(os.path.join(args.out, LOG_NAME)):
        os.remove(os.path.join(args.out, LOG_NAME))

    def report(rec):
        if rec["step"] % 25 == 0:
            log.info("step %d total %.4f lr %.4g", rec["step"], rec["total"], rec["lr"])

    trainer.run(callback=report)
    trainer.save(os.path.join(args.out, CHECKPOINT_NAME))
    final = {"final": True, "step": trainer.step, "train_rank1": trainer.train_rank1(),
             "config_hash": cfg.hash()}
    with open(os.path.join(args.out, LOG_NAME), "a", encoding="utf-8") as fh:
        fh.write(json.dumps(final, sort_keys=True) + "\n")
    print(json.dumps(final, sort_keys=True))
    return EXIT_OK


def load_trained(path, cfg=None, force=False):
    """Parameters and config of a checkpoint written by the trainer."""
    ck = ckpt_io.load(path)
    stored = Config.from_json(json.dumps(ck.extra["config"])) if "config" in ck.extra else None
    if cfg is None:
        if stored is None:
            raise CheckpointError(f"{path} carries no config; pass --config")
        cfg = stored
    elif ck.config_hash != cfg.hash() and not force:
        raise ConfigError(f"checkpoint config hash {ck.config_hash} does not match {cfg.hash()} "
                          "(use --force to override)")
    n_classes = len(ck.extra.get("id_map", {})) or int(ck.tensors["heads"].shape[-1])
    params = init_model(cfg, n_classes)
    ckpt_io.load_params(params, ck.tensors)
    return params, cfg, ck


def cmd_eval(args) -> int:
    cfg = _load_config(args) if args.config else None
    params, cfg, ck = load_trained(args.checkpoint, cfg, args.force)
    data = _read_dataset(args.data)
    if data.meta.get("config_hash") != cfg.data_hash() and not args.force:
        raise ConfigError(f"dataset data hash {data.meta.get('config_hash')} does not match the "
                          f"checkpoint's {cfg.data_hash()} (use --force to override)")
    if args.split == "train":
        query, gallery = retrieval.train_query_gallery(data.splits["train"])
    else:
        query, gallery = data.splits["query"], data.splits["gallery"]
    res = retrieval.evaluate(params, cfg, query, gallery)
    res.pop("n_valid_query", None)
    res["config_hash"] = cfg.hash()
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), RESULTS_NAME)
    _write_json(out, res)
    print(json.dumps(res, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    suites = list(verify.SUITES) if args.suite == "all" else [args.suite]
    failed = 0
    for name in suites:
        print(f"[{name}]")
        for check in verify.run(name, args.seed or 0):
            print("  " + check.line())
            failed += not check.passed
    print(f"{failed} check(s) failed" if failed else "all checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ogfr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults are used when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("gen-data", help="render a synthetic dataset archive")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on an archive")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="run directory for checkpoint and metrics")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--force", action="store_true", help="skip the dataset hash check")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the query/gallery split")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--config", help="expected config; must match the checkpoint unless --force")
    p.add_argument("--split", choices=("test", "train"), default="test",
                   help="test: occluded query vs gallery; train: first training image per id vs the rest")
    p.add_argument("--out", help="results JSON path (default: next to the checkpoint)")
    p.add_argument("--force", action="store_true", help="skip config and dataset hash checks")
    p.set_defaults(func=cmd_eval, seed=None)

    p = sub.add_parser("verify", help="run a self-check suite")
    p.add_argument("suite", choices=sorted(verify.SUITES) + ["all"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, FormatError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

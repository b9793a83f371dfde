"""Command-line entry point: ``matr {gen-data,pretrain,train,eval,align}``.

Every command takes ``--config`` (JSON) and ``--seed``; failures exit nonzero
and print one JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path


from .alignment import align, cosine_cost
from .autodiff import Tensor
from .checkpoint import CheckpointError, load_checkpoint
from .datakit import (SyntheticConfig, gen_synthetic, load_features, load_pretrain_videos,
                      load_split, save_jsonl, write_dataset)
from .estimator import MomentRetriever
from .metrics import evaluate
from .model import Batch, ModelConfig

CONFIG_VERSION = 1

_SECTIONS = {
    "model": ("d", "k", "n_queries", "heads", "ffn_mult", "dropout_transformer",
              "dropout_projection", "gamma", "alignment_mode"),
    "loss": ("lambda_fg", "lambda_seg", "lambda_align_pre", "lambda_align_post",
             "lambda_l1", "lambda_iou"),
    "optim": ("learning_rate", "weight_decay", "batch_size"),
    "pretrain": ("epochs", "augment", "align_warmup_epochs"),
    "train": ("epochs",),
    "eval": ("split", "nms_threshold"),
}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config

def load_config(path=None, seed=None):
    cfg = {}
    if path is not None:
        with open(path) as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    version = cfg.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version {version} is not supported (expected {CONFIG_VERSION})")
    unknown = set(cfg) - set(_SECTIONS) - {"version", "seed", "data", "frame_period_sec"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for sec, keys in _SECTIONS.items():
        bad = set(cfg.get(sec, {})) - set(keys)
        if bad:
            raise ConfigError(f"unknown keys in '{sec}': {sorted(bad)}")
    cfg = json.loads(json.dumps(cfg))
    cfg["version"] = CONFIG_VERSION
    if seed is not None:
        cfg["seed"] = seed
    cfg.setdefault("seed", 0)
    for stage in ("pretrain", "train"):
        ep = cfg.get(stage, {}).get("epochs")
        if ep is not None and (not isinstance(ep, int) or ep < 1):
            raise ConfigError(f"{stage}.epochs must be an integer >= 1, got {ep!r}")
    return cfg


def make_estimator(cfg):
    kw = {}
    for sec in ("model", "loss", "optim"):
        kw.update(cfg.get(sec, {}))
    pre = cfg.get("pretrain", {})
    if "epochs" in pre:
        kw["pretrain_epochs"] = pre["epochs"]
    if "augment" in pre:
        kw["augment"] = pre["augment"]
    if "align_warmup_epochs" in pre:
        kw["align_warmup_epochs"] = pre["align_warmup_epochs"]
    if "epochs" in cfg.get("train", {}):
        kw["epochs"] = cfg["train"]["epochs"]
    if "nms_threshold" in cfg.get("eval", {}):
        kw["nms_threshold"] = cfg["eval"]["nms_threshold"]
    if "frame_period_sec" in cfg:
        kw["frame_period_sec"] = cfg["frame_period_sec"]
    return MomentRetriever(random_state=cfg["seed"], **kw)


def _require(path, what):
    if path is None:
        raise ConfigError(f"{what} is required")
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


def _restore(est, ckpt, input_dim):
    """Load ``ckpt`` into ``est`` after checking its model config.

    Only the small JSON header is compared before weights are touched, so a
    mismatch fails before any compute.
    """
    _, config, _ = load_checkpoint(ckpt)
    expected = est.model_config(input_dim)
    found = ModelConfig.from_dict(config["model"])
    if found != expected:
        diff = {k: (v, getattr(expected, k)) for k, v in found.to_dict().items()
                if getattr(expected, k) != v}
        raise CheckpointError(f"{ckpt}: model config differs from the run config: {diff}")
    return est.load(ckpt, expect_config=expected)


class _JsonlLog:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(self.path, "a")

    def __call__(self, rec):
        self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _run_stage(est, stage, total_epochs, out, log_path, run):
    """Run the remaining epochs of ``stage`` one at a time, checkpointing each.

    On a non-finite loss the checkpoint from the previous epoch is left in
    place and the error propagates.
    """
    done = est.epochs_done(stage)
    log = _JsonlLog(log_path)
    try:
        for _ in range(done, total_epochs):
            run(log)
            est.save(out, {"stage": stage})
    finally:
        log.close()
    if done >= total_epochs and not Path(out).exists():
        est.save(out, {"stage": stage})
    return {"stage": stage, "epochs_done": est.epochs_done(stage), "step": est.optimizer_.step_count,
            "checkpoint": str(out), "log": str(log_path)}


# ------------------------------------------------------------------ commands

def cmd_gen_data(args, cfg):
    data = dict(cfg.get("data", {}))
    data["seed"] = cfg["seed"]
    if "frame_period_sec" in cfg:
        data["frame_period_sec"] = cfg["frame_period_sec"]
    try:
        syn = SyntheticConfig(**data)
    except TypeError as exc:
        raise ConfigError(f"bad 'data' section: {exc}") from exc
    out = Path(args.out or "data")
    ds = gen_synthetic(syn)
    manifest = write_dataset(ds, out)
    return {"manifest": str(manifest), "splits": {k: len(v) for k, v in ds.splits.items()},
            "pretrain_videos": len(ds.pretrain)}


def cmd_pretrain(args, cfg):
    data = _require(args.data, "--data")
    est = make_estimator(cfg)
    videos = [v.features for v in load_pretrain_videos(data)]
    out = Path(args.out or "pretrain.ckpt")
    if args.checkpoint:
        _restore(est, _require(args.checkpoint, "--checkpoint"), videos[0].shape[1])
    else:
        est._init(videos[0].shape[1], force=True)
    log_path = args.log or str(out) + ".log.jsonl"
    return _run_stage(est, "pretrain", est.pretrain_epochs, out, log_path,
                      lambda log: est.pretrain(videos, epochs=1, log=log))


def cmd_train(args, cfg):
    data = _require(args.data, "--data")
    est = make_estimator(cfg)
    items = load_split(data, "train")
    X = [(ex.target.features, ex.query.features) for ex in items]
    y = [ex.annotation.moment for ex in items]
    out = Path(args.out or "train.ckpt")
    if args.checkpoint:
        _restore(est, _require(args.checkpoint, "--checkpoint"), X[0][0].shape[1])
    else:
        est._init(X[0][0].shape[1], force=True)
    est.warm_start = True
    est.epochs = 1
    log_path = args.log or str(out) + ".log.jsonl"
    total = cfg.get("train", {}).get("epochs", MomentRetriever().epochs)
    return _run_stage(est, "train", total, out, log_path, lambda log: est.fit(X, y, log=log))


def cmd_eval(args, cfg):
    data = _require(args.data, "--data")
    ckpt = _require(args.checkpoint, "--checkpoint")
    split = cfg.get("eval", {}).get("split", args.split)
    items = load_split(data, split)
    est = make_estimator(cfg)
    _restore(est, ckpt, items[0].target.features.shape[1])
    X = [(ex.target.features, ex.query.features) for ex in items]
    cands = est.predict_candidates(X)
    preds, rows = {}, []
    for ex, c in zip(items, cands):
        top = c[0] if c else None
        pid = ex.annotation.pair_id
        if top is not None:
            preds[pid] = top[:2]
        rows.append({"target_id": pid[0], "query_id": pid[1],
                     "top1": None if top is None else top.to_dict(),
                     "candidates": [s.to_dict() for s in c]})
    report = evaluate(preds, {ex.annotation.pair_id: ex.annotation.moment for ex in items})
    out = Path(args.out or "eval.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    pred_path = Path(args.predictions or out.with_suffix(".predictions.jsonl"))
    save_jsonl(pred_path, rows)
    print(report.summary())
    return {"split": split, "mIoU": report.miou, "R@1": report.recall_at_1,
            "report": str(out), "predictions": str(pred_path)}


def _pair_features(args):
    if args.target and args.query:
        return load_features(args.target).features, load_features(args.query).features, None
    data = _require(args.data, "--data (or --target and --query)")
    items = load_split(data, args.split)
    if not 0 <= args.index < len(items):
        raise ConfigError(f"--index {args.index} outside split '{args.split}' of {len(items)} pairs")
    ex = items[args.index]
    return ex.target.features, ex.query.features, ex.annotation


def cmd_align(args, cfg):
    target, query, ann = _pair_features(args)
    model = cfg.get("model", {})
    gamma = args.gamma if args.gamma is not None else model.get("gamma", 0.1)
    mode = args.mode or model.get("alignment_mode", "subsequence")
    dump = {"gamma": gamma, "mode": mode}
    if ann is not None:
        dump["pair"] = list(ann.pair_id)
        dump["moment"] = list(ann.moment)
    if args.checkpoint:
        est = make_estimator(cfg)
        _restore(est, _require(args.checkpoint, "--checkpoint"), target.shape[1])
        out = est.network_.forward(Batch.from_pairs([(target, query)]))
        pre, post = out.alignment_results(0, gamma, mode)
        dump["pre_fusion"] = pre.to_dict()
        dump["post_fusion"] = post.to_dict()
        dump["post_cost_matrix"] = out.post_cost[0].tolist()
    else:
        cost = cosine_cost(Tensor(target), Tensor(query)).data
        res = align(cost, gamma, mode)
        dump["cost_matrix"] = cost.tolist()
        dump["raw"] = res.to_dict()
    out = Path(args.out or "align.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(dump, indent=1) + "\n")
    res = dump.get("post_fusion", dump.get("raw"))
    return {"alignment": str(out), "span": res["span"], "soft_cost": res["soft_cost"]}


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train,
            "eval": cmd_eval, "align": cmd_align}


def build_parser():
    p = argparse.ArgumentParser(prog="matr", description="Video-to-video moment retrieval.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run config")
        s.add_argument("--seed", type=int)
        s.add_argument("--checkpoint", help="checkpoint to resume from / evaluate")
        s.add_argument("--out", help="output path")
        if name != "gen-data":
            s.add_argument("--data", help="dataset directory written by gen-data")
        if name in ("pretrain", "train"):
            s.add_argument("--log", help="JSON-lines training log (appended)")
        if name in ("eval", "align"):
            s.add_argument("--split", default="test")
        if name == "eval":
            s.add_argument("--predictions", help="predictions JSON-lines output")
        if name == "align":
            s.add_argument("--index", type=int, default=0)
            s.add_argument("--target")
            s.add_argument("--query")
            s.add_argument("--gamma", type=float)
            s.add_argument("--mode", choices=("standard", "subsequence"))
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config, args.seed)
        result = COMMANDS[args.command](args, cfg)
    except Exception as exc:   # reported as a machine-readable record
        code = 2 if isinstance(exc, (ConfigError, CheckpointError, FileNotFoundError)) else 1
        err = {"ok": False, "command": args.command, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return code
    result = {"ok": True, "command": args.command, **result,
              "seconds": round(time.perf_counter() - t0, 3)}
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())

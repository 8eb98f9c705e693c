"""Command-line entry point: data generation, training, adaptation, inference, benchmarks.

Every command writes a run manifest (resolved arguments, configs, seeds, input
hashes, timings) next to its output. ``animadapt replay MANIFEST`` re-runs a
command from such a manifest. Failures exit non-zero with a one-line JSON
error object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, chunking, container, data, lora, training
from . import model as M
from .model import ModelConfig

log = logging.getLogger("animadapt")


class CliError(Exception):
    """User-facing failure; ``field`` names the offending config field if any."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


# ----------------------------------------------------------------------------
# helpers


def parse_frames(value: str | None, fps: int) -> int | None:
    """'50' -> 50 frames; '2s' or '0.2s' -> seconds converted at fps (nearest frame)."""
    if value is None:
        return None
    v = str(value).strip().lower()
    if v in ("", "none", "full"):
        return None
    if v.endswith("s"):
        return chunking.seconds_to_frames(float(v[:-1]), fps)
    return int(v)


def _split_list(value: str) -> list[str]:
    return [x.strip() for x in str(value).split(",") if x.strip()]


def manifest_path(out: str | Path) -> Path:
    """``<out>.manifest.json`` beside the output (outside it, for directory outputs)."""
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def write_manifest(args, out, inputs: dict, timings: dict, extra: dict | None = None) -> Path:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "tool": "animadapt",
        "tool_version": __version__,
        "command": args.command,
        "args": resolved,
        "inputs": {name: {"path": str(p), "sha256": container.file_sha256(p)} for name, p in inputs.items()},
        "timings": timings,
        "python": platform.python_version(),
        "numpy": np.__version__,
        **(extra or {}),
    }
    path = manifest_path(out)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path, rows: list[dict], fields: list[str] | None = None) -> None:
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def load_model(path) -> tuple[container.Container, ModelConfig, dict]:
    c = container.load(path)
    if c.meta.get("kind") != "base":
        raise CliError(f"{path} is not a base model container")
    cfg = ModelConfig.from_dict(c.meta["model_config"])
    weights = dict(c.entries)
    M.check_weights(weights, cfg)
    return c, cfg, weights


def apply_adaptor(base: container.Container, cfg: ModelConfig, weights: dict, path, allow_mismatch=False):
    """Returns ``(weights, adaptors, style or None)`` after loading an adaptor file."""
    ad = container.load(path)
    container.check_base(ad, base, allow_mismatch)
    kind = ad.meta.get("kind")
    style = ad.entries.get("style")
    if kind == "lora":
        adaptors = lora.adaptors_from_entries(ad.entries, ad.meta["alpha"])
        for name, a in adaptors.items():
            W = weights.get(name + ".W")
            if W is None or a.A.shape[0] != W.shape[0] or a.B.shape[0] != W.shape[1]:
                raise CliError(f"adaptor layer {name} does not fit the base model")
        return weights, adaptors, style
    if kind == "finetune":
        weights = dict(weights)
        for k, v in ad.entries.items():
            if k.startswith("ft/"):
                weights[k[3:]] = v
        M.check_weights(weights, cfg)
        return weights, None, style
    raise CliError(f"unknown adaptor kind {kind!r}")


# ----------------------------------------------------------------------------
# commands


def cmd_default_config(args) -> int:
    print(json.dumps(data.CorpusConfig().to_dict(), indent=2, sort_keys=True))
    return 0


def _load_corpus_config(path: str | None, seed: int | None) -> data.CorpusConfig:
    if path is None:
        cfg = data.CorpusConfig().to_dict()
    else:
        try:
            cfg = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {path}: {e}") from None
        fields = list(data.CorpusConfig.__dataclass_fields__)
        for name in fields:
            if name not in cfg:
                raise CliError(f"config is missing field {name!r}", field=name)
        for name in cfg:
            if name not in fields:
                raise CliError(f"config has unknown field {name!r}", field=name)
    if seed is not None:
        cfg["seed"] = seed
    try:
        return data.CorpusConfig(**cfg)
    except (TypeError, ValueError) as e:
        msg = str(e)
        field = next((f for f in data.CorpusConfig.__dataclass_fields__ if f in msg), None)
        raise CliError(f"invalid config: {msg}", field=field) from None


def cmd_gen_data(args) -> int:
    cfg = _load_corpus_config(args.config, args.seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create output directory {out}: {e}") from None
    t0 = time.perf_counter()
    corpus = data.generate_corpus(cfg)
    data.save_corpus(corpus, out)
    inputs = {"config": args.config} if args.config else {}
    write_manifest(args, out, inputs, {"generate_seconds": time.perf_counter() - t0},
                   {"corpus_config": cfg.to_dict(), "seeds": {"corpus": cfg.seed}})
    log.info("wrote %d subjects x %d sentences to %s", cfg.n_subjects, cfg.sentences_per_subject, out)
    return 0


def cmd_train_base(args) -> int:
    corpus = data.load_corpus(args.corpus)
    cfg = training.model_config_for(corpus.config, args.mode)
    opt = training.OptimizerConfig(lr=args.lr)
    weights, tlog = training.train_base(corpus, cfg, epochs=args.epochs, seed=args.seed, opt=opt)
    meta = {
        "kind": "base",
        "model_config": cfg.to_dict(),
        "train": {"epochs": args.epochs, "seed": args.seed, "optimizer": _opt_dict(opt),
                  "loss": vars(training.LossConfig()), "corpus_seed": corpus.config.seed},
    }
    h = container.save(args.out, weights, meta)
    write_csv(f"{args.out}.losses.csv", [{"epoch": i, "loss": l} for i, l in enumerate(tlog.epoch_losses)])
    write_manifest(args, args.out, {"corpus_manifest": Path(args.corpus) / "manifest.json"},
                   {"train_seconds": tlog.seconds},
                   {"model_config": cfg.to_dict(), "seeds": {"init_and_order": args.seed}, "output_hash": h})
    return 0


def _opt_dict(opt: training.OptimizerConfig) -> dict:
    return {"algorithm": "AdamW", "lr": opt.lr, "betas": list(opt.betas), "eps": opt.eps,
            "weight_decay": opt.weight_decay}


def cmd_adapt(args) -> int:
    base, cfg, weights = load_model(args.base)
    corpus = data.load_corpus(args.corpus)
    if args.subject not in range(corpus.config.n_subjects):
        raise CliError(f"subject {args.subject} not in corpus")
    subj = training.SubjectData.from_corpus(corpus, args.subject, list(range(args.sentences)))
    opt = training.OptimizerConfig(lr=args.lr)
    if args.strategy == "lora":
        targets = _split_list(args.targets)
        lcfg = lora.LoraConfig(args.rank, args.alpha, frozenset(targets))
        res, adaptors, style = training.adapt_lora(
            weights, cfg, corpus, subj, lcfg, epochs=args.epochs if args.epochs is not None else 50,
            opt=opt, seed=args.seed, co_train_style=args.co_train_style)
        entries = {**lora.adaptor_entries(adaptors), "style": style}
        meta = {"kind": "lora", **lcfg.to_dict()}
    else:
        fn = training.adapt_imitator_style if args.strategy == "imitator-style" else training.adapt_style_only
        res, tuned = fn(weights, cfg, corpus, subj, epochs=args.epochs if args.epochs is not None else 300,
                        opt=opt, seed=args.seed)
        entries = {"style": tuned["style"], **{f"ft/{k}": v for k, v in tuned.items() if k != "style"}}
        meta = {"kind": "finetune"}
    meta.update({"strategy": args.strategy, "subject": args.subject, "n_sentences": args.sentences,
                 "style_init": res.style_init, "co_train_style": res.co_train_style})
    container.save(args.out, entries, meta, base_hash=base.content_hash)
    result = res.to_dict()
    result["optimizer"] = _opt_dict(opt)
    Path(f"{args.out}.result.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    write_manifest(args, args.out, {"base": args.base, "corpus_manifest": Path(args.corpus) / "manifest.json"},
                   {"adapt_seconds": res.seconds}, {"model_config": cfg.to_dict(), "seeds": {"adapt": args.seed}})
    print(json.dumps(res.row(), sort_keys=True))
    return 0


def cmd_infer(args) -> int:
    base, cfg, weights = load_model(args.model)
    adaptors, style = None, None
    if args.adaptor:
        weights, adaptors, style = apply_adaptor(base, cfg, weights, args.adaptor, args.allow_hash_mismatch)
    if args.style is not None or style is None:
        style = weights["style.table"][args.style or 0]
    sent, neutral = data.load_sentence(args.input)
    resampled = M.resample_features(sent.audio, cfg.feature_rate, cfg.fps)
    K = parse_frames(args.chunk_K, cfg.fps)
    P = parse_frames(args.chunk_P, cfg.fps) or 0
    t0 = time.perf_counter()
    if K is None:
        offsets = M.decode_sequence(M.project_audio(resampled, weights), style, weights, cfg, adaptors)
    else:
        offsets = chunking.chunked_infer(weights, resampled, style, K, P, cfg, adaptors, workers=args.workers)
    seconds = time.perf_counter() - t0
    T = offsets.shape[0]
    verts = offsets.reshape(T, cfg.n_vertices, 3)
    if neutral is not None:
        verts = verts + neutral
    container.save(args.out, {"vertices": verts, "silence_mask": sent.silence_mask.astype(np.float64)},
                   {"kind": "prediction", "subject": sent.subject, "index": sent.index})
    inputs = {"model": args.model, "input": args.input}
    if args.adaptor:
        inputs["adaptor"] = args.adaptor
    write_manifest(args, args.out, inputs, {"infer_seconds": seconds},
                   {"resolved_chunking": {"K": K, "P": P}, "model_config": cfg.to_dict()})
    return 0


def _lip_ids(text: str, n_vertices: int) -> tuple:
    if text in (None, "default"):
        return ModelConfig().lip_vertex_ids
    ids = tuple(int(x) for x in _split_list(text))
    if any(i < 0 or i >= n_vertices for i in ids):
        raise CliError("lip ids out of range", field="lips")
    return ids


def cmd_eval(args) -> int:
    pred = container.load(args.pred).entries["vertices"]
    gt_sent, _ = data.load_sentence(args.gt)
    lips = _lip_ids(args.lips, gt_sent.vertices.shape[1])
    mask = gt_sent.silence_mask if gt_sent.silence_mask.any() else None
    m = data.metrics(pred, gt_sent.vertices, mask, lips)
    text = json.dumps(m, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
        write_manifest(args, args.out, {"pred": args.pred, "gt": args.gt}, {})
    return 0


def _styles_for(weights, cfg, corpus, subjects, style_arg):
    if style_arg is not None:
        return [weights["style.table"][style_arg]] * len(subjects), [style_arg] * len(subjects)
    styles, ids = [], []
    pool = min(training.MAX_ADAPT_SENTENCES, corpus.config.sentences_per_subject - training.N_HELD_OUT)
    for s in subjects:
        subj = training.SubjectData.from_corpus(corpus, s, list(range(pool)))
        k, _, _ = training.best_base_style(weights, cfg, corpus, subj.train)
        styles.append(weights["style.table"][k])
        ids.append(k)
    return styles, ids


TRACE_VERTICES = (0, 1)


def cmd_bench_chunking(args) -> int:
    base, cfg, weights = load_model(args.model)
    corpus = data.load_corpus(args.corpus)
    subjects = corpus.config.test_subjects
    longs = training.long_test_sentences(corpus, subjects)
    styles, style_ids = _styles_for(weights, cfg, corpus, subjects, args.style)
    Ks = [parse_frames(k, cfg.fps) for k in _split_list(args.K)]
    Ps = [parse_frames(p, cfg.fps) or 0 for p in _split_list(args.P)]
    if None not in Ks:
        Ks = [None] + Ks
    rows, preds = training.sweep_chunking(weights, cfg, longs, styles, Ks, Ps, return_preds=True)
    write_csv(args.out, rows)
    traces = []
    first = longs[0]
    for (K, P), plist in preds.items():
        pos = plist[0].reshape(first.sentence.n_frames, cfg.n_vertices, 3) + first.neutral
        for t in range(first.sentence.n_frames):
            row = {"K": K, "P": P, "frame": t}
            for v in TRACE_VERTICES:
                row[f"v{v}_y"] = float(pos[t, v, 1])
            row["gt_v0_y"] = float(first.sentence.vertices[t, TRACE_VERTICES[0], 1])
            row["silent"] = int(first.sentence.silence_mask[t])
            traces.append(row)
    trace_path = Path(args.out).with_name(Path(args.out).stem + "_traces.csv")
    write_csv(trace_path, traces)
    write_manifest(args, args.out, {"model": args.model, "corpus_manifest": Path(args.corpus) / "manifest.json"},
                   {"rows": [{"K": r["K"], "P": r["P"], "seconds": r["seconds"]} for r in rows]},
                   {"style_ids": style_ids, "subjects": subjects, "model_config": cfg.to_dict()})
    return 0


def cmd_sweep_rank(args) -> int:
    base, cfg, weights = load_model(args.base)
    corpus = data.load_corpus(args.corpus)
    ranks = [int(r) for r in _split_list(args.ranks)]
    t0 = time.perf_counter()
    table, records = training.sweep_rank(weights, cfg, corpus, ranks, args.trials, args.seed, args.epochs)
    write_csv(args.out, [{"rank": r, "mean_l2_lip": v} for r, v in table.items()])
    trial_rows = [{**r, "sentence_ids": " ".join(map(str, r["sentence_ids"]))} for r in records]
    write_csv(Path(args.out).with_name(Path(args.out).stem + "_trials.csv"), trial_rows)
    write_manifest(args, args.out, {"base": args.base, "corpus_manifest": Path(args.corpus) / "manifest.json"},
                   {"sweep_seconds": time.perf_counter() - t0},
                   {"seeds": {"sweep": args.seed}, "model_config": cfg.to_dict()})
    return 0


OUTPUT_ARGS = {"gen-data": "out", "train-base": "out", "adapt": "out", "infer": "out", "eval": "out",
               "bench-chunking": "out", "sweep-rank": "out"}


def cmd_replay(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    if manifest.get("tool") != "animadapt":
        raise CliError(f"{args.manifest} is not an animadapt run manifest")
    for name, rec in manifest.get("inputs", {}).items():
        if Path(rec["path"]).exists() and container.file_sha256(rec["path"]) != rec["sha256"]:
            raise CliError(f"input {name} ({rec['path']}) changed since the recorded run")
    ns = argparse.Namespace(**manifest["args"])
    if args.out:
        setattr(ns, OUTPUT_ARGS[manifest["command"]], args.out)
    ns.func = COMMANDS[manifest["command"]]
    return ns.func(ns)


COMMANDS = {
    "default-config": cmd_default_config,
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "adapt": cmd_adapt,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench-chunking": cmd_bench_chunking,
    "sweep-rank": cmd_sweep_rank,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="animadapt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("default-config", help="print the default corpus config as JSON")

    g = sub.add_parser("gen-data", help="generate the synthetic corpus")
    g.add_argument("--config", default=None, help="JSON corpus config (all fields required)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None, help="overrides the config seed")

    t = sub.add_parser("train-base", help="train a base model on the train subjects")
    t.add_argument("--corpus", required=True)
    t.add_argument("--mode", choices=[m.value for m in M.StyleMode], default="imitator")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=1e-3)

    a = sub.add_parser("adapt", help="adapt a base model to a new subject")
    a.add_argument("--base", required=True)
    a.add_argument("--corpus", required=True)
    a.add_argument("--subject", type=int, required=True)
    a.add_argument("--sentences", type=int, required=True)
    a.add_argument("--strategy", choices=["lora", "imitator-style", "style-only"], default="lora")
    a.add_argument("--rank", type=int, default=4)
    a.add_argument("--alpha", type=float, default=8.0)
    a.add_argument("--targets", default="transformer_decoder,motion_decoder")
    a.add_argument("--epochs", type=int, default=None, help="default 50 for lora, 300 otherwise")
    a.add_argument("--lr", type=float, default=1e-3)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--co-train-style", action="store_true")
    a.add_argument("--out", required=True)

    i = sub.add_parser("infer", help="run a model on one sentence file")
    i.add_argument("--model", required=True)
    i.add_argument("--adaptor", default=None)
    i.add_argument("--input", required=True)
    i.add_argument("--chunk-K", dest="chunk_K", default=None, help="frames, or seconds with an 's' suffix")
    i.add_argument("--chunk-P", dest="chunk_P", default="5", help="frames, or seconds with an 's' suffix")
    i.add_argument("--style", type=int, default=None)
    i.add_argument("--workers", type=int, default=1)
    i.add_argument("--allow-hash-mismatch", action="store_true")
    i.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="vertex metrics of a prediction against a sentence file")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--lips", default="default")
    e.add_argument("--out", default=None)

    b = sub.add_parser("bench-chunking", help="chunk size / padding sweep on long test sentences")
    b.add_argument("--model", required=True)
    b.add_argument("--corpus", required=True)
    b.add_argument("--K", default="5,10,25,50,75,100")
    b.add_argument("--P", default="0,2,5,10")
    b.add_argument("--style", type=int, default=None)
    b.add_argument("--out", required=True)

    r = sub.add_parser("sweep-rank", help="LoRA rank sweep over random adaptation subsets")
    r.add_argument("--base", required=True)
    r.add_argument("--corpus", required=True)
    r.add_argument("--trials", type=int, default=30)
    r.add_argument("--ranks", default=",".join(map(str, training.RANKS)))
    r.add_argument("--epochs", type=int, default=50)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)

    rp = sub.add_parser("replay", help="re-run a command from its run manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out", default=None, help="redirect the primary output")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001 - every failure becomes a JSON error
        err = {"error": type(e).__name__, "message": str(e), "command": args.command}
        if getattr(e, "field", None):
            err["field"] = e.field
        print(json.dumps(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

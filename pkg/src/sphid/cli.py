"""Command-line entry point: gen-corpus, train, eval, ablate, diagnose.

Every command resolves its configuration (flags > --config file > defaults),
writes machine-readable artifacts under --out, and finishes by atomically
writing a manifest.json recording the resolved config, seed, paths, duration,
and artifact checksums.

Exit codes: 0 success, 2 usage errors, 3 data/configuration errors,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import corpus as cp
from . import model as md
from . import objective as ob
from . import retrieval as rt
from .errors import (ConfigurationError, DivergenceError,
                     IncompatibleArtifactsError, ParseError)

OUT_ROOT_ENV = "SPHID_OUT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

ABLATION_VARIANTS = {
    # name -> (gradient_path, weight_sharing, geometry, diversity)
    "full": ("soft", "shared", "cosine", "on"),
    "no_soft_grad": ("detached", "shared", "cosine", "on"),
    "no_weight_sharing": ("soft", "separate", "cosine", "on"),
    "fully_decoupled": ("detached", "separate", "cosine", "on"),
    "no_scaled_cosine": ("soft", "shared", "dot", "on"),
    "no_all": ("detached", "separate", "dot", "on"),
    "ste": ("ste", "shared", "cosine", "on"),
    "no_diversity": ("soft", "shared", "cosine", "off"),
}


def _default_out(command):
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return Path(root) / command.replace("_", "-")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(obj, path):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return Path(path)


def _write_manifest(out_dir, command, config, seed, inputs, outputs, started):
    manifest = {
        "package_version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "duration_sec": time.time() - started,
        "checksums": {Path(v).name: _sha256(v) for v in outputs.values()
                      if Path(v).is_file()},
    }
    return _write_json(manifest, Path(out_dir) / "manifest.json")


def _load_split(data_dir, split):
    items, interactions = cp.load_dataset(data_dir)
    if not items or not interactions:
        raise ConfigurationError(f"dataset at {data_dir} is empty")
    train, test = cp.time_split(interactions, split)
    cp.count_train_frequencies(items, train)
    return items, train, test


def _check_compat(params, items, interactions):
    top = max(max(it.tokens) for it in items)
    for inter in interactions:
        top = max(top, max(inter.query))
    if top >= params.vocab_size:
        raise IncompatibleArtifactsError(
            f"dataset token id {top} outside checkpoint vocabulary {params.vocab_size}")


# --- config resolution: flags > config file > defaults ---

_CONFIG_FLOATS = {"lr_backbone", "lr_quantizer", "tau_start", "tau_end",
                  "tau_cl", "beta", "eps"}
_CONFIG_INTS = {"dim", "batch_size", "epochs", "warmup_steps",
                "kmeans_iterations", "vocab_size", "seed"}


def _add_train_config_flags(p):
    p.add_argument("--config", type=Path, help="JSON file with TrainConfig fields")
    p.add_argument("--dim", type=int)
    p.add_argument("--levels", type=str, help="comma-separated level sizes, e.g. 64,32,16")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr-backbone", type=float, dest="lr_backbone")
    p.add_argument("--lr-quantizer", type=float, dest="lr_quantizer")
    p.add_argument("--warmup", type=int, dest="warmup_steps")
    p.add_argument("--tau-start", type=float, dest="tau_start")
    p.add_argument("--tau-end", type=float, dest="tau_end")
    p.add_argument("--tau-cl", type=float, dest="tau_cl")
    p.add_argument("--beta", type=float)
    p.add_argument("--loss-weights", type=str, dest="loss_weights",
                   help="five comma-separated nonnegative weights")
    p.add_argument("--kmeans-iters", type=int, dest="kmeans_iterations")
    p.add_argument("--geometry", choices=ob.GEOMETRIES)
    p.add_argument("--grad-path", choices=ob.GRADIENT_PATHS, dest="gradient_path")
    p.add_argument("--weight-sharing", choices=ob.SHARING_MODES, dest="weight_sharing")
    p.add_argument("--diversity", choices=("on", "off"))
    p.add_argument("--seed", type=int)


def _resolve_train_config(args):
    cfg = ob.TrainConfig().to_dict()
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{args.config}: invalid JSON ({exc.msg})") from exc
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ConfigurationError(f"unknown config fields {sorted(unknown)}")
        cfg.update(loaded)
    field_names = {f.name for f in fields(ob.TrainConfig)}
    for name in field_names:
        value = getattr(args, name, None)
        if value is None:
            continue
        if name == "level_sizes":
            continue
        cfg[name] = value
    if getattr(args, "levels", None):
        cfg["level_sizes"] = [int(v) for v in args.levels.split(",")]
    if getattr(args, "loss_weights", None):
        weights = [float(v) for v in args.loss_weights.split(",")]
        cfg["loss_weights"] = weights
    return ob.TrainConfig.from_dict(cfg).validate()


# --- commands ---


def cmd_gen_corpus(args):
    started = time.time()
    out = args.out or _default_out("gen-corpus")
    out.mkdir(parents=True, exist_ok=True)
    items, interactions = cp.generate_corpus(
        args.items, args.vocab, args.interactions, args.zipf, args.seed,
        n_topics=args.topics)
    cp.time_split(interactions, args.split)  # validates the fraction early
    items_path, inter_path = cp.save_dataset(out, items, interactions)
    config = {"items": args.items, "vocab": args.vocab,
              "interactions": args.interactions, "zipf": args.zipf,
              "split": args.split, "topics": args.topics, "seed": args.seed}
    _write_manifest(out, "gen-corpus", config, args.seed, {},
                    {"items": items_path, "interactions": inter_path}, started)
    print(f"wrote {len(items)} items / {len(interactions)} interactions to {out}")
    return EXIT_OK


def _full_vocab(items, *interaction_sets):
    top = max(max(it.tokens) for it in items)
    for interactions in interaction_sets:
        for inter in interactions:
            top = max(top, max(inter.query))
    return top + 1


def cmd_train(args):
    started = time.time()
    out = args.out or _default_out("train")
    out.mkdir(parents=True, exist_ok=True)
    config = _resolve_train_config(args)
    items, train_set, test_set = _load_split(args.data, args.split)
    if config.vocab_size is None:
        config.vocab_size = _full_vocab(items, train_set, test_set)
    try:
        result = ob.train(config, items, train_set, out_dir=out)
    except DivergenceError as exc:
        _write_json({"diverged_at_step": exc.step, "config": config.to_dict()},
                    out / "divergence.json")
        print(f"training diverged at step {exc.step}", file=sys.stderr)
        return EXIT_DIVERGED
    outputs = {"checkpoint": result.checkpoint_path, "trace": out / "trace.csv"}
    _write_manifest(out, "train", config.to_dict(), config.seed,
                    {"data": args.data}, outputs, started)
    final = result.trace[-1].losses
    print(f"trained {len(result.trace)} steps; final total loss {final.total:.4f}")
    return EXIT_OK


def cmd_eval(args):
    started = time.time()
    out = args.out or _default_out("eval")
    out.mkdir(parents=True, exist_ok=True)
    params, config, _ = ob.load_checkpoint(args.checkpoint)
    items, train_set, test_set = _load_split(args.data, args.split)
    _check_compat(params, items, test_set)
    bucketing = cp.bucket_by_popularity(items, train_set, args.buckets)
    index = rt.build_index(items, params, geometry=config.geometry)
    item_tokens = {it.item_id: it.tokens for it in items}
    report, ranked = rt.evaluate(params, config, index, test_set, item_tokens,
                                 items, bucketing=bucketing, beam_size=args.beam)
    report_path = _write_json(report, out / "report.json")
    outputs = {"report": report_path}
    if "per_bucket" in report:
        outputs["buckets"] = rt.write_bucket_csv(report["per_bucket"], out / "buckets.csv")
    if len(test_set) >= 30:
        stats = rt.hubness_stats(params, index, test_set, item_tokens, items,
                                 beam_size=args.beam, geometry=config.geometry)
        outputs["hubness"] = rt.write_hubness_csv(stats, items, index, out / "hubness.csv")
    _write_manifest(out, "eval", {"beam": args.beam, "split": args.split,
                                  "buckets": args.buckets,
                                  "train_config": config.to_dict()},
                    config.seed, {"checkpoint": args.checkpoint, "data": args.data},
                    outputs, started)
    hits = report["overall"]["hitrate"]
    print(f"eval on {report['overall']['n_queries']} queries: "
          f"H@1={hits[1]:.4f} H@10={hits[10]:.4f}")
    return EXIT_OK


def _variant_config(base, name):
    grad, share, geom, div = ABLATION_VARIANTS[name]
    d = base.to_dict()
    d.update(gradient_path=grad, weight_sharing=share, geometry=geom, diversity=div)
    return ob.TrainConfig.from_dict(d)


def _ablation_row(variant, seed, config, items, train_set, test_set):
    cfg = ob.TrainConfig.from_dict({**config.to_dict(), "seed": seed})
    cfg = _variant_config(cfg, variant)
    result = ob.train(cfg, items, train_set)
    index = rt.build_index(items, result.params, geometry=cfg.geometry)
    item_tokens = {it.item_id: it.tokens for it in items}
    bucketing = cp.bucket_by_popularity(items, train_set, 5)
    report, _ = rt.evaluate(result.params, cfg, index, test_set, item_tokens,
                            items, bucketing=bucketing, beam_size=10)
    tail = report["per_bucket"][bucketing.bucket_count - 1]
    grad_norms = [r.enc_grad_norm for r in result.trace]
    stability = float(np.mean(ob.gradient_stability(grad_norms, window=100)))
    corr = report.get("hubness", {}).get("freq_norm_corr")
    return {
        "variant": variant,
        "seed": seed,
        "hit@1": report["overall"]["hitrate"][1],
        "hit@10": report["overall"]["hitrate"][10],
        "ndcg@10": report["overall"]["ndcg"][10],
        "tail_hit@10": tail["hitrate"][10] if tail else float("nan"),
        "perplexity_mean": float(np.mean(report["codebook_perplexity"])),
        "grad_stability": stability,
        "freq_norm_corr": float("nan") if corr is None else corr,
    }


ABLATION_COMPARISONS = (
    ("full_beats_dot", "full", "no_scaled_cosine", "hit@10", "gt"),
    ("soft_stabler_than_ste", "full", "ste", "grad_stability", "lt"),
    ("diversity_raises_perplexity", "full", "no_diversity", "perplexity_mean", "gt"),
    ("cosine_tail_at_least_dot", "full", "no_scaled_cosine", "tail_hit@10", "ge"),
    ("full_beats_decoupled", "full", "fully_decoupled", "hit@10", "gt"),
)


def _verdicts(rows, seeds):
    by = {(r["variant"], r["seed"]): r for r in rows}
    verdicts = []
    for name, a, b, metric, op in ABLATION_COMPARISONS:
        wins = 0
        for seed in seeds:
            va, vb = by[(a, seed)][metric], by[(b, seed)][metric]
            ok = {"gt": va > vb, "lt": va < vb, "ge": va >= vb}[op]
            wins += int(ok)
        verdicts.append({"comparison": name, "metric": metric, "wins": wins,
                         "seeds": len(seeds), "majority": wins * 2 > len(seeds)})
    return verdicts


def cmd_ablate(args):
    started = time.time()
    out = args.out or _default_out("ablate")
    out.mkdir(parents=True, exist_ok=True)
    config = _resolve_train_config(args)
    items, train_set, test_set = _load_split(args.data, args.split)
    if config.vocab_size is None:
        config.vocab_size = _full_vocab(items, train_set, test_set)
    seeds = list(range(args.seeds))
    rows = []
    for variant in ABLATION_VARIANTS:
        for seed in seeds:
            rows.append(_ablation_row(variant, seed, config, items, train_set, test_set))
            print(f"{variant} seed={seed}: hit@10={rows[-1]['hit@10']:.4f}")
    columns = list(rows[0].keys())
    metrics_path = out / "ablation.csv"
    with open(metrics_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for r in rows:
            fh.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c])
                              for c in columns) + "\n")
    verdicts = _verdicts(rows, seeds)
    verdict_path = out / "verdicts.csv"
    with open(verdict_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("comparison,metric,wins,seeds,majority\n")
        for v in verdicts:
            fh.write(f"{v['comparison']},{v['metric']},{v['wins']},{v['seeds']},{v['majority']}\n")
    _write_manifest(out, "ablate", {"train_config": config.to_dict(), "seeds": args.seeds,
                                    "split": args.split},
                    config.seed, {"data": args.data},
                    {"metrics": metrics_path, "verdicts": verdict_path}, started)
    for v in verdicts:
        print(f"{v['comparison']}: {v['wins']}/{v['seeds']} majority={v['majority']}")
    return EXIT_OK


def cmd_diagnose(args):
    started = time.time()
    out = args.out or _default_out("diagnose")
    out.mkdir(parents=True, exist_ok=True)
    traces = {}
    for spec in args.trace:
        label, _, path = spec.rpartition("=")
        path = Path(path)
        label = label or path.stem
        if not path.is_file():
            raise ConfigurationError(f"trace file {path} not found")
        traces[label] = ob.read_trace_csv(path)

    stability_path = out / "stability.csv"
    summary = {"window": args.window, "traces": {}}
    with open(stability_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("label,step,enc_grad_norm,rolling_std\n")
        for label, rows in traces.items():
            norms = [r["enc_grad_norm"] for r in rows]
            rolling = ob.gradient_stability(norms, window=args.window)
            for r, s in zip(rows, rolling):
                fh.write(f"{label},{r['step']},{r['enc_grad_norm']!r},{s!r}\n")
            summary["traces"][label] = {"mean_rolling_std": float(np.mean(rolling)),
                                        "steps": len(rows)}
    if len(traces) == 2:
        (la, sa), (lb, sb) = [(l, v["mean_rolling_std"]) for l, v in summary["traces"].items()]
        summary["stability_ratio"] = {"pair": [la, lb],
                                      "ratio": sa / sb if sb else float("inf")}

    params, config, _ = ob.load_checkpoint(args.checkpoint)
    items, train_set, test_set = _load_split(args.data, args.split)
    _check_compat(params, items, test_set)
    index = rt.build_index(items, params, geometry=config.geometry)
    item_tokens = {it.item_id: it.tokens for it in items}
    emb_path = rt.export_embeddings(params, items, out / "embeddings.csv",
                                    geometry=config.geometry)
    stats = rt.hubness_stats(params, index, test_set, item_tokens, items,
                             geometry=config.geometry)
    hub_path = rt.write_hubness_csv(stats, items, index, out / "hubness.csv")
    summary["hubness"] = {k: v for k, v in stats.items() if k != "n_k"}
    summary_path = _write_json(summary, out / "diagnose.json")
    _write_manifest(out, "diagnose", {"window": args.window, "split": args.split},
                    config.seed,
                    {"checkpoint": args.checkpoint, "data": args.data,
                     **{f"trace_{l}": "-" for l in traces}},
                    {"stability": stability_path, "embeddings": emb_path,
                     "hubness": hub_path, "summary": summary_path}, started)
    print(f"diagnostics written to {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sphid",
        description="Desk-scale generative retrieval over spherical semantic IDs.")
    parser.add_argument("--version", action="version", version=f"sphid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate a synthetic Zipf corpus")
    g.add_argument("--items", type=int, default=1000)
    g.add_argument("--vocab", type=int, default=500)
    g.add_argument("--interactions", type=int, default=20000)
    g.add_argument("--zipf", type=float, default=1.1)
    g.add_argument("--split", type=float, default=0.8)
    g.add_argument("--topics", type=int, default=cp.DEFAULT_TOPICS)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", type=Path)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train a retriever on a dataset directory")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--split", type=float, default=0.8)
    t.add_argument("--out", type=Path)
    _add_train_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--split", type=float, default=0.8)
    e.add_argument("--beam", type=int, default=10)
    e.add_argument("--buckets", type=int, default=5)
    e.add_argument("--out", type=Path)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the variant matrix over several seeds")
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--split", type=float, default=0.8)
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--out", type=Path)
    _add_train_config_flags(a)
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("diagnose", help="gradient stability, embeddings, hubness")
    d.add_argument("--trace", action="append", required=True,
                   metavar="LABEL=PATH", help="trace CSV; repeat for comparisons")
    d.add_argument("--checkpoint", type=Path, required=True)
    d.add_argument("--data", type=Path, required=True)
    d.add_argument("--split", type=float, default=0.8)
    d.add_argument("--window", type=int, default=100)
    d.add_argument("--out", type=Path)
    d.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, ParseError, IncompatibleArtifactsError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

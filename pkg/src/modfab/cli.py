"""Command line entry point: ``modfab <subcommand> [flags]``.

Subcommands: synth, ingest, train, eval, ablate, similarity, gradcheck.
Every run writes into ``<out>/<subcommand>-<fingerprint>/`` together with a
``manifest.json`` holding the resolved config, seed and package version.

Exit codes: 0 success, 1 domain error (bad config, data or flags),
2 internal invariant violation.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from importlib import metadata
from pathlib import Path

from . import data_pipeline as dp
from .config import RunConfig
from .errors import ConfigError, ContractError, DimensionError, ModfabError, NumericError
from .harness import experiments, gradcheck
from .harness.train import evaluate, load_checkpoint, save_checkpoint, train
from .synthgen import gen_dataset, gen_world

log = logging.getLogger("modfab")

COMMANDS = ("synth", "ingest", "train", "eval", "ablate", "similarity", "gradcheck")
GRADCHECK_TOL = 1e-4

# internal failures (exit 2) as opposed to bad inputs (exit 1)
INVARIANT_ERRORS = (ContractError, DimensionError, NumericError, AssertionError)


def package_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


class Parser(argparse.ArgumentParser):
    """argparse with exit code 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run config")
    common.add_argument("--in", dest="inp", metavar="PATH", help="input file or run directory")
    common.add_argument("--out", metavar="PATH", default="runs", help="output root directory")
    common.add_argument("--seed", type=int, help="seed for world, data, split and training")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="key=value", help="override a config key (repeatable)")
    parser = Parser(prog="modfab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    sub.required = True
    helps = {
        "synth": "generate a synthetic world and its transaction file",
        "ingest": "turn a transaction file into a sequence file",
        "train": "train a model on a sequence file",
        "eval": "evaluate a trained model on its held-out split",
        "ablate": "loss and component ablation tables",
        "similarity": "route-weight similarity vs. stage-set overlap",
        "gradcheck": "finite-difference check of all gradients",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = list(args.overrides)
    if args.seed is not None:
        s = args.seed
        overrides = [f"world.seed={s}", f"data.seed={s}", f"split.seed={s}",
                     f"train.seed={s}"] + overrides
    return cfg.override(overrides)


def find_input(path, filename: str) -> Path:
    """``path`` itself, ``path/filename`` or the single run dir below it holding it."""
    if path is None:
        raise ConfigError(f"--in is required (expected a path to {filename})")
    p = Path(path)
    if p.is_file():
        return p
    if (p / filename).is_file():
        return p / filename
    if p.is_dir():
        hits = sorted(q for q in p.glob(f"*/{filename}") if q.is_file())
        if len(hits) == 1:
            return hits[0]
        if len(hits) > 1:
            raise ConfigError(f"{p} holds several runs with {filename}; pass one of: "
                              + ", ".join(str(h.parent) for h in hits))
    raise ConfigError(f"no {filename} found at {p}")


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def run_dir(args, cfg: RunConfig, *inputs) -> Path:
    fp = cfg.fingerprint(args.command, *inputs)
    d = Path(args.out) / f"{args.command}-{fp}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_manifest(d: Path, args, cfg: RunConfig, inputs: dict, outputs: list) -> None:
    manifest = {
        "command": args.command,
        "version": package_version(),
        "seed": cfg.data["train"]["seed"],
        "fingerprint": d.name.split("-", 1)[1],
        "config": cfg.data,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# subcommands ------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    world = gen_world(cfg.world())
    data = gen_dataset(world, cfg.data["data"]["n_wafers"], seed=cfg.data["data"]["seed"])
    d = run_dir(args, cfg)
    (d / "world.json").write_text(world.dumps() + "\n")
    data.schema.dump(d / "schema.yaml")
    dp.write_transactions(d / "transactions.csv", data.transactions, data.schema)
    dump_json(d / "truth.json", data.truth)
    write_manifest(d, args, cfg, {}, ["world.json", "schema.yaml", "transactions.csv",
                                      "truth.json"])
    print(f"wrote {len(data.transactions)} transactions for "
          f"{len(data.truth)} wafers to {d}")
    return 0


def cmd_ingest(args, cfg: RunConfig) -> int:
    src = find_input(args.inp, "transactions.csv")
    schema_path = src.parent / "schema.yaml"
    if not schema_path.is_file():
        raise ConfigError(f"no schema.yaml next to {src}")
    schema = dp.SchemaConfig.load(schema_path)
    rows = dp.parse_transactions(src, schema)
    seqs = dp.ingest(rows, k=cfg.data["data"]["knn_k"],
                     systematic_threshold=cfg.data["data"]["systematic_threshold"])
    d = run_dir(args, cfg, file_digest(src), file_digest(schema_path))
    dp.write_sequences(d / "sequences.jsonl", seqs)
    schema.dump(d / "schema.yaml")
    write_manifest(d, args, cfg, {"transactions": str(src.resolve())},
                   ["sequences.jsonl", "schema.yaml"])
    print(f"wrote {len(seqs)} sequences to {d / 'sequences.jsonl'}")
    return 0


def split_from_config(cfg: RunConfig, seqs):
    sp = cfg.data["split"]
    return dp.split_dataset(seqs, sp["mode"], sp["holdout"], sp["seed"])


def cmd_train(args, cfg: RunConfig) -> int:
    src = find_input(args.inp, "sequences.jsonl")
    seqs = dp.read_sequences(src)
    tr, ev = split_from_config(cfg, seqs)
    tcfg = cfg.train_config()
    vocab = dp.Vocab.from_sequences(seqs)
    result = train(tr, tcfg, vocab)
    d = run_dir(args, cfg, file_digest(src))
    save_checkpoint(d / "checkpoint.npz", result)
    dump_json(d / "history.json", result.history)
    dump_json(d / "split.json", {"sequences": str(src.resolve()),
                                 "train_ids": [s.wafer_id for s in tr],
                                 "eval_ids": [s.wafer_id for s in ev]})
    last = result.history[-1]
    dump_json(d / "metrics.json", {"fingerprint": tcfg.fingerprint(), "seed": tcfg.seed,
                                   "epochs_run": len(result.history), "final": last})
    write_manifest(d, args, cfg, {"sequences": str(src.resolve())},
                   ["checkpoint.npz", "history.json", "split.json", "metrics.json"])
    print(f"trained {tcfg.model_kind} for {len(result.history)} epochs; "
          f"final total loss {last['total']:.4f}; checkpoint in {d}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt = find_input(args.inp, "checkpoint.npz")
    split_path = ckpt.parent / "split.json"
    if not split_path.is_file():
        raise ConfigError(f"no split.json next to {ckpt}")
    split = json.loads(split_path.read_text())
    seqs = dp.read_sequences(split["sequences"])
    wanted = set(split["eval_ids"])
    ev = [s for s in seqs if s.wafer_id in wanted]
    if not ev:
        raise ConfigError("evaluation split is empty")
    result = load_checkpoint(ckpt)
    report = evaluate(result, ev)
    d = run_dir(args, cfg, file_digest(ckpt))
    (d / "report.json").write_text(report.to_json() + "\n")
    lines = ["kqi\tauc\tn_pos\tn_neg"]
    for k, (a, p, n) in enumerate(zip(report.auc, report.n_pos, report.n_neg)):
        lines.append(f"{k}\t{'undefined' if a is None else f'{a:.4f}'}\t{p}\t{n}")
    mean = report.mean_auc
    lines.append(f"mean\t{'undefined' if mean is None else f'{mean:.4f}'}\t\t")
    (d / "auc.tsv").write_text("\n".join(lines) + "\n")
    write_manifest(d, args, cfg, {"checkpoint": str(ckpt.resolve())}, ["report.json", "auc.tsv"])
    print("\n".join(lines))
    return 0


def experiment_splits(cfg: RunConfig, seqs) -> dict:
    out = {}
    for name, holdout in cfg.data["experiment"]["splits"].items():
        out[name] = dp.split_dataset(seqs, name, holdout, cfg.data["split"]["seed"])
    return out


def cmd_ablate(args, cfg: RunConfig) -> int:
    src = find_input(args.inp, "sequences.jsonl")
    seqs = dp.read_sequences(src)
    splits = experiment_splits(cfg, seqs)
    tcfg = cfg.train_config()
    seeds = cfg.data["experiment"]["seeds"]
    vocab = dp.Vocab.from_sequences(seqs)
    d = run_dir(args, cfg, file_digest(src))
    metrics = {}
    for kind in ("loss", "component"):
        table = experiments.ablate(splits, tcfg, seeds=seeds, kind=kind, vocab=vocab)
        (d / f"ablation_{kind}.tsv").write_text(table.to_tsv())
        metrics[kind] = table.to_dict()
        print(table.to_tsv())
    dump_json(d / "metrics.json", metrics)
    write_manifest(d, args, cfg, {"sequences": str(src.resolve())},
                   ["ablation_loss.tsv", "ablation_component.tsv", "metrics.json"])
    return 0


def cmd_similarity(args, cfg: RunConfig) -> int:
    src = find_input(args.inp, "sequences.jsonl")
    seqs = dp.read_sequences(src)
    tr, ev = split_from_config(cfg, seqs)
    vocab = dp.Vocab.from_sequences(seqs)
    base = cfg.train_config()
    results = []
    for seed in cfg.data["experiment"]["seeds"]:
        base.seed = seed
        results.append(train(tr, base, vocab))
    report = experiments.similarity_analysis(results, ev)
    d = run_dir(args, cfg, file_digest(src))
    (d / "similarity.tsv").write_text(report.to_tsv())
    dump_json(d / "metrics.json", report.to_dict())
    write_manifest(d, args, cfg, {"sequences": str(src.resolve())},
                   ["similarity.tsv", "metrics.json"])
    print(report.to_tsv())
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    seed0 = args.seed if args.seed is not None else 0
    worst: dict = {}
    for s in range(seed0, seed0 + int(cfg.data["experiment"]["gradcheck_seeds"])):
        for name, err in gradcheck.run_suite(s).items():
            worst[name] = max(worst.get(name, 0.0), err)
    overall = max(worst.values())
    for name in sorted(worst):
        print(f"{name}\t{worst[name]:.3e}")
    print(f"max relative error: {overall:.3e}")
    if args.out:
        d = run_dir(args, cfg, seed0)
        dump_json(d / "metrics.json", {"max_relative_error": overall, "per_check": worst,
                                       "tolerance": GRADCHECK_TOL})
        write_manifest(d, args, cfg, {}, ["metrics.json"])
    if not overall < GRADCHECK_TOL:
        print(f"gradient check failed: {overall:.3e} >= {GRADCHECK_TOL}", file=sys.stderr)
        return 2
    return 0


HANDLERS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval,
    "ablate": cmd_ablate, "similarity": cmd_similarity, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s",
                            stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return HANDLERS[args.command](args, cfg)
    except INVARIANT_ERRORS as exc:
        print(f"modfab: invariant violated: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (ModfabError, OSError, ValueError) as exc:
        print(f"modfab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

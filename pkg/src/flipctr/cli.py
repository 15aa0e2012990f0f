"""Command-line entry points. Every artifact of a run lives under one run directory:

    RUN/manifest.json     data provenance, resolved config, per-command status
    RUN/schema.json       feature vocabulary
    RUN/tokenizer.json    word vocabulary
    RUN/data/             train.tsv / test.tsv (chronological split)
    RUN/checkpoints/      pretrain/, finetune/<variant>/, ablate/<name>/
    RUN/metrics.jsonl     one JSON object per step / epoch, tagged by command
    RUN/reports/          Markdown + CSV tables, heatmap and SVD data

Config precedence (lowest to highest): --profile defaults, the config stored in
the run manifest by earlier commands, --config FILE, --set KEY=VALUE, dedicated
flags (--seed, --tau, --r-text, --r-tab, --k-noise, --backbone, --variant).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import torch
import yaml
from filelock import FileLock, Timeout

from . import __version__
from .config import VARIANTS, TrainConfig, desk_profile, load_config, merge, set_dotted
from .evalysis import masked_similarity_heatmap, svd_projection, write_heatmap_csv, write_svd_csv
from .objectives import ABLATIONS
from .schema_data import (RULES, ColumnSpec, DataError, DatasetSchema, SchemaError, SplitSpec, binarize_labels,
                          build_schema, chronological_split, load_tabular, read_records, write_records)
from .synthetic import SyntheticConfig, generate_synthetic
from .textualize import SequenceTooLong, Template, Tokenizer, build_tokenizer, render_text
from .training import (FlipClassifier, ManifestMismatch, MetricsLog, TrainingDiverged, build_towers, encode_split,
                       evaluate, load_classifier, load_pretrainer, manifest_for, pretrain, run_variant,
                       save_classifier)

logger = logging.getLogger("flipctr")

ABLATION_LABELS = {
    "full": "FLIP (full)",
    "wo_mlm": "w/o MLM",
    "wo_mtm": "w/o MTM",
    "wo_icl": "w/o ICL",
    "wo_mlm_mtm": "w/o MLM&MTM",
    "wo_mlm_mtm_icl": "w/o MLM&MTM&ICL",
    "wo_field_masking": "token-level masking",
    "wo_joint_reconstruction": "w/o joint reconstruction",
}

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_LOCKED = 0, 1, 2, 3


class MissingPrerequisite(RuntimeError):
    pass


# --------------------------------------------------------------------------- run directory

class RunDir:
    def __init__(self, path: str | Path):
        self.path = Path(path)

    manifest_path = property(lambda self: self.path / "manifest.json")
    schema_path = property(lambda self: self.path / "schema.json")
    tokenizer_path = property(lambda self: self.path / "tokenizer.json")
    metrics_path = property(lambda self: self.path / "metrics.jsonl")
    reports = property(lambda self: self.path / "reports")
    checkpoints = property(lambda self: self.path / "checkpoints")
    data = property(lambda self: self.path / "data")

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {}
        return json.loads(self.manifest_path.read_text())

    def write_manifest(self, man: dict) -> None:
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(man, sort_keys=True, indent=1) + "\n")
        tmp.replace(self.manifest_path)

    def is_complete(self, command: str) -> bool:
        return self.manifest().get("commands", {}).get(command, {}).get("status") == "complete"

    def record(self, command: str, **info) -> None:
        man = self.manifest()
        man.setdefault("commands", {})[command] = info
        self.write_manifest(man)

    def require(self, command: str, needed: str) -> None:
        if not self.is_complete(needed):
            raise MissingPrerequisite(f"{command}: {self.path} has no completed '{needed}' step; "
                                      f"run `flipctr {needed} --out {self.path}` first")

    def load_inputs(self):
        schema = DatasetSchema.load(self.schema_path)
        tokenizer = Tokenizer.load(self.tokenizer_path)
        return schema, tokenizer, read_records(self.data / "train.tsv"), read_records(self.data / "test.tsv")

    def reset_metrics(self, command: str) -> MetricsLog:
        """Drop earlier lines from the same command (a forced rerun) and open a tagged log."""
        if self.metrics_path.exists():
            keep = [ln for ln in self.metrics_path.read_text().splitlines()
                    if ln and json.loads(ln).get("command") != command]
            self.metrics_path.write_text("".join(ln + "\n" for ln in keep))
        return MetricsLog(self.metrics_path, command=command)


# --------------------------------------------------------------------------- config resolution

def _parse_set(items: List[str]) -> Dict[str, object]:
    updates: Dict[str, object] = {}
    for item in items or []:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        set_dotted(updates, key.strip(), yaml.safe_load(raw))
    return updates


def flag_overrides(args) -> Dict[str, object]:
    """Dedicated flags as a flat {dotted.key: value} mapping."""
    flat = {}
    for attr, key in (("seed", "seed"), ("tau", "pretrain.tau"), ("r_text", "pretrain.r_text"),
                      ("r_tab", "pretrain.r_tab"), ("k_noise", "pretrain.k_noise"),
                      ("backbone", "model.backbone"), ("ablation", "ablation")):
        value = getattr(args, attr, None)
        if value is not None:
            flat[key] = value
    return flat


def resolve_config(args, run: RunDir) -> tuple[TrainConfig, dict]:
    base = desk_profile() if args.profile == "desk" else TrainConfig()
    stored = run.manifest().get("config")
    if stored:
        base = merge(base, stored)
    sets = _parse_set(getattr(args, "set", None))
    flat = _flatten(sets)
    flat.update(flag_overrides(args))
    updates: Dict[str, object] = {}
    for k, v in flat.items():
        set_dotted(updates, k, v)
    cfg = load_config(args.config, updates, base)
    return cfg, flat


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _store_config(run: RunDir, cfg: TrainConfig) -> None:
    man = run.manifest()
    man["config"] = cfg.to_dict()
    run.write_manifest(man)


def _command_info(args, flat: dict, cfg: TrainConfig | None = None, **extra) -> dict:
    info = {"status": "complete", "argv": list(args.argv), "overrides": flat}
    if args.config:
        info["config_file"] = str(args.config)
    if cfg is not None:
        info["config_hash"] = cfg.digest()
    info.update(extra)
    return info


# --------------------------------------------------------------------------- reports

def write_table(stem: Path, header: List[str], rows: List[List[object]]) -> None:
    stem.parent.mkdir(parents=True, exist_ok=True)
    with stem.with_suffix(".csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)

    def fmt(x):
        return f"{x:.4f}" if isinstance(x, float) else str(x)

    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(fmt(x) for x in r) + " |" for r in rows]
    stem.with_suffix(".md").write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------- commands

def cmd_preprocess(args, run: RunDir) -> int:
    if run.is_complete("preprocess") and not args.force:
        print(f"preprocess: already complete in {run.path} (use --force to redo)")
        return EXIT_OK
    cfg, flat = resolve_config(args, run)
    if args.synthetic is not None:
        syn_updates = yaml.safe_load(Path(args.synthetic).read_text()) if args.synthetic else {}
        syn = merge(SyntheticConfig(), syn_updates or {})
        if args.seed is not None:
            syn = merge(syn, {"seed": args.seed})
        train, test, truth = generate_synthetic(syn)
        field_names = truth["field_names"]
        source = {"kind": "synthetic", "config": truth["config"]}
    else:
        if args.data is None:
            raise ValueError("preprocess needs --data FILE or --synthetic")
        if args.rule not in RULES:
            print(f"unknown rule {args.rule!r}; valid rules: {', '.join(RULES)}", file=sys.stderr)
            return EXIT_USAGE
        delim = args.delimiter or ("," if str(args.data).endswith(".csv") else "\t")
        with open(args.data, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh, delimiter=delim), [])
        fields = args.fields.split(",") if args.fields else [c for c in header if c not in ("rating", "timestamp")]
        records = binarize_labels(load_tabular(args.data, ColumnSpec(fields), delim), args.rule)
        train, test = chronological_split(records, SplitSpec())
        field_names = fields
        source = {"kind": "file", "path": str(args.data), "rule": args.rule}
    schema = build_schema(train, field_names)
    tokenizer = build_tokenizer([render_text(r, schema, Template()) for r in train], v_max=cfg.model.v_max)
    run.data.mkdir(parents=True, exist_ok=True)
    columns = list(field_names) + ["label", "timestamp"]
    write_records(run.data / "train.tsv", train, columns)
    write_records(run.data / "test.tsv", test, columns)
    schema.save(run.schema_path)
    tokenizer.save(run.tokenizer_path)
    stats = {"samples": len(train) + len(test), "train": len(train), "test": len(test),
             "fields": schema.num_fields, "features": schema.M, "vocab": len(tokenizer)}
    print(" ".join(f"{k}={v}" for k, v in stats.items()))
    man = run.manifest()
    man["data"] = dict(source, stats=stats, schema_hash=schema.digest(), tokenizer_hash=tokenizer.digest())
    run.write_manifest(man)
    run.record("preprocess", **_command_info(args, flat))
    return EXIT_OK


def cmd_pretrain(args, run: RunDir) -> int:
    run.require("pretrain", "preprocess")
    if run.is_complete("pretrain") and not args.force:
        print(f"pretrain: already complete in {run.path} (use --force to redo)")
        return EXIT_OK
    cfg, flat = resolve_config(args, run)
    schema, tok, train, _ = run.load_inputs()
    data = encode_split(train, schema, tok, l_max=cfg.model.l_max)
    log = run.reset_metrics("pretrain")
    res = pretrain(data, schema, tok, cfg, run.checkpoints / "pretrain", log, max_steps=args.max_steps)
    _store_config(run, cfg)
    run.record("pretrain", **_command_info(args, flat, cfg, steps=res.steps, epoch_losses=res.epoch_losses))
    final = f"{res.epoch_losses[-1]:.4f}" if res.epoch_losses else "n/a"
    print(f"pretrain: {res.steps} steps, final epoch loss {final}")
    return EXIT_OK


def _finetune_one(run: RunDir, cfg: TrainConfig, variant: str, schema, tok, train, test, log) -> dict:
    pretrained = None
    if variant != "scratch":
        pretrained = load_pretrainer(run.checkpoints / "pretrain" / "last", schema, tok, cfg)
    res = run_variant(variant, pretrained, schema, tok, train, test, cfg, log)
    man = manifest_for(cfg, schema, tok, res.model.id_tower, res.model.text_tower, "finetune")
    summary = {"variant": variant, "lr": res.lr, "val_auc": res.val_auc, "alpha": res.alpha,
               "test_auc": res.test.auc, "test_logloss": res.test.logloss, "epochs_run": res.epochs_run}
    save_classifier(run.checkpoints / "finetune" / variant, res.model, dict(man, variant=variant), summary)
    return summary


def cmd_finetune(args, run: RunDir) -> int:
    run.require("finetune", "preprocess")
    variants = list(VARIANTS) if args.variant == "all" else [args.variant or "flip"]
    if any(v != "scratch" for v in variants):
        run.require("finetune", "pretrain")
    cfg, flat = resolve_config(args, run)
    schema, tok, train_r, test_r = run.load_inputs()
    train = encode_split(train_r, schema, tok, l_max=cfg.model.l_max)
    test = encode_split(test_r, schema, tok, l_max=cfg.model.l_max)
    for v in variants:
        key = f"finetune:{v}"
        if run.is_complete(key) and not args.force:
            print(f"finetune {v}: already complete (use --force to redo)")
            continue
        log = run.reset_metrics(key)
        s = _finetune_one(run, merge(cfg, {"variant": v}), v, schema, tok, train, test, log)
        run.record(key, **_command_info(args, flat, cfg, **s))
        print(f"finetune {v}: test AUC {s['test_auc']:.4f} logloss {s['test_logloss']:.4f} (lr {s['lr']:g})")
    return EXIT_OK


def cmd_eval(args, run: RunDir) -> int:
    run.require("eval", "preprocess")
    cfg, flat = resolve_config(args, run)
    schema, tok, _, test_r = run.load_inputs()
    test = encode_split(test_r, schema, tok, l_max=cfg.model.l_max)
    if args.variant in (None, "all"):
        variants = [v for v in VARIANTS if run.is_complete(f"finetune:{v}")]
        if not variants and not args.untrained:
            raise MissingPrerequisite(f"eval: no finetuned model in {run.path}; run `flipctr finetune` first")
        if args.untrained:
            variants = variants or ["flip"]
    else:
        variants = [args.variant]
    rows = []
    for v in variants:
        if args.untrained:
            torch.manual_seed(cfg.seed)
            id_t, text_t = build_towers(schema, tok, cfg)
            model = FlipClassifier(None if v == "flip_plm" else id_t, text_t if v in ("flip", "flip_plm") else None)
            name = f"{v} (untrained)"
        else:
            run.require("eval", f"finetune:{v}")
            model = load_classifier(run.checkpoints / "finetune" / v, schema, tok, cfg, v)
            name = v
        rep = evaluate(model, test, "test", cfg.finetune.eval_batch_size)
        rows.append([name, rep.auc, rep.logloss, rep.n])
        print(f"eval {name}: AUC {rep.auc:.4f} Logloss {rep.logloss:.4f} n={rep.n}")
    stem = "eval_untrained" if args.untrained else "eval"
    write_table(run.reports / stem, ["variant", "AUC", "Logloss", "n"], rows)
    run.record("eval", **_command_info(args, flat, cfg, rows=rows))
    return EXIT_OK


def cmd_ablate(args, run: RunDir) -> int:
    run.require("ablate", "preprocess")
    cfg, flat = resolve_config(args, run)
    schema, tok, train_r, test_r = run.load_inputs()
    train = encode_split(train_r, schema, tok, l_max=cfg.model.l_max)
    test = encode_split(test_r, schema, tok, l_max=cfg.model.l_max)
    results_dir = run.reports / "ablation"
    results_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in ABLATIONS:
        path = results_dir / f"{name}.json"
        if path.exists() and not args.force:
            res = json.loads(path.read_text())
            print(f"ablate {name}: already complete")
        else:
            sub = merge(cfg, {"ablation": name, "variant": "flip"})
            log = run.reset_metrics(f"ablate:{name}")
            pre = pretrain(train, schema, tok, sub, run.checkpoints / "ablate" / name, log, max_steps=args.max_steps)
            ft = run_variant("flip", pre.model, schema, tok, train, test, sub, log)
            res = {"ablation": name, "label": ABLATION_LABELS[name], "auc": ft.test.auc,
                   "logloss": ft.test.logloss, "lr": ft.lr, "alpha": ft.alpha}
            path.write_text(json.dumps(res, sort_keys=True, indent=1) + "\n")
            print(f"ablate {name}: AUC {res['auc']:.4f} Logloss {res['logloss']:.4f}")
        rows.append([res["label"], res["auc"], res["logloss"]])
    write_table(run.reports / "ablation", ["variant", "AUC", "Logloss"], rows)
    run.record("ablate", **_command_info(args, flat, cfg, rows=len(rows)))
    return EXIT_OK


def cmd_analyze(args, run: RunDir) -> int:
    run.require("analyze", "pretrain")
    if run.is_complete("analyze") and not args.force:
        print(f"analyze: already complete in {run.path} (use --force to redo)")
        return EXIT_OK
    cfg, flat = resolve_config(args, run)
    schema, tok, _, test_r = run.load_inputs()
    model = load_pretrainer(run.checkpoints / "pretrain" / "last", schema, tok, cfg)
    probe = test_r[:args.probe]
    if len(probe) < 100:
        logger.warning("probe set has %d records; at least 100 are recommended", len(probe))
    data = encode_split(probe, schema, tok, l_max=cfg.model.l_max)
    heat = masked_similarity_heatmap(model, data.ids, data.text)
    run.reports.mkdir(parents=True, exist_ok=True)
    write_heatmap_csv(run.reports / "heatmap.csv", heat.matrix, schema.field_names)
    stats = {"probe_records": len(probe), "diag_mean": heat.diag_mean, "offdiag_mean": heat.offdiag_mean,
             "diag_max_fraction": heat.diag_max_fraction, "chance": 1.0 / schema.num_fields,
             "p_value": heat.p_value}
    (run.reports / "heatmap_stats.json").write_text(json.dumps(stats, sort_keys=True, indent=1) + "\n")
    table = model.id_tower.embedding.weight.detach().double().numpy()[:schema.M]
    write_svd_csv(run.reports / "svd.csv", svd_projection(table), schema)
    run.record("analyze", **_command_info(args, flat, cfg, **stats))
    print(f"analyze: diag {heat.diag_mean:.4f} vs off-diag {heat.offdiag_mean:.4f} (p={heat.p_value:.3g}), "
          f"diag-max fraction {heat.diag_max_fraction:.3f}")
    return EXIT_OK


COMMANDS = {"preprocess": cmd_preprocess, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "ablate": cmd_ablate, "analyze": cmd_analyze}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, type=Path, help="run directory")
    common.add_argument("--config", type=Path, help="YAML file with nested config overrides")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
    common.add_argument("--profile", choices=("paper", "desk"), default="paper",
                        help="defaults to start from (desk = tiny towers for one CPU)")
    common.add_argument("--seed", type=int)
    common.add_argument("--force", action="store_true", help="redo steps that already completed")
    common.add_argument("-v", "--verbose", action="store_true")
    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--tau", type=float)
    train.add_argument("--r-text", dest="r_text", type=float)
    train.add_argument("--r-tab", dest="r_tab", type=float)
    train.add_argument("--k-noise", dest="k_noise", type=int)
    train.add_argument("--backbone", choices=("dcnv2", "deepfm", "autoint"))
    train.add_argument("--max-steps", dest="max_steps", type=int, help=argparse.SUPPRESS)

    ap = argparse.ArgumentParser(prog="flipctr", description="Aligned ID/text CTR models.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="split data, build schema and tokenizer")
    p.add_argument("--data", type=Path, help="delimited file with a header row")
    p.add_argument("--rule", default="movielens", help=f"label rule: {', '.join(RULES)}")
    p.add_argument("--fields", help="comma-separated field columns (default: all but rating, timestamp)")
    p.add_argument("--delimiter", help="cell delimiter (default: ',' for .csv, tab otherwise)")
    p.add_argument("--synthetic", nargs="?", const="", metavar="YAML",
                   help="generate the planted-interaction dataset instead of reading --data")

    p = sub.add_parser("pretrain", parents=[common, train], help="alignment pretraining")
    p.add_argument("--ablation", choices=list(ABLATIONS))

    for name, text in (("finetune", "finetune one or all variants"), ("eval", "evaluate finetuned models")):
        p = sub.add_parser(name, parents=[common, train], help=text)
        p.add_argument("--variant", choices=list(VARIANTS) + ["all"])
    p.add_argument("--untrained", action="store_true", help="evaluate a freshly initialised model (chance control)")

    p = sub.add_parser("ablate", parents=[common, train], help="pretraining ablation matrix")
    p = sub.add_parser("analyze", parents=[common, train], help="similarity heatmap and SVD projection")
    p.add_argument("--probe", type=int, default=200, help="test records in the probe set")
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    run = RunDir(args.out)
    run.path.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(run.path / ".lock"))
    try:
        with lock.acquire(timeout=0):
            return COMMANDS[args.command](args, run)
    except Timeout:
        print(f"{run.path} is locked by another flipctr command", file=sys.stderr)
        return EXIT_LOCKED
    except MissingPrerequisite as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FAIL
    except (SchemaError, DataError, SequenceTooLong, ManifestMismatch, TrainingDiverged, ValueError, KeyError,
            FileNotFoundError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

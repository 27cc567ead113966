"""
Command-line entry point.

    fseft synth       --config run.toml     phantom corpus + manifest
    fseft pretrain    --config run.toml     masked partial-label pretraining
    fseft adapt-eval  --config run.toml     few-shot benchmark -> CSV/JSON
    fseft report      --config run.toml     markdown + plots from result CSVs

Every stage writes under ``output_dir`` (``--out`` overrides it):
``corpus/``, ``pretrain/``, ``results/`` and ``report/``.

Exit codes: 0 success, 2 user or config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, canonical_json, load_config
from .errors import ConfigError, InvalidArgument, SpecInfeasible

log = logging.getLogger("fseft")

EXIT_OK, EXIT_USER, EXIT_RUNTIME = 0, 2, 3

# config sections each stage depends on; a stage hash covers only those
STAGE_KEYS = {
    "corpus": ("version", "seed", "preprocess", "phantom", "datasets"),
    "pretrain": ("version", "seed", "preprocess", "phantom", "datasets", "model", "pretrain"),
}


class UserError(Exception):
    """Bad input from the operator: missing prerequisites, unwritable paths."""


def stage_hash(cfg: RunConfig, stage: str) -> str:
    d = cfg.to_dict()
    sub = {k: d[k] for k in STAGE_KEYS[stage]}
    return hashlib.sha256(canonical_json(sub).encode()).hexdigest()[:16]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _ensure_writable(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UserError(f"output directory {path} is not writable: {exc.strerror or exc}") from exc
    return path


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    doc = {"config_hash": cfg.config_hash(), "config": cfg.to_dict()}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def _manifest_digest(doc: dict) -> str:
    body = {k: v for k, v in doc.items() if k != "digest"}
    return hashlib.sha256(canonical_json(body).encode()).hexdigest()


def cmd_synth(cfg: RunConfig) -> int:
    from .phantoms import build_assembly, class_tallies
    from .volume import save_raw

    out = _ensure_writable(Path(cfg.output_dir) / "corpus")
    corpus = build_assembly(cfg.dataset_specs(), cfg.seed, cfg.prep())
    samples = []
    for i, s in enumerate(corpus):
        img = save_raw(s.volume, out / "samples" / f"{i:04d}_img")
        msk = save_raw(s.mask, out / "samples" / f"{i:04d}_mask")
        samples.append(
            {
                "id": i,
                "dataset": s.dataset,
                "w": [int(x) for x in s.w],
                "seed": [int(x) for x in s.seed],
                "image": str(img.relative_to(out)),
                "mask": str(msk.relative_to(out)),
                "image_sha256": _sha256(img),
                "mask_sha256": _sha256(msk),
            }
        )
    tallies = class_tallies(corpus)
    doc = {
        "config_hash": cfg.config_hash(),
        "corpus_hash": stage_hash(cfg, "corpus"),
        "n_samples": len(samples),
        "n_classes": cfg.n_classes,
        "tallies": tallies,
        "samples": samples,
    }
    doc["digest"] = _manifest_digest(doc)
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    _write_resolved(cfg, Path(cfg.output_dir))
    names = cfg.organ_names()
    print(f"corpus: N={len(samples)} samples from {len(cfg.datasets)} dataset(s) -> {out}")
    print("annotation tallies: " + ", ".join(f"{names.get(c, c)}={n}" for c, n in enumerate(tallies)))
    print(f"manifest digest: {doc['digest'][:16]}")
    return EXIT_OK


def load_corpus(cfg: RunConfig):
    """Samples listed in the manifest, after checking it matches ``cfg``."""
    from .phantoms import Sample
    from .volume import load_raw

    root = Path(cfg.output_dir) / "corpus"
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise UserError(f"no corpus at {root}; run `fseft synth` first")
    doc = json.loads(mpath.read_text())
    if doc.get("corpus_hash") != stage_hash(cfg, "corpus"):
        raise UserError("corpus on disk was synthesised from a different config; rerun `fseft synth`")
    if doc.get("digest") != _manifest_digest(doc):
        raise UserError(f"manifest {mpath} is corrupt (digest mismatch)")
    corpus = []
    for rec in doc["samples"]:
        img, msk = root / rec["image"], root / rec["mask"]
        if _sha256(img) != rec["image_sha256"] or _sha256(msk) != rec["mask_sha256"]:
            raise UserError(f"corpus file for sample {rec['id']} does not match the manifest")
        corpus.append(
            Sample(load_raw(img), load_raw(msk), np.asarray(rec["w"], dtype=np.int64), rec["dataset"], tuple(rec["seed"]))
        )
    return corpus


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------


def checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / "pretrain" / "checkpoint.safetensors"


def cmd_pretrain(cfg: RunConfig, resume: bool = False) -> int:
    import torch

    from .engines import pretrain
    from .nets import Backbone, SegHead

    corpus = load_corpus(cfg)
    out = _ensure_writable(Path(cfg.output_dir) / "pretrain")
    torch.manual_seed(cfg.seed)
    backbone = Backbone(features=cfg.model.features, widths=cfg.model.widths)
    head = SegHead(cfg.model.features, cfg.n_classes)
    header = {
        "config_hash": cfg.config_hash(),
        "pretrain_hash": stage_hash(cfg, "pretrain"),
        "organ_names": {str(k): v for k, v in cfg.organ_names().items()},
        "preprocess": cfg.prep(),
    }
    state = out / "state.pt"
    if resume and state.exists():
        saved = torch.load(state, weights_only=False).get("header", {})
        if saved.get("pretrain_hash") != header["pretrain_hash"]:
            raise UserError("training state belongs to a different config; rerun without --resume")
    ckpt = pretrain(
        corpus, backbone, head, cfg.pretrain_config(),
        log_path=out / "log.jsonl", state_path=state, resume=resume, header=header,
    )
    path = checkpoint_path(cfg)
    ckpt.save(path)
    last = ckpt.curve[-1]
    print(f"pretrained {len(ckpt.curve)} epoch(s); final masked Dice loss {last['loss']:.4f} -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# adapt-eval
# ---------------------------------------------------------------------------


def cmd_adapt_eval(cfg: RunConfig, resume: bool = False) -> int:
    import shutil

    from .engines.benchmark import TaskFactory, run_benchmark, write_results
    from .nets import read_header

    ck = checkpoint_path(cfg)
    if not ck.exists():
        raise UserError(f"no checkpoint at {ck}; run `fseft pretrain` first")
    if read_header(ck).get("pretrain_hash") != stage_hash(cfg, "pretrain"):
        raise UserError("checkpoint was trained under a different config; rerun `fseft pretrain`")
    out = _ensure_writable(Path(cfg.output_dir) / "results")
    if not resume and (out / "cells").exists():
        shutil.rmtree(out / "cells")
    bcfg = cfg.benchmark_config()
    factory = TaskFactory(cfg.target_spec(), seed=cfg.seed, prep=cfg.prep(), query=cfg.query_spec())
    h = cfg.config_hash()
    result = run_benchmark(
        str(ck), factory, bcfg, out_dir=out, config_hash=h, workers=cfg.workers,
        resume=resume, organ_names=cfg.organ_names(),
    )
    write_results(result, out, {"seed": cfg.seed, "checkpoint": str(ck), "config": cfg.to_dict()})
    _write_resolved(cfg, Path(cfg.output_dir))
    print(result.summary())
    failed = [r for r in result.rows if r.get("status") != "ok"]
    print(f"\n{len(result.rows)} cell(s) -> {out / 'results.csv'} (config {h})")
    if failed:
        print(f"{len(failed)} cell(s) failed; see the status column", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def read_result_rows(dirs) -> list[dict]:
    files = []
    for d in dirs:
        d = Path(d)
        if d.is_file():
            files.append(d)
        elif d.is_dir():
            files.extend(sorted(d.rglob("results.csv")))
    rows = []
    for f in files:
        with open(f, newline="") as fh:
            for r in csv.DictReader(fh):
                r["_source"] = str(f)
                rows.append(r)
    return rows


def _mean(vals):
    vals = [v for v in vals if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def _ok(rows):
    return [r for r in rows if r.get("status") == "ok"]


def plot_dsc_vs_k(rows, organ_names=None):
    """One panel per method, one curve per organ: mean DSC over folds vs K."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .engines.benchmark import group_label

    organ_names = organ_names or {}
    rows = _ok(rows)
    methods = sorted({group_label(r["strategy"], r["gamma"]) for r in rows})
    fig, axes = plt.subplots(1, max(1, len(methods)), figsize=(4 * max(1, len(methods)), 3.2), squeeze=False)
    for ax, m in zip(axes[0], methods):
        sub = [r for r in rows if group_label(r["strategy"], r["gamma"]) == m]
        ks = sorted({int(r["K"]) for r in sub})
        for organ in sorted({int(r["organ"]) for r in sub}):
            ys = [_mean([float(r["dsc"]) for r in sub if int(r["organ"]) == organ and int(r["K"]) == k]) for k in ks]
            ax.plot(ks, ys, marker="o", label=str(organ_names.get(organ, organ)))
        ax.set_xticks(ks)
        ax.set_title(m)
        ax.set_xlabel("K (shots)")
        ax.set_ylabel("DSC")
        ax.set_ylim(0, 1)
        ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def plot_dsc_vs_gamma(rows):
    """Mean ADAPTER_TI DSC vs margin, one curve per K; dashed = ADAPTER."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = _ok(rows)
    ti = [r for r in rows if r["strategy"] == "ADAPTER_TI" and r["gamma"] not in ("", None)]
    if not ti:
        return None
    gammas = sorted({float(r["gamma"]) for r in ti})
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for k in sorted({int(r["K"]) for r in ti}):
        ys = [_mean([float(r["dsc"]) for r in ti if int(r["K"]) == k and float(r["gamma"]) == g]) for g in gammas]
        (line,) = ax.plot(gammas, ys, marker="o", label=f"ADAPTER_TI K={k}")
        base = [float(r["dsc"]) for r in rows if r["strategy"] == "ADAPTER" and int(r["K"]) == k]
        if base:
            ax.axhline(_mean(base), ls="--", color=line.get_color(), label=f"ADAPTER K={k}")
    ax.set_xticks(gammas)
    ax.set_xticklabels([f"{g:g}" for g in gammas])
    ax.set_xlabel("margin gamma")
    ax.set_ylabel("DSC")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def render_markdown(rows, organ_names=None, images=()) -> str:
    from .engines.benchmark import CSV_FIELDS, summary_table

    hashes = sorted({r.get("config_hash", "") for r in rows})
    ok = _ok(rows)
    lines = ["# Few-shot adaptation report", ""]
    lines.append(f"Config hash(es): {', '.join(f'`{h}`' for h in hashes)}  ")
    lines.append(f"Cells: {len(rows)} ({len(rows) - len(ok)} failed)")
    lines += ["", "## Summary (mean DSC over folds)", "", "```", summary_table(ok, organ_names) if ok else "(no successful cells)", "```", ""]
    for img in images:
        lines.append(f"![{Path(img).stem}]({Path(img).name})")
    lines += ["", "## All cells", ""]
    lines.append("| " + " | ".join(CSV_FIELDS) + " |")
    lines.append("|" + "---|" * len(CSV_FIELDS))
    for r in rows:
        lines.append("| " + " | ".join(r.get(k, "").replace("|", "\\|") for k in CSV_FIELDS) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(cfg: RunConfig, results=None, force: bool = False) -> int:
    dirs = results or [Path(cfg.output_dir) / "results"]
    rows = read_result_rows(dirs)
    if not rows:
        raise UserError(f"no results.csv found under {', '.join(str(d) for d in dirs)}")
    hashes = {r.get("config_hash", "") for r in rows}
    if len(hashes) > 1 and not force:
        raise UserError(f"results come from {len(hashes)} different configs ({', '.join(sorted(hashes))}); use --force to merge")
    out = _ensure_writable(Path(cfg.output_dir) / "report")
    names = cfg.organ_names()
    images = []
    fig = plot_dsc_vs_k(rows, names)
    fig.savefig(out / "dsc_vs_k.png", dpi=100)
    images.append(out / "dsc_vs_k.png")
    fig = plot_dsc_vs_gamma(rows)
    if fig is not None:
        fig.savefig(out / "dsc_vs_gamma.png", dpi=100)
        images.append(out / "dsc_vs_gamma.png")
    (out / "report.md").write_text(render_markdown(rows, names, images))
    print(f"report: {len(rows)} cell(s) -> {out / 'report.md'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML or JSON run config (default: built-in desk config)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="global seed (overrides seed)")
    common.add_argument("--workers", type=int, help="parallel benchmark workers (1 = deterministic)")
    common.add_argument("--resume", action="store_true", help="continue from saved state / finished cells")
    common.add_argument("--debug", action="store_true", help="show tracebacks")
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="fseft", description=__doc__.split("\n\n")[0].strip())
    p.add_argument("--version", action="version", version=f"fseft {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="synthesise the phantom pretraining corpus")
    sub.add_parser("pretrain", parents=[common], help="pretrain backbone + head on the corpus")
    sub.add_parser("adapt-eval", parents=[common], help="run the few-shot benchmark")
    rp = sub.add_parser("report", parents=[common], help="markdown summary and plots from result CSVs")
    rp.add_argument("results", nargs="*", type=Path, help="result dirs or CSV files (default: <out>/results)")
    rp.add_argument("--force", action="store_true", help="merge results with different config hashes")
    return p


def _run(args) -> int:
    cfg = load_config(args.config, overrides={"output_dir": args.out, "seed": args.seed, "workers": args.workers})
    if args.command == "synth":
        return cmd_synth(cfg)
    if args.command == "pretrain":
        return cmd_pretrain(cfg, resume=args.resume)
    if args.command == "adapt-eval":
        return cmd_adapt_eval(cfg, resume=args.resume)
    if args.command == "report":
        return cmd_report(cfg, args.results, force=args.force)
    raise UserError(f"unknown command {args.command}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USER
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        import torch

        if args.workers in (None, 1):
            torch.set_num_threads(1)
        return _run(args)
    except (UserError, ConfigError, InvalidArgument, SpecInfeasible) as exc:
        print(f"fseft {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except KeyboardInterrupt:
        print(f"fseft {args.command}: interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        if args.debug:
            traceback.print_exc()
        print(f"fseft {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

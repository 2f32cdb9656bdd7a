"""Command-line entry point: ``saghog <command> ...``."""

from __future__ import annotations

import argparse
import base64
import html
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import artifacts, pipeline
from .artifacts import ChainMismatch, artifact_meta, check_chain, check_model_dims, load_meta, write_sidecar
from .autodiff import load_checkpoint, save_checkpoint
from .config import DATA_KEYS, PipelineConfig, dump_toml, load_config
from .curation import CurationRules, Manifest, MissingSidecar, build_manifest
from .imaging import read_image
from .model import WriterNet
from .retrieval import WhiteningModel, evaluate, rank_all, read_store, write_store
from .training import PseudoLabels, finetune, pretrain

logger = logging.getLogger("saghog")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_EMPTY = 2
EXIT_SIDECAR = 3
EXIT_MISMATCH = 4


class CommandError(RuntimeError):
    def __init__(self, msg: str, code: int = EXIT_ERROR):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def resolve_config(args) -> PipelineConfig:
    overrides = {"seed": args.seed, "workers": args.workers}
    if getattr(args, "regime", None):
        overrides["regime"] = args.regime
    if getattr(args, "freeze_backbone", False):
        overrides["freeze_backbone"] = True
    cfg = load_config(args.config, args.profile, **overrides)
    logger.info("resolved configuration (hash %s):\n%s", cfg.hash(), dump_toml(cfg))
    return cfg


def read_manifest(path: str, cfg: PipelineConfig, force: bool) -> Manifest:
    meta = load_meta(path)
    diff = check_chain(meta, cfg, f"manifest {path}", DATA_KEYS, force)
    if diff:
        logger.warning("manifest settings differ (%s); continuing because of --force", ", ".join(diff))
    return Manifest.from_jsonl(path)


def _require(path: str | None, what: str) -> None:
    if path is not None and not Path(path).exists():
        raise CommandError(f"{what} {path} does not exist")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: PipelineConfig) -> int:
    from .synthetic import make_corpus, write_corpus

    corpus = make_corpus(args.writers, args.pages, seed=cfg.seed, size=(args.size, args.size), prefix=args.prefix)
    write_corpus(args.out, corpus)
    print(f"wrote {len(corpus)} pages of {args.writers} writers to {args.out}")
    return EXIT_OK


def cmd_curate(args, cfg: PipelineConfig) -> int:
    _require(args.masks, "mask directory")
    try:
        manifest = build_manifest(
            args.in_dir, CurationRules.from_config(cfg), cfg.val_fraction, cfg.seed,
            masks_dir=args.masks, mask_out_dir=args.mask_out, workers=cfg.workers,
        )
    except MissingSidecar as exc:
        raise CommandError(str(exc), EXIT_SIDECAR) from exc
    out = Path(args.out)
    manifest.to_jsonl(out)
    admitted = manifest.admitted()
    write_sidecar(out, artifact_meta("manifest", cfg, n_pages=len(manifest.records), n_admitted=len(admitted),
                                     unreadable=[p for p, _ in manifest.unreadable]))
    print(f"{len(admitted)} of {len(manifest.records)} pages admitted; manifest written to {out}")
    for path, err in manifest.unreadable:
        print(f"unreadable: {path} ({err})", file=sys.stderr)
    if not admitted:
        raise CommandError("no page was admitted", EXIT_EMPTY)
    return EXIT_OK


def cmd_cluster(args, cfg: PipelineConfig) -> int:
    if args.k is not None:
        cfg = cfg.with_overrides(cluster_k=args.k)
    manifest = read_manifest(args.manifest, cfg, args.force)
    refs = pipeline.page_refs(manifest, "train")
    if not refs:
        raise CommandError("manifest has no admitted training pages", EXIT_EMPTY)
    labels = pipeline.cluster_pages(refs, cfg, cfg.workers)
    labels.to_jsonl(args.out)
    write_sidecar(args.out, artifact_meta("pseudo_labels", cfg, k=labels.k, n_patches=len(labels.patch_ids),
                                          n_kept=int(labels.kept.sum())))
    print(f"{int(labels.kept.sum())} of {len(labels.patch_ids)} patches kept over k={labels.k} clusters")
    return EXIT_OK


def cmd_pretrain(args, cfg: PipelineConfig) -> int:
    if args.epochs is not None:
        cfg = cfg.with_overrides(pretrain_epochs=args.epochs)
    manifest = read_manifest(args.manifest, cfg, args.force)
    refs = pipeline.page_refs(manifest, "train")
    if not refs:
        raise CommandError("manifest has no admitted training pages", EXIT_EMPTY)
    ckpt_dir = artifacts.cache_dir() / f"pretrain_{cfg.hash()}"

    def save(path, trainer, epoch):
        artifacts.save_model(path, trainer.model, cfg, "mae", trainer.opt.state, epoch=epoch)

    result = pretrain(refs, cfg, cfg.workers, checkpoint_dir=ckpt_dir, save=save)
    artifacts.save_model(args.out, result.model, cfg, "mae", result.optimizer.state,
                         epoch=cfg.pretrain_epochs, epoch_losses=result.epoch_losses)
    result.log.to_csv(args.log or f"{args.out}.log.csv")
    print(f"pretrained {cfg.pretrain_epochs} epochs; loss {result.epoch_losses[0]:.4f} -> {result.epoch_losses[-1]:.4f}")
    return EXIT_OK


def cmd_finetune(args, cfg: PipelineConfig) -> int:
    if args.epochs is not None:
        cfg = cfg.with_overrides(finetune_epochs=args.epochs)
    # cheap checks first: nothing is loaded or computed before they pass
    if cfg.regime == "cls" and not args.labels:
        raise CommandError("regime 'cls' needs a pseudo-label file: run `saghog cluster MANIFEST --out labels.jsonl` "
                           "and pass --labels labels.jsonl")
    _require(args.labels, "pseudo-label file")
    _require(args.init, "initial checkpoint")
    init_meta = None
    if args.init:
        init_meta = load_meta(args.init)
        check_model_dims(init_meta, cfg, f"checkpoint {args.init}")
        check_chain(init_meta, cfg, f"checkpoint {args.init}", force=args.force)
    if args.labels:
        check_chain(load_meta(args.labels), cfg, f"pseudo-label file {args.labels}", DATA_KEYS, args.force)
    manifest = read_manifest(args.manifest, cfg, args.force)
    refs = pipeline.page_refs(manifest, "train")
    if not refs:
        raise CommandError("manifest has no admitted training pages", EXIT_EMPTY)

    model = WriterNet(cfg.vit(), np.random.default_rng([cfg.seed, 5]))
    if args.init:
        params, _, _ = load_checkpoint(args.init)
        model.encoder.load_state_dict(artifacts.encoder_state(params))
    if cfg.regime == "cls":
        train, labels = pipeline.pseudo_label_set(refs, PseudoLabels.from_jsonl(args.labels), cfg)
    else:
        train, labels = pipeline.supervised_set(refs, cfg, cfg.workers)
    val_refs = pipeline.page_refs(manifest, "val")
    val = pipeline.eval_pages(val_refs, cfg, cfg.workers) if len(val_refs) > 1 else None
    if val is None:
        logger.warning("fewer than two validation pages; early stopping disabled")
    result = finetune(model, train, labels, cfg, val)
    artifacts.save_model(args.out, model, cfg, "writer", regime=cfg.regime, frozen=cfg.freeze_backbone,
                         init=None if init_meta is None else init_meta.get("config_hash"),
                         best_epoch=result.best_epoch, val_maps=result.val_maps)
    result.log.to_csv(args.log or f"{args.out}.log.csv")
    best = f"; best validation mAP {max(result.val_maps):.4f} at epoch {result.best_epoch}" if result.val_maps else ""
    print(f"finetuned on {len(train)} patches, {len(np.unique(labels))} classes{best}")
    return EXIT_OK


def _save_whitening(path: Path, w: WhiteningModel) -> None:
    save_checkpoint(path, {"mean": w.mean, "projection": w.projection, "eigenvalues": w.eigenvalues},
                    {"kind": "whitening", "eps": w.eps})


def cmd_encode(args, cfg: PipelineConfig) -> int:
    _require(args.model, "model checkpoint")
    meta = load_meta(args.model)
    if meta.get("kind") != "writer":
        raise CommandError(f"{args.model} is a '{meta.get('kind')}' checkpoint; encode needs a finetuned model")
    check_model_dims(meta, cfg, f"checkpoint {args.model}")
    check_chain(meta, cfg, f"checkpoint {args.model}", force=args.force)
    if cfg.whiten and not args.fit:
        raise CommandError("whitening is enabled: pass --fit MANIFEST with training pages (or set whiten = false)")
    manifest = read_manifest(args.manifest, cfg, args.force)
    refs = pipeline.page_refs(manifest, args.split)
    if len(refs) < 2:
        raise CommandError("need at least two admitted pages to encode", EXIT_EMPTY)
    model, _ = artifacts.load_model(args.model)
    whitening = None
    if cfg.whiten:
        fit_refs = pipeline.page_refs(read_manifest(args.fit, cfg, args.force), "train")
        held = {r.page_id for r in refs} & {r.page_id for r in fit_refs}
        if held:
            logger.warning("%d encoded pages are also whitening training pages", len(held))
        whitening = pipeline.fit_page_whitening(model, pipeline.eval_pages(fit_refs, cfg, cfg.workers), cfg)
        _save_whitening(Path(f"{args.out}.whitening.sgck"), whitening)
    x = pipeline.global_descriptors(model, pipeline.eval_pages(refs, cfg, cfg.workers), cfg, whitening)
    extra = [{"writer_id": r.writer_id, "path": r.path} for r in refs]
    write_store(args.out, [r.page_id for r in refs], x.astype(np.float32), extra)
    write_sidecar(args.out, artifact_meta("descriptors", cfg, model=meta.get("config_hash"), dim=int(x.shape[1]),
                                          whitened=whitening is not None))
    print(f"encoded {len(refs)} pages into {x.shape[1]}-d descriptors")
    return EXIT_OK


def cmd_eval(args, cfg: PipelineConfig) -> int:
    _require(args.store, "descriptor store")
    recs, x = read_store(args.store)
    ids = [r["page_id"] for r in recs]
    key = "writer_id" if args.task == "writer" else "source_page"
    labels = {r["page_id"]: r.get(key, r["page_id"]) for r in recs}
    ranked = rank_all(x.astype(np.float64), ids)
    metrics = evaluate(ranked, labels, args.task)
    Path(args.out).write_text(json.dumps(metrics, sort_keys=True, indent=1) + "\n")
    if args.ranks:
        path_of = {r["page_id"]: r.get("path") for r in recs}
        lines = []
        for r in ranked:
            top = [
                {"id": g, "score": round(float(s), 6), "hit": labels[g] == labels[r.query], "path": path_of[g]}
                for g, s in zip(r.ids[:args.top_k], r.scores[:args.top_k])
            ]
            lines.append(json.dumps({"query": r.query, "label": labels[r.query], "path": path_of[r.query],
                                     "results": top}, sort_keys=True))
        Path(args.ranks).write_text("\n".join(lines) + "\n")
    print(f"{args.task} retrieval: mAP {metrics['map']:.4f}, Top-1 {metrics['top1']:.4f} over {metrics['n_queries']} queries")
    return EXIT_OK


def _thumbnail(path: str | None, height: int) -> str:
    if not path or not Path(path).exists():
        return ""
    img = Image.fromarray(read_image(path))
    w = max(1, round(img.width * height / img.height))
    buf = io.BytesIO()
    img.resize((w, height), Image.BILINEAR).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode()


def cmd_report(args, cfg: PipelineConfig) -> int:
    _require(args.ranks, "rank-list dump")
    rows = [json.loads(l) for l in Path(args.ranks).read_text().splitlines() if l.strip()]
    rows = rows[:args.queries] if args.queries else rows
    parts = [
        "<!DOCTYPE html>", "<html><head><meta charset='utf-8'><title>Retrieval report</title>",
        "<style>body{font-family:sans-serif} td{padding:4px;text-align:center;font-size:11px}"
        " img{display:block;margin:auto} .hit{border:4px solid #2a2} .miss{border:4px solid #c22}"
        " .query{border:4px solid #888}</style></head><body>",
        f"<h1>Retrieval report</h1><p>{len(rows)} queries, top {args.top_k} neighbours each.</p><table>",
    ]
    for r in rows:
        cells = [f"<td class='query'><img src='{_thumbnail(r.get('path'), args.height)}'>"
                 f"{html.escape(r['query'])}<br>{html.escape(str(r['label']))}</td>"]
        for g in r["results"][:args.top_k]:
            cls = "hit" if g["hit"] else "miss"
            cells.append(f"<td class='{cls}'><img src='{_thumbnail(g.get('path'), args.height)}'>"
                         f"{html.escape(g['id'])}<br>{g['score']:.3f}</td>")
        parts.append("<tr>" + "".join(cells) + "</tr>")
    parts.append("</table></body></html>")
    Path(args.out).write_text("\n".join(parts) + "\n")
    print(f"report with {len(rows)} queries written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--profile", choices=["paper", "desk"], help="default profile (file value otherwise, then paper)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--workers", type=int, help="parallel page workers (1 = bit-exact determinism)")
    common.add_argument("--force", action="store_true", help="accept upstream artifacts made with other settings")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="saghog", description="Writer retrieval with masked-HOG pretrained ViTs.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic handwriting corpus")
    s.add_argument("out")
    s.add_argument("--writers", type=int, default=20)
    s.add_argument("--pages", type=int, default=5)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--prefix", default="w")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("curate", parents=[common], help="filter masks, admit pages, write the manifest")
    s.add_argument("in_dir")
    s.add_argument("--out", required=True)
    s.add_argument("--masks", help="directory of candidate masks with .json confidence sidecars")
    s.add_argument("--mask-out", help="where to write accepted mask unions")
    s.set_defaults(func=cmd_curate)

    s = sub.add_parser("cluster", parents=[common], help="Cl-S pseudo-labels from SIFT k-means")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int)
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("pretrain", parents=[common], help="masked-HOG pretraining")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--log")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common], help="metric-learning finetuning with NetRVLAD")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="pretrained checkpoint (omit to start from random weights)")
    s.add_argument("--regime", choices=["supervised", "cls"])
    s.add_argument("--labels", help="pseudo-label file for --regime cls")
    s.add_argument("--freeze-backbone", action="store_true")
    s.add_argument("--epochs", type=int)
    s.add_argument("--log")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("encode", parents=[common], help="global page descriptors")
    s.add_argument("manifest")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=["train", "val"], help="encode only this split (default: all admitted)")
    s.add_argument("--fit", help="manifest whose training pages fit the whitening")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("eval", parents=[common], help="leave-one-out mAP and Top-1")
    s.add_argument("store")
    s.add_argument("--out", required=True)
    s.add_argument("--task", choices=["writer", "page"], default="writer")
    s.add_argument("--ranks", help="also dump the top-k rank lists (JSON lines)")
    s.add_argument("--top-k", type=int, default=10)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", parents=[common], help="HTML grid of queries and their neighbours")
    s.add_argument("ranks")
    s.add_argument("--out", required=True)
    s.add_argument("--top-k", type=int, default=5)
    s.add_argument("--queries", type=int, default=0, help="limit the number of queries shown")
    s.add_argument("--height", type=int, default=96)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ChainMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (KeyError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

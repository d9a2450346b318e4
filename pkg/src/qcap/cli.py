"""Command-line entry point: ``qcap <command> [options]``.

Configuration precedence is command-line flags, then ``--config`` file
(flat ``key = value`` lines), then built-in defaults. Each command writes its
outputs to ``--out`` or to ``<runs_dir>/<command>-<config hash>``, together
with ``run.json`` holding the fully resolved configuration.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

log = logging.getLogger("qcap")


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    runs_dir: str = "runs"
    size: int = 64
    # training
    epochs: int = 50
    batch_size: int = 16
    warmup_epochs: float = 2.0
    lr_warmup: float = 1.0e-5
    lr_peak: float = 2.0e-4
    lr_floor: float = 1.0e-6
    weight_decay: float = 0.02
    grad_clip: float = 0.0
    augment: bool = True
    val_fraction: float = 0.1
    limit: int = 0
    # model
    patch_size: int = 8
    embed_dim: int = 128
    n_heads: int = 4
    n_image_layers: int = 4
    n_text_encoder_layers: int = 2
    n_decoder_layers: int = 2
    max_seq_len: int = 96
    dropout: float = 0.1
    # chat endpoint
    llm_base_url: str = ""
    llm_model: str = "gpt-3.5-turbo"
    llm_timeout: float = 30.0

    def model_config(self):
        from .captioner import ModelConfig

        return ModelConfig(image_size=self.size, patch_size=self.patch_size, embed_dim=self.embed_dim,
                           n_heads=self.n_heads, n_image_layers=self.n_image_layers,
                           n_text_encoder_layers=self.n_text_encoder_layers,
                           n_decoder_layers=self.n_decoder_layers, max_seq_len=self.max_seq_len,
                           dropout=self.dropout, seed=self.seed)

    def train_config(self):
        from .training import TrainConfig

        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, warmup_epochs=self.warmup_epochs,
                           lr_warmup=self.lr_warmup, lr_peak=self.lr_peak, lr_floor=self.lr_floor,
                           weight_decay=self.weight_decay, grad_clip=self.grad_clip or None,
                           seed=self.seed, augment=self.augment, val_fraction=self.val_fraction)


class UsageError(Exception):
    pass


def _coerce(name: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return type(default)(raw.strip())
    except ValueError:
        raise UsageError(f"{name}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve_config(config_path: str | None, overrides: dict[str, str]) -> RunConfig:
    defaults = RunConfig()
    known = {f.name: getattr(defaults, f.name) for f in fields(RunConfig)}
    raw: dict[str, str] = {}
    if config_path:
        try:
            raw.update(parse_config_text(Path(config_path).read_text()))
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
    raw.update(overrides)
    values = {}
    for key, value in raw.items():
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value, known[key])
    return dataclasses.replace(defaults, **values)


def _config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:10]


def prepare_run(name: str, cfg: RunConfig, args: dict, out: str | None) -> Path:
    payload = {"command": name, "args": args, "config": dataclasses.asdict(cfg)}
    run_dir = Path(out) if out else Path(cfg.runs_dir) / f"{name}-{_config_hash(payload)}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return run_dir


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest_path(data: str) -> Path:
    p = Path(data)
    if p.is_dir():
        p = p / "manifest.jsonl"
    if not p.exists():
        raise FileNotFoundError(f"no dataset manifest at {p}; run 'qcap gen-data' first")
    return p


def _load(data: str, split: str | None, limit: int):
    from .data import load_split

    return load_split(_manifest_path(data), split, limit or None)


def _read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_jsonl(path: Path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


# commands -------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig, run_dir: Path) -> int:
    from .data import DatasetConfig, build_dataset

    manifest = build_dataset(DatasetConfig(out_dir=str(run_dir), seed=cfg.seed, size=cfg.size))
    counts = {}
    for line in manifest.read_text().splitlines():
        split = json.loads(line)["split"]
        counts[split] = counts.get(split, 0) + 1
    print(json.dumps({"manifest": str(manifest), "samples": counts}))
    return 0


def _groups(records):
    return [r["id"].rsplit("_", 1)[0] for r in records]


def cmd_train(args, cfg: RunConfig, run_dir: Path) -> int:
    from .training import split_validation

    records, pixels = _load(args.data or cfg.data_dir, "train", cfg.limit)
    if not records:
        raise ValueError("training split is empty")
    tr, va = split_validation(_groups(records), cfg.val_fraction, cfg.seed)
    tcfg = cfg.train_config()
    ckpt = run_dir / "model.ckpt"
    t0 = time.perf_counter()
    if args.model == "captioner":
        from .captioner import CaptionModel, train

        model = CaptionModel(cfg.model_config())
        caps = [r["caption"] for r in records]
        result = train(model, pixels[tr], [caps[i] for i in tr], tcfg,
                       val=(pixels[va], [caps[i] for i in va]), checkpoint_path=ckpt)
    else:
        from .baselines import ClipStyleModel, MultiHeadModel, save_baseline, train_baseline
        from .data import record_scores

        if args.model == "clip":
            if args.init_from:
                from .captioner import CaptionModel

                model = ClipStyleModel.from_captioner(CaptionModel.load(args.init_from))
            else:
                model = ClipStyleModel(cfg.model_config())
        else:
            model = MultiHeadModel("categorical" if args.model == "vitc" else "scalar", cfg.model_config())
        if args.frozen:
            save_baseline(model, ckpt)
            print(json.dumps({"checkpoint": str(ckpt), "frozen": True}))
            return 0
        scores = [record_scores(r) for r in records]
        result = train_baseline(model, pixels[tr], [scores[i] for i in tr], tcfg,
                                val=(pixels[va], [scores[i] for i in va]), checkpoint_path=ckpt)
    _write_json(run_dir / "train_log.json", result.as_dict())
    _write_json(run_dir / "timing.json", {"seconds": time.perf_counter() - t0,
                                          "epochs": [e.get("seconds") for e in result.epochs]})
    print(json.dumps({"checkpoint": str(ckpt), "best_epoch": result.best_epoch,
                      "best_val_loss": result.best_val_loss}))
    return 0


def cmd_caption(args, cfg: RunConfig, run_dir: Path) -> int:
    from .captioner import CaptionModel, generate_captions

    model = CaptionModel.load(args.checkpoint)
    records, pixels = _load(args.data or cfg.data_dir, args.split, cfg.limit)
    gens = generate_captions(model, pixels) if records else []
    rows = [{"id": r["id"], "caption": g.text, "truncated": g.truncated} for r, g in zip(records, gens)]
    _write_jsonl(run_dir / "captions.jsonl", rows)
    print(json.dumps({"captions": str(run_dir / "captions.jsonl"), "n": len(rows)}))
    return 0


def _decode_prediction(row: dict):
    """ScoreVector (or None) and continuous values from a caption or score record."""
    from .metrics import scores_as_array
    from .template import ScoreVector, Unparseable, fuzzy_decode

    if "scores" in row and row["scores"] is not None:
        sv = ScoreVector.from_list(row["scores"])
        values = row.get("values") or [np.nan if v is None else v for v in sv.as_list()]
        return sv, [np.nan if v is None else float(v) for v in values]
    if "caption" in row:
        try:
            sv, _ = fuzzy_decode(row["caption"])
        except Unparseable:
            return None, [np.nan] * 4
        return sv, scores_as_array([sv])[0].tolist()
    raise ValueError(f"record {row.get('id')!r} has neither scores nor caption")


def _score_report(pred_rows: list[dict], manifest_rows: list[dict]):
    from .data import record_scores
    from .metrics import MetricReport, correlation_grid, score_accuracy

    truth_by_id = {r["id"]: r for r in manifest_rows}
    missing = [p["id"] for p in pred_rows if p["id"] not in truth_by_id]
    if missing:
        raise ValueError(f"{len(missing)} predictions have ids not in the manifest, e.g. {missing[0]!r}")
    truth = [record_scores(truth_by_id[p["id"]]) for p in pred_rows]
    levels = [truth_by_id[p["id"]]["level"] for p in pred_rows]
    decoded = [_decode_prediction(p) for p in pred_rows]
    preds = [d[0] for d in decoded]
    values = np.array([d[1] for d in decoded], dtype=float).reshape(len(decoded), 4)
    overall, grid = score_accuracy(preds, truth, levels)
    corr = correlation_grid(values, truth)
    return MetricReport(accuracy=overall, by_level=grid, plcc=corr["plcc"], srocc=corr["srocc"],
                        decode_rate=sum(p is not None for p in preds) / len(preds), n=len(preds))


def cmd_eval_captions(args, cfg: RunConfig, run_dir: Path) -> int:
    from .data import load_manifest
    from .metrics import EvalPair, caption_metrics

    manifest = load_manifest(_manifest_path(args.data or cfg.data_dir))
    preds = _read_jsonl(args.predictions)
    if not preds:
        raise ValueError("no predictions")
    report = _score_report(preds, manifest)
    by_id = {r["id"]: r for r in manifest}
    pairs = [EvalPair.from_text(p["caption"], by_id[p["id"]]["caption"]) for p in preds]
    cm = caption_metrics(pairs)
    report.bleu = [cm[f"bleu_{n}"] for n in range(1, 5)]
    report.rouge_l, report.meteor, report.cider = cm["rouge_l"], cm["meteor"], cm["cider"]
    _write_json(run_dir / "metrics.json", report.as_dict())
    print(json.dumps({"metrics": str(run_dir / "metrics.json"), "mean_accuracy": report.mean_accuracy,
                      "decode_rate": report.decode_rate}))
    return 0


def cmd_eval_scores(args, cfg: RunConfig, run_dir: Path) -> int:
    from .data import load_manifest

    manifest = load_manifest(_manifest_path(args.data or cfg.data_dir))
    if args.checkpoint:
        from .baselines import load_baseline, predict_scores

        records, pixels = _load(args.data or cfg.data_dir, args.split, cfg.limit)
        model = load_baseline(args.checkpoint)
        preds, values = predict_scores(model, pixels)
        rows = [{"id": r["id"], "scores": p.as_list(), "values": [None if np.isnan(v) else float(v) for v in vals]}
                for r, p, vals in zip(records, preds, values)]
        _write_jsonl(run_dir / "predictions.jsonl", rows)
    elif args.predictions:
        rows = _read_jsonl(args.predictions)
        rows = [dict(r, values=[np.nan if v is None else v for v in r["values"]]) if r.get("values") else r
                for r in rows]
    else:
        raise UsageError("eval-scores needs --predictions or --checkpoint")
    if not rows:
        raise ValueError("no predictions")
    report = _score_report(rows, manifest)
    _write_json(run_dir / "metrics.json", report.as_dict())
    print(json.dumps({"metrics": str(run_dir / "metrics.json"), "accuracy": report.accuracy}))
    return 0


def cmd_attention(args, cfg: RunConfig, run_dir: Path) -> int:
    from .captioner import CaptionModel, export_attention, generate_caption, write_attention
    from .data import read_raster

    model = CaptionModel.load(args.checkpoint)
    image = read_raster(args.image)
    caption = args.caption or generate_caption(model, image).text
    record = export_attention(model, image, caption)
    record["caption"] = caption
    write_attention(record, run_dir / "attention.json")
    print(json.dumps({"attention": str(run_dir / "attention.json"), "tokens": len(record["tokens"])}))
    return 0


def _client(cfg: RunConfig, url: str | None):
    from .report import HttpChatClient

    base = url or cfg.llm_base_url
    return HttpChatClient(base, cfg.llm_model, cfg.llm_timeout) if base else None


def cmd_report(args, cfg: RunConfig, run_dir: Path) -> int:
    from .captioner import CaptionModel, generate_caption
    from .data import read_raster
    from .report import summarize_via_llm

    if args.caption:
        caption = args.caption
    else:
        if not (args.checkpoint and args.image):
            raise UsageError("report needs --caption or both --checkpoint and --image")
        caption = generate_caption(CaptionModel.load(args.checkpoint), read_raster(args.image)).text
    result = summarize_via_llm(_client(cfg, args.llm_url), caption, args.mode, cfg.llm_model)
    name = "scores.json" if args.mode == "score" else "report.txt"
    (run_dir / name).write_text(result.text if result.text.endswith("\n") else result.text + "\n")
    _write_json(run_dir / "result.json", {"caption": caption, **dataclasses.asdict(result)})
    sys.stdout.write(result.text if result.text.endswith("\n") else result.text + "\n")
    return 0


def cmd_chat(args, cfg: RunConfig, run_dir: Path) -> int:
    from .captioner import CaptionModel
    from .report import chat_repl

    model = CaptionModel.load(args.checkpoint)
    transcript = Path(args.transcript) if args.transcript else run_dir / "transcript.jsonl"
    return chat_repl(model, transcript, client=_client(cfg, args.llm_url), llm_model=cfg.llm_model)


def cmd_lexicon(args, cfg: RunConfig, run_dir: Path | None) -> int:
    from .template import lexicon_table

    print(json.dumps(lexicon_table(), indent=2))
    return 0


# parser ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default: a run-stamped directory)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="qcap", description="Image-quality captioning toolkit for synthetic CT phantoms.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")

    t = sub.add_parser("train", parents=[common], help="train the captioner or a baseline")
    t.add_argument("model", choices=["captioner", "vitc", "vitr", "clip"])
    t.add_argument("--data")
    t.add_argument("--epochs", type=int)
    t.add_argument("--limit", type=int, help="use only the first N training samples")
    t.add_argument("--init-from", help="clip: initialize towers from a captioner checkpoint")
    t.add_argument("--frozen", action="store_true", help="clip: save the initialized towers without training")

    c = sub.add_parser("caption", parents=[common], help="generate captions for a split")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data")
    c.add_argument("--split", default="test", choices=["train", "test"])
    c.add_argument("--limit", type=int)

    ec = sub.add_parser("eval-captions", parents=[common], help="caption and score metrics")
    ec.add_argument("--predictions", required=True, help="JSONL with id and caption")
    ec.add_argument("--data")

    es = sub.add_parser("eval-scores", parents=[common], help="score accuracy and correlations")
    es.add_argument("--predictions", help="JSONL with id and scores (or caption)")
    es.add_argument("--checkpoint", help="baseline checkpoint to predict with")
    es.add_argument("--data")
    es.add_argument("--split", default="test", choices=["train", "test"])
    es.add_argument("--limit", type=int)

    a = sub.add_parser("attention", parents=[common], help="export decoder attention maps")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--image", required=True)
    a.add_argument("--caption", help="caption to score (default: the generated caption)")

    r = sub.add_parser("report", parents=[common], help="score JSON or quality report")
    r.add_argument("--checkpoint")
    r.add_argument("--image")
    r.add_argument("--caption")
    r.add_argument("--mode", choices=["score", "report"], default="report")
    r.add_argument("--llm-url", help="chat-completions base URL (overrides llm_base_url)")

    ch = sub.add_parser("chat", parents=[common], help="interactive session on stdin")
    ch.add_argument("--checkpoint", required=True)
    ch.add_argument("--transcript")
    ch.add_argument("--llm-url")

    sub.add_parser("lexicon", parents=[common], help="print the caption lexicon")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "caption": cmd_caption,
    "eval-captions": cmd_eval_captions,
    "eval-scores": cmd_eval_scores,
    "attention": cmd_attention,
    "report": cmd_report,
    "chat": cmd_chat,
    "lexicon": cmd_lexicon,
}

# flags that map directly onto RunConfig keys
_FLAG_KEYS = ("seed", "epochs", "limit")
# flags recorded in run.json because they change the outputs
_ARG_KEYS = ("model", "data", "checkpoint", "split", "predictions", "image", "caption", "mode",
             "init_from", "frozen", "llm_url")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v
        for key in _FLAG_KEYS:
            value = getattr(args, key, None)
            if value is not None:
                overrides[key] = str(value)
        cfg = resolve_config(args.config, overrides)
    except UsageError as exc:
        print(f"qcap: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run_dir = None
        if args.command != "lexicon":
            recorded = {k: getattr(args, k) for k in _ARG_KEYS if getattr(args, k, None) not in (None, False)}
            run_dir = prepare_run(args.command if args.command != "train" else f"train-{args.model}",
                                  cfg, recorded, args.out)
        return COMMANDS[args.command](args, cfg, run_dir)
    except UsageError as exc:
        print(f"qcap: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"qcap: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

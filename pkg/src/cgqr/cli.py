"""Command-line entry points: synth, train, eval, xeval, predict, inspect."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import data as D
from .checkpoint import load_model
from .contours import extract_contours, write_contours_csv
from .encoder import EncoderConfig
from .errors import CGQRError, ConfigError, PreconditionError, ShapeError
from .evaluator import emit_panels, evaluate
from .model import ABLATIONS, ModelConfig, normalize_ablations
from .pnm import atomic_write_text, read_pnm, write_pnm
from .refinement import save_attention_trace
from .trainer import TrainConfig, forward_pass, init_state, train

log = logging.getLogger("cgqr")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

PROFILES = {
    "standard": dict(image_size=(256, 256), branch_channels=(32, 64, 128), n_stages=3, embed_dim=128,
                  epochs=100, tf_epochs=20, batch=4, lr=1e-4),
    "desk": dict(image_size=(64, 64), branch_channels=(16, 32, 64), n_stages=2, embed_dim=64,
                 epochs=200, tf_epochs=40, batch=4, lr=1e-3),
}

DEFAULTS = {
    "seed": 0, "profile": "standard", "lambda": 0.5, "mu_aux": 0.4, "weight_decay": 1e-4,
    "phase": "none", "split_ratio": 0.8, "report": "json", "aggregation": "micro",
    "patients": 10, "frames": 4, "classes": 3, "noise": 0.3, "contrast": 0.8,
    "domain_shift": 0.0, "split": "val", "boundary_thickness": 1,
}


class UsageError(CGQRError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Keys use underscores."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def parse_image_size(value) -> tuple:
    if isinstance(value, (tuple, list)):
        return tuple(int(v) for v in value)
    parts = str(value).lower().replace("x", ",").split(",")
    sizes = [int(p) for p in parts if p.strip()]
    if len(sizes) == 1:
        sizes *= 2
    if len(sizes) != 2 or min(sizes) < 1:
        raise ConfigError(f"bad image size {value!r}")
    return tuple(sizes)


class Settings:
    """Resolve a key as command-line flag > config file > profile > default."""

    def __init__(self, args, file_cfg: dict):
        self.args = vars(args)
        self.file = file_cfg
        profile = self._raw("profile")
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        self.profile = PROFILES[profile]

    def _raw(self, key):
        if self.args.get(key) is not None:
            return self.args[key]
        if key in self.file:
            return self.file[key]
        if key in DEFAULTS:
            return DEFAULTS[key]
        return None

    def get(self, key, cast=None):
        value = self.args.get(key)
        if value is None:
            value = self.file.get(key)
        if value is None:
            value = self.profile.get(key, DEFAULTS.get(key))
        if value is not None and cast is not None:
            try:
                value = cast(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {value!r}") from exc
        return value


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    return str(v).strip().lower() in ("1", "true", "yes", "on")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cgqr", description="Contour-guided query refinement segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, *flags):
        p.add_argument("--config", help="flat key=value settings file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        for f in flags:
            f(p)

    data = lambda p: p.add_argument("--data")
    ckpt = lambda p: p.add_argument("--checkpoint")
    size = lambda p: p.add_argument("--image-size", dest="image_size")
    panels = lambda p: p.add_argument("--emit-panels", dest="emit_panels", action="store_true", default=None)
    report = lambda p: p.add_argument("--report", choices=("json", "table", "csv"))

    p = sub.add_parser("synth", help="write a synthetic echo-like dataset")
    common(p, size)
    p.add_argument("--patients", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--contrast", type=float)
    p.add_argument("--domain-shift", dest="domain_shift", type=float)
    p.add_argument("--tag")

    p = sub.add_parser("train", help="train on a dataset directory")
    common(p, data, size)
    p.add_argument("--profile", choices=tuple(PROFILES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--tf-epochs", dest="tf_epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--mu-aux", dest="mu_aux", type=float)
    p.add_argument("--phase", choices=("ed", "es", "both", "none"))
    p.add_argument("--ablate", action="append", choices=ABLATIONS + tuple(a.replace("_", "-") for a in ABLATIONS))
    p.add_argument("--split-ratio", dest="split_ratio", type=float)
    p.add_argument("--val-on-train", dest="val_on_train", action="store_true", default=None,
                   help="validate on the training samples (overfit checks)")

    for name, helptext in (("eval", "evaluate a checkpoint"), ("xeval", "evaluate on an external domain")):
        p = sub.add_parser(name, help=helptext)
        common(p, data, ckpt, report, panels)
        p.add_argument("--aggregation", choices=("micro", "macro"))
        p.add_argument("--tag")
        if name == "eval":
            p.add_argument("--split", choices=("val", "train", "all"))
            p.add_argument("--split-ratio", dest="split_ratio", type=float)
            p.add_argument("--phase", choices=("ed", "es", "none"))

    p = sub.add_parser("predict", help="segment a single image")
    common(p, ckpt, panels)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", help="optional ground-truth mask for the panels")

    p = sub.add_parser("inspect", help="dump attention and contour diagnostics")
    common(p, ckpt, data)
    p.add_argument("--image")
    p.add_argument("--index", type=int, default=0)
    return parser


# --------------------------------------------------------------------------


def _require(settings: Settings, key: str, flag: str):
    value = settings.get(key)
    if value in (None, ""):
        raise UsageError(f"missing required option {flag}")
    return value


def _existing(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


def _dataset_classes(raws) -> int:
    return max(1, max(int(r.mask.max()) for r in raws))


def cmd_synth(s: Settings) -> int:
    out = Path(_require(s, "out", "--out"))
    cfg = D.SynthConfig(
        n_patients=s.get("patients", int), frames_per_patient=s.get("frames", int),
        image_size=parse_image_size(s.get("image_size") or 64), n_classes=s.get("classes", int),
        noise_level=s.get("noise", float), contrast=s.get("contrast", float),
        domain_shift=s.get("domain_shift", float), seed=s.get("seed", int),
    )
    D.write_synthetic(cfg, out, tag=s.get("tag"))
    print(json.dumps({"out": str(out), "patients": cfg.n_patients, "seed": cfg.seed}))
    return EXIT_OK


def _model_config(s: Settings, n_classes: int, ablations) -> ModelConfig:
    image_size = parse_image_size(s.get("image_size"))
    enc = EncoderConfig(branch_channels=tuple(s.get("branch_channels")), n_stages=s.get("n_stages", int))
    return ModelConfig(n_classes=n_classes, image_size=image_size, encoder=enc,
                       embed_dim=s.get("embed_dim", int), ablations=ablations)


def _ablations(s: Settings) -> frozenset:
    value = s.get("ablate")
    if isinstance(value, str):
        value = [v for v in value.replace(",", " ").split() if v]
    return normalize_ablations(value or ())


def cmd_train(s: Settings) -> int:
    root = _existing(_require(s, "data", "--data"), "dataset")
    out = Path(_require(s, "out", "--out"))
    raws = D.load_dataset(root)
    if not raws:
        raise PreconditionError(f"no samples found under {root}")
    n_classes = _dataset_classes(raws)
    ablations = _ablations(s)
    mcfg = _model_config(s, n_classes, ablations)
    phase = s.get("phase").lower()
    phases = {"both": ["ED", "ES"], "ed": ["ED"], "es": ["ES"], "none": [None]}[phase]
    seed = s.get("seed", int)
    summaries = []
    for ph in phases:
        subset = [r for r in raws if ph is None or r.phase == ph]
        subset = D.extract_frames(subset, drop_empty=True)
        if not subset:
            raise PreconditionError(f"no non-empty samples for phase {ph}")
        samples = [D.preprocess(r, mcfg.image_size, s.get("boundary_thickness", int)) for r in subset]
        if _bool(s.get("val_on_train") or False):
            split = D.DatasetSplit(train=samples, val=samples, split_ratio=1.0, seed=seed)
        else:
            split = D.split_by_patient(samples, s.get("split_ratio", float), seed)
        epochs = s.get("epochs", int)
        tcfg = TrainConfig(
            epochs=epochs, teacher_forcing_epochs=min(s.get("tf_epochs", int), epochs),
            batch_size=s.get("batch", int), lr0=s.get("lr", float), weight_decay=s.get("weight_decay", float),
            lam=s.get("lambda", float), mu_aux=s.get("mu_aux", float), seed=seed,
            phase=ph or "NONE", ablations=ablations,
        )
        run_dir = out / ph.lower() if ph is not None and len(phases) > 1 else out
        state = train(tcfg, split, mcfg, out_dir=run_dir)
        summaries.append({"phase": tcfg.phase, "out": str(run_dir), "epochs": state.epoch,
                          "best_val_dsc": state.best_val_dsc, "checksum": state.checksum(), "seed": seed})
    print(json.dumps(summaries if len(summaries) > 1 else summaries[0], sort_keys=True))
    return EXIT_OK


def _checkpoint_path(s: Settings) -> Path:
    p = Path(_require(s, "checkpoint", "--checkpoint"))
    if p.is_dir():
        p = p / "best.ckpt" if (p / "best.ckpt").exists() else p / "last.ckpt"
    return _existing(p, "checkpoint")


def _write_report(s: Settings, report, stem: str) -> None:
    fmt = s.get("report")
    text = report.render(fmt)
    out = s.get("out")
    if out:
        ext = {"json": "json", "table": "txt", "csv": "csv"}[fmt]
        atomic_write_text(Path(out) / f"{stem}.{ext}", text)
    sys.stdout.write(text)


def _emit_all(s: Settings, model, samples, sample_id: Optional[str] = None) -> None:
    out = Path(_require(s, "out", "--out")) / "panels"
    for sample in samples:
        bundle, _ = forward_pass(sample, model)
        contour_src = model.coarse_mask(bundle.coarse_probs)[0] if bundle.coarse_probs is not None \
            else bundle.refined_probs[0].argmax(dim=0)
        contours = extract_contours(contour_src.numpy(), model.cfg.n_contour_points, model.cfg.n_classes)
        emit_panels(sample, bundle, contours, out, sample_id=sample_id, n_classes=model.cfg.n_classes)


def _evaluate_cmd(s: Settings, external: bool) -> int:
    ckpt = _checkpoint_path(s)
    root = _existing(_require(s, "data", "--data"), "dataset")
    model, manifest = load_model(ckpt)
    raws = D.load_dataset(root)
    if not external:
        phase = (s.get("phase") or "none").lower()
        if phase != "none":
            raws = [r for r in raws if r.phase == phase.upper()]
    raws = D.extract_frames(raws, drop_empty=False)
    samples = [D.preprocess(r, model.cfg.image_size) for r in raws]
    split_name = "all" if external else s.get("split")
    if split_name != "all":
        split = D.split_by_patient(samples, s.get("split_ratio", float), s.get("seed", int))
        samples = split.val if split_name == "val" else split.train
    tag = s.get("tag") or D.read_manifest(root).get("tag") or root.resolve().name
    echo = json.dumps({"checkpoint": ckpt.name, "epoch": manifest.get("epoch"), "split": split_name,
                       "seed": s.get("seed", int)}, sort_keys=True)
    report = evaluate(model, samples, tag, model.cfg.n_classes, s.get("aggregation"), config_echo=echo)
    _write_report(s, report, "xeval_report" if external else "eval_report")
    if _bool(s.get("emit_panels") or False):
        _emit_all(s, model, samples)
    return EXIT_OK


def _single_sample(s: Settings, model, image_path, mask_path=None) -> D.ImageSample:
    image = read_pnm(_existing(image_path, "image")).astype(np.float64)
    mask = read_pnm(_existing(mask_path, "mask")).astype(np.int64) if mask_path else np.zeros(image.shape, np.int64)
    raw = D.RawSample(image=image, mask=mask, patient_id=Path(image_path).stem)
    return D.preprocess(raw, model.cfg.image_size)


def cmd_predict(s: Settings) -> int:
    model, _ = load_model(_checkpoint_path(s))
    out = Path(_require(s, "out", "--out"))
    sample = _single_sample(s, model, s.get("image"), s.get("mask"))
    bundle, _ = forward_pass(sample, model)
    labels = bundle.refined_probs[0].argmax(dim=0).numpy().astype(np.uint8)
    stem = Path(s.get("image")).stem
    write_pnm(out / f"{stem}_pred.pgm", labels)
    if _bool(s.get("emit_panels") or False):
        _emit_all(s, model, [sample], sample_id=stem)
    print(json.dumps({"prediction": str(out / f"{stem}_pred.pgm")}))
    return EXIT_OK


def cmd_inspect(s: Settings) -> int:
    model, _ = load_model(_checkpoint_path(s))
    out = Path(_require(s, "out", "--out"))
    if s.get("image"):
        sample = _single_sample(s, model, s.get("image"))
    else:
        raws = D.load_dataset(_existing(_require(s, "data", "--data or --image"), "dataset"))
        idx = s.get("index", int)
        if not 0 <= idx < len(raws):
            raise ConfigError(f"--index {idx} out of range for {len(raws)} samples")
        sample = D.preprocess(raws[idx], model.cfg.image_size)
    sources = []
    model.contour_hooks.append(lambda src, masks: sources.append((src, masks.copy())))
    try:
        bundle, trace = forward_pass(sample, model)
    finally:
        model.contour_hooks.clear()
    sid = sample.sample_id
    save_attention_trace(trace, out / f"{sid}_attention")
    if sources:
        contours = extract_contours(sources[-1][1][0], model.cfg.n_contour_points, model.cfg.n_classes)
    else:
        contours = []
    write_contours_csv(contours, out / f"{sid}_contours.csv")
    print(json.dumps({"attention": str(out / f"{sid}_attention.bin"),
                      "contours": str(out / f"{sid}_contours.csv"),
                      "contour_source": sources[-1][0] if sources else "none"}))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": lambda s: _evaluate_cmd(s, external=False),
    "xeval": lambda s: _evaluate_cmd(s, external=True),
    "predict": cmd_predict,
    "inspect": cmd_inspect,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        file_cfg = read_config_file(args.config) if getattr(args, "config", None) else {}
        settings = Settings(args, file_cfg)
        return COMMANDS[args.command](settings)
    except (UsageError, ConfigError, ShapeError, PreconditionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

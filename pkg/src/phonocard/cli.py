"""
Command-line front end.

Subcommands run the pipeline stage by stage inside one work directory::

    make-synthetic    write a small labelled WAV corpus for trying things out
    prepare           manifest, patient folds and the fixed-length cycle archive
    extract-features  MFCC archive for every cycle
    train             train one variant on one fold
    evaluate          cycle- and patient-level reports for one or more checkpoints
    ablation          train and evaluate all five variants on one fold
    predict           per-cycle probabilities and a verdict for one WAV file

Reports are comma-separated files with PNG figures next to them, plus an
aligned table on standard output. Every output directory gets a
``provenance.json`` with the resolved configuration and versions.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__, plotting, report
from .archive import (CYCLES_META, MFCC_META, load_cycles, load_mfcc, read_json,
                      save_cycles, save_mfcc, write_csv, write_json)
from .config import AGGREGATION_RULES, WORKDIR_ENV, RunConfig, resolve
from .errors import ConfigError, FormatError, InsufficientData, PhonocardError
from .features import MfccConfig, MfccExtractor
from .model import VARIANT_TITLES, VARIANTS, DualStreamModel, build_variant
from .nn import checkpoint
from .preprocess import (PreprocessConfig, denoise, extract_cycles, fix_length,
                         segment_cycles)
from .signal_io import (FoldSplit, Label, build_manifest, make_folds, read_wav,
                        write_manifest)
from .synthetic import write_synthetic_corpus
from .training import (TrainConfig, aggregate_patient, aggregate_patients, evaluate_cycles,
                       patient_metrics, train)

log = logging.getLogger("phonocard")

FOLDS_FILE = "folds.json"
MANIFEST_FILE = "manifest.tsv"
MODEL_FILE = "model.ckpt"


# -- helpers -------------------------------------------------------------------

@contextlib.contextmanager
def staged_dir(final: Path):
    """Yield a scratch directory that replaces ``final`` only if the block succeeds."""
    final = Path(final)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=final.parent, prefix=f".{final.name}."))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if final.exists():
        old = final.parent / f".{final.name}.old"
        shutil.rmtree(old, ignore_errors=True)
        os.replace(final, old)
        os.replace(tmp, final)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(tmp, final)


def load_fold(work_dir: Path, fold: int) -> FoldSplit:
    data = read_json(work_dir / FOLDS_FILE)
    for f in data["folds"]:
        if f["fold"] == fold:
            return FoldSplit(fold - 1, frozenset(f["train"]), frozenset(f["test"]),
                             data["seed"])
    raise ConfigError(f"fold {fold} not in {work_dir / FOLDS_FILE}")


def load_inputs(work_dir: Path, needs_mfcc: bool):
    cycles = load_cycles(work_dir)
    mfccs, mfcc_cfg = (None, None)
    if needs_mfcc:
        if not (work_dir / MFCC_META).exists():
            raise FormatError(f"no MFCC archive in {work_dir}; run extract-features first")
        mfccs, mfcc_cfg = load_mfcc(work_dir, cycles)
    return cycles, mfccs, mfcc_cfg


def feature_meta(work_dir: Path) -> dict:
    """Digests a checkpoint records so later commands can refuse mismatched inputs."""
    cyc = read_json(work_dir / CYCLES_META)
    meta = {"preprocess": cyc["preprocess"], "preprocess_digest": cyc["preprocess_digest"],
            "cycles_digest": cyc["data_digest"]}
    if (work_dir / MFCC_META).exists():
        mf = read_json(work_dir / MFCC_META)
        meta.update(mfcc=mf["mfcc"], mfcc_digest=mf["mfcc_digest"])
    return meta


def check_compatible(meta: dict, work_dir: Path, uses_mfcc: bool) -> None:
    current = feature_meta(work_dir)
    if meta.get("preprocess_digest") != current["preprocess_digest"]:
        raise ConfigError("checkpoint was trained with a different preprocessing config")
    if uses_mfcc and meta.get("mfcc_digest") != current.get("mfcc_digest"):
        raise ConfigError("checkpoint was trained with a different MFCC config")


def fit_variant(cfg: RunConfig, variant: str, cycles, mfccs, fold: FoldSplit, out_dir: Path,
                work_dir: Path) -> DualStreamModel:
    """Train one variant on a fold's training patients; writes checkpoints and history."""
    tcfg = TrainConfig(**{**cfg.train.to_dict(), "variant": variant})
    idx = cycles.select_patients(fold.train_patients)
    if idx.size == 0:
        raise InsufficientData(f"fold {cfg.fold} has no training cycles")
    model = build_variant(variant, cfg.seed)
    extra = {"fold": cfg.fold, "train": tcfg.to_dict(), "version": __version__,
             **feature_meta(work_dir)}

    def on_epoch(epoch, m, record):
        if tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0:
            checkpoint.save(out_dir / f"epoch-{epoch:03d}.ckpt",
                            *m.to_checkpoint({**extra, "epoch": epoch}))

    log.info("training %s on %d cycles (fold %d)", variant, idx.size, cfg.fold)
    result = train(model, cycles.waves[idx], None if mfccs is None else mfccs[idx],
                   cycles.labels[idx], tcfg, on_epoch)
    checkpoint.save(out_dir / MODEL_FILE,
                    *model.to_checkpoint({**extra, "epoch": tcfg.epochs}))
    report.write_history(out_dir / "history.csv", result.history)
    plotting.plot_history(result.history, out_dir / "loss.png",
                          f"{VARIANT_TITLES[variant]}, fold {cfg.fold}")
    return model


def score_fold(model: DualStreamModel, cycles, mfccs, fold: FoldSplit, rule: str):
    idx = cycles.select_patients(fold.test_patients)
    if idx.size == 0:
        raise InsufficientData("fold has no test cycles")
    waves = cycles.waves[idx]
    feats = None if mfccs is None else mfccs[idx]
    cyc_m, probs = evaluate_cycles(model, waves, feats, cycles.labels[idx])
    patients = aggregate_patients(probs, cycles.labels[idx], cycles.patient_ids[idx], rule)
    return idx, probs, cyc_m, patient_metrics(patients), patients


# -- commands ------------------------------------------------------------------

def cmd_make_synthetic(cfg: RunConfig, args) -> int:
    """Write a small synthetic labelled WAV corpus."""
    root = write_synthetic_corpus(cfg.data_root, args.records, seed=cfg.seed,
                                  records_per_patient=args.records_per_patient)
    print(f"wrote {args.records} synthetic records to {root}")
    return 0


def cmd_prepare(cfg: RunConfig, args) -> int:
    """Build the manifest, patient folds and cycle archive."""
    work = cfg.work_dir
    work.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(cfg.data_root)
    if len(manifest) == 0:
        raise InsufficientData(f"no labelled recordings under {cfg.data_root}")
    waves, rows, skipped = [], [], {}
    for entry in manifest.recordings:
        try:
            cycles = extract_cycles(entry.load(), cfg.preprocess)
        except PhonocardError as exc:
            skipped[entry.id] = f"{type(exc).__name__}: {exc}"
            log.warning("skipping %s: %s", entry.id, exc)
            continue
        for c in cycles:
            waves.append(c.samples)
            rows.append((c.record_id, c.patient_id, c.label, c.cycle_index))
    if not rows:
        raise InsufficientData("no cycles could be extracted from any recording")
    write_manifest(manifest, work / MANIFEST_FILE)
    save_cycles(work, np.stack(waves), rows, cfg.preprocess, skipped)
    folds = make_folds(manifest, cfg.n_folds, cfg.train_fraction, cfg.seed)
    write_json(work / FOLDS_FILE, {
        "seed": cfg.seed, "n_folds": cfg.n_folds, "train_fraction": cfg.train_fraction,
        "folds": [{"fold": f.fold_index + 1, "train": sorted(f.train_patients),
                   "test": sorted(f.test_patients)} for f in folds]})
    report.write_provenance(work, "prepare", cfg.to_dict())
    labels = [r[2] for r in rows]
    print(f"{len(manifest)} recordings, {len(manifest.patients)} patients, "
          f"{len(rows)} cycles ({labels.count(Label.NORMAL)} Normal, "
          f"{labels.count(Label.ABNORMAL)} Abnormal), {len(skipped)} recordings skipped")
    return 0


def cmd_extract_features(cfg: RunConfig, args) -> int:
    """Compute the MFCC archive for every cycle."""
    cycles = load_cycles(cfg.work_dir)
    ext = MfccExtractor(cfg.mfcc, cycles.preprocess.target_rate)
    values = np.concatenate([ext(cycles.waves[s:s + 512].astype(np.float64))
                             for s in range(0, len(cycles), 512)])
    save_mfcc(cfg.work_dir, values, cfg.mfcc, cycles.digest)
    report.write_provenance(cfg.work_dir, "extract-features", cfg.to_dict())
    print(f"MFCC archive: {values.shape[0]} cycles x {values.shape[1]} frames x "
          f"{values.shape[2]} coefficients (config {cfg.mfcc.digest()})")
    return 0


def run_dir(cfg: RunConfig, variant: str) -> Path:
    return cfg.work_dir / "runs" / f"{variant}-fold{cfg.fold}-seed{cfg.seed}"


def cmd_train(cfg: RunConfig, args) -> int:
    """Train one variant on one fold."""
    variant = cfg.train.variant
    needs_mfcc = variant in ("RnnMfcc", "DualNoAttention", "Full")
    cycles, mfccs, _ = load_inputs(cfg.work_dir, needs_mfcc)
    fold = load_fold(cfg.work_dir, cfg.fold)
    final = run_dir(cfg, variant)
    with staged_dir(final) as out:
        fit_variant(cfg, variant, cycles, mfccs, fold, out, cfg.work_dir)
        report.write_provenance(out, "train", cfg.to_dict(), variant=variant)
    hist = read_history_tail(final / "history.csv")
    print(f"checkpoint: {final / MODEL_FILE}")
    print(f"final epoch loss {hist}")
    return 0


def read_history_tail(path: Path) -> str:
    return path.read_text().strip().splitlines()[-1].split(",")[1]


def cmd_evaluate(cfg: RunConfig, args) -> int:
    """Cycle- and patient-level reports for trained checkpoints."""
    per_fold = []
    for ckpt in cfg.checkpoints:
        tensors, meta = checkpoint.load(ckpt)
        model = DualStreamModel.from_checkpoint(tensors, meta)
        check_compatible(meta, cfg.work_dir, model.uses_mfcc)
        fold_no = cfg.fold if args.fold is not None else int(meta.get("fold", cfg.fold))
        fold = load_fold(cfg.work_dir, fold_no)
        cycles, mfccs, _ = load_inputs(cfg.work_dir, model.uses_mfcc)
        idx, probs, cyc_m, pat_m, patients = score_fold(model, cycles, mfccs, fold,
                                                        cfg.aggregation)
        with staged_dir(Path(ckpt).parent / f"evaluation-fold{fold_no}") as out:
            report.write_class_report(out / "cycle_report.csv", cyc_m)
            report.write_class_report(out / "patient_report.csv", pat_m)
            rows = [report.summary_row("Cycle level", cyc_m),
                    report.summary_row("Patient level", pat_m)]
            report.write_summary(out / "summary.csv", "Level", rows)
            report.write_confusion(out / "cycle_confusion.csv", cyc_m)
            report.write_confusion(out / "patient_confusion.csv", pat_m)
            report.write_predictions(out / "predictions.csv", cycles.record_ids[idx],
                                     cycles.patient_ids[idx], cycles.cycle_index[idx],
                                     cycles.labels[idx], probs)
            write_csv(out / "patients.csv", ("patient_id", "truth", "predicted", "n_cycles"),
                      [(p.patient_id, p.truth.value, p.predicted.value,
                        p.cycle_probabilities.size) for p in patients])
            plotting.plot_confusion(cyc_m, out / "cycle_confusion.png", "Cycle level")
            plotting.plot_confusion(pat_m, out / "patient_confusion.png", "Patient level")
            report.write_provenance(out, "evaluate", cfg.to_dict(),
                                    checkpoint=str(ckpt), fold=fold_no)
        print(f"== {meta['variant']} fold {fold_no}: {ckpt}")
        print("Cycle level")
        print(report.format_table(report.CLASS_COLUMNS, report.class_rows(cyc_m)))
        print("Patient level")
        print(report.format_table(report.CLASS_COLUMNS, report.class_rows(pat_m)))
        print(report.format_table(("Level", *report.SUMMARY_COLUMNS), rows))
        for level, m in (("cycle", cyc_m), ("patient", pat_m)):
            if m.undefined:
                print(f"note: {level}-level {', '.join(m.undefined)} undefined "
                      f"(empty denominator, reported as 0)")
        per_fold.append((f"Fold-{fold_no}", pat_m))
    if len(per_fold) > 1:
        rows = report.fold_table(per_fold)
        with staged_dir(cfg.work_dir / "evaluation-folds") as out:
            report.write_summary(out / "folds.csv", "Fold", rows)
            plotting.plot_summary_bars(rows, out / "folds.png", "Patient level per fold")
            report.write_provenance(out, "evaluate", cfg.to_dict())
        print("Patient level, all folds")
        print(report.format_table(("Fold", *report.SUMMARY_COLUMNS), rows))
    return 0


def cmd_ablation(cfg: RunConfig, args) -> int:
    """Train and evaluate all five variants on one fold."""
    cycles, mfccs, _ = load_inputs(cfg.work_dir, True)
    fold = load_fold(cfg.work_dir, cfg.fold)
    final = cfg.work_dir / f"ablation-fold{cfg.fold}-seed{cfg.seed}"
    cycle_rows, patient_rows = [], []
    with staged_dir(final) as out:
        for variant in VARIANTS:
            vdir = out / variant
            vdir.mkdir()
            model = fit_variant(cfg, variant, cycles, mfccs, fold, vdir, cfg.work_dir)
            _, _, cyc_m, pat_m, _ = score_fold(model, cycles, mfccs, fold, cfg.aggregation)
            cycle_rows.append(report.summary_row(VARIANT_TITLES[variant], cyc_m))
            patient_rows.append(report.summary_row(VARIANT_TITLES[variant], pat_m))
            log.info("%s: cycle accuracy %.2f", variant, cyc_m.accuracy)
        report.write_summary(out / "ablation.csv", "Method", cycle_rows)
        report.write_summary(out / "ablation_patient.csv", "Method", patient_rows)
        plotting.plot_summary_bars(cycle_rows, out / "ablation.png",
                                   f"Ablation, cycle level, fold {cfg.fold}")
        report.write_provenance(out, "ablation", cfg.to_dict())
    print(f"Ablation, cycle level, fold {cfg.fold}")
    print(report.format_table(("Method", *report.SUMMARY_COLUMNS), cycle_rows))
    print(f"written to {final}")
    return 0


def cmd_predict(cfg: RunConfig, args) -> int:
    """Classify one WAV recording."""
    tensors, meta = checkpoint.load(cfg.checkpoint)
    model = DualStreamModel.from_checkpoint(tensors, meta)
    pre = PreprocessConfig.from_dict(meta["preprocess"])
    rec = read_wav(args.wav)
    rec.id = Path(args.wav).stem
    x = denoise(rec, pre)
    bounds = segment_cycles(x, pre.target_rate, pre.min_cycle, pre.max_cycle)
    waves = np.stack([fix_length(x[s:e], pre.cycle_length) for s, e in bounds])
    mfccs = None
    if model.uses_mfcc:
        mcfg = MfccConfig(**meta["mfcc"])
        mfccs = MfccExtractor(mcfg, pre.target_rate)(waves)
    probs = model.predict_proba(waves, mfccs)
    verdict = aggregate_patient(probs, rec.id, rule=cfg.aggregation)
    rows = [(i, s / pre.target_rate, e / pre.target_rate, float(p))
            for i, ((s, e), p) in enumerate(zip(bounds, probs))]
    print(report.format_table(("cycle", "start_s", "end_s", "p_abnormal"), rows))
    print(f"verdict: {verdict.predicted.value} ({int(np.sum(probs >= 0.5))} of {len(probs)} "
          f"cycles scored Abnormal)")
    if args.output:
        with staged_dir(Path(args.output)) as out:
            write_csv(out / "cycles.csv", ("cycle", "start_s", "end_s", "p_abnormal"),
                      [(i, f"{s:.3f}", f"{e:.3f}", f"{p:.6f}") for i, s, e, p in rows])
            write_json(out / "verdict.json", {"recording": str(args.wav),
                                              "verdict": verdict.predicted.value,
                                              "rule": cfg.aggregation,
                                              "n_cycles": len(probs)})
            plotting.plot_segmentation(x, pre.target_rate, bounds.starts, bounds.ends,
                                       out / "segmentation.png", probs)
            report.write_provenance(out, "predict", cfg.to_dict())
    return 0


# -- argument parsing ----------------------------------------------------------

COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "prepare": cmd_prepare,
    "extract-features": cmd_extract_features,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablation": cmd_ablation,
    "predict": cmd_predict,
}

# flags each command needs once the config file and environment are applied
REQUIRED = {
    "make-synthetic": ("data_root",),
    "prepare": ("data_root", "work_dir"),
    "extract-features": ("work_dir",),
    "train": ("work_dir",),
    "evaluate": ("work_dir", "checkpoint"),
    "ablation": ("work_dir",),
    "predict": ("checkpoint",),
}


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [paths], [run], [train], [mfcc], ...")
    common.add_argument("--seed", type=int, help="seed for folds, initialisation and batches")
    common.add_argument("-q", "--quiet", action="store_true", help="only print results")

    def flag(p, name, **kw):
        p.add_argument(name, **kw)

    parser = argparse.ArgumentParser(prog="phonocard", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    subs = {}
    for name in COMMANDS:
        subs[name] = sub.add_parser(name, parents=[common],
                                    help=COMMANDS[name].__doc__.rstrip(".").lower())
    work_help = f"work directory (default ${WORKDIR_ENV})"
    for name in ("prepare", "extract-features", "train", "evaluate", "ablation"):
        flag(subs[name], "--work-dir", help=work_help)
    for name in ("make-synthetic", "prepare"):
        flag(subs[name], "--data-root", help="dataset root holding WAVs and REFERENCE.csv")
    for name in ("train", "evaluate", "ablation"):
        flag(subs[name], "--fold", type=int, help="fold number, 1-based (default 1)")
    for name in ("train", "ablation"):
        p = subs[name]
        flag(p, "--epochs", type=int)
        flag(p, "--batch-size", type=int)
        flag(p, "--lr", type=float, help="Adam learning rate")
        flag(p, "--checkpoint-every", type=int, help="also save every N epochs")
    flag(subs["train"], "--variant", choices=VARIANTS)
    flag(subs["evaluate"], "--checkpoint", action="append",
         help="trained model; repeat to evaluate several folds")
    flag(subs["predict"], "--checkpoint", help="trained model")
    flag(subs["predict"], "wav", help="recording to classify")
    flag(subs["predict"], "--output", help="directory for cycles.csv and figures")
    for name in ("evaluate", "ablation", "predict"):
        flag(subs[name], "--aggregation", choices=AGGREGATION_RULES,
             help="patient verdict rule (default majority)")
    flag(subs["make-synthetic"], "--records", type=int, default=24)
    flag(subs["make-synthetic"], "--records-per-patient", type=int, default=1)
    return parser, subs


def main(argv=None) -> int:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    sub = subs[args.command]
    try:
        cfg = resolve(args)
    except (PhonocardError, ValueError) as exc:
        print(f"phonocard: error: {exc}", file=sys.stderr)
        return 1
    for key in REQUIRED[args.command]:
        if getattr(cfg, key) is None:
            extra = f" or set ${WORKDIR_ENV}" if key == "work_dir" else ""
            sub.error(f"--{key.replace('_', '-')} is required{extra}")
    for path in cfg.checkpoints if args.command in ("evaluate", "predict") else ():
        if not path.is_file():
            sub.error(f"--checkpoint {path} does not exist")
    if args.command == "predict" and not Path(args.wav).is_file():
        sub.error(f"recording {args.wav} does not exist")
    if args.command == "prepare" and not cfg.data_root.is_dir():
        sub.error(f"--data-root {cfg.data_root} is not a directory")
    try:
        return COMMANDS[args.command](cfg, args)
    except (PhonocardError, ValueError, OSError) as exc:
        print(f"phonocard: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def entry_point():
    sys.exit(main())

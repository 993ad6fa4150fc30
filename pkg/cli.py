"""
Command-line entry point for the sperm-head morphology pipeline.
Subcommands generate synthetic data, build pseudo-masks, pretrain, soft-tune, evaluate,
render overlays, or chain everything per fold with a cross-fold summary.
"""

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from config import FULL_SCALE_DEFAULTS, clone, dump_config, load_config
from data import PRESETS, SCIAN_MIX, generate_corpus, load_dataset, make_folds, n_classes_of, write_corpus
from distill import load_store, run_pretrain, store_from_cores
from hpm import generate_masks, load_masks
from imgcore import write_png
from report import (
    collect_metrics,
    export_summary_excel,
    render_overlay,
    summarize_metrics,
    write_summary_csv,
)
from tinynn import init_params, load_checkpoint, save_checkpoint
from tune import build_tune_samples, evaluate, soft_tune, write_predictions
from utils import ConfigError, DataError, SpermAidError, child_seed, export_metrics_csv, setup_logging

logger = logging.getLogger("spermaid")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse som avslutar med kod 1 vid användningsfel."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: fel: {message}\n")


def _epilog():
    lines = ["Fullskalevärden (skrivbordsskala i configs/desk.yaml, fullskala i configs/full.yaml):"]
    lines += [f"  {key:<22} {value}" for key, value in FULL_SCALE_DEFAULTS.items()]
    return "\n".join(lines)


def _common(parser, seed_required):
    parser.add_argument("--config", help="YAML-fil som läggs ovanpå standardvärdena")
    parser.add_argument("--set", action="append", default=[], metavar="SEKTION.NYCKEL=VÄRDE",
                        help="Överskriv ett konfigurationsvärde (kan upprepas)")
    parser.add_argument("--seed", type=int, required=seed_required, default=None,
                        help="Huvudfrö" + (" (obligatoriskt)" if seed_required else " (annars run.seed)"))
    parser.add_argument("--threads", type=int, default=None, help="Arbetstrådar; 1 ger deterministisk körning")
    parser.add_argument("--out", default=None, help="Utkatalog (annars out_dir i konfigurationen)")
    parser.add_argument("--quiet", action="store_true", help="Endast varningar, inga förloppsindikatorer")


def _fold_args(parser):
    parser.add_argument("--data", default=None, help="Datamängdskatalog (images/, votes.csv)")
    parser.add_argument("--fold", type=int, default=None, help="Del att köra (annars data.fold)")


def build_parser():
    """
    Bygg argumentparsern med alla underkommandon

    How to modify:
    - Lägg till ett underkommando med sub.add_parser och en _cmd_-funktion
    - Lägg till flaggor i _common för att få dem i alla steg
    """
    parser = _Parser(prog="spermaid", description="Morfologiklassning av spermiehuvuden: pseudomasker, "
                                                  "destillation och mjuk finjustering",
                     epilog=_epilog(), formatter_class=_Formatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen-synth", help="Generera en syntetisk korpus", formatter_class=_Formatter,
                         epilog=_epilog())
    _common(gen, seed_required=True)
    gen.add_argument("--n", type=int, default=200, help="Antal utsnitt")
    gen.add_argument("--classes", type=int, default=4, help="Antal klasser (2-5)")
    gen.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="Geometri och kanaler")
    gen.add_argument("--noise", type=float, default=0.05, help="Gaussiskt brus sigma")
    gen.add_argument("--scian-mix", action="store_true", help="Klassmix 100/228/76/656/72 (ignorerar --n)")
    gen.set_defaults(func=cmd_gen_synth)

    masks = sub.add_parser("masks", help="Hierarkiska pseudomasker för alla utsnitt", formatter_class=_Formatter,
                           epilog=_epilog())
    _common(masks, seed_required=False)
    _fold_args(masks)
    masks.set_defaults(func=cmd_masks)

    pretrain = sub.add_parser("pretrain", help="Destillationsförträning för en del", formatter_class=_Formatter,
                              epilog=_epilog())
    _common(pretrain, seed_required=True)
    _fold_args(pretrain)
    pretrain.set_defaults(func=cmd_pretrain)

    tune = sub.add_parser("tune", help="Mjuk finjustering för en del", formatter_class=_Formatter,
                          epilog=_epilog())
    _common(tune, seed_required=True)
    _fold_args(tune)
    tune.add_argument("--skip-pretrain", action="store_true",
                      help="Starta från slumpade vikter och använd M0 som förgrund")
    tune.set_defaults(func=cmd_tune)

    ev = sub.add_parser("eval", help="Utvärdera en del", formatter_class=_Formatter, epilog=_epilog())
    _common(ev, seed_required=False)
    _fold_args(ev)
    ev.set_defaults(func=cmd_eval)

    overlay = sub.add_parser("overlay", help="Bilder med masklager och lärarmask", formatter_class=_Formatter,
                             epilog=_epilog())
    _common(overlay, seed_required=False)
    _fold_args(overlay)
    overlay.add_argument("--ids", nargs="*", default=None, help="Utsnitt att rita (annars de första i testdelen)")
    overlay.add_argument("--count", type=int, default=8, help="Antal utsnitt utan --ids")
    overlay.set_defaults(func=cmd_overlay)

    run_all = sub.add_parser("run-all", help="Alla steg för alla delar plus sammanfattning",
                             formatter_class=_Formatter, epilog=_epilog())
    _common(run_all, seed_required=True)
    _fold_args(run_all)
    run_all.add_argument("--runs", type=int, default=1, help="Upprepningar per del med frön seed..seed+R-1")
    run_all.add_argument("--skip-pretrain", action="store_true", help="Hoppa över destillationen (ablation)")
    run_all.add_argument("--overlays", type=int, default=4, help="Överlagringsbilder per del")
    run_all.set_defaults(func=cmd_run_all)
    return parser


def resolve_config(args):
    """
    Konfiguration i ordningen standard, YAML, --set och sist dedikerade flaggor

    Returns:
        Validerad RunConfig
    """
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "data", None):
        cfg.data.dataset_dir = args.data
    if getattr(args, "fold", None) is not None:
        cfg.data.fold = args.fold
    return cfg.validate()


def fold_config(cfg, fold, seed):
    """Kopia av cfg för en del; destillation och finjustering får egna delfrön."""
    cfg = clone(cfg)
    cfg.data.fold = fold
    cfg.seed = seed
    cfg.distill.seed = child_seed(seed, fold, 1)
    cfg.tune.seed = child_seed(seed, fold, 2)
    return cfg


def fold_dir(out_dir, fold, run=None):
    out_dir = Path(out_dir)
    if run is not None:
        out_dir = out_dir / f"run{run}"
    return out_dir / f"fold{fold}"


def _start_stage(cfg, stage_dir, quiet):
    stage_dir = Path(stage_dir)
    stage_dir.mkdir(parents=True, exist_ok=True)
    setup_logging("WARNING" if quiet else "INFO", log_file=stage_dir / "run.log")
    dump_config(cfg, stage_dir / "config.yaml")
    return stage_dir


def _dataset(cfg):
    if not cfg.data.dataset_dir:
        raise DataError("Ingen datamängd angiven (--data eller data.dataset_dir)")
    crops = load_dataset(cfg.data.dataset_dir, lam=cfg.tune.lam)
    split = make_folds(crops, cfg.data.k_folds, cfg.data.fold_seed)
    return crops, split


def _masks_dir(cfg):
    path = Path(cfg.out_dir) / "masks"
    if not (path / "masks.jsonl").exists():
        raise DataError(f"Pseudomasker saknas i {path}; kör 'masks' först")
    return path


def stage_masks(cfg, crops, quiet=False):
    """Pseudomasker för hela korpusen; steget använder inga etiketter och delas av alla delar."""
    stage = _start_stage(cfg, Path(cfg.out_dir) / "masks", quiet)
    truth = Path(cfg.data.dataset_dir) / "truth"
    table = generate_masks(crops, cfg.hpm, stage, cfg.seed, threads=cfg.threads,
                           truth_dir=truth if truth.is_dir() else None)
    return stage, table


def stage_pretrain(cfg, crops, split, fdir, quiet=False):
    stage = _start_stage(cfg, Path(fdir) / "pretrain", quiet)
    fold = cfg.data.fold
    logger.info("Förträning del %d: %d träningsutsnitt", fold, len(split.train_ids(fold)))
    run_pretrain(cfg, _masks_dir(cfg), stage, split.train_ids(fold), all_ids=[c.crop_id for c in crops],
                 threads=cfg.threads, progress=not quiet)
    return stage


def _mask_store(fdir, masks_dir, source):
    if source == "teacher":
        return load_store(Path(fdir) / "pretrain")
    return store_from_cores(masks_dir)


def stage_tune(cfg, crops, split, fdir, skip_pretrain=False, quiet=False):
    """
    Finjustering för en del

    Utan förträning startar kodaren från slumpade vikter och läroplanen maskar med M0.
    """
    stage = _start_stage(cfg, Path(fdir) / "tune", quiet)
    fold, net = cfg.data.fold, cfg.network
    masks_dir = _masks_dir(cfg)
    train_ids = set(split.train_ids(fold))
    train = [c for c in crops if c.crop_id in train_ids]
    source = "hpm_core" if skip_pretrain else "teacher"
    samples = build_tune_samples(train, masks_dir, _mask_store(fdir, masks_dir, source))
    n_classes = n_classes_of(crops)

    if skip_pretrain:
        in_channels = samples[0].image.shape[-1]
        encoder = init_params(net.channels, in_channels, net.decoder_channels,
                              seed=child_seed(cfg.tune.seed, 30), rotation_head=False)
    else:
        encoder, _ = load_checkpoint(Path(fdir) / "pretrain" / "teacher.npz")

    params, log = soft_tune(encoder, samples, n_classes, cfg.tune, net.input_size, net.center_crop,
                            threads=cfg.threads, out_dir=stage, progress=not quiet)
    log.to_csv(stage / "loss.csv", index=False, float_format="%.8g", lineterminator="\n")
    save_checkpoint(stage / "classifier.npz", params,
                    meta={"n_classes": n_classes, "mask_source": source, "fold": fold})
    return stage


def stage_eval(cfg, crops, split, fdir, quiet=False):
    stage = _start_stage(cfg, Path(fdir) / "eval", quiet)
    fold, net = cfg.data.fold, cfg.network
    params, meta = load_checkpoint(Path(fdir) / "tune" / "classifier.npz")
    masks_dir = _masks_dir(cfg)
    test_ids = set(split.test_ids(fold))
    test = [c for c in crops if c.crop_id in test_ids]
    samples = build_tune_samples(test, masks_dir, _mask_store(fdir, masks_dir, meta.get("mask_source", "teacher")))
    metrics, predictions = evaluate(params, samples, cfg.tune, net.input_size, net.center_crop,
                                    n_classes=meta.get("n_classes"))
    export_metrics_csv([metrics.row(fold)], stage / "metrics.csv")
    write_predictions(predictions, stage / "predictions.csv")
    logger.info("Del %d: noggrannhet %.3f, F1 %.3f", fold, metrics.accuracy, metrics.f1)
    return stage, metrics


def stage_overlay(cfg, split, fdir, ids=None, count=8, quiet=False):
    stage = _start_stage(cfg, Path(fdir) / "overlay", quiet)
    masks_dir = _masks_dir(cfg)
    loaded = load_masks(masks_dir)
    teacher_dir = Path(fdir) / "pretrain"
    store = load_store(teacher_dir) if (teacher_dir / "teacher_masks.jsonl").exists() else None
    ids = ids or split.test_ids(cfg.data.fold)[:count]
    for crop_id in ids:
        if crop_id not in loaded:
            raise DataError(f"Okänt utsnitt: {crop_id}")
        image, hierarchy, _ = loaded[crop_id]
        teacher = store.get(crop_id) if store is not None else None
        write_png(stage / f"{crop_id}.png", render_overlay(image, hierarchy, teacher))
    logger.info("Skrev %d överlagringsbilder till %s", len(ids), stage)
    return stage


def cmd_gen_synth(args, cfg):
    out = Path(args.out or cfg.data.dataset_dir or "data/synth")
    setup_logging("WARNING" if args.quiet else "INFO")
    class_mix = SCIAN_MIX[:args.classes] if args.scian_mix else None
    corpus = generate_corpus(args.n, args.classes, cfg.seed, preset=args.preset, class_mix=class_mix,
                             noise=args.noise)
    write_corpus(corpus, out)
    return 0


def cmd_masks(args, cfg):
    crops, _ = _dataset(cfg)
    stage_masks(cfg, crops, args.quiet)
    return 0


def cmd_pretrain(args, cfg):
    crops, split = _dataset(cfg)
    fold = cfg.data.fold
    cfg = fold_config(cfg, fold, cfg.seed)
    stage_pretrain(cfg, crops, split, fold_dir(cfg.out_dir, fold), args.quiet)
    return 0


def cmd_tune(args, cfg):
    crops, split = _dataset(cfg)
    fold = cfg.data.fold
    cfg = fold_config(cfg, fold, cfg.seed)
    stage_tune(cfg, crops, split, fold_dir(cfg.out_dir, fold), args.skip_pretrain, args.quiet)
    return 0


def cmd_eval(args, cfg):
    crops, split = _dataset(cfg)
    fold = cfg.data.fold
    stage_eval(cfg, crops, split, fold_dir(cfg.out_dir, fold), args.quiet)
    return 0


def cmd_overlay(args, cfg):
    _, split = _dataset(cfg)
    stage_overlay(cfg, split, fold_dir(cfg.out_dir, cfg.data.fold), args.ids, args.count, args.quiet)
    return 0


def cmd_run_all(args, cfg):
    """
    Alla steg per del och körning, därefter sammanfattning i <out>/summary/

    Med --runs 1 ligger delarna direkt under <out>/fold{i}/, annars under <out>/run{r}/fold{i}/.

    How to modify:
    - Ändra vilka delar som körs genom att ange --fold
    """
    if args.runs < 1:
        raise DataError("--runs måste vara >= 1")
    crops, split = _dataset(cfg)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    split.to_frame().to_csv(Path(cfg.out_dir) / "folds.csv", index=False, lineterminator="\n")
    stage_masks(cfg, crops, args.quiet)

    folds = [args.fold] if args.fold is not None else list(range(cfg.data.k_folds))
    for run in range(args.runs):
        for fold in folds:
            fcfg = fold_config(cfg, fold, cfg.seed + run)
            fdir = fold_dir(cfg.out_dir, fold, run if args.runs > 1 else None)
            logger.info("Körning %d, del %d (frö %d)", run, fold, fcfg.seed)
            if not args.skip_pretrain:
                stage_pretrain(fcfg, crops, split, fdir, args.quiet)
            stage_tune(fcfg, crops, split, fdir, args.skip_pretrain, args.quiet)
            stage_eval(fcfg, crops, split, fdir, args.quiet)
            if args.overlays > 0:
                stage_overlay(fcfg, split, fdir, count=args.overlays, quiet=args.quiet)

    setup_logging("WARNING" if args.quiet else "INFO", log_file=Path(cfg.out_dir) / "summary" / "run.log")
    metrics = collect_metrics(cfg.out_dir)
    summary = summarize_metrics(metrics)
    summary_dir = write_summary_csv(metrics, summary, Path(cfg.out_dir) / "summary")
    export_summary_excel(metrics, summary, summary_dir / "summary.xlsx")
    for row in summary.itertuples(index=False):
        logger.info("%-9s %s", row.metric, row.text)
    return 0


def main(argv=None):
    """
    Kör ett underkommando och returnera en slutkod

    0 lyckat, 1 konfiguration eller kommandorad, 2 data, 3 numeriskt fel.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        with threadpool_limits(limits=cfg.threads):
            return args.func(args, cfg)
    except SpermAidError as exc:
        print(f"spermaid {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # Ogiltiga parametrar utanför konfigurationslagret, t.ex. AugmentationError
        print(f"spermaid {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())

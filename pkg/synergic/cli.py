"""
Command line entry point.

Subcommands mirror the data flow: phantom -> ingest -> preprocess -> train
-> evaluate -> diagnose / relabel-report. ``train``, ``evaluate`` and
``relabel-report`` accept a raw dataset directory and prepare it on the fly.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import torch
from pydantic import ValidationError

from config import Config
from synergic import configure_logging
from synergic.data_model import DatasetManifest, Modality, load_samples, read_patch
from synergic.errors import ConfigError, SynergicError
from synergic.evaluation import evaluate_model, write_metrics
from synergic.ingestion import DEFAULT_MAD_THRESHOLD, ingest_manifest
from synergic.network.model import load_checkpoint, patch_tensor
from synergic.phantom import PhantomSpec, write_dataset
from synergic.preprocess import preprocess_manifest
from synergic.retrieval import (
    DEFAULT_K, RetrievalMode, RetrievalRecord, build_database, evaluate_diagnosis, load_database,
    relabel_unsure, render_report, retrieve, write_relabel,
)
from synergic.training.config import ModelVariant, RunConfig
from synergic.training.engine import cross_validate, seed_everything

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.jsonl'


# ─── Dataset helpers ─────────────────────────────────────────────────────────

def _load_manifest(data_dir):
    path = Path(data_dir)
    return DatasetManifest.load(path / MANIFEST_NAME if path.is_dir() else path)


def _prepared(args, side):
    """Manifest with patch files; raw datasets are ingested and preprocessed under --out"""
    manifest = _load_manifest(args.data)
    if all(e.patch_path for e in manifest.entries):
        return manifest
    out = Path(args.out) / 'prepared'
    logger.info("[CLI] %s has no patches; preparing under %s", args.data, out)
    ingested, _ = ingest_manifest(manifest, out / 'ingested')
    return preprocess_manifest(ingested, out, Modality(args.modality), side, args.spacing)


def _patch_paths(manifest):
    return {e.nodule_id: str(manifest.resolve(e.patch_path).resolve()) for e in manifest.entries if e.patch_path}


def _fold_test_ids(args):
    if args.folds is None:
        return None
    try:
        folds = json.loads(Path(args.folds).read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{args.folds}: {e}") from e
    if str(args.fold) not in folds:
        raise ConfigError(f"fold {args.fold} not in {args.folds}")
    return set(folds[str(args.fold)]['test'])


def _side(args):
    return args.side if args.side is not None else Config.SIDE


# ─── Commands ────────────────────────────────────────────────────────────────

def cmd_phantom(args):
    try:
        spec = PhantomSpec(
            n_sure=args.n_sure, n_unsure=args.n_unsure, side=_side(args), seed=args.seed,
            class_separation=args.class_separation, spacing=args.spacing,
            n_raters=args.raters, rater_noise=args.rater_noise,
        )
    except ValidationError as e:
        raise ConfigError(str(e)) from e
    write_dataset(spec, args.out)
    return {'phantom': spec.model_dump(mode='json')}


def cmd_ingest(args):
    _, report = ingest_manifest(_load_manifest(args.data), args.out, args.mad_threshold)
    return {'kept': len(report.kept), 'discarded_mad': len(report.discarded_mad),
            'discarded_texture': len(report.discarded_texture)}


def cmd_preprocess(args):
    manifest = preprocess_manifest(
        _load_manifest(args.data), args.out, Modality(args.modality), _side(args), args.spacing,
        use_lung_mask=args.lung_mask,
    )
    return {'patches': len(manifest.entries)}


def _run_config(args):
    overrides = {
        'seed': args.seed,
        'side': _side(args),
        'modality': args.modality,
        'variant': args.variant,
        'max_epochs': args.epochs,
        'folds': args.folds_k,
        'lr': args.lr,
        'batch_size': args.batch_size,
    }
    if args.config:
        return RunConfig.from_file(args.config, **overrides)
    return RunConfig.parse({k: v for k, v in overrides.items() if v is not None})


def cmd_train(args):
    config = _run_config(args)
    config.write(Path(args.out) / 'run.json')
    manifest = _prepared(args, config.side)
    sure, unsure = load_samples(manifest)
    summary, _ = cross_validate(sure, unsure, config, args.out, patch_paths=_patch_paths(manifest))
    return {'run': config.model_dump(mode='json'), 'aggregate': summary['aggregate']}


def cmd_evaluate(args):
    model, extra = load_checkpoint(args.ckpt, map_location=Config.DEVICE)
    manifest = _prepared(args, model.config.side)
    sure, _ = load_samples(manifest)
    test_ids = _fold_test_ids(args)
    if test_ids is not None:
        sure = [s for s in sure if s.nodule_id in test_ids]

    out = Path(args.out)
    threshold = extra.get('threshold', 0.5)
    report, attention, _ = evaluate_model(model, sure, Config.DEVICE, threshold, cam_dir=out / 'cam')
    extra_metrics = {'checkpoint': extra}
    if args.db:
        db = load_database(args.db)
        queries = build_database(model, sure, Config.DEVICE)
        extra_metrics['retrieval'] = {}
        for mode in RetrievalMode:
            diag_report, _ = evaluate_diagnosis(queries, db, args.k, mode)
            extra_metrics['retrieval'][mode.value] = diag_report.model_dump(mode='json')
    write_metrics(out / 'metrics.json', report, attention, **extra_metrics)
    return {'accuracy': report.accuracy, 'auc': report.auc}


def cmd_diagnose(args):
    model, _ = load_checkpoint(args.ckpt, map_location=Config.DEVICE)
    db = load_database(args.db)
    patch = read_patch(args.input)
    query_id = Path(args.input).with_suffix('').name
    with torch.no_grad():
        outputs = model(patch_tensor([patch], Config.DEVICE))
    query = RetrievalRecord(nodule_id=query_id, cls_prob=float(outputs.cls_prob[0]),
                            reg_score=float(outputs.reg_score[0]))
    result = retrieve(query, db, args.k, args.mode)

    print(f"nodule {query_id}: diag={result.diag:.4f} (mode={result.mode.value}, k={result.k}, "
          f"cls_prob={query.cls_prob:.4f}, reg_score={query.reg_score:.4f})")
    print(f"{'rank':>4}  {'nodule_id':<24}  {'distance':>10}  label")
    for rank, ((nodule_id, distance), label) in enumerate(zip(result.neighbors, result.labels), 1):
        print(f"{rank:>4}  {nodule_id:<24}  {distance:>10.6f}  {label}")

    if args.report:
        render_report(query_id, result, db, args.report, query_patch_path=args.input)
    return {'diag': result.diag, 'neighbors': [list(n) for n in result.neighbors]}


def cmd_relabel(args):
    model, _ = load_checkpoint(args.ckpt, map_location=Config.DEVICE)
    db = load_database(args.db)
    _, unsure = load_samples(_prepared(args, model.config.side))
    records = build_database(model, unsure, Config.DEVICE)
    scores = {s.nodule_id: s.malignancy_score for s in unsure}
    summary = relabel_unsure(records, scores, db, args.k, args.mode)
    write_relabel(summary, args.out)
    return {'buckets': summary['buckets']}


COMMANDS = {
    'phantom':        cmd_phantom,
    'ingest':         cmd_ingest,
    'preprocess':     cmd_preprocess,
    'train':          cmd_train,
    'evaluate':       cmd_evaluate,
    'diagnose':       cmd_diagnose,
    'relabel-report': cmd_relabel,
}


# ─── Parser ──────────────────────────────────────────────────────────────────

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=Config.SEED)
    common.add_argument('--side', type=int, default=None, help='patch side (default: SYNERGIC_SIDE)')
    common.add_argument('--out', default='out', help='output directory')

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument('--modality', choices=[m.value for m in Modality], default=Modality.CUBE64.value)
    data.add_argument('--spacing', type=float, default=Config.SPACING)

    retrieval = argparse.ArgumentParser(add_help=False)
    retrieval.add_argument('--k', type=int, default=Config.RETRIEVAL_K or DEFAULT_K)
    retrieval.add_argument('--mode', choices=[m.value for m in RetrievalMode], default=RetrievalMode.CONCAT.value)

    parser = argparse.ArgumentParser(prog='synergic', description='Synergic lung nodule analysis')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('phantom', parents=[common], help='generate a phantom dataset')
    p.add_argument('--n-sure', type=int, required=True)
    p.add_argument('--n-unsure', type=int, required=True)
    p.add_argument('--class-separation', '--sep', dest='class_separation', type=float, default=0.6)
    p.add_argument('--spacing', type=float, default=Config.SPACING)
    p.add_argument('--raters', type=int, default=4)
    p.add_argument('--rater-noise', type=float, default=0.3)

    p = sub.add_parser('ingest', parents=[common], help='validate and filter a raw manifest')
    p.add_argument('--data', required=True)
    p.add_argument('--mad-threshold', type=float, default=DEFAULT_MAD_THRESHOLD)

    p = sub.add_parser('preprocess', parents=[common, data], help='extract patches')
    p.add_argument('--data', required=True)
    p.add_argument('--lung-mask', action='store_true')

    p = sub.add_parser('train', parents=[common, data], help='k-fold training')
    p.add_argument('--data', required=True)
    p.add_argument('--config', default=None, help='run.json')
    p.add_argument('--variant', choices=[v.value for v in ModelVariant], default=None)
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--folds', dest='folds_k', type=int, default=None)
    p.add_argument('--lr', type=float, default=None)
    p.add_argument('--batch-size', type=int, default=None)

    p = sub.add_parser('evaluate', parents=[common, data, retrieval], help='metrics and CAM overlays')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--folds', default=None, help='folds.json; restricts to one fold\'s test set')
    p.add_argument('--fold', type=int, default=0)
    p.add_argument('--db', default=None, help='retrieval database for diagnosis metrics')

    p = sub.add_parser('diagnose', parents=[common, retrieval], help='retrieval diagnosis of one patch')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--db', required=True)
    p.add_argument('--input', required=True, help='patch file')
    p.add_argument('--report', default=None, help='HTML gallery output')

    p = sub.add_parser('relabel-report', parents=[common, data, retrieval], help='relabel unsure nodules')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--db', required=True)
    p.add_argument('--data', required=True)

    return parser


def _write_run_config(args, result):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    options = {k: v for k, v in vars(args).items()}
    options['side'] = _side(args)
    snapshot = {'command': args.command, 'options': options, 'result': result}
    (out / 'run-config.json').write_text(json.dumps(snapshot, indent=2, sort_keys=True, default=str),
                                        encoding='utf-8')


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    configure_logging(Config.LOG_LEVEL)
    Config.validate()
    if Config.NUM_THREADS > 0:
        torch.set_num_threads(Config.NUM_THREADS)
    seed_everything(args.seed)

    try:
        result = COMMANDS[args.command](args)
        _write_run_config(args, result)
    except SynergicError as e:
        message = ' '.join(str(e).split())
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 1
    return 0

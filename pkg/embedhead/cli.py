'''
Command-line surface: every run is driven by one JSON config plus --set overrides
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error
'''
import os
import sys

# BLAS pools must be sized before numpy is first imported
_threads = os.environ.get('EMBEDHEAD_THREADS', '1')
for _var in ('OPENBLAS_NUM_THREADS', 'OMP_NUM_THREADS', 'MKL_NUM_THREADS'):
    os.environ.setdefault(_var, _threads if _threads.isdigit() else '1')

import time
import logging
import argparse

from embedhead import __version__
from embedhead.core.common import EmbedheadError, SettingsError
from embedhead.core.settings import load_settings, THREADS_ENV
from embedhead.core.api import API, gradcheck, gradcheck_failures


logger = logging.getLogger('embedhead')

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(EmbedheadError): pass


def _require_file(path, what):
    if not path or not os.path.isfile(path):
        raise UsageError('%s not found: %s' % (what, path or '(not given)'))

def _require_dir(path, what):
    if not path or not os.path.isdir(path):
        raise UsageError('%s not found: %s' % (what, path or '(not given)'))


def cmd_synth(work, args):
    out = args.out or os.getcwd()
    print(work.synth(out))

def cmd_prepare(work, args):
    manifest = args.manifest or work.settings['dataset']['manifest']
    out = args.out or work.settings['dataset']['prepared_dir']
    _require_file(manifest, 'Manifest')
    if not out:
        raise UsageError('No output directory: pass --out or set dataset.prepared_dir')
    prepared = work.prepare(manifest, out)
    print("Prepared %s classes, split sections %s, metadata width %s in %s" % (
        prepared.catalog.n_classes, prepared.split.sizes(), prepared.schema.width, out))

def cmd_train(work, args):
    prepared_dir = args.prepared or work.settings['dataset']['prepared_dir']
    _require_dir(prepared_dir, 'Prepared directory')
    prepared = work.load_prepared(prepared_dir)
    if args.fold is None:
        results = work.cross_validate(prepared, args.out)
    else:
        results = [work.train(prepared, args.out, args.fold)]
    for result in results:
        print("Fold %s: kept %s" % (result.fold, ', '.join(os.path.basename(p) for p in result.checkpoints)))

def cmd_evaluate(work, args):
    prepared_dir = args.prepared or work.settings['dataset']['prepared_dir']
    _require_dir(prepared_dir, 'Prepared directory')
    for path in args.checkpoints:
        _require_file(path, 'Checkpoint')
    report = work.evaluate(args.checkpoints, work.load_prepared(prepared_dir), args.out, args.section, args.fold)
    print("track1 %.6f track2 %.6f track3 %.6f accuracy %.6f on %s records" % (
        report['track1'], report['track2'], report['track3'], report['accuracy'], report['n_samples']))

def cmd_predict(work, args):
    for path in args.checkpoints:
        _require_file(path, 'Checkpoint')
    _require_file(args.manifest, 'Manifest')
    n = work.predict(args.checkpoints, args.manifest, args.out, args.pool)
    print("%s predictions written to %s" % (n, args.out))

def cmd_gradcheck(work, args):
    report = gradcheck(range(args.seeds))
    for name, error in report.items():
        print("%-18s %.3e" % (name, error))
    failed = gradcheck_failures(report)
    if failed:
        raise EmbedheadError('Gradient check failed for %s' % ', '.join(failed))

def cmd_ablate(work, args):
    prepared_dir = args.prepared or work.settings['dataset']['prepared_dir']
    _require_dir(prepared_dir, 'Prepared directory')
    for variant, top1, delta in work.ablate(work.load_prepared(prepared_dir), args.out, args.fold):
        print("%-18s %.4f %+.4f" % (variant, top1, delta))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="embedhead",
        description="Classifier heads over frozen image embeddings",
        epilog="v%s; %s limits worker threads" % (__version__, THREADS_ENV)
    )
    parser.add_argument("-c", "--config", dest="config", action="store", help="run configuration (JSON)", metavar="file", default=None)
    parser.add_argument("-s", "--set", dest="overrides", action="append", help="override a setting, e.g. train.lr=1e-3", metavar="key=value", default=[])
    parser.add_argument("-v", "--verbose", dest="verbose", action="store_true", help="debug logging", default=False)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic long-tailed dataset")
    p.add_argument("--out", action="store", metavar="dir", default=None)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("prepare", help="fix class catalog, split and metadata schema")
    p.add_argument("--manifest", action="store", metavar="file", default=None)
    p.add_argument("--out", action="store", metavar="dir", default=None)
    p.set_defaults(handler=cmd_prepare)

    p = sub.add_parser("train", help="train one fold, or both folds and evaluate their ensemble")
    p.add_argument("--prepared", action="store", metavar="dir", default=None)
    p.add_argument("--out", action="store", metavar="dir", required=True)
    p.add_argument("--fold", action="store", type=int, choices=[0, 1], default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="score checkpoints (several are logit-averaged)")
    p.add_argument("checkpoints", nargs="+", metavar="checkpoint")
    p.add_argument("--prepared", action="store", metavar="dir", default=None)
    p.add_argument("--out", action="store", metavar="dir", required=True)
    p.add_argument("--section", action="store", choices=["test", "validation", "train"], default="test")
    p.add_argument("--fold", action="store", type=int, choices=[0, 1], default=0)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("predict", help="label every record of a manifest pool")
    p.add_argument("checkpoints", nargs="+", metavar="checkpoint")
    p.add_argument("--manifest", action="store", metavar="file", required=True)
    p.add_argument("--pool", action="store", metavar="name", default=None)
    p.add_argument("--out", action="store", metavar="csv", required=True)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of ops, heads and losses")
    p.add_argument("--seeds", action="store", type=int, default=10)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("ablate", help="cumulative component ablation on one fold")
    p.add_argument("--prepared", action="store", metavar="dir", default=None)
    p.add_argument("--out", action="store", metavar="dir", required=True)
    p.add_argument("--fold", action="store", type=int, choices=[0, 1], default=0)
    p.set_defaults(handler=cmd_ablate)
    return parser

def setup_logging(verbose):
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(message)s'))
    logger.handlers = [h for h in logger.handlers if not isinstance(h, logging.StreamHandler)]
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)

def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    setup_logging(args.verbose)
    starttime = time.time()
    try:
        work = API(load_settings(args.config, args.overrides))
        args.handler(work, args)
    except (SettingsError, UsageError) as e:
        sys.stderr.write("Error: %s\n" % e)
        return EXIT_USAGE
    except EmbedheadError as e:
        sys.stderr.write("Error: %s\n" % e)
        return EXIT_FAILURE
    logger.debug("Done in %1.2f sc" % (time.time() - starttime))
    return EXIT_OK

if __name__ == "__main__":
    sys.exit(main())

import argparse
import logging
import sys

import commands
from config import Config, apply_config_file, load_config_file, log_effective_settings
from errors import EXIT_USAGE, SaliencyError

logger = logging.getLogger(__name__)

DEFAULT_GRADCHECK_SCALE = 0.0625


def configure_logging(level):
    logging.basicConfig(level=level, format='%(asctime)s - %(levelname)s - %(message)s', force=True)


def _common_flags():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='key=value file; flags override its values')
    common.add_argument('--threads', type=int, default=Config.THREADS,
                        help='worker threads; 1 is bitwise deterministic')
    common.add_argument('--seed', type=int, default=Config.SEED, help='random seed')
    common.add_argument('--log-level', default=Config.LOG_LEVEL, choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='logging level')
    common.add_argument('--quiet', action='store_true', help='no progress bars')
    return common


def build_parser():
    common = _common_flags()
    parser = argparse.ArgumentParser(prog='saliency', description='Saliency FCN: train, predict and evaluate.')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    formatter = argparse.ArgumentDefaultsHelpFormatter

    train = sub.add_parser('train', parents=[common], formatter_class=formatter, help='train a model')
    train.add_argument('--manifest', help='training manifest (image<TAB>mask per line), required')
    train.add_argument('--out-checkpoint', help='checkpoint path to write, required')
    train.add_argument('--weights', help='FCNW1 container with pretrained encoder weights')
    train.add_argument('--name-map', help='key=value file translating container names to parameter names')
    train.add_argument('--freeze-encoder', action=argparse.BooleanOptionalAction, default=True,
                       help='exclude encoder weights from updates')
    train.add_argument('--epochs', type=int, default=20, help='passes over the training set')
    train.add_argument('--batch-size', type=int, default=20, help='samples per step')
    train.add_argument('--lr', type=float, default=1e-4, help='Adam learning rate')
    train.add_argument('--loss', choices=['l1', 'l2'], default='l1', help='pixel loss')
    train.add_argument('--channel-scale', type=float, default=Config.CHANNEL_SCALE, help='multiplier on every width')
    train.add_argument('--pool', choices=['average', 'max'], default='average', help='encoder pooling kind')
    train.add_argument('--no-batch-norm', action='store_true', help='drop batch norm from the decoder')
    train.add_argument('--train-size', type=int, default=Config.TRAIN_SIZE, help='square training resolution')
    train.add_argument('--binarize-masks', action='store_true', help='threshold ground truth at 0.5')
    train.add_argument('--checkpoint-every', type=int, default=0, help='steps between checkpoints; 0 = end only')
    train.add_argument('--log-csv', help='training log path (default: <out-checkpoint>.log.csv)')
    train.add_argument('--validation-manifest', help='manifest scored at each epoch end')
    train.add_argument('--resume', help='checkpoint to continue from')
    train.set_defaults(handler=commands.cmd_train)

    predict = sub.add_parser('predict', parents=[common], formatter_class=formatter, help='write saliency maps')
    predict.add_argument('--checkpoint', help='trained checkpoint, required')
    predict.add_argument('--input', help='PPM/PGM image or a directory of them, required')
    predict.add_argument('--out-dir', help='directory for the PGM maps, required')
    predict.add_argument('--resize', type=int, help='infer at NxN and resize the map back')
    predict.set_defaults(handler=commands.cmd_predict)

    evaluate = sub.add_parser('eval', parents=[common], formatter_class=formatter, help='score saliency maps')
    evaluate.add_argument('--pred-dir', help='directory of <name>.pgm maps, required')
    evaluate.add_argument('--manifest', nargs='+', help='ground-truth manifest(s), required')
    evaluate.add_argument('--threshold', type=float, default=0.5, help='binarization threshold (S > t)')
    evaluate.add_argument('--beta-squared', type=float, default=0.09, help='F-measure weight')
    evaluate.add_argument('--out', help='metrics CSV, required; suffixed per manifest when several are given')
    evaluate.set_defaults(handler=commands.cmd_eval)

    pr_curve = sub.add_parser('pr-curve', parents=[common], formatter_class=formatter, help='averaged PR curve')
    pr_curve.add_argument('--pred-dir', help='directory of <name>.pgm maps, required')
    pr_curve.add_argument('--manifest', help='ground-truth manifest, required')
    pr_curve.add_argument('--points', type=int, default=256, help='thresholds evenly spaced over [0, 1]')
    pr_curve.add_argument('--out', help='PR curve CSV, required')
    pr_curve.set_defaults(handler=commands.cmd_pr_curve)

    gradcheck = sub.add_parser('gradcheck', parents=[common], formatter_class=formatter,
                               help='compare backward rules with finite differences')
    gradcheck.add_argument('--channel-scale', type=float, default=DEFAULT_GRADCHECK_SCALE,
                           help='width multiplier of the --full-model check')
    gradcheck.add_argument('--epsilon', type=float, default=1e-2, help='central-difference step')
    gradcheck.add_argument('--repeats', type=int, default=5, help='random shapes per op')
    gradcheck.add_argument('--shadow', action='store_true', help='run in float64 (tolerance 1e-4)')
    gradcheck.add_argument('--full-model', action='store_true', help='also check the whole network')
    gradcheck.add_argument('--max-entries', type=int, default=16,
                           help='entries sampled per tensor in the full-model check')
    gradcheck.add_argument('--corrupt-op', help=argparse.SUPPRESS)
    gradcheck.set_defaults(handler=commands.cmd_gradcheck)

    return parser, sub.choices


def parse_args(argv=None):
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        raise SystemExit(EXIT_USAGE)
    if args.config:
        apply_config_file(subparsers[args.command], load_config_file(args.config))
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    try:
        args = parse_args(argv)
    except SaliencyError as e:
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code

    configure_logging(args.log_level)
    log_effective_settings(args)
    try:
        return args.handler(args)
    except SaliencyError as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())

import argparse
import sys

import simplejson

import clients.logging
import core
import core.config
import core.data
import core.experiments
import core.sphere


class ArgumentParser(argparse.ArgumentParser):
    """
    Usage errors exit with the usage error code instead of argparse's 2, which is
    reserved for data and config failures
    """

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(core.UsageError.exit_code, '{0}: error: {1}\n'.format(self.prog, message))


def run(args):
    retval = 1

    # plug in verbosity shorthands
    if args.v:
        args.log_severity = 'debug'

    # with --json, stdout carries only the result document
    logger = clients.logging.Client(
        'hscalibrate',
        initial_severity=args.log_severity,
        initial_console_severity=args.log_console_severity,
        initial_file_severity=args.log_file_severity,
        output_stdout=not args.log_disable_stdout,
        output_stream=sys.stderr if args.json else None,
        output_dir=args.log_output_dir,
        max_log_size_mb=args.log_file_rotate_max_file_size,
        max_num_log_files=args.log_file_rotate_num_files,
        log_file_name=args.log_file_name,
        log_colors=args.log_colors,
    ).logger
    logger.clear_first_error()

    processor = core.Processor(logger=logger, parallel=args.parallel)
    try:
        result = args.handler(processor, args)
    except core.CalibrationError as exc:
        logger.error(
            'Command failed',
            command=args.command,
            error_type=type(exc).__name__,
            error=str(exc),
        )
        return exc.exit_code

    if args.json:
        sys.stdout.write(simplejson.dumps(result, sort_keys=True, ignore_nan=True))
        sys.stdout.write('\n')
    else:
        logger.info('Command finished', command=args.command)

    if logger.first_error is None:
        retval = 0

    return retval


def _seed(args):
    if args.seed is not None:
        return args.seed
    return core.config.default_seed()


def _train_config(args):
    """
    Config file, then --set overrides, then the explicit flags
    """
    overrides = list(args.set or [])
    for key, value in (
        ('seed', args.seed),
        ('optim.epochs', args.epochs),
        ('model.head', args.head),
        ('data.train_path', args.train_data),
        ('data.dev_path', args.dev_data),
        ('data.test_path', args.test_data),
        ('output.checkpoint_path', args.checkpoint),
        ('output.run_record_path', args.run_record),
        ('output.frame_path', args.frame_out),
    ):
        if value is not None:
            overrides.append('{0}={1}'.format(key, simplejson.dumps(value)))

    return core.config.load_config(args.config, overrides)


def _sphere_gen(processor, args):
    frame_cfg = core.sphere.FrameOptConfig(
        max_iters=args.max_iters,
        step_size=args.step_size,
        tolerance=args.tolerance,
        seed=_seed(args),
        restarts=args.restarts,
        parallel=args.parallel,
        smoothing=args.smoothing,
    )
    return processor.sphere_gen(args.k, args.h, args.out, frame_cfg)


def _train(processor, args):
    return processor.train(_train_config(args))


def _evaluate(processor, args):
    return processor.evaluate(
        args.checkpoint,
        args.data,
        args.bins,
        use_temperature=not args.no_temperature,
        group_by=args.group_by,
    )


def _calibrate(processor, args):
    return processor.calibrate(args.checkpoint, args.dev, out_path=args.out)


def _noise(processor, args):
    return processor.noise(args.in_path, args.out_path, args.fraction, _seed(args))


def _report(processor, args):
    return processor.report(
        args.checkpoint,
        args.data,
        args.out,
        args.bins,
        group_by=args.group_by,
        use_temperature=not args.no_temperature,
    )


def _synth(processor, args):
    return processor.synth(
        args.out,
        args.k,
        args.n,
        args.noise,
        _seed(args),
        decay=core.data.LONG_TAIL_DECAY if args.long_tail else args.decay,
        pool_size=args.pool_size,
    )


def _compare(processor, args):
    return processor.compare(
        _train_config(args),
        args.methods,
        args.seeds,
        args.noise_levels or [None],
        with_kl=args.with_kl,
        worst_n=args.worst_n,
    )


def _register_common_arguments(parser):

    # logger options
    clients.logging.Client.register_arguments(parser)

    # verbosity shorthands
    parser.add_argument(
        '-v',
        '-verbose',
        help='Set log level to debug (same as --log-severity=debug)',
        action='store_true',
        default=False,
    )

    parser.add_argument(
        '-p',
        '--parallel',
        help='Control parallelism (threads)',
        type=int,
        default=1,
    )

    parser.add_argument(
        '--json',
        help='Print the result as json on stdout (logs go to stderr)',
        action='store_true',
        default=False,
    )


def _register_seed_argument(parser):
    parser.add_argument(
        '--seed',
        help='Random seed (default: ${0} or 0)'.format(core.config.SEED_ENV_VAR),
        type=int,
    )


def _register_train_config_arguments(parser):
    parser.add_argument('--config', help='Path to a json run config')
    parser.add_argument(
        '--set',
        help='Override a config value, e.g. --set loss.rau_weight=3 (repeatable)',
        action='append',
        metavar='KEY=JSON',
    )
    _register_seed_argument(parser)
    parser.add_argument('--epochs', help='Override optim.epochs', type=int)
    parser.add_argument(
        '--head', help='Override model.head', choices=core.config.HEAD_TYPES
    )
    parser.add_argument('--train-data', help='Override data.train_path')
    parser.add_argument('--dev-data', help='Override data.dev_path')
    parser.add_argument('--test-data', help='Override data.test_path')
    parser.add_argument('--checkpoint', help='Override output.checkpoint_path')
    parser.add_argument('--run-record', help='Override output.run_record_path')
    parser.add_argument('--frame-out', help='Override output.frame_path')


def _register_evaluation_arguments(parser):
    parser.add_argument('--checkpoint', help='Checkpoint json', required=True)
    parser.add_argument('--data', help='Dataset jsonl', required=True)
    parser.add_argument('--bins', help='Number of confidence bins', type=int, default=10)
    parser.add_argument(
        '--group-by',
        help='Group reliability cells by predicted or gold label',
        choices=['pred', 'gold'],
        default='pred',
    )
    parser.add_argument(
        '--no-temperature',
        help='Ignore the temperature stored in the checkpoint',
        action='store_true',
        default=False,
    )


def register_arguments(parser):
    common = ArgumentParser(add_help=False)
    _register_common_arguments(common)

    subparsers = parser.add_subparsers(dest='command', metavar='COMMAND')
    subparsers.required = True

    sphere_gen = subparsers.add_parser(
        'sphere-gen', parents=[common], help='Optimize a hyperspherical label frame'
    )
    sphere_gen.add_argument('--k', help='Number of labels', type=int, required=True)
    sphere_gen.add_argument('--h', help='Frame dimension', type=int, required=True)
    sphere_gen.add_argument('--out', help='Output frame csv', required=True)
    sphere_gen.add_argument('--max-iters', type=int, default=2000)
    sphere_gen.add_argument('--step-size', type=float, default=0.1)
    sphere_gen.add_argument('--tolerance', type=float, default=1e-10)
    sphere_gen.add_argument('--restarts', type=int, default=5)
    sphere_gen.add_argument(
        '--smoothing',
        help='Log-sum-exp temperature of the descent surrogate, 0 for plain subgradients',
        type=float,
        default=0.1,
    )
    _register_seed_argument(sphere_gen)
    sphere_gen.set_defaults(handler=_sphere_gen)

    train = subparsers.add_parser('train', parents=[common], help='Train a model')
    _register_train_config_arguments(train)
    train.set_defaults(handler=_train)

    evaluate = subparsers.add_parser(
        'evaluate', parents=[common], help='Evaluate a checkpoint on a dataset'
    )
    _register_evaluation_arguments(evaluate)
    evaluate.set_defaults(handler=_evaluate)

    calibrate = subparsers.add_parser(
        'calibrate', parents=[common], help='Fit a temperature on dev data'
    )
    calibrate.add_argument('--checkpoint', help='Checkpoint json', required=True)
    calibrate.add_argument('--dev', help='Dev dataset jsonl', required=True)
    calibrate.add_argument('--out', help='Write the calibrated checkpoint here instead')
    calibrate.set_defaults(handler=_calibrate)

    noise = subparsers.add_parser('noise', parents=[common], help='Inject label noise')
    noise.add_argument(
        '--fraction', help='Fraction of labels to corrupt', type=float, required=True
    )
    _register_seed_argument(noise)
    noise.add_argument('in_path', metavar='IN_PATH', help='Input dataset jsonl')
    noise.add_argument('out_path', metavar='OUT_PATH', help='Output dataset jsonl')
    noise.set_defaults(handler=_noise)

    report = subparsers.add_parser(
        'report', parents=[common], help='Write a reliability csv'
    )
    _register_evaluation_arguments(report)
    report.add_argument('--out', help='Output csv', required=True)
    report.set_defaults(handler=_report)

    synth = subparsers.add_parser(
        'synth', parents=[common], help='Generate a synthetic keyword dataset'
    )
    synth.add_argument('--k', help='Number of labels', type=int, default=8)
    synth.add_argument('--n', help='Number of samples', type=int, default=4000)
    synth.add_argument('--noise', help='Cross-class keyword rate', type=float, default=0.2)
    synth.add_argument(
        '--decay', help='Geometric class prior ratio (long tail), uniform if unset', type=float
    )
    synth.add_argument(
        '--long-tail',
        help='Use the default long-tail prior ratio (overrides --decay)',
        action='store_true',
        default=False,
    )
    synth.add_argument('--pool-size', help='Keywords per class', type=int, default=20)
    synth.add_argument('--out', help='Output jsonl', required=True)
    _register_seed_argument(synth)
    synth.set_defaults(handler=_synth)

    compare = subparsers.add_parser(
        'compare', parents=[common], help='Compare calibration methods over paired seeds'
    )
    _register_train_config_arguments(compare)
    compare.add_argument(
        '--methods',
        help='Method presets to run',
        nargs='+',
        choices=sorted(core.experiments.PRESETS),
        default=list(core.experiments.DEFAULT_METHODS),
    )
    compare.add_argument('--seeds', help='Number of paired seeds', type=int, default=5)
    compare.add_argument(
        '--noise-levels', help='Train label noise fractions', type=float, nargs='*'
    )
    compare.add_argument(
        '--with-kl',
        help='Add the KL term to the methods that accept it',
        action='store_true',
        default=False,
    )
    compare.add_argument(
        '--worst-n', help='Least frequent labels to report separately', type=int, default=3
    )
    compare.set_defaults(handler=_compare)


def main(argv=None):
    arg_parser = ArgumentParser(prog='hscalibrate')

    register_arguments(arg_parser)

    parsed_args = arg_parser.parse_args(argv)

    return run(parsed_args)


if __name__ == '__main__':
    sys.exit(main())

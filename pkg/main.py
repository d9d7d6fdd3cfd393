import argparse
import os
import sys

COMMANDS = {
    "gen-data": "Generate the training and test RDM datasets",
    "estimate-sensor": "Estimate noise and clutter models on the training images",
    "train-unet": "Train the UNet detector",
    "train-cvae": "Train the CVAE measurement-uncertainty model",
    "eval-detect": "ROC/PR curves for CFAR and UNet on the test images",
    "track": "Run a tracking scenario end to end",
    "eval-track": "Score the tracks of a finished run",
    "verify": "Re-hash the artifacts of a run against its manifest",
    "compare": "Check the ML run against the baseline run over a sweep of seeds",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', required=True, help='Run config (YAML)')
    common.add_argument('--seed', type=int, help='Root seed (overrides the config)')
    common.add_argument('--out', help='Output directory (overrides the config)')
    common.add_argument('--threads', type=int, help='Threads for numerical libraries')

    parser = argparse.ArgumentParser(description='GMTI detection and tracking toolkit')
    subparsers = parser.add_subparsers(dest='command', help='Commands')
    for name, help_text in COMMANDS.items():
        sub = subparsers.add_parser(name, parents=[common], help=help_text)
        if name == 'train-unet':
            sub.add_argument('--resume', action='store_true', help='Continue from the saved checkpoint')
        elif name == 'compare':
            sub.add_argument('--criterion', choices=['accuracy', 'false-tracks', 'detection'],
                             default='accuracy', help='What the ML run must win on')
            sub.add_argument('--baseline-config', help='Baseline run config (tracking criteria)')
            sub.add_argument('--seeds', type=int, default=10, help='Number of seeds, starting at 0')
            sub.add_argument('--required', type=int, default=7, help='Seeds the ML run must win')
    return parser


def run(args: argparse.Namespace) -> int:
    # Imported late so --threads reaches the BLAS backends before numpy loads.
    from src.config.schemas import load_run_config
    from src.config.settings import settings
    from src.processing.acceptance import check_detector_ordering, compare_trackers
    from src.processing.pipeline import Pipeline
    from src.utils.errors import AppError, UsageError, VerificationError
    from src.utils.logging import logger

    logger.info(f"{settings.PROJECT_NAME} {settings.VERSION}: {args.command}")
    try:
        cfg = load_run_config(args.config, seed=args.seed, output_dir=args.out)
        pipeline = Pipeline(cfg)
        if args.command == 'gen-data':
            pipeline.gen_data()
        elif args.command == 'estimate-sensor':
            pipeline.estimate_sensor()
        elif args.command == 'train-unet':
            pipeline.train_unet(resume=args.resume)
        elif args.command == 'train-cvae':
            pipeline.train_cvae()
        elif args.command == 'eval-detect':
            pipeline.eval_detect()
        elif args.command == 'track':
            pipeline.track()
        elif args.command == 'eval-track':
            pipeline.eval_track()
        elif args.command == 'verify':
            pipeline.verify()
        elif args.command == 'compare':
            if args.criterion == 'detection':
                if not check_detector_ordering(cfg):
                    raise VerificationError("UNet TPR is below the CFAR TPR at the target FPR")
            else:
                if not args.baseline_config:
                    raise UsageError("--baseline-config is required for tracking criteria")
                baseline = load_run_config(args.baseline_config)
                report = compare_trackers(cfg, baseline, range(args.seeds), args.criterion, args.required)
                if not report.passed:
                    raise VerificationError(
                        f"ML run won {report.wins}/{len(report.outcomes)} seeds on {args.criterion}; "
                        f"{args.required} required"
                    )
    except AppError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}: {e}")
        return 1
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 1
    if args.threads is None:
        from src.config.settings import settings
        args.threads = settings.NUM_THREADS
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(args.threads)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())

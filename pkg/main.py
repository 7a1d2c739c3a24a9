# main.py
import argparse
import logging
import sys

import commands
import config
import run_config

logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    level=getattr(logging, config.LOG_LEVEL, logging.INFO)
)
logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgc", description="Deep Gradient Compression: simulator, codec bench, speedup model")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="обучение по конфигу, trace.csv + manifest.json")
    train.add_argument("--config", required=True)
    train.add_argument("--out", default=config.OUT_DIR)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--baseline", action="store_true", help="ещё один прогон плотным аналогом")

    bench = sub.add_parser("bench-codec", help="коэффициент сжатия на случайном разреженном векторе")
    bench.add_argument("--size", type=int, default=25_000_000)
    bench.add_argument("--sparsity", type=float, default=0.999)
    bench.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    bench.add_argument("--out", default=None)

    perf = sub.add_parser("perf", help="таблица ускорения dense vs DGC")
    group = perf.add_mutually_exclusive_group()
    group.add_argument("--params", default=None)
    group.add_argument("--preset", default=None)
    perf.add_argument("--out", default=config.OUT_DIR)

    sweep = sub.add_parser("sweep", help="декартово произведение разреженностей и вариантов")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--sparsities", default="0.999")
    sweep.add_argument("--variants", default="dense_momentum,plain_sparse,vanilla_corrected")
    sweep.add_argument("--out", default=config.OUT_DIR)
    sweep.add_argument("--seed", type=int, default=None)
    return parser


def main(argv=None) -> int:
    """Точка входа CLI; возвращает код выхода."""
    args = build_parser().parse_args(argv)

    if args.command == "train":
        return commands.cmd_train(args.config, args.out, seed=args.seed, baseline=args.baseline)
    if args.command == "bench-codec":
        return commands.cmd_bench_codec(args.size, args.sparsity, args.seed, args.out)
    if args.command == "perf":
        return commands.cmd_perf(args.params, args.out, preset=args.preset)
    if args.command == "sweep":
        try:
            sparsities = run_config.float_list(args.sparsities)
            variants = commands.parse_variants(args.variants)
        except ValueError as e:
            logger.error(f"❌ sweep: {e}")
            return commands.EXIT_CONFIG
        return commands.cmd_sweep(args.config, args.out, sparsities=sparsities, variants=variants, seed=args.seed)
    return commands.EXIT_CONFIG


if __name__ == '__main__':
    sys.exit(main())

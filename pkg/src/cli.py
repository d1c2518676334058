"""
Command-line entry point.

    python -m src.cli train --config config/default.cfg --seed 1 --out runs/default
    python -m src.cli eval --checkpoint runs/default/ckpt_1000.bin --terrain stairs --regime lin --range 1
    python -m src.cli probe-latent --checkpoint <ckpt> --out latents.csv
    python -m src.cli ablate --spec config/ablation.cfg --seeds 4
    python -m src.cli sweep-k --values 4,16,64 --seeds 2
    python -m src.cli velocity-mse --checkpoint <ckpt>
    python -m src.cli terrain-dump --out terrain.txt

Exits 0 on success and 1 on any failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from src.orchestration.evaluation import (REGIMES, TERRAIN_NAMES, EvalProtocol, ProbeControlError,
                                          ProbeError, evaluate, latent_probe, parse_ablation_variants,
                                          run_ablation, sweep_prototypes, velocity_estimation_mse,
                                          write_table)
from src.orchestration.trainer import TrainingAborted, load_policy, train
from src.sim.terrain import TerrainError, build_field, dump_field
from src.storage import CheckpointError
from src.utils.config import (Config, ConfigError, TrainConfig, apply_overrides, load_config,
                              validate)

logger = logging.getLogger(__name__)


def resolve_config(path: Optional[str], seed: Optional[int] = None) -> TrainConfig:
    """Config file from --config, else HIM_CONFIG, else defaults; --seed wins over the file."""
    path = path or Config.CONFIG_PATH
    cfg = load_config(path) if path else TrainConfig()
    if seed is not None:
        cfg = apply_overrides(cfg, {"seed": seed})
        violations = validate(cfg)
        if violations:
            raise ConfigError("invalid config: " + "; ".join(violations), violations=violations)
    return cfg


def resolve_workers(workers: Optional[int]) -> int:
    return workers if workers is not None else Config.worker_count()


def _print_table(rows) -> None:
    if not rows:
        return
    columns = list(rows[0])
    print(",".join(columns))
    for row in rows:
        print(",".join(str(row[c]) for c in columns))


def cmd_train(args) -> None:
    cfg = resolve_config(args.config, args.seed)
    out = Path(args.out or Config.OUT_DIR)
    path = train(cfg, out, workers=resolve_workers(args.workers), resume=args.resume)
    logger.info(f"Final checkpoint: {path}")


def cmd_eval(args) -> None:
    bundle = load_policy(args.checkpoint)
    terrains = list(TERRAIN_NAMES) if args.terrain == "all" else [args.terrain]
    regimes = list(REGIMES) if args.regime == "all" else [args.regime]
    rows = []
    for terrain in terrains:
        for regime in regimes:
            protocol = EvalProtocol(terrain=TERRAIN_NAMES[terrain], regime=regime,
                                    command_range=args.range, num_envs=args.num_envs, seed=args.seed)
            rows.append(evaluate(bundle, protocol, workers=resolve_workers(args.workers)).as_row())
    if args.out:
        write_table(args.out, rows)
    else:
        _print_table(rows)


def _probe_row(result) -> dict:
    return {"accuracy": result.accuracy, "shuffled_accuracy": result.shuffled_accuracy,
            "chance_low": result.chance_low, "chance_high": result.chance_high,
            "control_passed": result.control_passed, "test_size": result.test_size}


def cmd_probe(args) -> None:
    bundle = load_policy(args.checkpoint)
    try:
        result = latent_probe(bundle, samples_per_class=args.samples, seed=args.seed, out_path=args.out,
                              workers=resolve_workers(args.workers))
    except ProbeControlError as e:
        _print_table([_probe_row(e.result)])
        raise
    _print_table([_probe_row(result)])


def cmd_ablate(args) -> None:
    cfg = resolve_config(args.config)
    variants = parse_ablation_variants(Path(args.spec).read_text(encoding="utf-8"))
    if not variants:
        raise ConfigError(f"{args.spec}: no variants defined")
    rows = run_ablation(cfg, variants, args.seeds, Path(args.out or Config.OUT_DIR) / "ablation",
                        workers=resolve_workers(args.workers))
    _print_table(rows)


def cmd_sweep(args) -> None:
    cfg = resolve_config(args.config)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated integers, got '{args.values}'")
    rows = sweep_prototypes(cfg, values, args.seeds, Path(args.out or Config.OUT_DIR) / "sweep_k",
                            workers=resolve_workers(args.workers))
    _print_table(rows)


def cmd_velocity(args) -> None:
    bundle = load_policy(args.checkpoint)
    trained, untrained = velocity_estimation_mse(bundle, seed=args.seed, workers=resolve_workers(args.workers))
    _print_table([{"trained_mse": trained, "untrained_mse": untrained}])


def cmd_terrain_dump(args) -> None:
    cfg = resolve_config(args.config, args.seed)
    field = build_field(cfg.seed, cfg.terrain.proportions, cfg.terrain)
    dump_field(field, args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m src.cli",
                                     description="Hybrid internal model locomotion training and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default HIM_OUT_DIR)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="tracking benchmark for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--terrain", choices=[*TERRAIN_NAMES, "all"], required=True)
    p.add_argument("--regime", choices=[*REGIMES, "all"], default="combined")
    p.add_argument("--range", type=int, choices=(1, 2, 3), default=3)
    p.add_argument("--num-envs", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="table file (default stdout)")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe-latent", help="linear terrain probe on the latent")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="file for the raw (terrain, latent) rows")
    p.add_argument("--samples", type=int, default=500, help="samples per terrain type")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="train ablation variants over seeds")
    p.add_argument("--spec", required=True, help="variants file, lines '<variant>.<flag> = true'")
    p.add_argument("--seeds", type=int, default=4)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-k", help="prototype-count sweep")
    p.add_argument("--values", required=True, help="comma-separated prototype counts")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("velocity-mse", help="velocity estimator error, trained vs. untrained")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_velocity)

    p = sub.add_parser("terrain-dump", help="write the heightfield as a text matrix")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_terrain_dump)
    return parser


def main(argv: Optional[List[str]] = None):
    """Entry point for the command-line interface."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s'
    )
    logger.info(f"Starting '{args.command}'")
    try:
        args.func(args)
    except (ConfigError, TerrainError, CheckpointError, TrainingAborted, ProbeError) as e:
        logger.error(f"{args.command} failed: {e}")
        sys.exit(1)
    except Exception as e:
        logger.exception(f"Unexpected error during {args.command}: {e}")
        sys.exit(1)
    logger.info(f"'{args.command}' completed successfully")
    sys.exit(0)


if __name__ == "__main__":
    main()

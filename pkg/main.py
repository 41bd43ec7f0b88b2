"""
SCALE-COMM Warehouse Communication Trainer - Main Launcher
Command-line entry point for the collect / pretrain / finetune / evaluate pipeline
"""
import argparse
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone

import numpy as np

import config
import numcore as nc
import warehouse_env as wenv
from encoder import (EmaTarget, EncoderParams, ProtoAffinity, load_checkpoint, model_arrays,
                     restore_model, save_checkpoint)
from evalmetrics import KPI_COLUMNS, METRIC_COLUMNS, evaluate
from report_logger import CsvReport, load_json, save_json
from run_config import RunManifest, config_hash, dump_run_config, load_run_config
from scalecomm_utils import (ConfigError, IncompatibleArtifactError, MissingArtifactError,
                             ScaleCommError, get_output_root, log, reset_warning_counters)
from ssl_losses import ABLATIONS, BREAKDOWN_KEYS, MemoryQueue, PrototypeBank
from trainer import ITERATION_KEYS, finetune, finetune_from_scratch, pretrain_ssl
from trajectory_buffer import TrajectoryBuffer

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_INCOMPATIBLE = 4

# Config sections each command's outputs depend on
COMMAND_SECTIONS = {
    'collect': ('environment', 'seed'),
    'pretrain': ('environment', 'encoder', 'ssl', 'seed'),
    'finetune': ('environment', 'encoder', 'ssl', 'trainer', 'seed'),
    'finetune_scratch': ('environment', 'encoder', 'ssl', 'trainer', 'seed'),
    'evaluate': None,
}

ABLATION_LABELS = {
    'no_contrast': 'w/o Contrastive Alignment',
    'no_proto': 'w/o Prototype Distillation',
    'no_curriculum': 'w/o Curriculum Scheduling',
}

GRID_VARIANTS = [
    ('SCALE-COMM (full)', ()),
    (ABLATION_LABELS['no_contrast'], ('no_contrast',)),
    (ABLATION_LABELS['no_proto'], ('no_proto',)),
    (ABLATION_LABELS['no_curriculum'], ('no_curriculum',)),
]

SCRATCH_PREFIX = "scratch_"


def print_banner():
    """Print application banner"""
    print("=" * 70)
    print(f"SCALE-COMM WAREHOUSE COMMUNICATION TRAINER v{config.__version__}")
    print("=" * 70)
    print()


def print_commands():
    """Display the available commands"""
    print("\nCOMMANDS:")
    print("-" * 70)
    print("collect        Roll out the greedy heuristic and save the replay buffer")
    print("pretrain       Self-supervised encoder pretraining on the replay buffer")
    print("finetune       PPO fine-tuning with the curriculum auxiliary loss")
    print("evaluate       Representation metrics and throughput KPIs")
    print("ablation-grid  Full model and single-ablation variants over shared seeds")
    print()
    print("Common flags: --config FILE --seed N --out DIR --ablate {no_contrast,no_proto,no_curriculum}")
    print("-" * 70)


def method_name(ablations):
    """Row label used in metric tables"""
    if not ablations:
        return GRID_VARIANTS[0][0]
    return " + ".join(ABLATION_LABELS[a] for a in sorted(ablations))


def default_run_dir(cfg):
    name = f"seed_{cfg.seed}"
    if cfg.ssl.ablations:
        name += "__" + "_".join(sorted(cfg.ssl.ablations))
    return os.path.join(get_output_root(), name)


def _section_hash(cfg, command):
    return config_hash(cfg, COMMAND_SECTIONS[command])


def _already_done(manifest, command, cfg_hash, force):
    if not force and manifest.is_complete(command, cfg_hash):
        log(f"[INFO] {command} already complete in {manifest.run_dir}; skipping")
        return True
    return False


def _finetune_files(tag):
    prefix = SCRATCH_PREFIX if tag == 'finetune_scratch' else ""
    return (prefix + config.FINETUNE_CHECKPOINT_FILE, prefix + config.FINETUNE_REPORT_CSV,
            prefix + config.FINETUNE_REPORT_FILE)


def _load_model(path, cfg):
    """
    Load a checkpoint written by pretrain or finetune

    Returns:
        (online params, EMA target or None, prototypes ndarray or None, memory queue)
    """
    enc_cfg = cfg.encoder_config()
    arrays, meta = load_checkpoint(path)
    online, ema, prototypes = restore_model(enc_cfg, arrays)
    queue = MemoryQueue(cfg.ssl.queue_capacity, enc_cfg.latent_dim)
    stored = arrays.get('queue')
    if stored is not None:
        if stored.ndim != 2 or stored.shape[1] != enc_cfg.latent_dim:
            raise IncompatibleArtifactError(
                f"queue in {path} has shape {stored.shape}, expected (n, {enc_cfg.latent_dim})"
            )
        queue.push(stored[-cfg.ssl.queue_capacity:])
    return online, ema, prototypes, queue


def _checkpoint_meta(cfg, command, cfg_hash, **extra):
    return {'command': command, 'config_hash': cfg_hash, 'seed': cfg.seed,
            'ablations': sorted(cfg.ssl.ablations), 'encoder': asdict(cfg.encoder), **extra}


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------

def cmd_collect(cfg, run_dir, force=False):
    """Collect the heuristic replay buffer into <run_dir>/buffer.ndjson"""
    manifest = RunManifest(run_dir)
    cfg_hash = _section_hash(cfg, 'collect')
    if _already_done(manifest, 'collect', cfg_hash, force):
        return manifest.artifact(config.BUFFER_FILE)
    started = datetime.now(timezone.utc)
    os.makedirs(run_dir, exist_ok=True)

    env = cfg.environment
    log(f"[INFO] Collecting {env.collect_episodes} episodes x {env.collect_steps} steps "
        f"with {env.n_agents} agents (seed {cfg.seed})")
    buffer = wenv.collect_heuristic_dataset(env.collect_episodes, env.collect_steps, cfg.seed,
                                            cfg.warehouse_config())
    path = manifest.artifact(config.BUFFER_FILE)
    buffer.save_ndjson(path)
    log(f"[OK] Saved {len(buffer)} transitions to {path}")
    manifest.record('collect', cfg_hash, [config.BUFFER_FILE], started)
    return path


def cmd_pretrain(cfg, run_dir, buffer_path=None, force=False):
    """Self-supervised pretraining; writes the checkpoint, loss breakdown CSV and report"""
    manifest = RunManifest(run_dir)
    cfg_hash = _section_hash(cfg, 'pretrain')
    checkpoint_path = manifest.artifact(config.PRETRAIN_CHECKPOINT_FILE)
    if _already_done(manifest, 'pretrain', cfg_hash, force):
        return checkpoint_path
    started = datetime.now(timezone.utc)

    enc_cfg = cfg.encoder_config()
    buffer = TrajectoryBuffer.load_ndjson(buffer_path or manifest.artifact(config.BUFFER_FILE),
                                          obs_dim=enc_cfg.obs_dim)
    log(f"[OK] Loaded replay buffer with {len(buffer)} transitions")

    rng = nc.Rng(cfg.seed)
    params = EncoderParams.init(enc_cfg, rng.child('init'))
    target = EmaTarget(params, enc_cfg.ema_momentum)
    queue = MemoryQueue(cfg.ssl.queue_capacity, enc_cfg.latent_dim)
    bank = PrototypeBank(cfg.ssl.n_prototypes, enc_cfg.message_dim, rng.child('prototypes'))
    if cfg.ssl.ablations:
        log(f"[INFO] Ablations active: {', '.join(sorted(cfg.ssl.ablations))}")

    reset_warning_counters()
    params, report = pretrain_ssl(
        buffer, params, target, queue, bank, cfg.ssl_weights(), cfg.ssl.epochs, rng.child('pretrain'),
        lr=cfg.ssl.lr, batch_groups=cfg.ssl.batch_groups, aug=cfg.augmentation(),
        ablations=cfg.ssl.ablations, log_every=cfg.ssl.log_every,
    )

    os.makedirs(run_dir, exist_ok=True)
    tensors = model_arrays(params, target, bank.prototypes.data)
    tensors['queue'] = queue.contents()
    save_checkpoint(checkpoint_path, tensors,
                    _checkpoint_meta(cfg, 'pretrain', cfg_hash, optimizer_steps=report.optimizer_steps))

    losses = CsvReport(manifest.artifact(config.PRETRAIN_LOSS_FILE), ['step', 'epoch'] + BREAKDOWN_KEYS)
    losses.log_rows(report.ssl_steps)
    losses.save()
    save_json(manifest.artifact(config.PRETRAIN_REPORT_FILE), report.to_dict())
    log(f"[OK] Pretraining finished after {report.optimizer_steps} optimizer steps; "
        f"checkpoint saved to {checkpoint_path}")

    manifest.record('pretrain', cfg_hash,
                    [config.PRETRAIN_CHECKPOINT_FILE, config.PRETRAIN_LOSS_FILE, config.PRETRAIN_REPORT_FILE],
                    started)
    return checkpoint_path


def cmd_finetune(cfg, run_dir, checkpoint=None, from_scratch=False, force=False):
    """
    PPO fine-tuning from the pretrain checkpoint, or from a random initialization

    Args:
        checkpoint: Explicit starting checkpoint (defaults to the run's pretrain checkpoint)
        from_scratch: Skip pretraining weights entirely; outputs get a scratch_ prefix
    """
    tag = 'finetune_scratch' if from_scratch else 'finetune'
    manifest = RunManifest(run_dir)
    cfg_hash = _section_hash(cfg, tag)
    if checkpoint:
        cfg_hash = config_hash(cfg, COMMAND_SECTIONS[tag]) + ":" + os.path.abspath(checkpoint)
    checkpoint_file, csv_file, json_file = _finetune_files(tag)
    out_path = manifest.artifact(checkpoint_file)
    if _already_done(manifest, tag, cfg_hash, force):
        return out_path
    started = datetime.now(timezone.utc)
    os.makedirs(run_dir, exist_ok=True)

    enc_cfg = cfg.encoder_config()
    env_cfg = cfg.warehouse_config()
    queue = MemoryQueue(cfg.ssl.queue_capacity, enc_cfg.latent_dim)
    prototypes = None
    target = None
    reset_warning_counters()
    if from_scratch:
        log("[INFO] Fine-tuning from a random initialization")
        params, report = finetune_from_scratch(
            env_cfg, enc_cfg, cfg.ppo_config(), cfg.curriculum(), cfg.trainer.iterations, cfg.seed,
            queue=queue, weights=cfg.ssl_weights(), ablations=cfg.ssl.ablations, out_dir=run_dir,
        )
    else:
        source = checkpoint or manifest.artifact(config.PRETRAIN_CHECKPOINT_FILE)
        params, target, prototypes, queue = _load_model(source, cfg)
        if target is None:
            target = EmaTarget(params, enc_cfg.ema_momentum)
        log(f"[OK] Loaded pretrained model from {source}")
        params, report = finetune(
            env_cfg, params, cfg.ppo_config(), cfg.curriculum(), cfg.trainer.iterations,
            nc.Rng(cfg.seed).child('finetune'), target=target, queue=queue, weights=cfg.ssl_weights(),
            ablations=cfg.ssl.ablations, out_dir=run_dir, prototypes=prototypes,
        )

    tensors = model_arrays(params, target, prototypes)
    tensors['queue'] = queue.contents()
    save_checkpoint(out_path, tensors,
                    _checkpoint_meta(cfg, tag, cfg_hash, env_steps=report.env_steps,
                                     nan_aborts=report.nan_aborts))
    iterations = CsvReport(manifest.artifact(csv_file), ITERATION_KEYS)
    iterations.log_rows({key: row[key] for key in ITERATION_KEYS if key in row} for row in report.ppo_iterations)
    iterations.save()
    save_json(manifest.artifact(json_file), report.to_dict())
    if report.nan_aborts:
        log(f"[WARNING] {len(report.nan_aborts)} iteration(s) aborted on non-finite values")
    log(f"[OK] Fine-tuning finished after {report.env_steps} environment steps; checkpoint saved to {out_path}")

    manifest.record(tag, cfg_hash, [checkpoint_file, csv_file, json_file], started)
    return out_path


def cmd_evaluate(cfg, run_dir, checkpoint=None, force=False):
    """
    Evaluate a checkpoint

    Writes metrics.json, metrics.csv (comparison-table columns) and kpis.csv.
    Without --checkpoint the run's fine-tuned model is used, falling back to the
    pretrained one.

    Returns:
        (MetricsReport, KPI dict), or None when skipped as already complete
    """
    manifest = RunManifest(run_dir)
    if checkpoint is None:
        checkpoint = manifest.artifact(config.FINETUNE_CHECKPOINT_FILE)
        if not os.path.exists(checkpoint):
            checkpoint = manifest.artifact(config.PRETRAIN_CHECKPOINT_FILE)
    cfg_hash = config_hash(cfg) + ":" + os.path.basename(checkpoint)
    artifacts = [config.METRICS_JSON_FILE, config.METRICS_CSV_FILE, config.KPI_CSV_FILE]
    if _already_done(manifest, 'evaluate', cfg_hash, force):
        return None
    started = datetime.now(timezone.utc)

    params, _, prototypes, _ = _load_model(checkpoint, cfg)
    if prototypes is None:
        log("[WARNING] Checkpoint has no prototypes; ProtoNMI uses a seeded random bank")
        prototypes = PrototypeBank(cfg.ssl.n_prototypes, cfg.encoder.message_dim,
                                   nc.Rng(cfg.seed).child('prototypes')).prototypes.data
    ppo_cfg = cfg.ppo_config()
    affinity = None
    if ppo_cfg.affinity_beta:
        affinity = ProtoAffinity(prototypes, ppo_cfg.affinity_beta, cfg.ssl.temperature)
    log(f"[INFO] Evaluating {checkpoint}")
    reset_warning_counters()
    report, kpis = evaluate(
        params, prototypes, cfg.warehouse_config(), cfg.seed,
        collect_episodes=cfg.eval.collect_episodes, collect_steps=cfg.environment.collect_steps,
        rollout_episodes=cfg.eval.episodes, beta=ppo_cfg.beta, horizon=cfg.ssl.horizon,
        aug=cfg.augmentation(), probe_max_iter=cfg.eval.probe_max_iter, probe_tol=cfg.eval.probe_tol,
        affinity=affinity,
    )

    method = method_name(cfg.ssl.ablations)
    os.makedirs(run_dir, exist_ok=True)
    save_json(manifest.artifact(config.METRICS_JSON_FILE), {
        'method': method,
        'checkpoint': os.path.basename(checkpoint),
        'metrics': report.to_dict(),
        'kpis': kpis,
    })
    metrics = CsvReport(manifest.artifact(config.METRICS_CSV_FILE), METRIC_COLUMNS)
    metrics.log_row(report.as_row(method))
    metrics.save()
    kpi_table = CsvReport(manifest.artifact(config.KPI_CSV_FILE), KPI_COLUMNS)
    kpi_table.log_row(kpi_row(method, kpis))
    kpi_table.save()

    manifest.record('evaluate', cfg_hash, artifacts, started)
    return report, kpis


def kpi_row(method, kpis):
    return {
        'Method': method,
        'Deliveries/ep': round(kpis['deliveries_mean'], 4),
        'Deliveries SD': round(kpis['deliveries_sd'], 4),
        'Unassigned (%)': round(kpis['unassigned_pct'], 4),
    }


def _variant_config(cfg, seed, ablations):
    variant = type(cfg).from_dict(cfg.to_dict())
    variant.seed = seed
    variant.ssl.ablations = sorted(set(cfg.ssl.ablations) | set(ablations))
    return variant.validate()


def aggregate_rows(rows_by_method, columns):
    """
    Collapse per-seed metric rows into one row per method

    A single seed keeps plain numbers; several seeds become "mean ± SD" strings.
    """
    table = []
    for method, rows in rows_by_method.items():
        row = {'Method': method}
        for column in columns[1:]:
            values = np.array([r[column] for r in rows], dtype=np.float64)
            if len(values) == 1:
                row[column] = float(values[0])
            else:
                row[column] = f"{values.mean():.3f} ± {values.std():.3f}"
        table.append(row)
    return table


def cmd_ablation_grid(cfg, out_dir, seeds=1, force=False):
    """
    Full model plus the three single-ablation variants over seeds seed..seed+S-1

    Each seed collects one replay buffer shared by all four variants. Writes
    ablation_grid.csv (four rows), ablation_grid_per_seed.csv and ablation_kpis.csv.
    """
    if seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    metric_rows = {label: [] for label, _ in GRID_VARIANTS}
    kpi_rows = {label: [] for label, _ in GRID_VARIANTS}
    per_seed = CsvReport(os.path.join(out_dir, "ablation_grid_per_seed.csv"), ['Seed'] + METRIC_COLUMNS)

    for seed in range(cfg.seed, cfg.seed + seeds):
        seed_dir = os.path.join(out_dir, f"seed_{seed}")
        buffer_path = cmd_collect(_variant_config(cfg, seed, ()), seed_dir, force=force)
        for label, ablations in GRID_VARIANTS:
            variant = _variant_config(cfg, seed, ablations)
            run_dir = os.path.join(seed_dir, "full" if not ablations else "_".join(ablations))
            log(f"[INFO] Seed {seed}: {label}")
            cmd_pretrain(variant, run_dir, buffer_path=buffer_path, force=force)
            cmd_finetune(variant, run_dir, force=force)
            cmd_evaluate(variant, run_dir, force=force)
            run_manifest = RunManifest(run_dir)
            metrics = _read_metrics(run_manifest.artifact(config.METRICS_JSON_FILE))
            row = {
                'Method': label,
                'R@1': metrics['metrics']['r_at_1'],
                'Temp@1': metrics['metrics']['temp_at_1'],
                'ProtoNMI': metrics['metrics']['proto_nmi'],
                'ProbeAcc': metrics['metrics']['probe_acc'],
                'CKA(m,z)': metrics['metrics']['cka_mz'],
            }
            metric_rows[label].append(row)
            per_seed.log_row({'Seed': seed, **row})
            kpi_rows[label].append(kpi_row(label, metrics['kpis']))

    os.makedirs(out_dir, exist_ok=True)
    per_seed.save()
    grid = CsvReport(os.path.join(out_dir, config.ABLATION_CSV_FILE), METRIC_COLUMNS)
    grid.log_rows(aggregate_rows(metric_rows, METRIC_COLUMNS))
    grid.save()
    kpis = CsvReport(os.path.join(out_dir, "ablation_kpis.csv"), KPI_COLUMNS)
    kpis.log_rows(aggregate_rows(kpi_rows, KPI_COLUMNS))
    kpis.save()
    log(f"[OK] Ablation grid over {seeds} seed(s) saved to {grid.filename}")
    return grid.filename


def _read_metrics(path):
    if not os.path.exists(path):
        raise MissingArtifactError(f"metrics not found: {path}")
    return load_json(path)


# ----------------------------------------------------------------------------
# Argument parsing
# ----------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML run config (defaults from config.py when omitted)')
    common.add_argument('--seed', type=int, help='Override the config seed')
    common.add_argument('--out', help=f'Run directory (default: ${config.OUTPUT_ROOT_ENV}/seed_<seed>)')
    common.add_argument('--ablate', action='append', choices=ABLATIONS, default=[],
                        help='Disable one component; may be repeated')
    common.add_argument('--force', action='store_true', help='Rerun even when the manifest says complete')

    parser = argparse.ArgumentParser(
        prog='scalecomm',
        description='SCALE-COMM warehouse communication trainer',
    )
    sub = parser.add_subparsers(dest='command')
    sub.add_parser('collect', parents=[common], help='Collect the heuristic replay buffer')
    pretrain = sub.add_parser('pretrain', parents=[common], help='Self-supervised pretraining')
    pretrain.add_argument('--buffer', help='Replay buffer file (default: <out>/buffer.ndjson)')
    finetune_parser = sub.add_parser('finetune', parents=[common], help='PPO fine-tuning')
    finetune_parser.add_argument('--checkpoint', help='Starting checkpoint (default: <out>/pretrain checkpoint)')
    finetune_parser.add_argument('--from-scratch', action='store_true',
                                 help='Start from a random initialization instead of a checkpoint')
    evaluate_parser = sub.add_parser('evaluate', parents=[common], help='Metrics and KPIs for a checkpoint')
    evaluate_parser.add_argument('--checkpoint', help='Checkpoint to evaluate')
    grid = sub.add_parser('ablation-grid', parents=[common], help='Full model vs single ablations')
    grid.add_argument('--seeds', type=int, default=1, help='Number of consecutive seeds (default: 1)')
    return parser


def dispatch(args):
    cfg = load_run_config(args.config, seed=args.seed, ablations=args.ablate)
    if args.command == 'ablation-grid':
        out_dir = args.out or os.path.join(get_output_root(), f"ablation_grid_seed_{cfg.seed}")
        os.makedirs(out_dir, exist_ok=True)
        dump_run_config(cfg, os.path.join(out_dir, "config.yaml"))
        cmd_ablation_grid(cfg, out_dir, seeds=args.seeds, force=args.force)
        return
    run_dir = args.out or default_run_dir(cfg)
    os.makedirs(run_dir, exist_ok=True)
    dump_run_config(cfg, os.path.join(run_dir, "config.yaml"))
    if args.command == 'collect':
        cmd_collect(cfg, run_dir, force=args.force)
    elif args.command == 'pretrain':
        cmd_pretrain(cfg, run_dir, buffer_path=args.buffer, force=args.force)
    elif args.command == 'finetune':
        cmd_finetune(cfg, run_dir, checkpoint=args.checkpoint, from_scratch=args.from_scratch, force=args.force)
    elif args.command == 'evaluate':
        cmd_evaluate(cfg, run_dir, checkpoint=args.checkpoint, force=args.force)


def main(argv=None):
    """
    Main application entry point

    Returns:
        Process exit code: 0 ok, 2 config or output error, 3 missing artifact,
        4 incompatible artifact, 1 any other failure
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        print_banner()
        print_commands()
        return EXIT_OK
    try:
        dispatch(args)
    except (ConfigError, OSError) as e:
        print(f"[ERROR] {e}")
        return EXIT_CONFIG
    except MissingArtifactError as e:
        print(f"[ERROR] {e}")
        return EXIT_MISSING
    except IncompatibleArtifactError as e:
        print(f"[ERROR] {e}")
        return EXIT_INCOMPATIBLE
    except ScaleCommError as e:
        print(f"[ERROR] {e}")
        return EXIT_FAILURE
    except KeyboardInterrupt:
        print("\n\nInterrupted")
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

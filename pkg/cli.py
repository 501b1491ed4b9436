"""
Command-line entry point
gen, train, sample, eval, gradcheck and ablate over the synthetic tracklet world
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from core.conditioning import InstanceTokenTable, instance_similarity
from core.denoiser import load_model, sample_clip, save_model, train_stage
from core.errors import CapacityError, ConfigError, NumericError, TrackDiffError
from core.gradcheck import TOLERANCE, run_suite
from utils.evalkit import (
    THRESHOLDS,
    aggregate_reports,
    fvd_stub,
    get_metric_status,
    grounding_miou,
    write_report,
)
from utils.run_config import (
    denoiser_config,
    load_defaults,
    noise_schedule,
    optimizer_config,
    resolve_config,
    write_resolved,
)
from utils.trackdata import (
    PALETTE,
    decode_latent,
    encode_frames,
    gen_dataset,
    read_annotation,
    read_frames,
    write_annotation,
    write_dataset,
    write_frames,
)
from utils.visualizations import create_ablation_bar

logger = logging.getLogger('trackdiff')

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

CHECKPOINT_NAME = 'model.safetensors'
FUSION_ALIASES = {'cross': 'gated_cross', 'self': 'gated_self'}

# Ablation settings, each a set of overrides on the resolved config
VARIANTS = {
    'full': {},
    'no_enhancer': {'use_enhancer': False},
    'vanilla': {'use_enhancer': False, 'use_instance_embedding': False},
    'self_fusion': {'instance_fusion': 'gated_self'},
    'encoder_position': {'enhancer_position': 'encoder'},
}

# (better, worse) pairs on mean IoU
ORDERINGS = [
    ('full', 'no_enhancer'),
    ('no_enhancer', 'vanilla'),
    ('full', 'self_fusion'),
    ('full', 'encoder_position'),
]


# ============================================================================
# SHARED HELPERS
# ============================================================================

def _overrides(args, cfg_keys):
    values = {key: getattr(args, key) for key in cfg_keys if getattr(args, key, None) is not None}
    if 'instance_fusion' in values:
        values['instance_fusion'] = FUSION_ALIASES.get(values['instance_fusion'], values['instance_fusion'])
    return values


def _resolve(args):
    return resolve_config(args.config, _overrides(args, load_defaults()))


def _clip_dirs(root):
    root = Path(root)
    dirs = sorted(p for p in root.glob('clip_*') if p.is_dir())
    if not dirs:
        raise ConfigError(f"no clip_* directories under {root}")
    return dirs


def _annotation_paths(items):
    paths = []
    for item in items:
        item = Path(item)
        if item.is_dir():
            paths.extend(d / 'annotation.json' for d in _clip_dirs(item))
        elif item.exists():
            paths.append(item)
        else:
            raise ConfigError(f"annotation file not found: {item}")
    return paths


def _check_capacity(cfg):
    limit = min(cfg.k_max, len(PALETTE))
    if cfg.instances > limit:
        raise CapacityError(f"--instances {cfg.instances} exceeds the limit of {limit} (k_max / palette)")


def _synthetic(cfg, seed, n_clips):
    _check_capacity(cfg)
    return gen_dataset(
        seed, n_clips, cfg.instances, cfg.frames, cfg.width, cfg.height,
        vary_instances=cfg.vary_instances, k_max=cfg.k_max,
        disappear_prob=cfg.disappear_prob, scale_prob=cfg.scale_prob,
    )


def _encode(pairs, patch):
    return [(clip, encode_frames(frames, patch)) for clip, frames in pairs]


def _load_training_set(root, cfg):
    pairs = []
    for clip_dir in _clip_dirs(root):
        clip = read_annotation(clip_dir / 'annotation.json', cfg.k_max)
        frames = read_frames(clip_dir / 'frames' / 'index.txt')
        pairs.append((clip, encode_frames(frames, cfg.patch)))
    first = pairs[0][0]
    if (first.frames, first.width, first.height) != (cfg.frames, cfg.width, cfg.height):
        logger.info("taking clip geometry from %s: T=%d %dx%d", root, first.frames, first.width, first.height)
        cfg = cfg.replace(frames=first.frames, width=first.width, height=first.height)
    return pairs, cfg


def _train(dataset, cfg, seed, init=None, progress=False):
    """One stage of training under a resolved config"""
    return train_stage(
        dataset, denoiser_config(cfg), cfg.steps,
        opt=optimizer_config(cfg), sched=noise_schedule(cfg), init=init, seed=seed,
        allow_cold_start=cfg.allow_cold_start, progress=progress,
    )


def _sample_frames(clip, params, model_cfg, cfg, seed):
    result = sample_clip(
        clip, params, model_cfg, guidance=cfg.guidance, seed=seed,
        sample_steps=cfg.sample_steps, sched=noise_schedule(cfg),
        decode=lambda z: decode_latent(z, cfg.patch, clamp=True),
    )
    return result.frames


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_gen(args):
    cfg = _resolve(args)
    pairs = _synthetic(cfg, cfg.seed, cfg.clips)
    write_dataset(pairs, args.out)
    write_resolved(cfg, args.out)
    print(f"wrote {len(pairs)} clips to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _resolve(args)
    dataset, cfg = _load_training_set(args.data, cfg)
    init = None
    if args.init is not None:
        init, _, _ = load_model(args.init)

    result = _train(dataset, cfg, cfg.seed, init=init, progress=not args.quiet)
    out = Path(args.out)
    model_cfg = denoiser_config(cfg)
    save_model(out / CHECKPOINT_NAME, result.params, model_cfg, extra={'patch': cfg.patch})
    pd.DataFrame({'step': np.arange(1, len(result.losses) + 1), 'loss': result.losses}).to_csv(
        out / 'loss.csv', index=False)
    write_resolved(cfg, out)
    if result.losses:
        print(f"stage {cfg.stage}: {len(result.losses)} steps, final loss {result.losses[-1]:.5f}")
    print(f"checkpoint: {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_sample(args):
    cfg = _resolve(args)
    params, model_cfg, _ = load_model(args.checkpoint)
    if model_cfg.channels != 3 * cfg.patch ** 2:
        raise ConfigError(f"checkpoint has {model_cfg.channels} latent channels, patch {cfg.patch} gives "
                          f"{3 * cfg.patch ** 2}")

    out = Path(args.out)
    paths = _annotation_paths(args.annotations)
    for n, path in enumerate(paths):
        clip = read_annotation(path, model_cfg.k_max)
        frames = _sample_frames(clip, params, model_cfg, cfg, [cfg.seed, n])
        clip_dir = out / f'clip_{n:03d}'
        write_annotation(clip, clip_dir / 'annotation.json')
        write_frames(frames, clip_dir / 'frames')
        logger.info("sampled %s -> %s", path, clip_dir)
    write_resolved(cfg, out)
    print(f"sampled {len(paths)} clips into {out}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _resolve(args)
    min_miou = THRESHOLDS['self_check_miou'] if args.self_check else args.min_miou

    reports, per_clip, buffers = [], {}, []
    for clip_dir in _clip_dirs(args.data):
        clip = read_annotation(clip_dir / 'annotation.json', cfg.k_max)
        frames = read_frames(clip_dir / 'frames' / 'index.txt')
        report = grounding_miou(clip, frames)
        reports.append(report)
        per_clip[clip_dir.name] = report.to_dict()
        buffers.append(frames)

    summary = aggregate_reports(reports)
    if args.reference is not None:
        reference = [read_frames(d / 'frames' / 'index.txt') for d in _clip_dirs(args.reference)]
        summary['fvd_proxy'] = fvd_stub(buffers, reference)

    out = Path(args.out)
    write_report(summary, out / 'report.json', config=dict(cfg), clips=per_clip)
    write_resolved(cfg, out)
    if args.checkpoint is not None:
        params, _, _ = load_model(args.checkpoint)
        sims = instance_similarity(InstanceTokenTable(params['cond.instance']))
        pd.DataFrame(sims).to_csv(out / 'instance_similarity.csv', index_label='slot')

    for key in ('mean_iou', 'detection_rate', 'identity_consistency'):
        status, _ = get_metric_status(summary[key], THRESHOLDS[key])
        print(f"{key:<22}{summary[key]:.4f}  [{status}]")
    if min_miou is not None and summary['mean_iou'] < min_miou:
        logger.error("mean IoU %.4f is below the required %.4f", summary['mean_iou'], min_miou)
        return EXIT_NUMERIC
    return EXIT_OK


def gradcheck_table(seeds, base_seed=0):
    """Worst relative error per (module, case) over several seeds"""
    rows = [
        {'module': r.module, 'case': r.case, 'seed': seed, 'max_rel_err': r.max_rel_err}
        for seed in range(base_seed, base_seed + seeds)
        for r in run_suite(seed)
    ]
    table = (pd.DataFrame(rows).groupby(['module', 'case'], sort=False)['max_rel_err']
             .max().reset_index())
    table['passed'] = table['max_rel_err'] < TOLERANCE
    return table


def cmd_gradcheck(args):
    seed = args.seed if args.seed is not None else 0
    table = gradcheck_table(args.seeds, seed)
    print(table.to_string(index=False, float_format=lambda v: f'{v:.2e}'))
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / 'gradcheck.csv', index=False)
        write_resolved(_resolve(args), out)
    if not table['passed'].all():
        failed = table.loc[~table['passed'], 'case'].tolist()
        logger.error("gradient check failed for: %s", ', '.join(failed))
        return EXIT_NUMERIC
    return EXIT_OK


# --- ablation ---

def _ordering_verdicts(table):
    means = table.pivot_table(index='seed', columns='variant', values='mean_iou')
    verdicts = []
    for better, worse in ORDERINGS:
        if better not in means or worse not in means:
            continue
        violations = int((means[better] < means[worse]).sum())
        verdicts.append({
            'ordering': f'{better} >= {worse}',
            'violations': violations,
            'seeds': int(len(means)),
            'holds': bool(2 * violations <= len(means)),
        })
    return verdicts


def run_ablation(cfg, variants=None, progress=False):
    """
    Train and evaluate every variant over cfg.ablation_seeds seeds.

    Each seed draws its own training and held-out clips. The image stage depends only
    on whether instance tokens are used, so it is trained once per seed and setting.

    Returns:
        tuple: (DataFrame of per-seed scores, list of ordering verdicts)
    """
    names = list(variants or VARIANTS)
    rows = []
    for seed in range(cfg.seed, cfg.seed + cfg.ablation_seeds):
        pairs = _synthetic(cfg, seed, cfg.clips + cfg.eval_clips)
        train_set = _encode(pairs[:cfg.clips], cfg.patch)
        heldout = [clip for clip, _ in pairs[cfg.clips:]]
        image_stage = {}
        for name in names:
            variant = cfg.replace(**VARIANTS[name])
            key = variant.use_instance_embedding
            if key not in image_stage:
                image_stage[key] = _train(train_set, variant.replace(stage='image'), seed, progress=progress).params
            video = _train(train_set, variant.replace(stage='video'), seed, init=image_stage[key], progress=progress)
            model_cfg = denoiser_config(variant.replace(stage='video'))
            reports = [
                grounding_miou(clip, _sample_frames(clip, video.params, model_cfg, variant, [seed, n]))
                for n, clip in enumerate(heldout)
            ]
            summary = aggregate_reports(reports)
            rows.append({'variant': name, 'seed': seed, **summary})
            logger.info("ablation seed=%d variant=%s mean_iou=%.4f", seed, name, summary['mean_iou'])
    table = pd.DataFrame(rows)
    return table, _ordering_verdicts(table)


def cmd_ablate(args):
    cfg = _resolve(args)
    if args.seeds is not None:
        cfg = cfg.replace(ablation_seeds=args.seeds)
    table, verdicts = run_ablation(cfg, args.variants, progress=not args.quiet)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / 'ablation.csv', index=False)
    doc = {
        'means': table.groupby('variant', sort=False)['mean_iou'].mean().to_dict(),
        'orderings': verdicts,
        'config': dict(sorted(cfg.items())),
    }
    (out / 'ablation.json').write_text(json.dumps(doc, indent=2) + '\n', encoding='utf-8')
    create_ablation_bar(table, 'mean_iou', 'Grounding mean IoU by configuration').write_html(
        out / 'ablation.html', include_plotlyjs='cdn')
    write_resolved(cfg, out)

    print(table.groupby('variant', sort=False)[['mean_iou', 'detection_rate']].mean().to_string())
    for verdict in verdicts:
        print(f"{verdict['ordering']:<32}{'holds' if verdict['holds'] else 'VIOLATED'} "
              f"({verdict['violations']}/{verdict['seeds']} seeds against)")
    if args.strict and not all(v['holds'] for v in verdicts):
        return EXIT_NUMERIC
    return EXIT_OK


# ============================================================================
# ARGUMENT PARSING
# ============================================================================

def _common_flags():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='YAML file of config overrides')
    common.add_argument('--seed', type=int, help='Run seed')
    common.add_argument('--verbose', action='store_true', help='Debug logging')
    common.add_argument('--quiet', action='store_true', help='No progress bars')
    return common


def _data_flags(parser):
    group = parser.add_argument_group('synthetic data')
    group.add_argument('--clips', type=int)
    group.add_argument('--frames', type=int)
    group.add_argument('--width', type=int)
    group.add_argument('--height', type=int)
    group.add_argument('--instances', type=int)
    group.add_argument('--patch', type=int)
    group.add_argument('--disappear-prob', dest='disappear_prob', type=float)
    group.add_argument('--scale-prob', dest='scale_prob', type=float)
    group.add_argument('--vary-instances', dest='vary_instances', action=argparse.BooleanOptionalAction)


def _model_flags(parser):
    group = parser.add_argument_group('model and ablation')
    group.add_argument('--stage', choices=['image', 'video'])
    group.add_argument('--dim', type=int)
    group.add_argument('--n-blocks', dest='n_blocks', type=int)
    group.add_argument('--n-heads', dest='n_heads', type=int)
    group.add_argument('--no-instance-emb', dest='use_instance_embedding', action='store_const', const=False)
    group.add_argument('--no-enhancer', dest='use_enhancer', action='store_const', const=False)
    group.add_argument('--no-motion', dest='use_motion', action='store_const', const=False)
    group.add_argument('--fusion', dest='instance_fusion', choices=['cross', 'self'])
    group.add_argument('--enhancer-pos', dest='enhancer_position', choices=['encoder', 'decoder'])
    group.add_argument('--motion-fusion', dest='motion_fusion', choices=['concat', 'add'])


def _train_flags(parser):
    group = parser.add_argument_group('optimizer')
    group.add_argument('--steps', type=int)
    group.add_argument('--lr', type=float)
    group.add_argument('--momentum', type=float)
    group.add_argument('--grad-clip', dest='grad_clip', type=float)
    group.add_argument('--batch-size', dest='batch_size', type=int)
    group.add_argument('--cond-drop', dest='cond_drop', type=float)
    group.add_argument('--log-every', dest='log_every', type=int)
    group.add_argument('--allow-cold-start', dest='allow_cold_start', action='store_const', const=True)


def _sample_flags(parser):
    group = parser.add_argument_group('sampling')
    group.add_argument('--cfg', dest='guidance', type=float, help='Classifier-free guidance scale')
    group.add_argument('--sample-steps', dest='sample_steps', type=int)


def build_parser():
    common = _common_flags()
    parser = argparse.ArgumentParser(prog='trackdiff', description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen', parents=[common], help='Write a synthetic dataset')
    gen.add_argument('--out', default='runs/data')
    _data_flags(gen)
    gen.set_defaults(handler=cmd_gen)

    train = sub.add_parser('train', parents=[common], help='Train one stage')
    train.add_argument('--data', required=True, help='Dataset directory written by gen')
    train.add_argument('--init', type=Path, help='Checkpoint of the previous stage')
    train.add_argument('--out', default='runs/train')
    _data_flags(train)
    _model_flags(train)
    _train_flags(train)
    _sample_flags(train)
    train.set_defaults(handler=cmd_train)

    sample = sub.add_parser('sample', parents=[common], help='Generate clips for annotations')
    sample.add_argument('annotations', nargs='+', help='Annotation files or dataset directories')
    sample.add_argument('--checkpoint', type=Path, required=True)
    sample.add_argument('--out', default='runs/samples')
    sample.add_argument('--patch', type=int)
    _sample_flags(sample)
    sample.set_defaults(handler=cmd_sample)

    evaluate = sub.add_parser('eval', parents=[common], help='Grounding report for a frame tree')
    evaluate.add_argument('--data', required=True, help='Directory of clip_* folders with frames')
    evaluate.add_argument('--out', default='runs/eval')
    evaluate.add_argument('--self-check', action='store_true', help='Require mean IoU >= 0.95')
    evaluate.add_argument('--min-miou', type=float)
    evaluate.add_argument('--reference', help='Second frame tree for the Frechet feature distance')
    evaluate.add_argument('--checkpoint', type=Path, help='Also write the instance-token similarity matrix')
    evaluate.set_defaults(handler=cmd_eval)

    gradcheck = sub.add_parser('gradcheck', parents=[common], help='Finite-difference gradient suite')
    gradcheck.add_argument('--seeds', type=int, default=1)
    gradcheck.add_argument('--out')
    gradcheck.set_defaults(handler=cmd_gradcheck)

    ablate = sub.add_parser('ablate', parents=[common], help='Variant comparison over seeds')
    ablate.add_argument('--seeds', type=int)
    ablate.add_argument('--variants', nargs='+', choices=list(VARIANTS))
    ablate.add_argument('--strict', action='store_true', help='Exit 3 when an ordering is violated')
    ablate.add_argument('--out', default='runs/ablation')
    _data_flags(ablate)
    _model_flags(ablate)
    _train_flags(ablate)
    _sample_flags(ablate)
    ablate.set_defaults(handler=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    try:
        return args.handler(args)
    except NumericError as exc:
        logger.error("%s", exc)
        return EXIT_NUMERIC
    except TrackDiffError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_CONFIG


if __name__ == '__main__':
    sys.exit(main())

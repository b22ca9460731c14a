"""Command-line entry point: ``posestream <command> [options]``.

Every command reads the experiment configuration (``--config`` plus
``--set key=value`` overrides), writes its artifacts under the output
directory next to ``config.resolved.txt`` and exits with 0 on success,
2 on configuration errors, 3 on I/O errors, 4 on divergence and 1 on any
other posestream error.
"""

# import modules
import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
from skimage import io
from skimage.util import img_as_ubyte
from tabulate import tabulate

from . import __version__
from .checkpoint import load_checkpoint
from .config import ExperimentConfig
from .dataset import (StreamBuilder, generate_synthetic, load_dataset,
                      read_frames, save_dataset)
from .exceptions import (ConfigError, DivergenceError, IoError,
                         PoseStreamError)
from .explain import grad_cam, montage, overlay
from .optical_flow import (flow_to_color, to_grayscale, tvl1_flow,
                           write_flo)
from .pose_render import RENDER_VARIANTS, PoseRenderer, read_pose_jsonl
from .training import (FusionMember, evaluate_logits, late_fuse_eval,
                       predict_logits, train)
from .utils import header

logger = logging.getLogger('posestream')

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4


def _save_png(path, image) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        io.imsave(path, img_as_ubyte(np.clip(image, 0.0, 1.0)),
                  check_contrast=False)
    except OSError as err:
        raise IoError(f'cannot write {path}: {err}') from err


def _out_dir(cfg) -> Path:
    out = Path(cfg.out_dir)
    cfg.save(out)
    return out


def _builder(cfg, render_spec=None) -> StreamBuilder:
    return StreamBuilder(render_spec or cfg.render, cfg.flow, cfg.augment)


def _class_names(cfg) -> list:
    return list(cfg.data.actions)


def _threads(args) -> int:
    return 1 if args.deterministic else max(1, args.threads)


# ~~~~~ commands ~~~~~

def cmd_gen_data(cfg, args) -> int:
    _out_dir(cfg)
    train_clips, val_clips = generate_synthetic(cfg.data,
                                                progress=args.progress)
    manifest = save_dataset(cfg.data_root, train_clips, val_clips,
                            progress=args.progress)
    print(f'{len(train_clips)} training and {len(val_clips)} validation '
          f'clips written, manifest {manifest}')
    return EXIT_OK


def cmd_render_pose(cfg, args) -> int:
    out = _out_dir(cfg) / 'pose_frames'
    frames = read_frames(args.frames)
    poses = read_pose_jsonl(args.poses, num_frames=len(frames))
    renderer = PoseRenderer(cfg.render)
    rendered = renderer.render_clip(frames, poses)
    for t, frame in enumerate(rendered):
        _save_png(out / f'frame_{t:04d}.png', frame)
    print(f'{len(rendered)} frames rendered to {out} '
          f'({renderer.nan_skips} limbs skipped)')
    return EXIT_OK


def cmd_flow(cfg, args) -> int:
    out = _out_dir(cfg) / 'flow'
    gray = to_grayscale(read_frames(args.frames))
    if len(gray) < 2:
        raise ConfigError('flow needs at least two frames.')

    def pair(t):
        return tvl1_flow(gray[t], gray[t + 1], cfg.flow).to_array()

    with ThreadPoolExecutor(max_workers=_threads(args)) as pool:
        flows = list(pool.map(pair, range(len(gray) - 1)))
    for t, flow in enumerate(flows):
        write_flo(flow, out / f'flow_{t:04d}.flo')
        if args.color:
            _save_png(out / f'flow_{t:04d}.png', flow_to_color(flow))
    print(f'{len(flows)} flow fields written to {out}')
    return EXIT_OK


def _evaluate(cfg, params, backbone, modality, clips, builder, out, name):
    logits = predict_logits(params, backbone, clips, modality, builder,
                            cfg.clip_length, cfg.train.eval_batch_size,
                            cfg.train.pad)
    report = evaluate_logits(logits, [clip.label for clip in clips],
                             _class_names(cfg))
    report.save(out, name)
    return report


def _train_stream(cfg, args, distill=None, render_spec=None, out=None):
    train_clips, val_clips = load_dataset(cfg.data_root,
                                          progress=args.progress)
    modality = cfg.train.modality
    backbone = cfg.backbone_for(modality)
    builder = _builder(cfg, render_spec)
    params, log = train(backbone, train_clips, cfg.optim, distill=distill,
                        modality=modality, builder=builder,
                        clip_length=cfg.clip_length,
                        augment=cfg.train.augment, out_dir=out,
                        progress=args.progress)
    report = _evaluate(cfg, params, backbone, modality, val_clips, builder,
                       out, 'eval')
    return log, report


def cmd_train(cfg, args) -> int:
    out = _out_dir(cfg)
    _, report = _train_stream(cfg, args, out=out)
    print(report.to_text(f'{cfg.train.modality} stream'))
    return EXIT_OK


def cmd_distill(cfg, args) -> int:
    out = _out_dir(cfg)
    _, report = _train_stream(cfg, args, distill=cfg.distill_config(),
                              out=out)
    print(report.to_text(f'{cfg.train.modality} student '
                         f'({cfg.distill.mode} loss)'))
    return EXIT_OK


def cmd_eval(cfg, args) -> int:
    out = _out_dir(cfg)
    _, val_clips = load_dataset(cfg.data_root, progress=args.progress)
    modality = cfg.train.modality
    backbone = cfg.backbone_for(modality)
    params = load_checkpoint(args.checkpoint, backbone)
    report = _evaluate(cfg, params, backbone, modality, val_clips,
                       _builder(cfg), out, 'eval')
    print(report.to_text(f'{modality} stream'))
    return EXIT_OK


def _member(cfg, entry, builder) -> FusionMember:
    modality, _, path = entry.partition(':')
    if not path:
        raise ConfigError(f"member '{entry}' should read "
                          f"'<modality>:<checkpoint>'.")
    backbone = cfg.backbone_for(modality)
    return FusionMember(load_checkpoint(path, backbone), backbone, modality,
                        builder)


def cmd_fuse(cfg, args) -> int:
    out = _out_dir(cfg)
    _, val_clips = load_dataset(cfg.data_root, progress=args.progress)
    builder = _builder(cfg)
    members = [_member(cfg, entry, builder) for entry in args.member]
    report = late_fuse_eval(members, val_clips, cfg.clip_length,
                            _class_names(cfg), cfg.train.eval_batch_size)
    report.save(out, 'fuse')
    print(report.to_text('Late fusion of ' + ' + '.join(args.member)))
    return EXIT_OK


def cmd_gradcam(cfg, args) -> int:
    out = _out_dir(cfg) / 'gradcam'
    _, val_clips = load_dataset(cfg.data_root, progress=args.progress)
    if args.clip:
        clips = [clip for clip in val_clips if clip.id in args.clip]
        if len(clips) != len(set(args.clip)):
            raise ConfigError('unknown clip id among '
                              f'{", ".join(args.clip)}.')
    else:
        clips = val_clips[:args.limit]
    modality = cfg.train.modality
    backbone = cfg.backbone_for(modality)
    params = load_checkpoint(args.checkpoint, backbone)
    builder = _builder(cfg)
    for clip in clips:
        stream, moved = builder.eval_input(clip, modality, cfg.clip_length,
                                           cfg.train.pad)
        cam = grad_cam(params, backbone, stream, args.target, args.stage)
        base = stream if modality != 'flow' else moved.frames
        blended = overlay(cam, base)
        for t, frame in enumerate(blended):
            _save_png(out / clip.id / f'frame_{t:04d}.png', frame)
        _save_png(out / clip.id / 'montage.png', montage(blended))
        logger.info('%s: class %d at %s', clip.id, cam.class_index,
                    cam.stage)
    print(f'{len(clips)} response maps written to {out}')
    return EXIT_OK


def cmd_ablate_render(cfg, args) -> int:
    out = _out_dir(cfg)
    indices = args.variant or list(range(len(RENDER_VARIANTS)))
    for index in indices:
        if not 0 <= index < len(RENDER_VARIANTS):
            raise ConfigError(f'variant {index} outside '
                              f'[0, {len(RENDER_VARIANTS)}).')
    pose_cfg = replace(cfg, train=replace(cfg.train, modality='pose'))
    rows = []
    for index in indices:
        spec = RENDER_VARIANTS[index]
        run_dir = out / f'variant_{index}'
        _, report = _train_stream(pose_cfg, args, render_spec=spec,
                                  out=run_dir)
        rows.append({'variant': index, 'background': spec.background,
                     'marker': spec.marker,
                     'colors': 6 if spec.palette == 'coarse6' else 13,
                     'ratio_aware': spec.ratio_aware,
                     'top1': report.top1, 'top5': report.top5})
    table = pd.DataFrame(rows)
    try:
        table.to_csv(out / 'ablation.csv', index=False)
    except OSError as err:
        raise IoError(f'cannot write the ablation table: {err}') from err
    print(header('Pose rendering variants'))
    print(tabulate(table, headers='keys', showindex=False, floatfmt='.4f'))
    return EXIT_OK


COMMANDS = {
    'gen-data': cmd_gen_data,
    'render-pose': cmd_render_pose,
    'flow': cmd_flow,
    'train': cmd_train,
    'distill': cmd_distill,
    'eval': cmd_eval,
    'fuse': cmd_fuse,
    'gradcam': cmd_gradcam,
    'ablate-render': cmd_ablate_render,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='posestream',
        description='Multi-stream action recognition on stick-figure '
                    'videos: data, pose rendering, flow, training, '
                    'distillation, fusion and Grad-CAM.')
    parser.add_argument('--version', action='version',
                        version=f'%(prog)s {__version__}')
    parser.add_argument('--config', help='experiment configuration file')
    parser.add_argument('--set', action='append', default=[],
                        metavar='KEY=VALUE', help='override one setting')
    parser.add_argument('--seed', type=int, help='root seed')
    parser.add_argument('--out', help='output directory')
    parser.add_argument('--threads', type=int, default=1,
                        help='worker threads for flow computation')
    parser.add_argument('--deterministic', action='store_true',
                        help='force a single worker thread')
    parser.add_argument('--progress', action='store_true',
                        help='show progress bars')
    parser.add_argument('-v', '--verbose', action='store_true',
                        help='debug logging')
    commands = parser.add_subparsers(dest='command', required=True)

    commands.add_parser('gen-data', help='generate the synthetic dataset')
    render = commands.add_parser('render-pose',
                                 help='render poses over frames')
    render.add_argument('--frames', required=True, help='PNG frame folder')
    render.add_argument('--poses', required=True, help='pose JSON-lines')
    flow = commands.add_parser('flow', help='TV-L1 flow of a frame folder')
    flow.add_argument('--frames', required=True, help='PNG frame folder')
    flow.add_argument('--color', action='store_true',
                      help='also write colour-wheel PNGs')
    commands.add_parser('train', help='train one stream')
    commands.add_parser('distill', help='train a student from teachers')
    evaluate = commands.add_parser('eval', help='evaluate a checkpoint')
    evaluate.add_argument('--checkpoint', required=True)
    fuse = commands.add_parser('fuse', help='late fusion of checkpoints')
    fuse.add_argument('--member', action='append', required=True,
                      metavar='MODALITY:CHECKPOINT')
    cam = commands.add_parser('gradcam', help='Grad-CAM overlays')
    cam.add_argument('--checkpoint', required=True)
    cam.add_argument('--clip', action='append', default=[],
                     help='validation clip id (repeatable)')
    cam.add_argument('--limit', type=int, default=4,
                     help='clips to explain when no id is given')
    cam.add_argument('--target', type=int, help='class to explain')
    cam.add_argument('--stage', help='stage name, defaults to the last')
    ablate = commands.add_parser('ablate-render',
                                 help='train the pose stream per variant')
    ablate.add_argument('--variant', type=int, action='append',
                        help='variant index (repeatable), defaults to all')
    return parser


def _overrides(args) -> dict:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition('=')
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'.")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides['seed'] = str(args.seed)
    if args.out is not None:
        overrides['out_dir'] = args.out
    return overrides


def main(argv=None) -> int:
    """
    Run one command.

    Parameters
    ----------
    argv : list of str, optional
        The arguments, defaults to ``sys.argv[1:]``.

    Returns
    -------
    int
        The exit code.
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(levelname)s %(name)s: %(message)s')
    try:
        cfg = ExperimentConfig.load(args.config, _overrides(args))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as err:
        code, message = EXIT_CONFIG, str(err)
    except IoError as err:
        code, message = EXIT_IO, str(err)
    except DivergenceError as err:
        code, message = EXIT_DIVERGENCE, str(err)
    except PoseStreamError as err:
        code, message = EXIT_ERROR, str(err)
    except ValueError as err:
        code, message = EXIT_ERROR, str(err)
    print(f'posestream: error: {message}', file=sys.stderr)
    return code


if __name__ == '__main__':
    sys.exit(main())

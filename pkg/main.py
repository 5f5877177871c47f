"""
Main entry point - emotional voice conversion toolkit command line
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from core.config import ConfigManager
from core.corpus import generate_toy_corpus, read_manifest
from core.errors import CorpusError, DataError, EvoconvError, MissingModelError, UsageError
from core.evaluation import EvalReport, compare_archives, conversion_report, zero_effort_report
from core.logger import get_logger, setup_logger
from core.pipeline import (
    ConversionMode,
    Role,
    convert_utterance,
    ingest,
    load_checkpoint,
    save_checkpoint,
    train_prosody,
    train_spectrum,
)
from core.platform_utils import ensure_directories, get_config_dir, setup_initial_config
from core.signal_io import load_archive, read_wav, save_archive, write_wav

COMMANDS = ("extract", "train-spectrum", "train-prosody", "convert", "evaluate", "make-toy-corpus")


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting on bad usage"""

    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().strip()}")


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument('--config', default=None,
                        help=f'Path to config file (default: {get_config_dir()}/evoconv.yml)')
    common.add_argument('--seed', type=int, help='Override training.seed')
    common.add_argument('--out', help='Output file or directory')
    common.add_argument('--profile', choices=('desk', 'paper'), help='Training preset')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Override one config value, e.g. training.steps=200 (repeatable)')

    parser = _Parser(prog='evoconv', description='evoconv - emotional voice conversion toolkit')
    sub = parser.add_subparsers(dest='command', metavar='{' + ','.join(COMMANDS) + '}')
    sub.required = True

    p = sub.add_parser('extract', parents=[common], help='Analyse a manifest into feature archives')
    p.add_argument('--manifest', required=True, help='Tab-separated corpus manifest')

    for name, role in (('train-spectrum', 'spectrum'), ('train-prosody', 'prosody')):
        p = sub.add_parser(name, parents=[common], help=f'Train the {role} network')
        p.add_argument('--features', required=True, help='Directory of extracted .evcf archives')
        if role == 'spectrum':
            p.add_argument('--no-f0-condition', action='store_true',
                           help='Train the unconditioned (138-wide) spectrum network')

    p = sub.add_parser('convert', parents=[common], help='Convert utterances to a target emotion')
    p.add_argument('--in', dest='inputs', nargs='+', required=True, help='.wav or .evcf sources')
    p.add_argument('--target', required=True, help='Target emotion label')
    p.add_argument('--spectrum', help='Spectrum checkpoint')
    p.add_argument('--prosody', help='Prosody checkpoint (required in cwt mode)')
    p.add_argument('--mode', choices=[m.value for m in ConversionMode], default='cwt')
    p.add_argument('--source-emotion', help='Emotion of .wav sources')
    p.add_argument('--speaker', help='Speaker of .wav sources')

    p = sub.add_parser('evaluate', parents=[common], help='Objective evaluation report')
    p.add_argument('--a', help='First archive of a single comparison')
    p.add_argument('--b', help='Second archive of a single comparison')
    p.add_argument('--features', help='Directory of extracted archives (zero-effort rows)')
    p.add_argument('--converted', help='Directory of converted archives')
    p.add_argument('--source-emotion', default='neutral')
    p.add_argument('--target-emotion', default='angry')
    p.add_argument('--spectrum', help='Checkpoint whose training speakers count as seen')
    p.add_argument('--contours', help='Write aligned F0 contours as gnuplot data')

    sub.add_parser('make-toy-corpus', parents=[common], help='Write the synthetic two-emotion corpus')
    return parser


def load_config(args) -> ConfigManager:
    """Config file, then --profile, then --set, then --seed"""
    config = ConfigManager(args.config, required=args.config is not None)
    if args.profile:
        config.apply_profile(args.profile)
    for item in args.overrides:
        key, sep, value = item.partition('=')
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got '{item}'")
        config.set(key.strip(), value.strip())
    if args.seed is not None:
        config.set('training.seed', args.seed)
    return config


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} needs --out")
    return Path(args.out)


def load_features(directory) -> List:
    """Every .evcf archive of a directory, in file name order"""
    path = Path(directory)
    if not path.is_dir():
        raise DataError(f"Feature directory not found: {path}")
    files = sorted(path.glob('*.evcf'))
    if not files:
        raise CorpusError(f"No .evcf archives in {path}")
    return [load_archive(f) for f in files]


# Subcommands

def cmd_extract(args, config: ConfigManager) -> int:
    logger = get_logger()
    out_dir = _require_out(args)
    manifest = read_manifest(args.manifest)
    result = ingest(manifest, config.analysis, config.prosody, config.max_workers, config.provenance())
    if not result.archives:
        raise DataError(f"No utterance of {args.manifest} could be analysed")

    out_dir.mkdir(parents=True, exist_ok=True)
    for utt_id, archive in result.archives.items():
        save_archive(out_dir / f"{utt_id}.evcf", archive)
    if result.failures:
        lines = [f"{utt_id}\t{reason}" for utt_id, reason in result.failures.items()]
        (out_dir / 'failures.tsv').write_text("\n".join(lines) + "\n", encoding='utf-8')
        logger.warning(f"{len(result.failures)} utterances failed, see {out_dir / 'failures.tsv'}")
    logger.success(f"Extracted {len(result.archives)}/{len(manifest)} utterances to {out_dir}")
    return 0


def cmd_train(args, config: ConfigManager) -> int:
    logger = get_logger()
    out = _require_out(args)
    archives = load_features(args.features)
    if args.command == 'train-spectrum':
        if args.no_f0_condition:
            config.set('model.use_f0_condition', False)
        ckpt = train_spectrum(archives, config.model, config.training, config.provenance())
    else:
        ckpt = train_prosody(archives, config.model, config.training, config.prosody,
                             config.provenance())
    save_checkpoint(ckpt, out)
    final = ckpt.history[-1] if ckpt.history else None
    logger.success(
        f"Trained {ckpt.role.value} network on {len(archives)} utterances"
        + (f", final recon {final.recon:.4f}" if final else "")
    )
    return 0


def cmd_convert(args, config: ConfigManager) -> int:
    logger = get_logger()
    mode = ConversionMode(args.mode)
    if not args.spectrum:
        raise MissingModelError("convert needs a spectrum checkpoint (--spectrum)")
    if mode is ConversionMode.CWT and not args.prosody:
        raise MissingModelError("cwt conversion needs a prosody checkpoint (--prosody)")
    out_dir = _require_out(args)

    spec_ckpt = load_checkpoint(args.spectrum, Role.SPECTRUM)
    pros_ckpt = load_checkpoint(args.prosody, Role.PROSODY) if args.prosody else None
    out_dir.mkdir(parents=True, exist_ok=True)

    for item in args.inputs:
        path = Path(item)
        if path.suffix.lower() == '.evcf':
            source = load_archive(path)
            meta = None
        else:
            source = read_wav(path)
            meta = {'id': path.stem, 'source': path.name}
            if args.source_emotion:
                meta['emotion'] = args.source_emotion
            if args.speaker:
                meta['speaker'] = args.speaker

        result = convert_utterance(
            source, args.target, spec_ckpt, pros_ckpt, mode,
            config.analysis, config.prosody, config.seed, config.provenance(), meta,
        )
        utt_id = result.archive.metadata.get('id', path.stem)
        stem = f"{utt_id}_to_{args.target}"
        write_wav(out_dir / f"{stem}.wav", result.wave)
        save_archive(out_dir / f"{stem}.evcf", result.archive)

    logger.success(f"Converted {len(args.inputs)} utterances to '{args.target}' in {out_dir}")
    return 0


def cmd_evaluate(args, config: ConfigManager) -> int:
    logger = get_logger()
    seen = None
    if args.spectrum:
        seen = load_checkpoint(args.spectrum).speakers

    if args.a or args.b:
        if not (args.a and args.b):
            raise UsageError("--a and --b go together")
        report = compare_archives([(load_archive(args.a), load_archive(args.b))], 'pair', seen)
    elif args.features:
        archives = load_features(args.features)
        sources = [a for a in archives if a.metadata.get('emotion') == args.source_emotion]
        targets = [a for a in archives if a.metadata.get('emotion') == args.target_emotion]
        report = zero_effort_report(sources, targets, seen)
        if args.converted:
            converted = [a for a in load_features(args.converted)
                         if a.metadata.get('emotion') == args.target_emotion]
            report.extend(conversion_report(converted, targets, 'converted', seen))
        if not report.rows:
            raise CorpusError(
                f"No parallel {args.source_emotion}/{args.target_emotion} pairs to evaluate"
            )
    else:
        raise UsageError("evaluate needs --a/--b or --features")

    report.metadata.update({k: v for k, v in config.provenance().items() if k != 'config'})
    text = render_report(report, config)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding='utf-8')
    else:
        sys.stdout.write(text)
    if args.contours:
        Path(args.contours).write_text(report.contour_dump(), encoding='utf-8')
    logger.success(f"Evaluated {len(report.rows)} pairs across {len(report.systems)} systems")
    return 0


def render_report(report: EvalReport, config: ConfigManager) -> str:
    """Report text followed by the effective config as comment lines"""
    config_lines = ["# " + line for line in config.dump().splitlines()]
    return report.render() + "\n# effective config\n" + "\n".join(config_lines) + "\n"


def cmd_make_toy_corpus(args, config: ConfigManager) -> int:
    logger = get_logger()
    out_dir = _require_out(args)
    corpus = generate_toy_corpus(out_dir, config.seed, config.corpus)
    (out_dir / 'provenance.yml').write_text(config.dump(), encoding='utf-8')
    logger.success(f"Wrote {len(corpus.manifest)} utterances and {corpus.manifest_path}")
    return 0


HANDLERS = {
    'extract': cmd_extract,
    'train-spectrum': cmd_train,
    'train-prosody': cmd_train,
    'convert': cmd_convert,
    'evaluate': cmd_evaluate,
    'make-toy-corpus': cmd_make_toy_corpus,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand

    Returns:
        0 on success, 1 on validation or usage errors, 2 on I/O or corrupt data
    """
    logger = get_logger()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"evoconv: {e}\n")
        return UsageError.exit_code
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    try:
        ensure_directories()
        setup_initial_config()
        config = load_config(args)
        setup_logger(
            log_dir=config.log_dir,
            console_level=config.console_log_level,
            file_level=config.file_log_level,
            rotation=config.get('logging.rotation'),
            retention=config.get('logging.retention'),
            compression=config.get('logging.compression'),
        )
        logger.info(f"evoconv {args.command} (seed {config.seed}, profile {config.profile or 'default'})")
        return HANDLERS[args.command](args, config)
    except UsageError as e:
        sys.stderr.write(f"evoconv {args.command}: {e}\n")
        return e.exit_code
    except EvoconvError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return DataError.exit_code


def main():
    """Console script entry point"""
    sys.exit(run())


if __name__ == '__main__':
    main()

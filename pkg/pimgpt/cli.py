"""
pimgpt.cli: Command-line front end

    python -m pimgpt run --model gpt3-small --tokens 1024 --out small.json
    python -m pimgpt sweep asic_freq 1e9,5e8,2e8,1e8 --model gpt2-medium --format csv
    python -m pimgpt map dump --model gpt2-small
    python -m pimgpt compile --model gpt2-small --position 8 --dump
    python -m pimgpt numerics report
    python -m pimgpt validate

Exit status: 0 success, 1 configuration error, 2 capacity error, 3 constraint violation.
"""

import os
import sys
import json
import logging
import argparse

from pimgpt import __version__
from pimgpt.config import ConfigException, ConstraintException, load_config, CONFIG_ENV
from pimgpt.models import GptModelConfig, lookup_model
from pimgpt.mapper import CapacityException, GeometryException, OverflowException, build_memory_map
from pimgpt.compiler import CompileException, compile_token
from pimgpt.engine import TimingViolation
from pimgpt.numerics import ShapeException
from pimgpt.numerics.oracle import error_report, format_report
from pimgpt.report import run, Sweep, SWEEP_DIMENSIONS

log = logging.getLogger(__name__)

__all__ = 'main', 'build_parser', 'EXIT_OK', 'EXIT_CONFIG', 'EXIT_CAPACITY', 'EXIT_VIOLATION'


EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CAPACITY = 2
EXIT_VIOLATION = 3

VALIDATE_MODEL = GptModelConfig.build('validate', num_layers=2, d_model=256, num_heads=4, vocab_size=512,
                                      max_tokens=8)


class ViolationsFound(Exception):
    """Exception raised when the trace checker reports violations."""
    pass


def _config(args):
    path = args.config or os.environ.get(CONFIG_ENV)
    cfg = load_config(path)
    overrides = {}
    for flag, key in (('channels', 'geometry.channels'), ('mac_width', 'pim.mac_width'),
                      ('asic_freq', 'asic.clock'), ('pin_rate', 'geometry.pin_rate')):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return cfg.override(overrides) if overrides else cfg


def _emit(lines, out=None):
    text = '\n'.join(lines) + '\n'
    if out:
        with open(out, 'w') as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def cmd_run(args):
    cfg = _config(args)
    report = run(args.model, args.tokens, cfg=cfg, detail=bool(args.trace))
    if args.trace:
        report.trace.write(args.trace)
        log.info("Wrote %d trace events to %s", len(report.trace), args.trace)
    if args.out:
        report.write(args.out, args.format)
    else:
        lines = report.summary_lines()
        if args.energy_detail:
            lines.extend(report.energy.lines(detail=True))
        _emit(lines)
    if report.violations:
        raise ViolationsFound('%d timing violations' % len(report.violations))


def cmd_sweep(args):
    cfg = _config(args)
    values = [float(v) for v in args.values.split(',') if v.strip()]
    models = args.model.split(',')
    code = EXIT_OK
    for name in models:
        sw = Sweep(args.dimension, values, name, args.tokens, cfg)
        sw.progress += lambda i, n, v: log.info("sweep %s: %d/%d (%s=%g)", sw.model.name, i + 1, n, args.dimension, v)
        sw.run(args.jobs)
        if args.out:
            root, ext = os.path.splitext(args.out)
            sw.write(args.out if len(models) == 1 else '%s-%s%s' % (root, sw.model.name, ext), args.format)
        elif args.format == 'json':
            _emit([json.dumps(sw.as_dict(), indent=1, sort_keys=True)])
        else:
            _emit(sw._serialize())
    return code


def cmd_map(args):
    cfg = _config(args)
    model = lookup_model(args.model)
    if args.tokens > model.max_tokens:
        model = model.with_max_tokens(args.tokens)
    mmap = build_memory_map(model, cfg, args.tokens or model.max_tokens)
    problems = mmap.check()
    for p in problems:
        log.error("map: %s", p)
    _emit([mmap.to_json()], args.out)
    if problems:
        raise ViolationsFound('%d mapping problems' % len(problems))


def cmd_compile(args):
    cfg = _config(args)
    model = lookup_model(args.model)
    if args.position > model.max_tokens:
        model = model.with_max_tokens(args.position)
    mmap = build_memory_map(model, cfg, model.max_tokens)
    stream = compile_token(model, mmap, cfg, args.position, args.token_id)
    if args.dump:
        _emit(stream.dump(), args.out)
    else:
        _emit(['%-6s %-14s %d' % (target, opcode, n) for (target, opcode), n in sorted(stream.counts().items())],
              args.out)


def cmd_numerics(args):
    rows = error_report(args.samples, args.seed)
    if args.format == 'json':
        _emit([json.dumps([r.as_dict() for r in rows], indent=1)], args.out)
    else:
        _emit(format_report(rows), args.out)


def cmd_validate(args):
    cfg = _config(args)
    model = lookup_model(args.model) if args.model else VALIDATE_MODEL
    report = run(model.with_max_tokens(max(args.tokens, 1)), args.tokens, cfg=cfg, detail=True)
    lines = ['config ok: %d channels x %d banks, %d-element rounds' %
             (cfg.geometry.channels, cfg.geometry.banks_per_channel, cfg.round_elements),
             '%s, %d tokens: %d events, %d refreshes, %d violations' %
             (model.name, args.tokens, len(report.trace), sum(report.trace.channel_refs), len(report.violations))]
    lines.extend(report.violations)
    _emit(lines)
    if report.violations:
        raise ViolationsFound('%d timing violations' % len(report.violations))


def _hw_flags(p):
    p.add_argument('--config', help='hardware config file (YAML or JSON); default $%s' % CONFIG_ENV)
    p.add_argument('--channels', type=int, help='PIM channels')
    p.add_argument('--mac-width', type=int, help='elements per MAC access')
    p.add_argument('--asic-freq', type=float, help='ASIC clock, Hz')
    p.add_argument('--pin-rate', type=float, help='data pin rate, Gb/s')


def build_parser():
    parser = argparse.ArgumentParser(prog='pimgpt', description='PIM GPT decoding simulator')
    parser.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    parser.add_argument('-v', '--verbose', action='count', default=0, help='INFO, twice for DEBUG')
    sub = parser.add_subparsers(dest='command')
    sub.required = True

    p = sub.add_parser('run', help='simulate generating tokens')
    p.add_argument('--model', default='gpt3-small')
    p.add_argument('--tokens', type=int, default=1024)
    _hw_flags(p)
    p.add_argument('--out', help='report file')
    p.add_argument('--format', choices=('json', 'csv'), default='json')
    p.add_argument('--trace', help='record every command and write the CSV trace here')
    p.add_argument('--energy-detail', action='store_true', help='per-stage and per-engine energy lines')
    p.set_defaults(func=cmd_run)

    p = sub.add_parser('sweep', help='one run per parameter value')
    p.add_argument('dimension', choices=sorted(SWEEP_DIMENSIONS))
    p.add_argument('values', help='comma-separated values; the first is the normalization baseline')
    p.add_argument('--model', default='gpt3-small', help='model name, or several separated by commas')
    p.add_argument('--tokens', type=int, default=1024)
    p.add_argument('--jobs', type=int, default=1, help='parallel runs')
    _hw_flags(p)
    p.add_argument('--out')
    p.add_argument('--format', choices=('json', 'csv'), default='csv')
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser('map', help='memory map')
    p.add_argument('action', choices=('dump',))
    p.add_argument('--model', default='gpt3-small')
    p.add_argument('--tokens', type=int, default=0, help='KV capacity (default: the model context)')
    _hw_flags(p)
    p.add_argument('--out')
    p.set_defaults(func=cmd_map)

    p = sub.add_parser('compile', help='instruction stream of one token step')
    p.add_argument('--model', default='gpt3-small')
    p.add_argument('--position', type=int, default=1, help='1-based token position')
    p.add_argument('--token-id', type=int, default=0)
    p.add_argument('--dump', action='store_true', help='list every instruction')
    _hw_flags(p)
    p.add_argument('--out')
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser('numerics', help='BF16 block accuracy')
    p.add_argument('action', choices=('report',))
    p.add_argument('--samples', type=int, default=10000)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--format', choices=('text', 'json'), default='text')
    p.add_argument('--out')
    p.set_defaults(func=cmd_numerics)

    p = sub.add_parser('validate', help='check the config and a small detailed simulation')
    p.add_argument('--model', help='catalog model (default: a 2-layer reduced model)')
    p.add_argument('--tokens', type=int, default=4)
    _hw_flags(p)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format='%(levelname)s %(name)s: %(message)s')
    try:
        return args.func(args) or EXIT_OK
    except (ConfigException, ConstraintException, ValueError) as e:
        log.error("%s", e)
        return EXIT_CONFIG
    except (CapacityException, GeometryException, OverflowException, CompileException) as e:
        log.error("%s", e)
        return EXIT_CAPACITY
    except (TimingViolation, ViolationsFound, ShapeException) as e:
        log.error("%s", e)
        return EXIT_VIOLATION

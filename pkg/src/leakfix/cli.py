"""Command line front end: ``leakfix <command> ...``."""
from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from .asm import AsmError, emit, parse
from .corpus import BINDINGS, Binding, CorpusError, get_entry, make_binding
from .model import COMPONENTS, ConfigError, ModelConfig, emulate_power
from .pipeline import PipelineConfig, campaign, fixed_input_list, leak_trend, run_pipeline
from .rewrite import RewriteLog, fix_iteration
from .tvla import TTestReport


class RegionBinding(Binding):
    """Unmasked secrets written straight into one data region."""

    def __init__(self, program, region: str, regs: dict):
        if region not in program.data:
            raise CorpusError(f"no data region named '{region}'")
        self.region = program.data[region]
        self.input_size = self.region.size
        self.regs = regs
        self.name = f"raw:{region}"

    def fill(self, state, secrets, rng):
        state.write_bytes(self.region.base, secrets)
        for r, v in self.regs.items():
            state.set_reg(r, v)
        return {}


def _reg_assign(items) -> dict:
    out = {}
    for item in items or []:
        name, _, value = item.partition("=")
        if not name.startswith("r") or not value:
            raise SystemExit(f"bad register binding '{item}' (expected rN=value)")
        out[int(name[1:])] = int(value, 0)
    return out


def _load_target(args):
    """(program, binding, fixed template) from --corpus or --asm/--binding."""
    if getattr(args, "corpus", None):
        entry = get_entry(args.corpus)
        binding = entry.binding
        if args.binding:
            binding = make_binding(args.binding)
        return entry.program, binding, entry.fixed_input
    if not args.asm:
        raise SystemExit("give --asm FILE or --corpus NAME")
    with open(args.asm, encoding="utf-8") as fh:
        program = parse(fh.read())
    if not args.binding:
        raise SystemExit("--binding is required with --asm "
                         f"(one of {', '.join(BINDINGS)} or raw:REGION)")
    if args.binding.startswith("raw:"):
        binding = RegionBinding(program, args.binding[4:], _reg_assign(args.reg))
    else:
        binding = make_binding(args.binding)
    return program, binding, None


def _model(args) -> ModelConfig:
    cfg = ModelConfig.load(args.model) if getattr(args, "model", None) else ModelConfig.default()
    if getattr(args, "noise_sigma", None) is not None:
        cfg.noise_sigma = args.noise_sigma
    return cfg


def _fixed(arg: str, binding, seed: int, template):
    try:
        count = int(arg)
    except ValueError:
        with open(arg, encoding="utf-8") as fh:
            rows = [bytes.fromhex(line.strip()) for line in fh if line.strip()]
        for r in rows:
            if len(r) != binding.input_size:
                raise SystemExit(f"fixed input has {len(r)} bytes, expected {binding.input_size}")
        return [np.frombuffer(r, dtype=np.uint8).copy() for r in rows]
    return fixed_input_list(binding, count, seed, template)


def _target_args(p, model=True):
    p.add_argument("--asm", help="assembly file")
    p.add_argument("--corpus", help="corpus entry name instead of --asm")
    p.add_argument("--binding", help="input binding scheme (or raw:REGION)")
    p.add_argument("--reg", action="append", help="rN=value register setting for raw bindings")
    p.add_argument("--seed", type=int, default=0)
    if model:
        p.add_argument("--model", help="model coefficient file")
        p.add_argument("--noise-sigma", type=float, default=None)


def cmd_check(args) -> int:
    status = 0
    for path in args.files:
        try:
            with open(path, encoding="utf-8") as fh:
                prog = parse(fh.read())
        except AsmError as exc:
            print(f"{path}: {exc.kind}: {exc}", file=sys.stderr)
            status = 1
            continue
        print(f"{path}: ok, {len(prog.text)} instructions")
    return status


def cmd_trace(args) -> int:
    program, binding, _ = _load_target(args)
    rng = np.random.default_rng(args.seed)
    secrets = rng.integers(0, 256, (1, binding.input_size), dtype=np.uint8)
    state = binding.make_state(program, secrets, rng)
    samples = emulate_power(program, state, _model(args), args.seed)
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["slot", "mnemonic", "total", *COMPONENTS])
    for s in samples:
        w.writerow([s.slot, s.mnemonic, f"{s.total[0]:.6g}", *(int(v) for v in s.components[:, 0])])
    if args.out:
        out.close()
    return 0


def cmd_campaign(args) -> int:
    program, binding, template = _load_target(args)
    fixed = _fixed(args.fixed_inputs, binding, args.seed + 1, template)
    report = campaign(program, binding, _model(args), fixed, args.traces, args.threshold,
                      args.seed)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
    for s in report.flagged():
        print(f"slot {s.slot} pc {s.pc} {program.text[s.pc].text()}: "
              f"t={s.t_total:.2f} max|t|={s.max_abs_t():.2f} cause={s.cause}")
    print(f"{len(report.flagged())} of {len(report)} slots flagged")
    return 0


def cmd_rewrite(args) -> int:
    with open(args.asm, encoding="utf-8") as fh:
        program = parse(fh.read(), allow_mask_register=True)
    with open(args.report, encoding="utf-8") as fh:
        report = TTestReport.from_csv(fh.read(), args.threshold)
    new, entries = fix_iteration(program, report)
    log = RewriteLog(entries, fixpoint_reached=not report.flagged(), iterations=1)
    text = emit(new)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    sys.stderr.write(log.text())
    return 0


def cmd_matrix(args) -> int:
    from .asm import TABLE_UNIVERSE
    from .lab import build_matrix, matrix_csv, matrix_grid

    universe = TABLE_UNIVERSE
    if args.instructions:
        universe = tuple(m.strip() for m in args.instructions.split(",") if m.strip())
        unknown = [m for m in universe if m not in TABLE_UNIVERSE]
        if unknown:
            raise SystemExit(f"not in the probed instruction set: {', '.join(unknown)}")
    m = build_matrix(_model(args), args.seed, args.runs, universe=universe)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(matrix_csv(m, universe))
    sys.stdout.write(matrix_grid(m, universe))
    return 0


def cmd_trend(args) -> int:
    program, binding, _ = _load_target(args)
    counts = [int(c) for c in args.counts.split(",")]
    rows = leak_trend(program, binding, counts, _model(args), args.repeats, args.traces,
                      args.threshold, args.seed)
    print("n_fixed\tmean\t95% CI")
    for r in rows:
        print(r)
    return 0


def cmd_run(args) -> int:
    program, binding, template = _load_target(args)
    fixed = args.fixed_inputs
    try:
        fixed = int(fixed)
    except ValueError:
        fixed = _fixed(fixed, binding, args.seed, template)
    cfg = PipelineConfig(program, binding, _model(args), traces=args.traces,
                         final_traces=args.final_traces, fixed_inputs=fixed,
                         max_iterations=args.max_iterations, threshold=args.threshold,
                         seed=args.seed, out_dir=args.out, fixed_template=template)
    result = run_pipeline(cfg)
    sys.stdout.write(result.summary())
    return 0 if not result.remaining else 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="leakfix",
                                 description="Emulate power leakage of masked assembly and fix it.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="parse and validate assembly files")
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("trace", help="dump one emulated power trace as CSV")
    _target_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("campaign", help="fixed-vs-random t-test campaign")
    _target_args(p)
    p.add_argument("--traces", type=int, default=10_000)
    p.add_argument("--threshold", type=float, default=4.5)
    p.add_argument("--fixed-inputs", default="1", help="count, or a file of hex lines")
    p.add_argument("--out", help="report CSV path")
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("rewrite", help="apply one round of fixes from a report CSV")
    p.add_argument("asm")
    p.add_argument("report")
    p.add_argument("--threshold", type=float, default=4.5)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_rewrite)

    p = sub.add_parser("matrix", help="instruction interaction matrix")
    p.add_argument("--runs", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model")
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--csv")
    p.add_argument("--instructions", help="comma-separated subset of the instruction set")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("trend", help="flagged slots against number of fixed inputs")
    _target_args(p)
    p.add_argument("--counts", default="1,5,10")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--traces", type=int, default=10_000)
    p.add_argument("--threshold", type=float, default=4.5)
    p.set_defaults(func=cmd_trend)

    p = sub.add_parser("run", help="full emulate/test/rewrite loop")
    _target_args(p)
    p.add_argument("--traces", type=int, default=10_000)
    p.add_argument("--final-traces", type=int, default=100_000)
    p.add_argument("--fixed-inputs", default="1")
    p.add_argument("--max-iterations", type=int, default=20)
    p.add_argument("--threshold", type=float, default=4.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (AsmError, ConfigError, CorpusError, OSError) as exc:
        print(f"leakfix: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Emulate, test, rewrite, repeat: the leak-elimination loop."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .asm import Program, emit
from .model import ModelConfig
from .rewrite import RewriteLog, fix_iteration, semantic_equiv_check
from .tvla import (CampaignSpec, InputBinding, TTestReport, aggregate_max, run_single)


@dataclass
class PipelineConfig:
    program: Program
    binding: InputBinding
    model: ModelConfig = field(default_factory=ModelConfig.default)
    traces: int = 10_000
    final_traces: int = 100_000
    fixed_inputs: int | list = 1
    max_iterations: int = 20
    threshold: float = 4.5
    seed: int = 0
    out_dir: str | None = None
    # bytes placed first among the fixed inputs used while fixing
    fixed_template: bytes | None = None
    verify: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class PipelineResult:
    program: Program
    original: Program
    flagged_per_iteration: list
    remaining: list
    before: int
    after: int
    log: RewriteLog
    reports: list
    final_report: TTestReport | None
    equivalent: bool | None = None
    # the program at the start of every iteration, then the final one
    history: list = field(default_factory=list)

    @property
    def overhead(self) -> float:
        return self.after / self.before if self.before else 1.0

    @property
    def converged(self) -> bool:
        return bool(self.flagged_per_iteration) and self.flagged_per_iteration[-1] == 0

    def summary(self) -> str:
        final_max = self.final_report.max_abs_t() if self.final_report else float("nan")
        rows = [
            ("instructions_before", self.before),
            ("instructions_after", self.after),
            ("overhead_ratio", f"{self.overhead:.4f}"),
            ("iterations", self.log.iterations),
            ("fixpoint_reached", self.log.fixpoint_reached),
            ("flagged_per_iteration", " ".join(map(str, self.flagged_per_iteration))),
            ("leaks_before", self.flagged_per_iteration[0] if self.flagged_per_iteration else 0),
            ("leaks_remaining", len(self.remaining)),
            ("final_max_abs_t", f"{final_max:.4f}"),
            ("semantically_equivalent", self.equivalent),
        ]
        return "".join(f"{k} = {v}\n" for k, v in rows)


def fixed_input_list(binding: InputBinding, spec, seed: int, template: bytes | None = None,
                     avoid: list | None = None) -> list:
    """Resolve a count or explicit list into fixed input vectors."""
    if not isinstance(spec, int):
        return [np.asarray(f, dtype=np.uint8) for f in spec]
    rng = np.random.default_rng(seed)
    out = []
    if template is not None and spec > 0:
        out.append(np.frombuffer(bytes(template), dtype=np.uint8).copy())
    seen = {bytes(a) for a in (avoid or [])}
    while len(out) < spec:
        cand = rng.integers(0, 256, binding.input_size, dtype=np.uint8)
        if bytes(cand) not in seen:
            out.append(cand)
    return out


def campaign(program: Program, binding: InputBinding, model: ModelConfig, fixed: list,
             traces: int, threshold: float, seed: int) -> TTestReport:
    spec = CampaignSpec(program, binding, traces, fixed, threshold, seed)
    rng = np.random.default_rng(seed)
    return aggregate_max([run_single(spec, model, f, rng) for f in fixed])


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    program = cfg.program
    fixing_inputs = fixed_input_list(cfg.binding, cfg.fixed_inputs, cfg.seed, cfg.fixed_template)
    log = RewriteLog()
    flagged, reports, history = [], [], [program]
    it = 0
    while True:
        report = campaign(program, cfg.binding, cfg.model, fixing_inputs, cfg.traces,
                          cfg.threshold, cfg.seed + 7919 * it)
        reports.append(report)
        flagged.append(len(report.flagged()))
        if not flagged[-1]:
            log.fixpoint_reached = True
            break
        if it >= cfg.max_iterations:
            break
        new, entries = fix_iteration(program, report)
        for e in entries:
            e.iteration = it
        log.entries.extend(entries)
        if new == program:
            break  # nothing applicable: stuck short of a fixpoint
        program = new
        history.append(program)
        it += 1
        log.iterations = it

    final = None
    remaining = [s.slot for s in report.flagged()]
    if cfg.verify:
        # fresh seed and fixed inputs disjoint from the ones used while fixing
        n_final = max(len(fixing_inputs), 5)
        verify_inputs = fixed_input_list(cfg.binding, n_final, cfg.seed + 104729,
                                         avoid=fixing_inputs)
        final = campaign(program, cfg.binding, cfg.model, verify_inputs, cfg.final_traces,
                         cfg.threshold, cfg.seed + 1_000_003)
        remaining = final.flagged_slots()

    equivalent = None
    make = getattr(cfg.binding, "equiv_states", None)
    if program != cfg.program:
        equivalent = bool(semantic_equiv_check(cfg.program, program, 1000, cfg.seed,
                                               make_state=make))
    result = PipelineResult(program, cfg.program, flagged, remaining, len(cfg.program.text),
                            len(program.text), log, reports, final, equivalent, history)
    if cfg.out_dir:
        write_outputs(result, cfg.out_dir)
    return result


def write_outputs(result: PipelineResult, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)

    def put(name, text):
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            fh.write(text)

    put("fixed.s", emit(result.program))
    put("rewrite_log.txt", result.log.text())
    put("summary.txt", result.summary())
    for i, rep in enumerate(result.reports):
        put(f"report_iter{i}.csv", rep.to_csv())
        put(f"t_iter{i}.csv", _plot_csv(rep))
    if result.final_report is not None:
        put("report_final.csv", result.final_report.to_csv())
        put("t_final.csv", _plot_csv(result.final_report))
    put("plot.gp", _gnuplot(len(result.reports), result.final_report is not None))


def _plot_csv(report: TTestReport) -> str:
    return "slot,t\n" + "".join(f"{s.slot},{s.t_total:.6g}\n" for s in report.slots)


def _gnuplot(n_iter: int, final: bool) -> str:
    files = [f"t_iter{i}.csv" for i in range(n_iter)] + (["t_final.csv"] if final else [])
    plots = ", \\\n     ".join(f"'{f}' using 1:2 with lines title '{f[2:-4]}'" for f in files)
    return ("set datafile separator ','\nset key autotitle columnhead\n"
            "set xlabel 'slot'\nset ylabel 't'\n"
            "set arrow from graph 0, first 4.5 to graph 1, first 4.5 nohead dt 2\n"
            "set arrow from graph 0, first -4.5 to graph 1, first -4.5 nohead dt 2\n"
            f"plot {plots}\n")


@dataclass
class TrendRow:
    n_fixed: int
    mean: float
    ci_low: float
    ci_high: float
    counts: list

    def __str__(self):
        return f"{self.n_fixed}\t{self.mean:.3f}\t[{self.ci_low:.3f}, {self.ci_high:.3f}]"


def leak_trend(program: Program, binding: InputBinding, counts: list,
               model: ModelConfig | None = None, repeats: int = 10, traces: int = 10_000,
               threshold: float = 4.5, seed: int = 0) -> list:
    """Mean number of flagged slots (with a 95% CI) against the number of fixed inputs.

    Each repetition draws one pool of fixed inputs and evaluates every count
    on a prefix of it, so the counts share random inputs within a repetition.
    """
    model = model or ModelConfig.default()
    top = max(counts, default=0)
    per_count = {k: [] for k in counts}
    for rep in range(repeats):
        rs = seed + 65537 * (rep + 1)
        pool = fixed_input_list(binding, top, rs)
        spec = CampaignSpec(program, binding, traces, pool, threshold, rs) if top else None
        rng = np.random.default_rng(rs)
        singles = [run_single(spec, model, f, rng) for f in pool]
        for k in counts:
            per_count[k].append(len(aggregate_max(singles[:k]).flagged()) if k else 0)
    rows = []
    for k in counts:
        xs = np.asarray(per_count[k], dtype=float)
        mean = float(xs.mean())
        if repeats > 1 and xs.std(ddof=1) > 0:
            half = float(stats.t.ppf(0.975, repeats - 1) * xs.std(ddof=1) / np.sqrt(repeats))
        else:
            half = 0.0
        rows.append(TrendRow(k, mean, mean - half, mean + half, list(per_count[k])))
    return rows

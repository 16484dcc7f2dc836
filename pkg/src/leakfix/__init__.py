"""Instruction-level power leakage emulation and automatic fixing for masked
Thumb assembly."""

from ._kernels import BACKEND
from .asm import AsmError, Instruction, Program, emit, parse
from .machine import DivergenceError, MachineError, MachineState, run
from .model import COMPONENTS, ModelConfig, PowerSample, emulate_power, hd, hw, leak_step
from .tvla import (CampaignSpec, TTestReport, WelfordAccumulator, aggregate_max, merge,
                   run_campaign, welch_t, welford_update)
from .rewrite import apply_rule, fix_iteration, semantic_equiv_check
from .pipeline import PipelineConfig, leak_trend, run_pipeline
from .corpus import load_corpus

__version__ = "0.1.0"

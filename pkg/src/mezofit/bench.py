"""Matched-budget fine-tuning benchmark: a larger MeZO model vs. a smaller
BP model whose analytic memory totals both fit the same byte budget.

Runs a learning-rate grid per method on a synthetic task, evaluates on a
held-out split on a fixed cadence, and reports running-max accuracy curves.
All randomness derives from the plan's run_seed, so repeated runs produce
identical numbers except for the wall-clock fields.
"""
from __future__ import annotations

import dataclasses
import io
import time
from dataclasses import dataclass, field

import numpy as np

from mezofit.memory import ConfigError, ModelConfig, bp_memory, mezo_memory
from mezofit.model import LedgerMode, ToyTransformer, loss_from_logits
from mezofit.tasks import ToyTask, accuracy
from mezofit.zo import (
    NonfiniteGradError,
    NonfiniteLossError,
    ZOConfig,
    bp_sgd_step,
    mezo_step,
    splitmix64,
)

EVAL_SEQUENCES = 128  # held-out split size, fixed for determinism
BUDGET_MATCH_TOLERANCE = 0.15  # the two totals must agree within 15%

CSV_COLUMNS = ("method", "learning_rate", "step", "wall_clock_s",
               "train_loss", "eval_accuracy", "running_max_accuracy")


@dataclass(frozen=True)
class ExperimentPlan:
    budget_bytes: float
    bp_model: ModelConfig
    mezo_model: ModelConfig
    task: ToyTask
    steps: int
    eval_every: int
    lr_grid_bp: tuple[float, ...]
    lr_grid_mezo: tuple[float, ...]
    zo: ZOConfig
    run_seed: int

    def __post_init__(self) -> None:
        if self.steps < 0 or self.eval_every < 1:
            raise ConfigError("steps must be >= 0 and eval_every >= 1")
        if not self.lr_grid_bp or not self.lr_grid_mezo:
            raise ConfigError("learning-rate grids must be non-empty")
        bp_total = bp_memory(self.bp_model).total_bytes
        mezo_total = mezo_memory(self.mezo_model).total_bytes
        if bp_total > self.budget_bytes or mezo_total > self.budget_bytes:
            raise ConfigError(
                f"matched-budget violation: BP needs {bp_total:.4g} B and MeZO "
                f"{mezo_total:.4g} B against a budget of {self.budget_bytes:.4g} B")
        if (ToyTransformer(self.mezo_model).param_count()
                <= ToyTransformer(self.bp_model).param_count()):
            raise ConfigError(
                "the MeZO model must have strictly more parameters than the BP model")
        if max(bp_total, mezo_total) / min(bp_total, mezo_total) > 1 + BUDGET_MATCH_TOLERANCE:
            raise ConfigError(
                f"matched-budget violation: totals {bp_total:.4g} B and "
                f"{mezo_total:.4g} B differ by more than "
                f"{BUDGET_MATCH_TOLERANCE:.0%}")
        probe_tokens, probe_targets = self.task.batch(range(1))
        for name, cfg in (("bp", self.bp_model), ("mezo", self.mezo_model)):
            _, cropped = _crop_to_window(cfg, probe_tokens, probe_targets)
            if not (cropped >= 0).any():
                raise ConfigError(
                    f"the {name} model's context window of {cfg.context_length} "
                    f"contains no defined target positions for this task")


@dataclass(frozen=True)
class RunRecord:
    method: str
    learning_rate: float
    step: int
    wall_clock_s: float
    train_loss: float
    eval_accuracy: float
    running_max_accuracy: float


@dataclass
class RunResult:
    method: str
    learning_rate: float
    records: list[RunRecord]
    failed: bool = False
    fail_reason: str | None = None
    cpu_time_s: float = 0.0
    wall_time_s: float = 0.0

    @property
    def final_running_max(self) -> float:
        return self.records[-1].running_max_accuracy if self.records else float("-inf")


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    runs: list[RunResult] = field(default_factory=list)

    def best_run(self, method: str) -> RunResult:
        candidates = [r for r in self.runs if r.method == method and not r.failed]
        if not candidates:
            raise ValueError(f"all {method} runs failed")
        # ties resolve to the earliest grid entry; order is deterministic
        return max(candidates, key=lambda r: r.final_running_max)

    def all_records(self) -> list[RunRecord]:
        return [rec for run in self.runs for rec in run.records]


def _eval_points(steps: int, eval_every: int) -> list[int]:
    points = list(range(0, steps + 1, eval_every))
    if points[-1] != steps:
        points.append(steps)
    return points


def run_experiment(plan: ExperimentPlan, progress: bool = False) -> ExperimentResult:
    """Train every (method, learning rate) combination in the plan."""
    result = ExperimentResult(plan)
    for method, grid, cfg in (("bp", plan.lr_grid_bp, plan.bp_model),
                              ("mezo", plan.lr_grid_mezo, plan.mezo_model)):
        for lr in grid:
            result.runs.append(_run_single(plan, method, lr, cfg, progress))
    return result


def _crop_to_window(cfg: ModelConfig, tokens: np.ndarray,
                    targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Standard context truncation: a model sees the last context_length
    tokens of each sample."""
    window = min(cfg.context_length, tokens.shape[1])
    return tokens[:, -window:], targets[:, -window:]


def _windowed_accuracy(cfg: ModelConfig, model: ToyTransformer,
                       theta, tokens: np.ndarray, targets: np.ndarray) -> float:
    """Accuracy over every defined target position of the full samples.

    Positions outside the model's context window count as incorrect: a model
    that cannot ingest a position cannot answer it."""
    vis_tokens, vis_targets = _crop_to_window(cfg, tokens, targets)
    logits, _ = model.forward(theta, vis_tokens, mode=LedgerMode.MEZO)
    mask = vis_targets >= 0
    correct = int(np.sum(logits.argmax(axis=-1)[mask] == vis_targets[mask]))
    total = int(np.sum(targets >= 0))
    return correct / total


def _run_single(plan: ExperimentPlan, method: str, lr: float,
                cfg: ModelConfig, progress: bool) -> RunResult:
    model = ToyTransformer(cfg)
    init_seed = splitmix64(plan.run_seed ^ (0xB0 if method == "bp" else 0x2E0))
    theta = model.init_params(init_seed)
    task = plan.task
    batch_size = cfg.batch_size
    eval_tokens, eval_targets = task.eval_batch(EVAL_SEQUENCES)
    probe = _crop_to_window(cfg, *task.batch(range(batch_size)))

    eval_at = set(_eval_points(plan.steps, plan.eval_every))
    run = RunResult(method, lr, [])
    rmax = 0.0
    t0, c0 = time.perf_counter(), time.process_time()

    def evaluate(step: int) -> None:
        nonlocal rmax
        acc = _windowed_accuracy(cfg, model, theta, eval_tokens, eval_targets)
        rmax = max(rmax, acc)
        probe_logits, _ = model.forward(theta, probe[0], mode=LedgerMode.MEZO)
        train_loss = loss_from_logits(probe_logits, probe[1])
        run.records.append(RunRecord(method, lr, step,
                                     time.perf_counter() - t0, train_loss,
                                     acc, rmax))
        if progress:
            print(f"[{method} lr={lr:g}] step {step}: loss {train_loss:.4f} "
                  f"acc {acc:.3f} (max {rmax:.3f})", flush=True)

    evaluate(0)
    for step in range(plan.steps):
        tokens, targets = _crop_to_window(
            cfg, *task.batch(range(step * batch_size, (step + 1) * batch_size)))
        try:
            if method == "bp":
                bp_sgd_step(lambda t: model.backward(t, tokens, targets), theta, lr)
            else:
                zo_cfg = dataclasses.replace(plan.zo, learning_rate=lr)
                mezo_step(
                    lambda t: loss_from_logits(
                        model.forward(t, tokens, mode=LedgerMode.MEZO)[0], targets),
                    theta, zo_cfg, step)
        except (NonfiniteLossError, NonfiniteGradError) as exc:
            run.failed = True
            run.fail_reason = f"step {step}: {exc}"
            break
        if (step + 1) in eval_at:
            evaluate(step + 1)
    run.wall_time_s = time.perf_counter() - t0
    run.cpu_time_s = time.process_time() - c0
    return run


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def emit_csv(records) -> str:
    """Serialize records sorted by (method, learning_rate, step); floats use
    shortest round-trip decimal form, LF line endings."""
    records = sorted(records, key=lambda r: (r.method, r.learning_rate, r.step))
    if not records:
        raise ValueError("no records to emit")
    out = io.StringIO()
    out.write(",".join(CSV_COLUMNS) + "\n")
    for r in records:
        out.write(f"{r.method},{r.learning_rate!r},{r.step},{r.wall_clock_s!r},"
                  f"{r.train_loss!r},{r.eval_accuracy!r},{r.running_max_accuracy!r}\n")
    return out.getvalue()


def parse_csv(text: str) -> list[RunRecord]:
    lines = text.strip().split("\n")
    if lines[0] != ",".join(CSV_COLUMNS):
        raise ValueError("unexpected CSV header")
    records = []
    for line in lines[1:]:
        method, lr, step, wall, loss, acc, rmax = line.split(",")
        records.append(RunRecord(method, float(lr), int(step), float(wall),
                                 float(loss), float(acc), float(rmax)))
    return records


def steps_to_fraction_of_plateau(records: list[RunRecord], fraction: float = 0.9) -> int:
    """First evaluated step whose running max reaches `fraction` of the final
    running max (the plateau)."""
    plateau = records[-1].running_max_accuracy
    for r in records:
        if r.running_max_accuracy >= fraction * plateau:
            return r.step
    return records[-1].step


def summarize(result: ExperimentResult) -> dict:
    summary: dict = {"methods": {}}
    for method in ("bp", "mezo"):
        best = result.best_run(method)
        summary["methods"][method] = {
            "best_learning_rate": best.learning_rate,
            "final_running_max_accuracy": best.final_running_max,
            "steps_to_90pct_of_plateau": steps_to_fraction_of_plateau(best.records),
            "wall_time_s": best.wall_time_s,
            "cpu_time_s": best.cpu_time_s,
            "failed_runs": [r.learning_rate for r in result.runs
                            if r.method == method and r.failed],
        }
    return summary

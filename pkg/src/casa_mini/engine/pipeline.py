"""Analysis pipelines: ordered define / filter / histogram steps.

The JSON form is a list like

    [{"define": ["pt", "sqrt(px*px+py*py)"]},
     {"filter": "pt>20"},
     {"hist": ["h_pt", "pt", 60, 0, 300]}]

run_pipeline applies steps in order against a ColumnBatch; filters drop rows
whose expression is 0.0, histograms fill from the rows surviving so far.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from ..types import ColumnBatch
from .expr import Expr, ExprError, eval_expr, needed_columns, parse_expr
from .hist import Histogram, fill_histogram


class PipelineError(ValueError):
    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class Define:
    name: str
    expr: Expr


@dataclass(frozen=True)
class Filter:
    expr: Expr


@dataclass(frozen=True)
class HistSpec:
    name: str
    expr: Expr
    n_bins: int
    lo: float
    hi: float


Step = Union[Define, Filter, HistSpec]


@dataclass(frozen=True)
class KernelPipeline:
    steps: tuple[Step, ...]

    def __post_init__(self):
        defined: set[str] = set()
        n_hists = 0
        for i, step in enumerate(self.steps):
            if isinstance(step, Define):
                if step.name in defined:
                    raise PipelineError(f"define {step.name!r} shadows an earlier define", step=i)
                defined.add(step.name)
            elif isinstance(step, HistSpec):
                n_hists += 1
                if step.n_bins < 1:
                    raise PipelineError(f"histogram {step.name!r} needs n_bins >= 1", step=i)
                if not step.lo < step.hi:
                    raise PipelineError(f"histogram {step.name!r} needs lo < hi", step=i)
        if n_hists == 0:
            raise PipelineError("pipeline has no histogram step")

    def input_columns(self) -> set[str]:
        """Source columns the pipeline reads (defines excluded)."""
        defined: set[str] = set()
        needed: set[str] = set()
        for step in self.steps:
            expr = step.expr
            needed |= needed_columns(expr) - defined
            if isinstance(step, Define):
                defined.add(step.name)
        return needed

    def to_json(self) -> list:
        out = []
        for step in self.steps:
            if isinstance(step, Define):
                out.append({"define": [step.name, _unparse(step.expr)]})
            elif isinstance(step, Filter):
                out.append({"filter": _unparse(step.expr)})
            else:
                out.append({"hist": [step.name, _unparse(step.expr), step.n_bins, step.lo, step.hi]})
        return out

    @classmethod
    def from_json(cls, data: list) -> "KernelPipeline":
        steps: list[Step] = []
        for i, entry in enumerate(data):
            if not isinstance(entry, dict) or len(entry) != 1:
                raise PipelineError("each step must be a single-key object", step=i)
            key, payload = next(iter(entry.items()))
            try:
                if key == "define":
                    name, text = payload
                    steps.append(Define(name=name, expr=parse_expr(text)))
                elif key == "filter":
                    steps.append(Filter(expr=parse_expr(payload)))
                elif key == "hist":
                    name, text, n_bins, lo, hi = payload
                    steps.append(
                        HistSpec(name=name, expr=parse_expr(text), n_bins=int(n_bins), lo=float(lo), hi=float(hi))
                    )
                else:
                    raise PipelineError(f"unknown step kind {key!r}", step=i)
            except ExprError as exc:
                raise PipelineError(str(exc), step=i) from exc
        return cls(steps=tuple(steps))


@dataclass
class TaskResult:
    chunk_id: int
    n_events_in: int
    n_events_pass: int
    histograms: list[Histogram]
    worker_id: str = ""
    t_start: float = 0.0
    t_end: float = 0.0

    def __post_init__(self):
        if self.n_events_pass > self.n_events_in:
            raise ValueError("n_events_pass exceeds n_events_in")

    def to_dict(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "n_events_in": self.n_events_in,
            "n_events_pass": self.n_events_pass,
            "histograms": [h.to_dict() for h in self.histograms],
            "worker_id": self.worker_id,
            "t_start": self.t_start,
            "t_end": self.t_end,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskResult":
        return cls(
            chunk_id=int(d["chunk_id"]),
            n_events_in=int(d["n_events_in"]),
            n_events_pass=int(d["n_events_pass"]),
            histograms=[Histogram.from_dict(h) for h in d["histograms"]],
            worker_id=d.get("worker_id", ""),
            t_start=float(d.get("t_start", 0.0)),
            t_end=float(d.get("t_end", 0.0)),
        )


def run_pipeline(
    batch: ColumnBatch,
    pipeline: KernelPipeline,
    chunk_id: int = 0,
    worker_id: str = "",
    kernel: str | None = None,
) -> TaskResult:
    columns: dict[str, np.ndarray] = dict(batch.columns)
    n_rows = batch.n_events
    histograms: list[Histogram] = []
    for i, step in enumerate(pipeline.steps):
        try:
            if isinstance(step, Define):
                if step.name in columns:
                    raise PipelineError(f"define {step.name!r} shadows an existing column")
                columns[step.name] = eval_expr(step.expr, columns, n_rows)
            elif isinstance(step, Filter):
                mask = eval_expr(step.expr, columns, n_rows) != 0.0
                columns = {name: arr[mask] for name, arr in columns.items()}
                n_rows = int(mask.sum())
            else:
                values = eval_expr(step.expr, columns, n_rows)
                histograms.append(
                    fill_histogram(values, step.name, step.n_bins, step.lo, step.hi, kernel=kernel)
                )
        except (ExprError, PipelineError) as exc:
            raise PipelineError(str(exc), step=i) from exc
    return TaskResult(
        chunk_id=chunk_id,
        n_events_in=batch.n_events,
        n_events_pass=n_rows,
        histograms=histograms,
        worker_id=worker_id,
    )


def _unparse(expr: Expr) -> str:
    # round-trippable but fully parenthesized; used only for serialization
    from .expr import Bin, Call, Col, Num, Unary

    if isinstance(expr, Num):
        return repr(expr.value)
    if isinstance(expr, Col):
        return expr.name
    if isinstance(expr, Unary):
        return f"({expr.op}{_unparse(expr.operand)})"
    if isinstance(expr, Bin):
        return f"({_unparse(expr.left)} {expr.op} {_unparse(expr.right)})"
    if isinstance(expr, Call):
        return f"{expr.fn}({', '.join(_unparse(a) for a in expr.args)})"
    raise TypeError(f"not an expression node: {expr!r}")

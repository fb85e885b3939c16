"""Ablation grid: train and evaluate presets under one shared budget."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

from ..metrics import SYNAPSE_REFERENCE, MetricReport, format_table
from ..network import ModelConfig
from .config import AblationConfig, RunConfig, TrainConfig, canonical_json
from .evaluation import evaluate
from .training import CheckpointManifest, train

log = logging.getLogger(__name__)

PresetArg = Union[str, Tuple[str, AblationConfig]]


@dataclass
class GridRow:
    name: str
    ablation: AblationConfig
    report: MetricReport
    parameters: int
    steps: int
    seeds: Tuple[int, ...]


@dataclass
class GridResult:
    rows: List[GridRow]
    table: str

    def to_dict(self) -> dict:
        return {"rows": [{
            "name": r.name, "ablation": r.ablation.to_dict(), "parameters": r.parameters,
            "steps": r.steps, "seeds": list(r.seeds), "summary": r.report.summary(),
        } for r in self.rows]}


def _resolve(p: PresetArg) -> Tuple[str, AblationConfig]:
    if isinstance(p, str):
        return p, AblationConfig.preset(p)
    return p


def _row_cells(row: GridRow) -> List[str]:
    a = row.ablation
    mark = lambda on: "x" if on else ""
    return [mark(a.use_prior), a.fusion, str(row.parameters), str(row.steps),
            ",".join(str(s) for s in row.seeds)]


def grid_table(rows: Sequence[GridRow], class_names: Sequence[str], split: str) -> str:
    steps = sorted({r.steps for r in rows})
    seeds = sorted({s for r in rows for s in r.seeds})
    header = (f"{SYNAPSE_REFERENCE}\n"
              f"budget: {','.join(map(str, steps))} steps per run, seeds {seeds}, evaluated on '{split}'")
    return format_table([(r.name, r.report, _row_cells(r)) for r in rows], class_names,
                        extra=["SP-Net", "Fusion", "Params", "Steps", "Seeds"], header=header)


def run_ablation_grid(data_root, presets: Sequence[PresetArg], model_cfg: ModelConfig,
                      train_cfg: TrainConfig, out_dir, seeds: Optional[Sequence[int]] = None,
                      split: str = "val", which: str = "best", prior_source: Optional[str] = None,
                      prior_model=None) -> GridResult:
    """One row per preset; every preset sees the same seeds and step budget.

    With several seeds the row's report pools all (seed, case) pairs, so the
    means are averages over seeds.
    """
    seeds = tuple(seeds) if seeds else (train_cfg.seed,)
    out = Path(out_dir)
    rows: List[GridRow] = []
    for p in presets:
        name, ab = _resolve(p)
        if prior_source is not None:
            ab = replace(ab, prior_source=prior_source)
        pooled: Optional[MetricReport] = None
        manifest: Optional[CheckpointManifest] = None
        for seed in seeds:
            run = RunConfig(model_cfg, replace(train_cfg, seed=seed), ab)
            run_dir = out / name / f"seed{seed}"
            log.info("grid: %s seed %d", name, seed)
            manifest = train(data_root, run, run_dir, prior_model=prior_model)
            rep = evaluate(data_root, run_dir, split=split, which=which, prior_model=prior_model)
            (run_dir / f"report_{split}.json").write_text(rep.to_json() + "\n")
            if pooled is None:
                pooled = MetricReport(rep.class_names)
            for cid, entry in rep.per_case.items():
                key = cid if len(seeds) == 1 else f"{cid}@seed{seed}"
                pooled.per_case[key] = entry
        rows.append(GridRow(name, ab, pooled, manifest.parameter_count, manifest.step, seeds))
    table = grid_table(rows, rows[0].report.class_names if rows else [], split)
    result = GridResult(rows, table)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.json").write_text(canonical_json(result.to_dict()))
    (out / "grid.txt").write_text(table)
    return result

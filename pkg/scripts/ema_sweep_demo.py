"""Sweep post-hoc EMA lengths over a finished training run.

    python3 scripts/ema_sweep_demo.py --run runs/toy/noise
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass, field
from pathlib import Path

from edm2se.config import RunConfig
from edm2se.ema import ema_sweep, sigma_rel_range, sweep_csv
from edm2se.evaluate import sweep_evaluator
from edm2se.store import SnapshotStore
from edm2se.trainer import load_stats


@dataclass
class SweepExperiment:
    run: Path
    grid: list = field(default_factory=lambda: [0.001, 0.05, 0.1, 0.15, 0.2, 0.25])


def sweep(exp: SweepExperiment) -> list[dict]:
    store = SnapshotStore(exp.run)
    cfg = RunConfig.load(exp.run / "run_config.json")
    stats = load_stats(exp.run / "stats.json")
    n_total = max(r.step for r in store.records)
    lo, hi = sigma_rel_range(n_total)
    grid = [s for s in exp.grid if lo < s < hi]
    rows = ema_sweep(store, sweep_evaluator(cfg, stats), grid, n_total)
    (exp.run / "ema_sweep.csv").write_text(sweep_csv(rows))
    for r in rows:
        print(f"sigma_rel {r['sigma_rel']:<6g} si_sdr {r['si_sdr']:7.3f} dB  loss {r['loss']:.4g}")
    return rows


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--grid", type=lambda s: [float(v) for v in s.split(",")], default=SweepExperiment.__dataclass_fields__["grid"].default_factory())
    a = p.parse_args()
    sweep(SweepExperiment(a.run, a.grid))

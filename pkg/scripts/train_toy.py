"""Train the toy denoiser in both skip modes and score held-out mixtures.

    python3 scripts/train_toy.py --steps 4096 --out runs/toy
"""

from __future__ import annotations

import argparse
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from edm2se.config import RunConfig, TrainConfig
from edm2se.evaluate import enhancement_scores, held_out_mixtures
from edm2se.trainer import train


@dataclass
class ToyExperiment:
    out: Path = Path("runs/toy")
    steps: int = 4096
    modes: tuple = ("noise", "clean")
    n_test: int = 32
    test_snr: float = 5.0
    test_samples: int = 4000


def run(exp: ToyExperiment) -> dict:
    mix = held_out_mixtures(RunConfig(), exp.n_test, exp.test_snr, exp.test_samples)
    summary = {}
    for mode in exp.modes:
        cfg = RunConfig(train=TrainConfig(skip_mode=mode, total_steps=exp.steps))
        res = train(cfg, exp.out / mode, progress_every=256)
        sc = enhancement_scores(res.net, cfg, res.stats, mix)
        summary[mode] = {
            "minutes": res.seconds / 60,
            "si_sdr_in": sc["si_sdr_in"],
            "si_sdr_out": sc["si_sdr"],
            "improvement": sc["improvement"],
        }
        print(f"{mode}: {sc['si_sdr_in']:.2f} -> {sc['si_sdr']:.2f} dB ({sc['improvement']:+.2f} dB), {res.seconds / 60:.1f} min")
    (exp.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for f in dataclasses.fields(ToyExperiment):
        if f.name != "modes":
            p.add_argument(f"--{f.name.replace('_', '-')}", type=type(f.default), default=f.default)
    args = p.parse_args()
    run(ToyExperiment(**vars(args)))


if __name__ == "__main__":
    import logging

    logging.basicConfig(level=logging.INFO, format="%(message)s")
    main()

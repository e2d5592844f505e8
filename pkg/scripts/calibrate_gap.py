"""Calibrate the flow-semigroup gap constants on the OU example.

For several particle counts and seeds, compares the law flow 0 -> T with
the composition 0 -> T/2 -> T (independent noise in the composed pass) and
fits gap ~ c1 / sqrt(N). The frozen constants are the largest observed
gap*sqrt(N) times a safety factor, plus c2 for the step-size term.
"""
import argparse
import json
import math
from dataclasses import asdict, dataclass

from mvperiodic.measure import normal_cloud
from mvperiodic.model import builtin_example
from mvperiodic.periodic import aligned_dt
from mvperiodic.simulate import SimConfig, flow_semigroup_gap


@dataclass
class Config:
    sizes: tuple = (1000, 2500, 5000, 10000)
    seeds: int = 3
    dt: float = 1e-3
    safety: float = 1.5
    c2: float = 1.0


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=Config.seeds)
    cfg = Config(seeds=p.parse_args().seeds)
    ms = builtin_example("ex51_ou")
    T = ms.T
    dt = aligned_dt(T, 2, cfg.dt)
    rows = []
    for N in cfg.sizes:
        for s in range(cfg.seeds):
            mu0 = normal_cloud(N, 0.0, 1.0, seed=1000 + s)
            gap = flow_semigroup_gap(ms, mu0, 0.0, T / 2, T, SimConfig(N, dt, 0.0, T, seed=s))
            rows.append({"N": N, "seed": s, "gap": gap, "gap_sqrtN": gap * math.sqrt(N)})
            print(json.dumps(rows[-1]), flush=True)
    c1 = cfg.safety * max(r["gap_sqrtN"] for r in rows)
    print(json.dumps({"config": asdict(cfg), "dt": dt, "c1": c1, "c2": cfg.c2}, indent=2))


if __name__ == "__main__":
    main()

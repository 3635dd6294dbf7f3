"""Run the ordinal trend checks over several seeds and write one JSON per seed.

    python3 scripts/trend_suite.py --config configs/default.toml --seeds 0 1 2 3 4 --out artifacts/trends
"""

import argparse
import json
import logging
import time
from pathlib import Path

from asymret import experiments as X
from asymret.config import load_run_config


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="artifacts/trends")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = {}
    for seed in args.seeds:
        cfg = load_run_config(args.config, seed=seed).pipeline
        t0 = time.perf_counter()
        rec, m = X.seed_trends(cfg)
        m["seconds"] = time.perf_counter() - t0
        m["stages"] = {k: {"p_at_k": s.p_at_k, "final_loss": s.final_loss, "seconds": s.seconds}
                       for k, s in rec.stages.items()}
        (out / f"seed{seed}.json").write_text(json.dumps(m, indent=1, sort_keys=True, default=float))
        rows[seed] = m
    for t in X.TRENDS:
        held = sum(bool(rows[s][t]) for s in rows)
        print(f"trend {t}: holds on {held}/{len(rows)} seeds")


if __name__ == "__main__":
    main()

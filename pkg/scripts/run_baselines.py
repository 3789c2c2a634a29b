"""Stop, Linear and Kalman baselines on every leave-one-out split.

Prints one ADE / FDE table per baseline and writes them to
``<out>/baselines.json``. Each held-out scene is evaluated on all of its
windows (stride 1).
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from trajqa.baselines import KalmanParams, run_baseline
from trajqa.dataset import ETH_UCY_SCENES, load_scene
from trajqa.evaluation import evaluate


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", default="data/raw", help="raw tree with one folder per scene")
    ap.add_argument("--out", default="results/baselines")
    ap.add_argument("--kalman-q", type=float, default=KalmanParams.q)
    ap.add_argument("--kalman-r", type=float, default=KalmanParams.r)
    args = ap.parse_args()

    kalman = KalmanParams(q=args.kalman_q, r=args.kalman_r)
    windows = {s: load_scene(args.data, s) for s in ETH_UCY_SCENES}
    results = {}
    t0 = time.perf_counter()
    for which in ("stop", "linear", "kalman"):
        reports = [evaluate(run_baseline(windows[s], which, kalman), windows[s]) for s in ETH_UCY_SCENES]
        merged = reports[0]
        for r in reports[1:]:
            merged.scenes.update(r.scenes)
        print(merged.table(which.capitalize()), end="\n\n")
        results[which] = merged.to_dict()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "baselines.json").write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
    print(f"{time.perf_counter() - t0:.1f}s, wrote {out / 'baselines.json'}")


if __name__ == "__main__":
    main()

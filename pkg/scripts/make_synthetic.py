"""Write a synthetic stand-in for the five-scene raw benchmark.

Files follow the ETH/UCY raw layout (``<root>/<scene>/<scene>_synthetic.txt``,
tab-separated frame, agent, x, y), so every loader and CLI command accepts
them. The default root is ``data/synthetic``, kept apart from ``data/raw``
so synthetic files are never mistaken for the real benchmark.
"""
from __future__ import annotations

import argparse
from dataclasses import replace

from trajqa.synthetic import SceneParams, write_benchmark


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/synthetic")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--frames", type=int, default=SceneParams.n_frames, help="frames per scene")
    args = ap.parse_args()
    root = write_benchmark(args.out, seed=args.seed, params=replace(SceneParams(), n_frames=args.frames))
    print(f"wrote synthetic scenes under {root}")


if __name__ == "__main__":
    main()

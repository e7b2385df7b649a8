"""Train the toy preset on synthetic 3-source mixtures.

    python3 scripts/train_toy.py --run-dir runs/toy [--steps 5000] [--resume]

The acceptance suite reuses the newest checkpoint in ``runs/toy`` when present.
"""

import argparse
import logging
import time

from sdcodec.config import default_config
from sdcodec.runner import run_training


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--run-dir", default="runs/toy")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = default_config("toy")
    cfg.train.total_steps = args.steps
    cfg.train.seed = args.seed
    cfg.train.gamma = None
    cfg.validate()
    t0 = time.time()
    state = run_training(cfg, args.run_dir, resume=args.resume)
    logging.info("finished at step %d in %.1f min", state.step, (time.time() - t0) / 60)


if __name__ == "__main__":
    main()

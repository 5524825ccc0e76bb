"""Fill the experiment cache used by the acceptance suite.

Runs the desk-scale overfit task for every variant and seed the ablation
checks need, printing one line per run. Already cached runs are skipped.

    python demos/ablation_runs.py [cache_dir]
"""

import sys
from pathlib import Path

from iconet.experiments import SmokeSettings, cached_smoke

VARIANTS = ("full", "base_only", "with_rec", "single_stage_supervision")


def main(cache_dir: str) -> None:
    for variant in VARIANTS:
        for seed in range(5):
            out = cached_smoke(SmokeSettings(variant=variant, seed=seed), cache_dir)
            losses = out["losses"]
            print(f"{variant:<26} seed {seed}  psnr {out['psnr']:.3f}  bicubic {out['bicubic_psnr']:.3f}  "
                  f"loss500/loss10 {losses[-1] / losses[9]:.3f}  {out['seconds']:.0f}s", flush=True)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else str(Path(__file__).resolve().parents[1] / ".cache" / "acceptance"))

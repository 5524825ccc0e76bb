"""Desk-scale overfit experiment used for the learning and ablation checks.

One 128x128 phantom is degraded 4x to 32x32 and a small model (16 channels,
3 blocks per branch) is fitted to it for a fixed number of Adam steps. The
seed controls parameter initialization only, so variants and seeds share
the same image. Results can be cached as JSON keyed by the settings and a
hash of the package source, which keeps repeated test runs cheap without
ever reusing numbers from different code.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import bicubic_resize, degrade_kspace, make_phantom
from .metrics import psnr
from .pipeline import PipelineConfig
from .training import TrainConfig, superresolve, train_loop


@dataclass(frozen=True)
class SmokeSettings:
    variant: str = "full"
    seed: int = 0
    steps: int = 500
    lr: float = 1e-4
    scale: int = 4
    hr_size: int = 128
    channels: int = 16
    rscfl_count: int = 3
    image_seed: int = 0
    dtype: str = "float32"

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(scale=self.scale, channels=self.channels, rscfl_count=self.rscfl_count,
                              variant=self.variant)

    def training(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, lr=self.lr, batch_size=1, seed=self.seed, dtype=self.dtype)


# modules whose code can change a training result
NUMERIC_MODULES = ("autodiff", "ssm", "nn.py", "blocks.py", "fusion.py", "pipeline.py", "training.py", "data.py",
                   "metrics.py", "experiments.py")


def source_digest() -> str:
    """Hash of the numerics-relevant modules; cached results are tied to it."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for name in NUMERIC_MODULES:
        target = root / name
        for path in sorted(target.rglob("*.py")) if target.is_dir() else [target]:
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()[:16]


def smoke_task(settings: SmokeSettings) -> tuple:
    hr = make_phantom(settings.image_seed, settings.hr_size)
    return hr, degrade_kspace(hr, settings.scale)


def run_smoke(settings: SmokeSettings) -> dict:
    hr, lr = smoke_task(settings)
    start = time.perf_counter()
    result = train_loop([hr], settings.pipeline(), settings.training())
    seconds = time.perf_counter() - start
    sr = np.clip(superresolve(result.model, lr.astype(settings.dtype)), 0.0, 1.0)
    bicubic = np.clip(bicubic_resize(lr, settings.scale), 0.0, 1.0)
    return {
        "settings": asdict(settings),
        "losses": result.losses,
        "psnr": psnr(sr, hr),
        "bicubic_psnr": psnr(bicubic, hr),
        "seconds": seconds,
    }


def cache_key(settings: SmokeSettings, digest: Optional[str] = None) -> str:
    text = json.dumps(asdict(settings), sort_keys=True) + (digest or source_digest())
    return hashlib.sha256(text.encode()).hexdigest()[:20]


def cached_smoke(settings: SmokeSettings, cache_dir=None) -> dict:
    """``run_smoke`` with an optional on-disk cache."""
    if cache_dir is None:
        return run_smoke(settings)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{settings.variant}_seed{settings.seed}_{cache_key(settings)}.json"
    if path.exists():
        return json.loads(path.read_text())
    out = run_smoke(settings)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(out))
    tmp.replace(path)
    return out

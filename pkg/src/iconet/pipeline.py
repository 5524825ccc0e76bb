"""Two-branch progressive super-resolution model and its supervision."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .blocks import RSCFL
from .data import degrade_kspace
from .fusion import SRRecFusion
from .nn import Conv2d, Module

VARIANTS = ("full", "base_only", "with_rec", "parallel_mode", "single_stage_supervision")
VARIANT_ALIASES = {"with_fusion": "full", "iconet": "full"}


@dataclass(frozen=True)
class BranchConfig:
    channels: int = 96
    rscfl_count: int = 7
    kind: str = "super_resolution"
    d_state: int = 16
    expand: int = 2

    def __post_init__(self):
        if self.kind not in ("reconstruction", "super_resolution"):
            raise ValueError(f"branch kind must be reconstruction or super_resolution, got {self.kind!r}")
        if self.rscfl_count < 1:
            raise ValueError(f"rscfl_count must be >= 1, got {self.rscfl_count}")
        if self.channels < 8:
            raise ValueError(f"channels must be >= 8, got {self.channels}")


@dataclass(frozen=True)
class PipelineConfig:
    scale: int = 4
    channels: int = 96
    rscfl_count: int = 7
    alpha: float = 0.9
    variant: str = "full"
    share_stages: bool = True
    fusion_after: Optional[int] = None
    d_state: int = 16
    expand: int = 2

    def __post_init__(self):
        object.__setattr__(self, "variant", VARIANT_ALIASES.get(self.variant, self.variant))
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4 (a power of two), got {self.scale}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must satisfy 0 < alpha < 1, got {self.alpha}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.channels < 8:
            raise ValueError(f"channels must be >= 8, got {self.channels}")
        if self.rscfl_count < 1:
            raise ValueError(f"rscfl_count must be >= 1, got {self.rscfl_count}")
        if self.fusion_after is not None and not 0 <= self.fusion_after <= self.rscfl_count:
            raise ValueError(f"fusion_after must lie in [0, {self.rscfl_count}], got {self.fusion_after}")

    @property
    def stages(self) -> int:
        return int(math.log2(self.scale))

    @property
    def fusion_point(self) -> int:
        return math.ceil(self.rscfl_count / 2) if self.fusion_after is None else self.fusion_after

    @property
    def use_rec(self) -> bool:
        return self.variant != "base_only"

    @property
    def use_fusion(self) -> bool:
        return self.variant in ("full", "single_stage_supervision")

    @property
    def multi_stage(self) -> bool:
        return self.variant != "single_stage_supervision"

    def branch(self, kind: str) -> BranchConfig:
        return BranchConfig(self.channels, self.rscfl_count, kind, self.d_state, self.expand)

    def to_meta(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_meta(cls, meta: dict) -> "PipelineConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw in meta.items():
            if key not in kinds:
                continue
            if raw in ("None", None):
                out[key] = None
            elif key in ("alpha",):
                out[key] = float(raw)
            elif key == "variant":
                out[key] = str(raw)
            elif key == "share_stages":
                out[key] = raw if isinstance(raw, bool) else str(raw) == "True"
            else:
                out[key] = int(raw)
        return cls(**out)


@dataclass
class StageOutput:
    rec_image: Optional[Tensor]
    sr_image: Tensor
    rec_features: Optional[Tensor] = None
    fused: Optional[Tensor] = None


def _trunk(cfg: BranchConfig, rng: np.random.Generator) -> list:
    return [RSCFL(cfg.channels, rng, expand=cfg.expand, d_state=cfg.d_state) for _ in range(cfg.rscfl_count)]


def _check_image(x: Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected a (batch, 1, h, w) image tensor, got {x.shape}")


class RecBranch(Module):
    """Same-scale artifact suppression: conv, RSCFL stack, conv, plus the input."""

    def __init__(self, cfg: BranchConfig, rng: np.random.Generator):
        self.config = cfg
        self.shallow = Conv2d(1, cfg.channels, 3, rng)
        self.body = _trunk(cfg, rng)
        self.head = Conv2d(cfg.channels, 1, 3, rng)

    def features(self, x: Tensor, shallow: Optional[Tensor] = None) -> Tensor:
        f = self.shallow(x) if shallow is None else shallow
        for block in self.body:
            f = block(f)
        return f

    def forward(self, x: Tensor, shallow: Optional[Tensor] = None):
        """Returns ``(rec_image, features)``; ``features`` feed the fusion."""
        _check_image(x)
        ops.finite_or_raise(x, "reconstruction input")
        f = self.features(x, shallow)
        return ops.add(x, self.head(f)), f

    def flops(self, h: int, w: int) -> int:
        return (self.shallow.flops(h, w) + sum(b.flops(h, w) for b in self.body)
                + self.head.flops(h, w) + h * w)


class SRBranch(Module):
    """2x upsampler with an optional fusion of reconstruction features midway."""

    def __init__(self, cfg: BranchConfig, rng: np.random.Generator, fusion_after: int, use_fusion: bool = True):
        c = cfg.channels
        self.config = cfg
        self.fusion_after = fusion_after
        self.shallow = Conv2d(1, c, 3, rng)
        self.body = _trunk(cfg, rng)
        self.fusion = SRRecFusion(c, rng) if use_fusion else None
        self.expand = Conv2d(c, 4 * c, 3, rng)
        self.head = Conv2d(c, 1, 3, rng)

    def forward(self, x: Tensor, rec_features: Optional[Tensor] = None, shallow: Optional[Tensor] = None):
        """Returns ``(sr_image, features, fused)``; fusion runs only when features are given."""
        _check_image(x)
        f = self.shallow(x) if shallow is None else shallow
        fused = None
        if rec_features is not None:
            if self.fusion is None:
                raise ValueError("this SR branch was built without a fusion module")
            if rec_features.shape != f.shape:
                raise ValueError(f"reconstruction features {rec_features.shape} are not aligned with SR features {f.shape}")
        for i, block in enumerate(self.body):
            if i == self.fusion_after and rec_features is not None:
                fused = self.fusion(f, rec_features)
                f = ops.add(f, fused)
            f = block(f)
        if self.fusion_after == len(self.body) and rec_features is not None:
            fused = self.fusion(f, rec_features)
            f = ops.add(f, fused)
        up = ops.pixel_shuffle(self.expand(f), 2)
        return self.head(up), f, fused

    def flops(self, h: int, w: int) -> int:
        total = self.shallow.flops(h, w) + sum(b.flops(h, w) for b in self.body)
        if self.fusion is not None:
            total += self.fusion.flops(h, w) + self.config.channels * h * w
        return total + self.expand.flops(h, w) + self.head.flops(2 * h, 2 * w)


class ICONet(Module):
    """Progressive model: each stage reconstructs at the current scale, then doubles it."""

    def __init__(self, config: PipelineConfig, rng: np.random.Generator):
        self.config = config
        copies = 1 if config.share_stages else config.stages
        self.rec_branches = ([RecBranch(config.branch("reconstruction"), rng) for _ in range(copies)]
                             if config.use_rec else [])
        self.sr_branches = [SRBranch(config.branch("super_resolution"), rng, config.fusion_point, config.use_fusion)
                            for _ in range(copies)]

    def _pick(self, branches: list, stage: int):
        return branches[0] if self.config.share_stages else branches[stage]

    def stage(self, x: Tensor, i: int) -> StageOutput:
        cfg = self.config
        sr = self._pick(self.sr_branches, i)
        if not cfg.use_rec:
            out, _, _ = sr(x)
            return StageOutput(None, out)
        rec = self._pick(self.rec_branches, i)
        if cfg.variant == "parallel_mode":
            shallow = sr.shallow(x)
            rec_img, rec_feat = rec(x, shallow=shallow)
            out, _, _ = sr(x, shallow=shallow)
            return StageOutput(rec_img, out, rec_feat)
        rec_img, rec_feat = rec(x)
        out, _, fused = sr(rec_img, rec_feat if cfg.use_fusion else None)
        return StageOutput(rec_img, out, rec_feat, fused)

    def forward(self, lr: Tensor) -> list:
        _check_image(lr)
        stages, x = [], lr
        for i in range(self.config.stages):
            out = self.stage(x, i)
            stages.append(out)
            x = out.sr_image
        return stages

    def flops(self, h: int, w: int) -> int:
        total = 0
        for i in range(self.config.stages):
            if self.rec_branches:
                total += self._pick(self.rec_branches, i).flops(h, w)
            total += self._pick(self.sr_branches, i).flops(h, w)
            h, w = 2 * h, 2 * w
        return total


def iconet_forward(lr: Tensor, model: ICONet) -> list:
    return model(lr)


def hr_pyramid(hr: np.ndarray, scale: int) -> list:
    """Targets from coarsest to finest: ``degrade(hr, scale / 2**i)`` for i = 0..log2(scale)."""
    n = int(math.log2(scale))
    if 2 ** n != scale:
        raise ValueError(f"scale must be a power of two, got {scale}")
    return [degrade_kspace(hr, scale // 2 ** i) for i in range(n + 1)]


def multi_stage_loss(stages: Sequence[StageOutput], pyramid: Sequence, alpha: float,
                     single_stage: bool = False) -> Tensor:
    """``alpha * sum(L1 SR terms) + (1 - alpha) * sum(L1 Rec terms)``, mean-reduced per term.

    ``pyramid[i]`` is the target at the input scale of stage i and
    ``pyramid[i + 1]`` the target of its SR output. Stages without a
    reconstruction image contribute no Rec term. With ``single_stage`` only
    the last stage is supervised.
    """
    if len(pyramid) != len(stages) + 1:
        raise ValueError(f"{len(stages)} stages need {len(stages) + 1} pyramid levels, got {len(pyramid)}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    chosen = [len(stages) - 1] if single_stage else range(len(stages))
    sr_terms = [ops.l1_loss(stages[i].sr_image, pyramid[i + 1]) for i in chosen]
    rec_terms = [ops.l1_loss(stages[i].rec_image, pyramid[i]) for i in chosen if stages[i].rec_image is not None]
    total = ops.scale(_sum(sr_terms), alpha)
    if rec_terms:
        total = ops.add(total, ops.scale(_sum(rec_terms), 1.0 - alpha))
    return total


def _sum(terms: list) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = ops.add(out, t)
    return out


def param_report(model: ICONet, height: int, width: int) -> dict:
    """Parameter counts per top-level group and a forward FLOP estimate.

    FLOPs count a multiply-accumulate as two operations.
    """
    groups: dict = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:4] if parts[2] == "body" else parts[:3])
        groups[key] = groups.get(key, 0) + p.size
    return {
        "groups": groups,
        "parameters": model.num_parameters(),
        "flops": model.flops(height, width),
        "input": (height, width),
        "config": asdict(model.config),
    }


def format_param_report(report: dict, reference: bool = True) -> str:
    lines = [f"{'group':<40}{'parameters':>14}"]
    lines += [f"{k:<40}{v:>14,}" for k, v in report["groups"].items()]
    h, w = report["input"]
    lines.append(f"{'total':<40}{report['parameters']:>14,}")
    lines.append(f"forward FLOPs at {h}x{w}: {report['flops'] / 1e9:.3f} G")
    if reference:
        lines.append("reference budget for comparison (not a target): 0.996 M parameters, 9.61 G FLOPs")
    return "\n".join(lines)

"""Training loop, checkpoints with optimizer state, and inference helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, TextIO

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, backward, default_dtype, load_checkpoint, no_grad, save_checkpoint
from .metrics import format_db, psnr
from .pipeline import ICONet, PipelineConfig, hr_pyramid, multi_stage_loss

CHECKPOINT_NAME = "checkpoint.ckpt"
LOG_NAME = "metrics.log"
DTYPES = {"float64": np.float64, "float32": np.float32}


class NumericAbort(FloatingPointError):
    """Raised when the loss becomes non-finite; ``dump`` names the saved batch."""

    def __init__(self, message: str, dump: Optional[Path] = None):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    lr: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    probe_every: int = 0
    checkpoint_every: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {', '.join(DTYPES)}, got {self.dtype!r}")


@dataclass
class StepRecord:
    step: int
    loss: float
    psnr: list = field(default_factory=list)

    def line(self) -> str:
        cells = [str(self.step), repr(self.loss)] + [format_db(p) if not math.isnan(p) else "nan" for p in self.psnr]
        return "\t".join(cells)


@dataclass
class TrainResult:
    model: ICONet
    records: list
    adam: AdamState
    checkpoint: Optional[Path] = None

    @property
    def losses(self) -> list:
        return [r.loss for r in self.records]


def batch_indices(seed: int, step: int, count: int, batch_size: int) -> np.ndarray:
    """Images used at ``step``; depends only on (seed, step) so resumed runs see the same batches."""
    if batch_size >= count:
        return np.arange(count)
    rng = np.random.default_rng([seed, step])
    return np.sort(rng.choice(count, size=batch_size, replace=False))


def log_header(stages: int) -> str:
    return "\t".join(["step", "loss"] + [f"psnr_stage{i + 1}" for i in range(stages)])


def _stack(levels: Sequence[np.ndarray]) -> Tensor:
    return Tensor(np.stack(levels)[:, None])


def run_stages(model: ICONet, lr_image: np.ndarray) -> list:
    """No-grad forward of one 2D image; returns the SR image of every stage."""
    with no_grad():
        stages = model(Tensor(np.asarray(lr_image)[None, None]))
    return [s.sr_image.data[0, 0].astype(np.float64) for s in stages]


def superresolve(model: ICONet, lr_image: np.ndarray) -> np.ndarray:
    return run_stages(model, lr_image)[-1]


def probe_psnr(model: ICONet, pyramid: Sequence[np.ndarray]) -> list:
    outs = run_stages(model, pyramid[0])
    return [psnr(np.clip(o, 0, 1), pyramid[i + 1]) for i, o in enumerate(outs)]


def _checkpoint_tensors(model: ICONet, adam: AdamState) -> dict:
    tensors = dict(model.state_dict())
    names = list(tensors)
    for name, m, v in zip(names, adam.m, adam.v):
        tensors[f"adam.m.{name}"] = m
        tensors[f"adam.v.{name}"] = v
    return tensors


def checkpoint_meta(pipeline: PipelineConfig, train: TrainConfig, step: int, adam: AdamState) -> dict:
    meta = {f"pipeline.{k}": v for k, v in pipeline.to_meta().items()}
    meta.update({f"train.{f.name}": getattr(train, f.name) for f in fields(train)})
    meta.update({"step": step, "adam.t": adam.t})
    return meta


def write_checkpoint(path, model: ICONet, pipeline: PipelineConfig, train: TrainConfig, step: int,
                     adam: AdamState) -> Path:
    path = Path(path)
    save_checkpoint(path, _checkpoint_tensors(model, adam), checkpoint_meta(pipeline, train, step, adam))
    return path


def pipeline_from_meta(meta: dict) -> PipelineConfig:
    return PipelineConfig.from_meta({k[len("pipeline."):]: v for k, v in meta.items() if k.startswith("pipeline.")})


def load_model(path, dtype: Optional[str] = None) -> tuple:
    """Rebuild the model stored at ``path``; returns ``(model, pipeline_config, meta)``."""
    tensors, meta = load_checkpoint(path)
    pipeline = pipeline_from_meta(meta)
    dtype = dtype or meta.get("train.dtype", "float64")
    with default_dtype(DTYPES[dtype]):
        model = ICONet(pipeline, np.random.default_rng(0))
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    return model, pipeline, meta


def _restore(path, model: ICONet, pipeline: PipelineConfig, train: TrainConfig) -> tuple:
    tensors, meta = load_checkpoint(path)
    stored = pipeline_from_meta(meta)
    if stored != pipeline:
        raise ValueError(f"checkpoint {path} was written for {stored}, not {pipeline}")
    if meta.get("train.dtype") != train.dtype:
        raise ValueError(f"checkpoint dtype {meta.get('train.dtype')} differs from requested {train.dtype}")
    names = [n for n, _ in model.named_parameters()]
    model.load_state_dict({n: tensors[n] for n in names})
    adam = AdamState(lr=train.lr, t=int(meta["adam.t"]))
    adam.m = [tensors[f"adam.m.{n}"].copy() for n in names]
    adam.v = [tensors[f"adam.v.{n}"].copy() for n in names]
    return int(meta["step"]), adam


def _dump_batch(out_dir: Optional[Path], step: int, batch: Sequence[Tensor], indices: np.ndarray) -> Optional[Path]:
    if out_dir is None:
        return None
    path = out_dir / f"nan_batch_step{step}.npz"
    np.savez(path, indices=indices, **{f"level{i}": t.data for i, t in enumerate(batch)})
    return path


def train_loop(images: Sequence[np.ndarray], pipeline: PipelineConfig, train: TrainConfig,
               out_dir=None, probe: Optional[np.ndarray] = None, resume=None,
               log: Optional[TextIO] = None) -> TrainResult:
    """Fit an ICONet on HR images (LR inputs come from k-space degradation).

    Each step draws a batch, evaluates the multi-stage loss, backpropagates
    and applies Adam. With ``out_dir`` the metrics log and final checkpoint
    are written there. ``resume`` continues from a checkpoint of the same
    configuration and reproduces the uninterrupted trajectory exactly.
    """
    if not images:
        raise ValueError("training needs at least one image")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    pyramids = [hr_pyramid(np.asarray(img, dtype=np.float64), pipeline.scale) for img in images]
    probe_pyr = hr_pyramid(np.asarray(probe, dtype=np.float64), pipeline.scale) if probe is not None else pyramids[0]
    single = not pipeline.multi_stage

    with default_dtype(DTYPES[train.dtype]):
        model = ICONet(pipeline, np.random.default_rng(train.seed))
        params = model.parameters()
        adam = AdamState(lr=train.lr)
        adam.init_like([p.data for p in params])
        start = 0
        if resume is not None:
            start, adam = _restore(resume, model, pipeline, train)

        lines = [log_header(pipeline.stages)]
        log_path = out_dir / LOG_NAME if out_dir is not None else None
        if log_path is not None and start > 0 and log_path.exists():
            kept = [ln for ln in log_path.read_text().splitlines()[1:] if ln and int(ln.split("\t")[0]) <= start]
            lines += kept
        if log_path is not None:
            log_path.write_text("".join(ln + "\n" for ln in lines))

        records = []
        for step in range(start + 1, train.steps + 1):
            idx = batch_indices(train.seed, step, len(images), train.batch_size)
            batch = [_stack([pyramids[i][lvl] for i in idx]) for lvl in range(pipeline.stages + 1)]
            try:
                loss = multi_stage_loss(model(batch[0]), batch, pipeline.alpha, single_stage=single)
                value = loss.item()
            except FloatingPointError as exc:
                dump = _dump_batch(out_dir, step, batch, idx)
                raise NumericAbort(f"step {step}: {exc}", dump) from exc
            if not math.isfinite(value):
                dump = _dump_batch(out_dir, step, batch, idx)
                raise NumericAbort(f"non-finite loss {value} at step {step}", dump)
            backward(loss)
            new = adam_step([p.data for p in params], [p.grad for p in params], adam)
            for p, d in zip(params, new):
                p.data = d
                p.grad = None

            measure = train.probe_every and (step % train.probe_every == 0 or step == train.steps)
            scores = probe_psnr(model, probe_pyr) if measure else [math.nan] * pipeline.stages
            rec = StepRecord(step, value, scores)
            records.append(rec)
            if log_path is not None:
                with log_path.open("a") as fh:
                    fh.write(rec.line() + "\n")
            if log is not None:
                log.write(rec.line() + "\n")
            if out_dir is not None and train.checkpoint_every and step % train.checkpoint_every == 0:
                write_checkpoint(out_dir / f"checkpoint_step{step}.ckpt", model, pipeline, train, step, adam)

        ckpt = None
        if out_dir is not None:
            ckpt = write_checkpoint(out_dir / CHECKPOINT_NAME, model, pipeline, train, train.steps, adam)
    return TrainResult(model, records, adam, ckpt)

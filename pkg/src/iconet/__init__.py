"""Progressive two-branch super-resolution built on a small numpy autodiff engine."""

from .blocks import CRB, RSCFL, VMB, CrbConfig, VmbConfig, crb_forward, rscfl_forward, vmb_forward
from .data import bicubic_resize, degrade_kspace, fft2, ifft2, load_image, make_phantom, pad_to_pow2, save_image
from .fusion import FusionBundle, SRRecFusion, sab_index, sab_relevance, sab_transfer, sr_rec_fuse
from .metrics import psnr, ssim
from .pipeline import (
    BranchConfig,
    ICONet,
    PipelineConfig,
    RecBranch,
    SRBranch,
    StageOutput,
    hr_pyramid,
    iconet_forward,
    multi_stage_loss,
    param_report,
)
from .training import NumericAbort, TrainConfig, train_loop

__version__ = "0.1.0"

"""State-space recurrences, selective scans and the 2-D directional scan."""

from .scan import BLOCK, scan, scan_backward, scan_forward, scan_reference, ssm_scan_sequential, zoh_discretize
from .selective import SelectiveScan, SsmParams, selective_scan
from .ss2d import DIRECTIONS, SS2D, DirectionalSequence, directional_sequence, ss2d

"""3D-EAR segmentor for multichannel cine velocity MR, built on a small numpy autodiff core."""
from ._accel import backend, set_backend
from .data import CineRecord, generate_phantom, load_record, make_split, rotate_augment, save_record
from .network import EARConfig, build_network
from .objectives import compute_metrics, cross_entropy, dice_iou_loss, dice_loss, jaccard_term
from .tensor import Tensor, backward, no_grad
from .velocity import global_velocity_curves, peak_velocities, postprocess_mask

__version__ = "0.1.0"

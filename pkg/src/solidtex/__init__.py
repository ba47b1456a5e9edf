"""Adversarial solid texture synthesis from 2D exemplars."""

from solidtex.errors import ConfigError, FormatError, NonFiniteLossError, ValidationError
from solidtex.exemplar import Exemplar, ScaleSchedule, crop_patch, load_exemplar, sample_real_batch
from solidtex.generator import SolidTextureGenerator, generate, make_noise_pyramid, receptive_field
from solidtex.slicer import sample_slices, slice_at, slice_oblique45
from solidtex.discriminators import SliceCritic, SliceDiscriminators, VGGFrontEnd
from solidtex.trainer import TrainConfig, TrainState, fit, train_step
from solidtex.volume_io import export_slice_stack, load_volume, sample_volume, save_volume

__version__ = "0.1.0"

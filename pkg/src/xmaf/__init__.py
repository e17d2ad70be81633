"""Cross-modal attention fusion for continuous valence/arousal regression, on a numpy autodiff core."""

from .attention import CrossModalFusion, Encoder, EncoderLayer, MultiHeadAttention, dot_product_attention
from .dataset import Dataset, SequenceSample, SynthConfig, generate_synthetic, load, mask_modality, store
from .errors import *  # noqa: F401,F403
from .features import audio_features, extract_llds, pixel_embed
from .metrics import CccResult, ccc, ccc_loss, fisher_z_test
from .models import ModelConfig, build_model, load_checkpoint, parameter_report, save_checkpoint
from .optim import Adam
from .tensor import Tensor, backward, finite_diff_check, no_grad, parameter
from .train import TrainConfig, ablate, evaluate, train

__version__ = "0.1.0"

"""Semantic-guided CycleGAN stain normalisation with pixel-adaptive convolutions."""

from .errors import (ConfigError, DegenerateStains, InvalidInput, InvalidParameter, NoTissue,
                     NumericalError, SegCNError, ShapeMismatch)
from .pac import PACLayerSpec, PacConv2d, gaussian_affinity, pac_forward
from .networks import Discriminator, DiscriminatorSpec, Generator, GeneratorSpec
from .guidance import (SemanticNet, extract_multiscale_features, pretrain_semantic_net,
                       semantic_stack)
from .losses import (LossBreakdown, adversarial_loss, cycle_loss, feat_map_loss, seg_loss,
                     total_objective)
from .trainer import (TrainingConfig, TrainState, fit, load_checkpoint, normalize_image,
                      save_checkpoint, train_step)
from .baselines import (LabStats, StainBasis, lab_stats, macenko_fit, macenko_normalize,
                        reinhard_normalize)
from .metrics import MetricReport, cwssim, nmi, nmi_aggregate, ssim, structure_dice
from .data import PatchDataset, SynthConfig, generate_synthetic, load_patches, split

__version__ = "0.1.0"

"""Mini encoder-decoder segmentation with learned cross-stage routing.

The network's inter-stage pathways are configurable: fixed skip
connections, attention over a growing pool of earlier stage outputs, both,
or neither. Everything runs on a small numpy-backed reverse-mode autodiff
engine so the mechanism's mathematical properties can be verified exactly.
"""

from .attention import (AttentionTrace, HistoryPool, StageAttentionUnit,
                        align_feature, attend, build_unit, history_append,
                        naive_attend_oracle)
from .backbone import (BackboneConfig, ForwardArtifacts, InitScheme, MiniUNet,
                       Position, Routing, attention_sites, build,
                       formula_overhead, stage_channels)
from .config import ExperimentConfig
from .data import (Dataset, SyntheticSpec, generate_synthetic, load_checkpoint,
                   load_directory, load_pgm, save_checkpoint, save_pgm,
                   write_metrics_csv)
from .gradcheck import finite_difference_gradcheck, run_standard_suite
from .metrics import (MetricsReport, dice, evaluate_masks, hd95,
                      hd95_bruteforce_oracle, iou)
from .tensor import Precision, Tensor
from .training import (AdamW, EvaluationReport, LossWeights, TrainSettings,
                       augment_pair, combined_loss, cross_entropy_loss,
                       dice_loss, evaluate_model, train_model)

__version__ = "0.1.0"

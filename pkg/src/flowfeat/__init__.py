"""flowfeat: online joint learning of pixel-wise visual features and
multi-order motion flows from a single video stream, with open-set
template-based evaluation and flow visualization."""

from .conjugation import (ConjugationCoefficients, conjugation_loss,
                          flow_regularizer, total_conjugation)
from .contrastive import (ContrastiveParams, PairScores, SampleSet,
                          SamplingDistribution, build_sampling_distribution,
                          contrastive_core, filter_pairs, pair_scores,
                          sample_coords, self_supervised_loss, similarity)
from .hierarchy import (LevelSpec, ModelState, build_model, ema_update,
                        forward_features, forward_flow, load_checkpoint,
                        save_checkpoint)
from .stream import (Frame, FramePair, GroundTruth, ObjectSpec, StreamSpec,
                     EndOfStreamError, StreamError, generate_toy_stream,
                     open_stream, read_flow_file, write_flow_file)
from .trainer import (TrainerConfig, Trainer, augment_pair, forward_all, run,
                      schedule_active_components, total_loss)
from .warp import charbonnier, consistency_loss, warp

__version__ = "0.1.0"

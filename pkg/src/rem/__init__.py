"""Rare example mining for 3D-detection corpora.

Estimates per-object rareness with a normalizing flow trained on
PCA-normalized detector embeddings, scores objects by data-centric and
model-centric criteria, and runs budgeted track-level mining against a
simulated labeling oracle.
"""

from .corpus import (CorpusSpec, DetectionRecord, DetectorSimConfig,
                     GroundTruthTrack, ObjectTypeSpec, generate_corpus)
from .embed import (EmbeddingRecord, GridGeometry, PcaTransform,
                    apply_embedding, build_flow_dataset, fit_pca,
                    roi_max_pool)
from .errors import (EmptyFootprintError, NumericalError, RemError,
                     ValidationError)
from .flow import (AffineCoupling, ContinuousBijector, FlowConfig, FlowModel,
                   base_log_prob, inverse_and_log_det, rareness_data,
                   train_flow)
from .geometry import Box3D, bev_iou, size_category, vehicle_size
from .mining import (AutoLabelNoise, MiningResult, TrackSet, mine_tracks,
                     rank_candidates, simulate_autolabels, simulate_oracle)
from .scoring import (EnsembleGroup, HardFilterConfig, associate_ensemble,
                      ensemble_variance, hard_filter, rareness_combined,
                      rareness_model, score_detections, track_score)

__version__ = "0.1.0"

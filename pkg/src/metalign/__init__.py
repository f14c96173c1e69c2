"""Meta-learning and meta-distillation for multilingual semantic search."""

__version__ = "0.1.0"

from .model import (EncoderConfig, OptimizerState, ParameterVector, TokenBatch,  # noqa: E402
                    ValidationError, adamw_step, encode, load_checkpoint, save_checkpoint,
                    sgd_step)
from .losses import (LossBatch, LossSpec, TripletClass, classify_triplet, kd_loss,  # noqa: E402
                     loss_and_grad, mine_triplets, regression_loss, triplet_loss)
from .data import (CorpusError, PairCorpus, RetrievalCorpus, SyntheticSpec,  # noqa: E402
                   generate_synthetic_corpus, load_corpus, load_pair_corpus,
                   load_retrieval_corpus)
from .tasks import (LanguageArrangement, MetaDataset, MetaTask, TransferMode,  # noqa: E402
                    build_meta_dataset, sample_meta_task, select_queries)
from .evaluation import (EvalPool, MetricReport, average_precision_at_k,  # noqa: E402
                         build_pool, cross_validate, map_at_20, pearson_r_times_100,
                         rank_candidates)
from .learners import (EpisodeBuilder, MetaHyper, TrainConfig, TrainHistory,  # noqa: E402
                       adapt_and_evaluate, finetune_step, inner_loop, maml_align_step,
                       maml_outer_step, train)

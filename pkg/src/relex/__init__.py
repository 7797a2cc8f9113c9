"""Sentence-level relation extraction from bag-level KB supervision.

A piecewise convolutional sentence encoder feeds a latent-variable factor
graph that links per-sentence relation labels to observed KB facts through
a deterministic OR and soft agreement penalties, so learning can override
an incomplete KB.  Training minimizes a structured hinge loss with MAP
inference (exhaustive, A*, or local search with restarts).
"""

from .encoder import (EncoderConfig, EncoderGradients, EncoderParams,
                      SentenceEncoding, SentenceExample, encode,
                      encode_backward, init_params, mention_score,
                      score_table)
from .model import (Assignment, Bag, Hyperparams, agreement_logpenalty,
                    bag_weight, implied_t, joint_logscore, task_loss)
from .inference import (CONSTRAINED, LOSS_AUGMENTED, BudgetExceededError,
                        MapProblem, MapSolution, SearchBudgetExceeded,
                        astar_map, exhaustive_map, local_search_map,
                        solve_d_given_t)
from .training import (TrainerConfig, TrainResult, TrainState, hinge_step,
                       mira_step, perceptron_step, train)
from .data import (Checkpoint, Corpus, CorpusFormatError, CheckpointError,
                   SynthSpec, generate_synthetic, load_checkpoint,
                   load_corpus, load_fixed_vectors, remap_corpus,
                   save_checkpoint, save_corpus, save_fixed_vectors)
from .evaluation import (MentionPrediction, PRCurve, heldout_pr,
                         in_out_kb_split, p_at_n, paired_bootstrap,
                         predict_mentions, sentential_pr)

__version__ = "0.1.0"

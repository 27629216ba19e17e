"""adapterfuse: a desk-scale multi-expert adapter-fusion language model.

Perception and detection expert queries are injected per layer into a small
decoder-only model through zero-gated cross-attention, trained with a
two-stage freeze schedule, and scored with the composite metric suite
(accuracy, judge, Match, BLEU 1-4, ROUGE-L, CIDEr, Final_Score).
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import QAPair, load_dataset, save_dataset, synth_corpus
from .experts import (
    CameraFeatureSet,
    DetectionPathParams,
    ExpertConfig,
    PerceptionPathParams,
    Scene,
    SceneObject,
    build_detect_query,
    build_percept_query,
    load_features,
    save_features,
    synth_encoder,
)
from .fusion import (
    AdapterBank,
    AdapterState,
    ExpertQuery,
    FusedContext,
    fused_forward,
    merge_layer,
    query_to_tok,
)
from .metrics import (
    MetricReport,
    PredictionPair,
    StubJudge,
    accuracy,
    bleu_n,
    cider,
    compute_report,
    corpus_bleu_n,
    extract_points,
    final_score,
    judge_score,
    match_score,
    rouge_l,
)
from .numerics import Matrix, Parameter, Tape, Tensor, grad_check, seeded_rng
from .pipeline import FusedPipeline
from .training import FreezePlan, TrainConfig, answer_loss, run_stage, sgd_step
from .transformer import (
    ByteVocabulary,
    DecoderLayer,
    LanguageModel,
    ModelConfig,
    block_forward,
    generate,
    predict_next,
    transformer_forward,
)

__version__ = "0.1.0"

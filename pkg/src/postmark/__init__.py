"""Post-hoc text watermarking: secret-table word selection, LLM insertion, presence-score detection."""

from .backends import (
    BackendDescriptor,
    InstructionRequest,
    MockEmbeddingBackend,
    complete,
    embed_batch,
    embed_text,
    make_embedding_backend,
    make_instruction_backend,
    mock_embedding,
)
from .detection import (
    DetectionResult,
    MatchEmbedder,
    detect,
    evaluate_match_embedder,
    presence_score,
    word_present,
)
from .estimators import PostMarkDetector, PostMarkWatermarker
from .evaluation import (
    EvalReport,
    calibrate_threshold,
    paraphrase_attack,
    run_eval,
    semantic_similarity,
    split_sentences,
    tpr_at_fpr,
)
from .exceptions import PostMarkError
from .insertion import InsertionOutcome, insert_words, verify_presence
from .sectable import (
    SecretTable,
    build_sectable,
    build_vocabulary,
    hubness_report,
    load_sectable,
    save_sectable,
)
from .selection import (
    InsertionPolicy,
    WatermarkWordList,
    cosine,
    count_words,
    select_watermark_words,
    target_word_count,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]

"""Few-shot classification on frozen dual-encoder features: a shared
first-order classifier over class-token and text features, plus a
second-order head on square-root-normalized token covariances."""

from .errors import (
    BadMagicError,
    ConfigError,
    DegenerateCovarianceError,
    DivergenceError,
    InsufficientDataError,
    NanGuardError,
    NonFiniteDataError,
    Pm2fError,
    ShapeError,
    TruncatedFileError,
    UnsupportedVersionError,
    ValidationError,
)
from .heads import (
    HeadMode,
    HeadParams,
    init_head_params,
    project_tokens,
    text_logits,
    text_logits_backward,
    visual_logits,
    visual_logits_backward,
    zero_shot_probs,
)
from .linalg import jacobi_eigh, matmul, matvec, trace_and_frobenius
from .prompts import (
    CoopContext,
    PromptScheme,
    PromptSpec,
    coop_assemble,
    encode_class_prompts,
    gpt_spec_from_assets,
    init_coop_context,
    load_prompt_assets,
    render_prompt,
)
from .sopool import (
    SoPoolConfig,
    SoPoolTape,
    covariance_pool,
    newton_schulz_sqrt,
    sopool_backward,
    sopool_forward,
    trace_normalize,
    unvech,
    vech_upper,
)
from .storage import (
    FeatureRecord,
    Pm2fHeader,
    array_checksum,
    file_checksum,
    load_dataset,
    load_params,
    load_text_features,
    read_pm2f,
    save_params,
    write_pm2f,
    write_results,
)
from .synth import SynthSpec, covariance_separable_spec, synth_generate, synth_to_files
from .textenc import EOS_ID, ToyTextEncoder, ToyTextEncoderConfig, toy_text_encode, toy_tokenize
from .trainer import (
    AdamWState,
    CoopTextSource,
    EpisodeResult,
    EpisodeSpec,
    FeatureDataset,
    ProtocolTable,
    TextFeatureSet,
    TrainConfig,
    adamw_step,
    compute_loss,
    evaluate_top1,
    lr_at,
    run_protocol,
    sample_few_shot,
    sweep_grid,
    train_episode,
)

__version__ = "0.1.0"

"""Few-shot training machinery.

One episode = (shots, seed): sample a per-class support set, train the heads
(and the learnable prompt context, when used) with AdamW under a linear
warmup + cosine annealing schedule, then score top-1 accuracy on images
only. The protocol runner sweeps a small learning-rate x weight-decay grid
per (shot, seed) cell and averages accuracies across seeds.

Everything is deterministic: all randomness flows through named streams
(see rng), and a single episode runs on one thread. Distinct episodes are
independent and may run on parallel workers.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, InsufficientDataError, NanGuardError, ValidationError
from .heads import (
    HeadMode,
    HeadParams,
    init_head_params,
    text_logits,
    text_logits_backward,
    visual_logits,
    visual_logits_backward,
)
from .prompts import CoopContext, class_token_embeddings, coop_assemble, init_coop_context
from .rng import stream
from .sopool import SoPoolConfig
from .textenc import ToyTextEncoder

DEFAULT_LR_GRID = (0.001, 0.0001)
DEFAULT_WD_GRID = (0.0, 0.01, 0.0001)
DEFAULT_SHOTS = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float
    weight_decay: float
    head_mode: HeadMode
    sopool: SoPoolConfig | None = None
    seed: int = 0
    warmup_iters: int = 50
    total_iters: int = 12800
    batch_size: int = 2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    text_loss_weight: float = 1.0
    init_head_from_text: bool = False

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_iters < 0 or self.warmup_iters < 0:
            raise ConfigError("iteration counts must be non-negative")
        # total_iters == 0 is the documented no-op bound; otherwise the
        # warmup must end strictly before the schedule does.
        if self.total_iters > 0 and not self.warmup_iters < self.total_iters:
            raise ConfigError(
                f"warmup_iters {self.warmup_iters} must be < total_iters {self.total_iters}"
            )


@dataclass(frozen=True)
class EpisodeSpec:
    shots: int
    seed: int
    indices_by_class: dict[int, list[int]]

    @property
    def flat_indices(self) -> list[int]:
        out: list[int] = []
        for c in sorted(self.indices_by_class):
            out.extend(self.indices_by_class[c])
        return out


@dataclass
class EpisodeResult:
    top1_accuracy: float
    loss_history: list[float] = field(default_factory=list)
    best_config: dict | None = None
    wallclock: float = 0.0


@dataclass
class FeatureDataset:
    """In-memory feature set: one class token per sample, optional visual
    tokens, integer labels."""

    cls_tokens: np.ndarray  # (n, d_cls)
    labels: np.ndarray  # (n,)
    n_classes: int
    visual_tokens: np.ndarray | None = None  # (n, N, d_tok)
    class_names: list[str] | None = None

    def __post_init__(self):
        self.cls_tokens = np.asarray(self.cls_tokens, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.cls_tokens.ndim != 2 or self.labels.ndim != 1:
            raise ValidationError("cls_tokens must be (n, d_cls), labels (n,)")
        if self.cls_tokens.shape[0] != self.labels.shape[0]:
            raise ValidationError("sample count mismatch between tokens and labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValidationError("label out of range")
        if self.visual_tokens is not None:
            self.visual_tokens = np.asarray(self.visual_tokens, dtype=np.float64)
            if self.visual_tokens.ndim != 3 or self.visual_tokens.shape[0] != self.labels.shape[0]:
                raise ValidationError("visual_tokens must be (n, N, d_tok)")

    @property
    def n_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def d_cls(self) -> int:
        return self.cls_tokens.shape[1]

    def subset(self, indices) -> "FeatureDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureDataset(
            cls_tokens=self.cls_tokens[idx],
            labels=self.labels[idx],
            n_classes=self.n_classes,
            visual_tokens=None if self.visual_tokens is None else self.visual_tokens[idx],
            class_names=self.class_names,
        )


@dataclass
class TextFeatureSet:
    """Precomputed text features; one record per (class, prompt string)."""

    features: np.ndarray  # (T, d_cls)
    labels: np.ndarray  # (T,)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValidationError("text features must be (T, d_cls) with (T,) labels")

    def class_features(self, n_classes: int) -> np.ndarray:
        """One feature row per class (mean when a class has several)."""
        rows = []
        for c in range(n_classes):
            mask = self.labels == c
            if not mask.any():
                raise ValidationError(f"no text feature for class {c}")
            rows.append(self.features[mask].mean(axis=0))
        return np.stack(rows, axis=0)


@dataclass
class CoopTextSource:
    """Learnable-context prompts re-encoded through the frozen encoder at
    every step."""

    encoder: ToyTextEncoder
    context_len: int
    classnames: list[str]
    init_std: float = 0.02


def sample_few_shot(labels, shots: int, seed: int, n_classes: int | None = None) -> EpisodeSpec:
    """Per-class sampling without replacement from the train labels.

    Each class draws from its own ``sample/class`` stream, so episodes are
    reproducible per (seed, class) independent of the other classes.
    """
    lab = np.asarray(labels, dtype=np.int64)
    if shots < 1:
        raise ConfigError(f"shots must be >= 1, got {shots}")
    classes = range(n_classes) if n_classes is not None else np.unique(lab).tolist()
    chosen: dict[int, list[int]] = {}
    for c in classes:
        idx = np.flatnonzero(lab == c)
        if idx.size < shots:
            raise InsufficientDataError(
                f"class {c} has {idx.size} training samples, needs {shots}"
            )
        perm = stream("sample/class", seed, c).permutation(idx.size)
        chosen[int(c)] = sorted(int(i) for i in idx[perm[:shots]])
    return EpisodeSpec(shots=shots, seed=seed, indices_by_class=chosen)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine annealing to zero."""
    if iteration < 0 or iteration >= cfg.total_iters:
        raise ValidationError(
            f"iteration {iteration} outside [0, {cfg.total_iters})"
        )
    if iteration < cfg.warmup_iters:
        return cfg.base_lr * iteration / cfg.warmup_iters
    span = cfg.total_iters - cfg.warmup_iters
    progress = (iteration - cfg.warmup_iters) / span
    return cfg.base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """One AdamW update in place: decoupled weight decay, bias-corrected
    moments."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NanGuardError(name)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p -= lr * cfg.weight_decay * p
        p -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def softmax_xent(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross entropy -log softmax(logits)[label] and its logits gradient."""
    if label < 0 or label >= logits.size:
        raise ValidationError(f"label {label} out of range for {logits.size} classes")
    shifted = logits - logits.max()
    log_z = np.log(np.sum(np.exp(shifted)))
    loss = float(log_z - shifted[label])
    grad = np.exp(shifted - log_z)
    grad[label] -= 1.0
    return loss, grad


def compute_loss(
    image_logits: list[np.ndarray],
    image_labels,
    text_logit_rows: list[np.ndarray],
    text_labels,
    text_loss_weight: float,
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean image cross entropy plus weighted mean text cross entropy.

    Returns the scalar loss and per-row logits gradients for both paths.
    An empty image batch contributes zero, which is how a step driven only
    by the text loss is expressed.
    """
    total = 0.0
    grad_images = []
    if image_logits:
        b = len(image_logits)
        for logits, label in zip(image_logits, image_labels):
            loss, grad = softmax_xent(logits, int(label))
            total += loss / b
            grad_images.append(grad / b)
    grad_texts = []
    if text_logit_rows and text_loss_weight != 0.0:
        t = len(text_logit_rows)
        for logits, label in zip(text_logit_rows, text_labels):
            loss, grad = softmax_xent(logits, int(label))
            total += text_loss_weight * loss / t
            grad_texts.append(text_loss_weight * grad / t)
    elif text_logit_rows:
        grad_texts = [np.zeros_like(row) for row in text_logit_rows]
    return total, grad_images, grad_texts


class _BatchStream:
    """Shuffled epochs over the support indices, batches crossing epoch
    boundaries seamlessly."""

    def __init__(self, indices: list[int], seed: int):
        self._indices = list(indices)
        self._rng = stream("train/shuffle", seed)
        self._buffer: list[int] = []

    def next_batch(self, size: int) -> list[int]:
        while len(self._buffer) < size:
            order = self._rng.permutation(len(self._indices))
            self._buffer.extend(self._indices[i] for i in order)
        batch, self._buffer = self._buffer[:size], self._buffer[size:]
        return batch


def evaluate_top1(
    params: HeadParams,
    data: FeatureDataset,
    mode: HeadMode,
    sopool: SoPoolConfig | None = None,
) -> float:
    """Image-only top-1 accuracy; ties resolve to the lowest class index."""
    if data.n_samples == 0:
        raise ValidationError("cannot evaluate on an empty set")
    hits = 0
    for i in range(data.n_samples):
        tokens = None if data.visual_tokens is None else data.visual_tokens[i]
        logits, _ = visual_logits(data.cls_tokens[i], tokens, params, mode, sopool)
        if int(np.argmax(logits)) == int(data.labels[i]):
            hits += 1
    return hits / data.n_samples


def _coop_text_features(
    source: CoopTextSource, ctx: CoopContext, cls_embs: list[np.ndarray], eos: np.ndarray
):
    features, tapes = [], []
    for emb in cls_embs:
        seq = coop_assemble(ctx, emb, eos)
        feature, tape = source.encoder.forward_embedded(seq)
        features.append(feature)
        tapes.append(tape)
    return features, tapes


def train_episode(
    data: FeatureDataset,
    text_source: TextFeatureSet | CoopTextSource | None,
    episode: EpisodeSpec,
    cfg: TrainConfig,
    eval_data: FeatureDataset | None = None,
) -> tuple[HeadParams, CoopContext | None, EpisodeResult]:
    """Train the heads on one sampled support set.

    ``text_source`` is either precomputed features (fixed prompt schemes),
    a learnable-context source re-encoded every step, or None for an
    image-only run. Returns the trained parameters, the trained context (if
    any), and the episode metrics; accuracy is measured on ``eval_data``
    when given, else on the support set itself.
    """
    started = time.perf_counter()
    support_indices = episode.flat_indices
    if any(i < 0 or i >= data.n_samples for i in support_indices):
        raise ValidationError("episode indices out of dataset bounds")
    needs_tokens = cfg.head_mode is not HeadMode.CLS_ONLY
    if needs_tokens and data.visual_tokens is None:
        raise ConfigError(f"head mode {cfg.head_mode.value} needs visual tokens")
    if needs_tokens and cfg.sopool is None:
        raise ConfigError("token head modes need a sopool config")

    ctx: CoopContext | None = None
    text_feats = None
    text_labels: list[int] = []
    cls_embs: list[np.ndarray] = []
    eos = None
    if isinstance(text_source, CoopTextSource):
        enc_cfg = text_source.encoder.config
        if enc_cfg.d_cls != data.d_cls:
            raise ConfigError(
                f"encoder output dim {enc_cfg.d_cls} != feature dim {data.d_cls}"
            )
        if len(text_source.classnames) != data.n_classes:
            raise ConfigError("one class name per class is required")
        ctx = init_coop_context(
            text_source.context_len, enc_cfg.embed_dim, cfg.seed, text_source.init_std
        )
        cls_embs = [class_token_embeddings(text_source.encoder, n) for n in text_source.classnames]
        eos = text_source.encoder.eos_embedding()
        text_labels = list(range(data.n_classes))
    elif isinstance(text_source, TextFeatureSet):
        if text_source.features.shape[1] != data.d_cls:
            raise ConfigError("text feature dim differs from image feature dim")
        missing = set(range(data.n_classes)) - set(int(x) for x in text_source.labels)
        if missing:
            raise ValidationError(f"text features missing classes {sorted(missing)}")
        text_feats = text_source.features
        text_labels = [int(x) for x in text_source.labels]

    init_from = None
    if cfg.init_head_from_text:
        if isinstance(text_source, TextFeatureSet):
            init_from = text_source.class_features(data.n_classes)
        elif ctx is not None:
            features, _ = _coop_text_features(text_source, ctx, cls_embs, eos)
            init_from = np.stack(features, axis=0)
        else:
            raise ConfigError("init_head_from_text needs a text source")

    params = init_head_params(
        cfg.head_mode,
        n_classes=data.n_classes,
        d_cls=data.d_cls,
        d_tok=None if data.visual_tokens is None else data.visual_tokens.shape[2],
        sopool=cfg.sopool,
        seed=cfg.seed,
        init_shared_from=init_from,
    )
    opt_params = dict(params.param_dict())
    if ctx is not None:
        opt_params["coop_ctx"] = ctx.context
    opt_state = AdamWState.for_params(opt_params)
    batches = _BatchStream(support_indices, cfg.seed)
    loss_history: list[float] = []

    for it in range(cfg.total_iters):
        lr = lr_at(it, cfg)
        batch = batches.next_batch(cfg.batch_size)
        grads = params.zero_grads()
        if ctx is not None:
            grads["coop_ctx"] = np.zeros_like(ctx.context)

        image_logits, image_tapes, image_labels = [], [], []
        for idx in batch:
            tokens = None if data.visual_tokens is None else data.visual_tokens[idx]
            logits, tape = visual_logits(
                data.cls_tokens[idx], tokens, params, cfg.head_mode, cfg.sopool
            )
            image_logits.append(logits)
            image_tapes.append(tape)
            image_labels.append(int(data.labels[idx]))

        text_rows, text_tapes, text_row_feats = [], [], []
        if ctx is not None:
            features, text_tapes = _coop_text_features(text_source, ctx, cls_embs, eos)
            text_row_feats = features
            text_rows = [text_logits(f, params) for f in features]
        elif text_feats is not None:
            text_row_feats = [text_feats[i] for i in range(text_feats.shape[0])]
            text_rows = [text_logits(f, params) for f in text_row_feats]

        loss, grad_images, grad_texts = compute_loss(
            image_logits, image_labels, text_rows, text_labels, cfg.text_loss_weight
        )
        for tape, grad in zip(image_tapes, grad_images):
            visual_logits_backward(grad, tape, params, grads)
        for i, grad in enumerate(grad_texts):
            grad_feature = text_logits_backward(grad, text_row_feats[i], params, grads)
            if ctx is not None:
                grad_seq = text_source.encoder.backward_to_input(grad_feature, text_tapes[i])
                grads["coop_ctx"] += grad_seq[: text_source.context_len]

        adamw_step(opt_params, grads, opt_state, lr, cfg)
        loss_history.append(loss)

    target = eval_data if eval_data is not None else data.subset(support_indices)
    accuracy = evaluate_top1(params, target, cfg.head_mode, cfg.sopool)
    result = EpisodeResult(
        top1_accuracy=accuracy,
        loss_history=loss_history,
        wallclock=time.perf_counter() - started,
    )
    return params, ctx, result


def sweep_grid(
    data: FeatureDataset,
    text_source,
    episode: EpisodeSpec,
    cfg: TrainConfig,
    select_data: FeatureDataset,
    lr_grid=DEFAULT_LR_GRID,
    wd_grid=DEFAULT_WD_GRID,
) -> tuple[HeadParams, CoopContext | None, EpisodeResult, list[dict]]:
    """Train every (lr, wd) combination and keep the best by selection
    accuracy; ties prefer the lower lr, then the lower wd."""
    if not lr_grid or not wd_grid:
        raise ConfigError("grids must be non-empty")
    best = None
    cells: list[dict] = []
    for lr in sorted(lr_grid):
        for wd in sorted(wd_grid):
            cell_cfg = replace(cfg, base_lr=lr, weight_decay=wd)
            params, ctx, result = train_episode(data, text_source, episode, cell_cfg)
            select_acc = evaluate_top1(params, select_data, cfg.head_mode, cfg.sopool)
            cells.append({"lr": lr, "wd": wd, "select_accuracy": select_acc})
            if best is None or select_acc > best[0]:
                best = (select_acc, lr, wd, params, ctx, result)
    select_acc, lr, wd, params, ctx, result = best
    result.best_config = {"lr": lr, "wd": wd, "select_accuracy": select_acc}
    return params, ctx, result, cells


@dataclass
class ProtocolTable:
    """Per-scheme, per-shot mean accuracies plus the raw episode records."""

    schemes: list[str]
    shots: list[int]
    seeds: list[int]
    means: dict[str, dict[int, float]]
    records: list[dict]


def _run_cell(
    scheme_name: str,
    source,
    shot: int,
    seed: int,
    train_data: FeatureDataset,
    cfg: TrainConfig,
    sweep: bool,
    select_data: FeatureDataset,
    report_data: FeatureDataset,
    lr_grid,
    wd_grid,
) -> dict:
    episode = sample_few_shot(train_data.labels, shot, seed, train_data.n_classes)
    cell_cfg = replace(cfg, seed=seed)
    record: dict = {"scheme": scheme_name, "shots": shot, "seed": seed}
    if sweep:
        params, _, result, cells = sweep_grid(
            train_data, source, episode, cell_cfg, select_data, lr_grid, wd_grid
        )
        record["sweep"] = cells
        record["lr"] = result.best_config["lr"]
        record["wd"] = result.best_config["wd"]
    else:
        params, _, result = train_episode(train_data, source, episode, cell_cfg)
        record["lr"] = cell_cfg.base_lr
        record["wd"] = cell_cfg.weight_decay
    record["accuracy"] = evaluate_top1(params, report_data, cfg.head_mode, cfg.sopool)
    record["loss_history"] = [float(x) for x in result.loss_history]
    return record


def run_protocol(
    train_data: FeatureDataset,
    text_sources: list[tuple[str, TextFeatureSet | CoopTextSource | None]],
    cfg: TrainConfig,
    shots=DEFAULT_SHOTS,
    seeds=(0, 1, 2),
    sweep: bool = False,
    select_data: FeatureDataset | None = None,
    report_data: FeatureDataset | None = None,
    lr_grid=DEFAULT_LR_GRID,
    wd_grid=DEFAULT_WD_GRID,
    threads: int = 1,
) -> ProtocolTable:
    """shots x seeds episodes for every prompt scheme; accuracies averaged
    across seeds.

    ``select_data`` drives sweep selection and ``report_data`` the reported
    numbers (both default to the same held-out set). With ``threads`` > 1
    cells run on a thread pool; results are merged in fixed cell order, so
    the output is identical either way.
    """
    if select_data is None or report_data is None:
        raise ConfigError("protocol needs selection and report datasets")
    cells = [
        (name, source, shot, seed)
        for name, source in text_sources
        for shot in shots
        for seed in seeds
    ]

    def work(cell):
        name, source, shot, seed = cell
        return _run_cell(
            name, source, shot, seed, train_data, cfg, sweep,
            select_data, report_data, lr_grid, wd_grid,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(work, cells))
    else:
        records = [work(cell) for cell in cells]

    means: dict[str, dict[int, float]] = {}
    for name, _ in text_sources:
        means[name] = {}
        for shot in shots:
            accs = [
                r["accuracy"]
                for r in records
                if r["scheme"] == name and r["shots"] == shot
            ]
            means[name][shot] = sum(accs) / len(accs)
    return ProtocolTable(
        schemes=[name for name, _ in text_sources],
        shots=list(shots),
        seeds=list(seeds),
        means=means,
        records=records,
    )

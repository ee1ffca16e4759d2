"""Prompt tuning with a multi-target margin ranking loss.

A prompt is M learnable context vectors followed by frozen class name
embeddings joined by a separator token; one prompt per composition of the
target attribute with the selected bias attributes (multi-target mode) or
per target class alone (single-target mode). Only the context vectors are
trainable; encoders, name embeddings and the separator stay frozen.

Because the encoder mean-pools, every context vector receives the same
gradient, and the probability of a sample under composition c is
softmax over logit_scale * cos(prompt_c, sample) across compositions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderParams, encode_sequence, encode_sequence_backward
from .world import AttributeSchema, ImageSample, TextSample

MODE_MTP = "mtp"
MODE_STP = "stp"


class TrainConfigError(ValueError):
    """Raised for invalid training hyperparameters."""


class TrainingError(RuntimeError):
    """Raised when optimization produces non-finite values."""


@dataclass
class TrainConfig:
    learning_rate: float = 5e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 1
    total_epochs: int = 10
    batch_size: int = 256
    margin: float = 0.1
    logit_scale: float = 4.0
    n_context: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise TrainConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise TrainConfigError("weight_decay must be non-negative")
        if self.margin <= 0:
            raise TrainConfigError("margin must be positive")
        if self.logit_scale <= 0:
            raise TrainConfigError("logit_scale must be positive")
        if self.n_context < 1:
            raise TrainConfigError("need at least one context vector")
        if self.warmup_epochs > self.total_epochs:
            raise TrainConfigError("warmup_epochs cannot exceed total_epochs")
        if self.batch_size < 1 or self.total_epochs < 0:
            raise TrainConfigError("batch_size and total_epochs must be positive")


class PromptState:
    """Learnable context plus frozen per-composition prompt scaffolding.

    In multi-target mode there is one composition per element of
    target x (selected bias attributes); in single-target mode one per
    target class. The frozen tail of composition c is
    [name(target_i), sep, name(bias_j1), sep, ...].
    """

    def __init__(self, context: np.ndarray, schema: AttributeSchema,
                 params: EncoderParams, mode: str, attrs=None):
        if mode not in (MODE_MTP, MODE_STP):
            raise TrainConfigError(f"unknown prompt mode {mode!r}")
        context = np.array(context, dtype=np.float64)
        if context.ndim != 2 or context.shape[0] < 1:
            raise TrainConfigError("context must be a non-empty (M, token_dim) array")
        if context.shape[1] != params.token_dim:
            raise TrainConfigError("context width must match token_dim")
        self.context = context
        self.schema = schema
        self.mode = mode
        if mode == MODE_STP:
            self.attrs: tuple[str, ...] = ()
        else:
            self.attrs = tuple(attrs) if attrs is not None else schema.bias_names
            for a in self.attrs:
                schema.bias(a)  # validates
        self.comp_shape = (schema.target.n_classes,) + tuple(
            schema.bias(a).n_classes for a in self.attrs)
        sep = params.token_table[schema.separator_token]
        self._frozen_sums = []
        self._frozen_lens = []
        for flat in range(self.n_compositions):
            coords = np.unravel_index(flat, self.comp_shape)
            tail = [params.token_table[schema.target.classes[int(coords[0])].name_token]]
            for a, ci in zip(self.attrs, coords[1:]):
                tail.append(sep)
                tail.append(params.token_table[schema.bias(a).classes[int(ci)].name_token])
            self._frozen_sums.append(np.sum(tail, axis=0))
            self._frozen_lens.append(len(tail))
        self._frozen_sums = np.asarray(self._frozen_sums)

    @property
    def n_context(self) -> int:
        return self.context.shape[0]

    @property
    def n_compositions(self) -> int:
        return int(np.prod(self.comp_shape))

    def composition_index(self, y: int, b) -> int:
        """Flat composition index of a sample's ground-truth (y, selected biases)."""
        coords = (y,) + tuple(b[self.schema.bias_index(a)] for a in self.attrs)
        return int(np.ravel_multi_index(coords, self.comp_shape))

    def target_of_composition(self, flat: int) -> int:
        return int(np.unravel_index(flat, self.comp_shape)[0])

    def prompt_sequence(self, flat: int, params: EncoderParams) -> np.ndarray:
        """Full token-embedding sequence of composition flat (for oracles)."""
        coords = np.unravel_index(flat, self.comp_shape)
        rows = [self.context[k] for k in range(self.n_context)]
        rows.append(params.token_table[
            self.schema.target.classes[int(coords[0])].name_token])
        for a, ci in zip(self.attrs, coords[1:]):
            rows.append(params.token_table[self.schema.separator_token])
            rows.append(params.token_table[
                self.schema.bias(a).classes[int(ci)].name_token])
        return np.asarray(rows)

    def snapshot(self) -> np.ndarray:
        return self.context.copy()

    def restore(self, context: np.ndarray) -> None:
        self.context = np.array(context, dtype=np.float64)


def init_prompt_state(init_tokens, schema: AttributeSchema, params: EncoderParams,
                      mode: str = MODE_MTP, attrs=None) -> PromptState:
    """Context initialized to the frozen embeddings of a token template."""
    init_tokens = list(init_tokens)
    if not init_tokens:
        raise TrainConfigError("prompt template must be non-empty")
    context = params.lookup(init_tokens).copy()
    return PromptState(context, schema, params, mode, attrs)


def build_prompt_embeddings(state: PromptState, params: EncoderParams) -> np.ndarray:
    """Unit embedding of every composition prompt, shape (C, embed_dim)."""
    ctx_sum = state.context.sum(axis=0)
    lens = state.n_context + np.asarray(state._frozen_lens, dtype=np.float64)
    means = (ctx_sum[None, :] + state._frozen_sums) / lens[:, None]
    y = means @ params.projection
    return y / np.linalg.norm(y, axis=1, keepdims=True)


def forward_probabilities(x_emb: np.ndarray, prompt_embs: np.ndarray,
                          logit_scale: float) -> np.ndarray:
    """Softmax over scaled cosines across all compositions (Boltzmann weights)."""
    if logit_scale <= 0:
        raise TrainConfigError("logit_scale must be positive")
    logits = logit_scale * (prompt_embs @ np.asarray(x_emb, dtype=np.float64))
    logits = logits - logits.max()
    w = np.exp(logits)
    return w / w.sum()


def ranking_loss(probs: np.ndarray, pos_index: int, margin: float) -> float:
    """Sum of hinges: every negative composition must trail the positive by margin."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= pos_index < probs.size:
        raise TrainConfigError(f"positive composition {pos_index} out of range")
    slack = margin - probs[pos_index] + probs
    slack[pos_index] = 0.0
    return float(np.maximum(slack, 0.0).sum())


def sample_embedding_matrix(samples, state: PromptState,
                            params: EncoderParams) -> tuple[np.ndarray, np.ndarray]:
    """Unit embeddings and positive composition indices for a dataset.

    Text samples go through the token pathway, image samples through the
    shared projection directly; both are frozen, so this is computed once.
    """
    embs = np.empty((len(samples), params.embed_dim))
    pos = np.empty(len(samples), dtype=np.int64)
    for i, s in enumerate(samples):
        if isinstance(s, TextSample):
            embs[i] = encode_sequence(params, params.lookup(s.tokens))
        elif isinstance(s, ImageSample):
            proj = s.feature @ params.projection
            embs[i] = proj / np.linalg.norm(proj)
        else:
            raise TrainConfigError(f"unsupported sample type {type(s).__name__}")
        pos[i] = state.composition_index(s.y, s.b)
    return embs, pos


def _batch_loss_and_probs(x_embs: np.ndarray, pos: np.ndarray, prompt_embs: np.ndarray,
                          cfg: TrainConfig):
    logits = cfg.logit_scale * (x_embs @ prompt_embs.T)
    logits = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    probs = w / w.sum(axis=1, keepdims=True)
    rows = np.arange(len(pos))
    slack = cfg.margin - probs[rows, pos][:, None] + probs
    slack[rows, pos] = 0.0
    hinged = np.maximum(slack, 0.0)
    return probs, hinged, float(hinged.sum(axis=1).mean())


def batch_mean_loss(x_embs: np.ndarray, pos: np.ndarray, state: PromptState,
                    params: EncoderParams, cfg: TrainConfig) -> float:
    """Mean ranking loss of a batch under the current context."""
    prompt_embs = build_prompt_embeddings(state, params)
    _, _, loss = _batch_loss_and_probs(x_embs, pos, prompt_embs, cfg)
    return loss


def loss_gradients(x_embs: np.ndarray, pos: np.ndarray, state: PromptState,
                   params: EncoderParams, cfg: TrainConfig) -> tuple[np.ndarray, float]:
    """Exact gradient of the batch-mean ranking loss w.r.t. the context.

    Backpropagates through softmax, cosine and the text encoder of each
    composition prompt. Sample embeddings are frozen and contribute no
    gradient. Returns (grad with context shape, mean loss); mean pooling
    makes all context rows share one gradient vector.
    """
    if len(pos) == 0:
        raise TrainConfigError("empty batch")
    prompt_embs = build_prompt_embeddings(state, params)
    probs, hinged, loss = _batch_loss_and_probs(x_embs, pos, prompt_embs, cfg)
    rows = np.arange(len(pos))
    active = hinged > 0.0
    d_probs = active.astype(np.float64)
    d_probs[rows, pos] = -active.sum(axis=1)
    # softmax backward: dL/dlogit = p * (dL/dp - sum_j dL/dp_j p_j)
    inner = (d_probs * probs).sum(axis=1, keepdims=True)
    d_logits = probs * (d_probs - inner)
    d_sims = cfg.logit_scale * d_logits
    upstream = d_sims.T @ x_embs / len(pos)          # (C, embed_dim)

    ctx_sum = state.context.sum(axis=0)
    lens = state.n_context + np.asarray(state._frozen_lens, dtype=np.float64)
    means = (ctx_sum[None, :] + state._frozen_sums) / lens[:, None]
    y = means @ params.projection
    norms = np.linalg.norm(y, axis=1, keepdims=True)
    z = y / norms
    g_y = (upstream - (upstream * z).sum(axis=1, keepdims=True) * z) / norms
    g_means = g_y @ params.projection.T              # (C, token_dim)
    g_context_row = (g_means / lens[:, None]).sum(axis=0)
    grad = np.tile(g_context_row, (state.n_context, 1))
    return grad, loss


def finite_difference_gradient(x_embs: np.ndarray, pos: np.ndarray, state: PromptState,
                               params: EncoderParams, cfg: TrainConfig,
                               step: float = 1e-5) -> np.ndarray:
    """Central-difference oracle for the batch loss, coordinate by coordinate."""
    if step <= 0:
        raise TrainConfigError("finite-difference step must be positive")
    grad = np.zeros_like(state.context)
    base = state.context
    for k in range(base.shape[0]):
        for i in range(base.shape[1]):
            orig = base[k, i]
            base[k, i] = orig + step
            hi = batch_mean_loss(x_embs, pos, state, params, cfg)
            base[k, i] = orig - step
            lo = batch_mean_loss(x_embs, pos, state, params, cfg)
            base[k, i] = orig
            grad[k, i] = (hi - lo) / (2.0 * step)
    return grad


@dataclass
class OptimizerState:
    momentum_buffer: np.ndarray
    step: int = 0
    epoch: int = 0
    warmup_steps: int = 0

    @classmethod
    def for_state(cls, state: PromptState, warmup_steps: int) -> "OptimizerState":
        return cls(momentum_buffer=np.zeros_like(state.context),
                   warmup_steps=warmup_steps)


def effective_learning_rate(cfg: TrainConfig, opt: OptimizerState) -> float:
    """Linear per-step ramp over the warmup window, constant afterwards."""
    if opt.warmup_steps <= 0:
        return cfg.learning_rate
    return cfg.learning_rate * min(1.0, (opt.step + 1) / opt.warmup_steps)


def sgd_step(state: PromptState, grad: np.ndarray, opt: OptimizerState,
             cfg: TrainConfig) -> None:
    """Classical momentum SGD with coupled weight decay on the context only."""
    if grad.shape != state.context.shape:
        raise TrainConfigError("gradient shape does not match context")
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient; aborting training step "
                            f"(step {opt.step}, epoch {opt.epoch})")
    lr = effective_learning_rate(cfg, opt)
    g = grad + cfg.weight_decay * state.context
    opt.momentum_buffer = cfg.momentum * opt.momentum_buffer + g
    state.context = state.context - lr * opt.momentum_buffer
    opt.step += 1


@dataclass
class LossRecord:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_metrics: list = field(default_factory=list)   # GroupMetrics per epoch

    def __len__(self) -> int:
        return len(self.train_loss)


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5487, epoch]))
    return rng.permutation(n)


def train(train_samples, image_val, cfg: TrainConfig, state: PromptState,
          params: EncoderParams,
          val_groups: np.ndarray | None = None,
          n_val_groups: int | None = None) -> tuple[list[np.ndarray], LossRecord]:
    """Epoch loop over shuffled mini-batches of text (or image) samples.

    After each epoch records the mean train loss, the same ranking loss on
    the image validation set, and validation group metrics; returns one
    context snapshot per epoch for checkpoint selection. val_groups can
    override the grouping used for validation metrics (e.g. when the true
    bias attribute must stay hidden).
    """
    from .evaluate import group_metrics_from_arrays

    if not train_samples or not image_val:
        raise TrainConfigError("train and validation sets must be non-empty")
    x_train, pos_train = sample_embedding_matrix(train_samples, state, params)
    x_val, pos_val = sample_embedding_matrix(image_val, state, params)
    val_y = np.array([s.y for s in image_val])
    if val_groups is None:
        val_groups = np.array([s.g for s in image_val])
        n_val_groups = state.schema.n_groups
    elif n_val_groups is None:
        raise TrainConfigError("n_val_groups is required with explicit val_groups")

    steps_per_epoch = int(np.ceil(len(train_samples) / cfg.batch_size))
    opt = OptimizerState.for_state(state, cfg.warmup_epochs * steps_per_epoch)
    comp_targets = np.array([state.target_of_composition(c)
                             for c in range(state.n_compositions)])

    snapshots: list[np.ndarray] = []
    record = LossRecord()
    for epoch in range(cfg.total_epochs):
        opt.epoch = epoch
        perm = _epoch_permutation(cfg.seed, epoch, len(train_samples))
        losses = []
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            grad, loss = loss_gradients(x_train[idx], pos_train[idx], state, params, cfg)
            sgd_step(state, grad, opt, cfg)
            losses.append(loss)
        prompt_embs = build_prompt_embeddings(state, params)
        _, _, vloss = _batch_loss_and_probs(x_val, pos_val, prompt_embs, cfg)
        pred_y = comp_targets[np.argmax(x_val @ prompt_embs.T, axis=1)]
        metrics = group_metrics_from_arrays(
            pred_y == val_y, val_groups, n_val_groups)
        record.train_loss.append(float(np.mean(losses)))
        record.val_loss.append(vloss)
        record.val_metrics.append(metrics)
        snapshots.append(state.snapshot())
    return snapshots, record

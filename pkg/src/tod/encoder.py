"""Frozen mini dual-encoder over a shared unit-sphere embedding space.

Token sequences (text descriptions, prompts) and raw feature vectors
(synthetic images) are mapped through the same frozen linear projection:
mean-pool -> project -> L2-normalize. The shared projection makes the
text and image pathways aligned by construction, and the architecture is
simple enough to admit exact closed-form gradients through the text side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EncoderConfigError(ValueError):
    """Raised for non-positive dimensions in an encoder config."""


class EncoderDomainError(ValueError):
    """Raised for malformed encoder inputs (empty sequence, bad shape)."""


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    token_dim: int
    embed_dim: int
    seed: int

    def __post_init__(self):
        for name in ("vocab_size", "token_dim", "embed_dim"):
            if getattr(self, name) <= 0:
                raise EncoderConfigError(f"{name} must be positive, got {getattr(self, name)}")


class EncoderParams:
    """Frozen encoder parameters: token table and shared projection.

    Both matrices are drawn i.i.d. from N(0, 1/token_dim) using a seeded
    generator, so identical (config, seed) yields bit-identical params.
    Instances are immutable and safe to share across threads.
    """

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        scale = 1.0 / np.sqrt(cfg.token_dim)
        self.token_table = rng.normal(0.0, scale, size=(cfg.vocab_size, cfg.token_dim))
        self.projection = rng.normal(0.0, scale, size=(cfg.token_dim, cfg.embed_dim))
        self.token_table.setflags(write=False)
        self.projection.setflags(write=False)

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    @property
    def token_dim(self) -> int:
        return self.cfg.token_dim

    @property
    def embed_dim(self) -> int:
        return self.cfg.embed_dim

    def lookup(self, tokens) -> np.ndarray:
        """Rows of the token table for a sequence of token ids."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size == 0:
            raise EncoderDomainError("token sequence must be a non-empty 1-d array")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise EncoderDomainError("token id out of vocabulary range")
        return self.token_table[tokens]


def build_encoder(cfg: EncoderConfig) -> EncoderParams:
    return EncoderParams(cfg)


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise EncoderDomainError("cannot normalize a zero vector")
    return v / n


def encode_sequence(params: EncoderParams, seq: np.ndarray) -> np.ndarray:
    """Embed a sequence of token vectors (rows of shape (K, token_dim)).

    Entries may be frozen table rows or free learnable vectors; the
    encoder does not distinguish. Returns a unit-norm embed_dim vector.
    """
    seq = np.atleast_2d(np.asarray(seq, dtype=np.float64))
    if seq.shape[0] == 0:
        raise EncoderDomainError("empty sequence")
    if seq.shape[1] != params.token_dim:
        raise EncoderDomainError(f"sequence entries must have dim {params.token_dim}")
    pooled = seq.mean(axis=0)
    return _normalize(pooled @ params.projection)


def encode_tokens(params: EncoderParams, tokens) -> np.ndarray:
    """Embed a sequence of token ids via table lookup."""
    return encode_sequence(params, params.lookup(tokens))


def encode_image(params: EncoderParams, feature: np.ndarray) -> np.ndarray:
    """Embed a raw token_dim feature vector through the shared projection."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (params.token_dim,):
        raise EncoderDomainError(f"feature must have shape ({params.token_dim},)")
    return _normalize(feature @ params.projection)


def encode_image_batch(params: EncoderParams, features: np.ndarray) -> np.ndarray:
    """Row-wise encode_image for a (N, token_dim) feature matrix."""
    features = np.asarray(features, dtype=np.float64)
    proj = features @ params.projection
    return proj / np.linalg.norm(proj, axis=1, keepdims=True)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of two unit embeddings."""
    return float(np.dot(a, b))


def encode_sequence_backward(params: EncoderParams, seq: np.ndarray,
                             upstream: np.ndarray) -> np.ndarray:
    """Gradient of (upstream . encode_sequence(seq)) w.r.t. each entry.

    Chains through normalize o project o mean. Mean pooling gives every
    entry the same gradient scaled by 1/K, so the result is returned as a
    (K, token_dim) array of identical rows.
    """
    seq = np.atleast_2d(np.asarray(seq, dtype=np.float64))
    if seq.shape[0] == 0:
        raise EncoderDomainError("empty sequence")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (params.embed_dim,):
        raise EncoderDomainError(f"upstream must have shape ({params.embed_dim},)")
    k = seq.shape[0]
    pooled = seq.mean(axis=0)
    y = pooled @ params.projection
    n = np.linalg.norm(y)
    z = y / n
    # d(u.z)/dy for z = y/|y|: (u - (u.z) z) / |y|
    g_y = (upstream - np.dot(upstream, z) * z) / n
    g_entry = (params.projection @ g_y) / k
    return np.tile(g_entry, (k, 1))

"""Gated encoder-decoder with an amortized flow posterior over a document latent."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from flowvi import numcore as nc
from flowvi.errors import ContractError, ShapeError
from flowvi.flows import FlowStack, build_stack
from flowvi.latent import InferenceNet, LatentSample, infer_posterior, sample_latent
from flowvi.model.batch import Batch, bow_embedding
from flowvi.model.transformer import (
    DecoderBlock,
    EncoderBlock,
    causal_mask,
    key_padding_mask,
    sinusoidal_positions,
)
from flowvi.numcore import LayerNorm, Linear, Module, Tensor

GATE_INITS = ("standard", "near_zero")
NEAR_ZERO_GATE = 0.05


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64          # d = e: the embedding table feeds the encoder directly
    n_heads: int = 4
    n_enc: int = 2
    n_dec: int = 2
    d_ff: int = 256
    dropout: float = 0.1
    activation: str = "gelu"
    latent_dim: int = 16
    flow: str = "rqnsf"
    n_flows: int = 4
    flow_opts: dict = field(default_factory=dict)
    infer_hidden: int = 300
    infer_layers: int = 3
    infer_dropout: float = 0.1
    gate_init: str = "standard"
    gate_std: float = 0.02
    max_positions: int = 512


class RefinedGate(Module):
    """Weights of the fused-state gate. Stored row-major, so ``W^z zK`` is
    ``zK @ wz.weight`` and ``W^f [h; z']`` is ``[h, z'] @ wf.weight + b^f``."""

    def __init__(self, d: int, latent_dim: int, rng: np.random.Generator,
                 init: str = "standard", init_std: float = 0.02):
        if init not in GATE_INITS:
            raise ContractError(f"gate_init must be one of {GATE_INITS}, got {init!r}")
        self.d, self.latent_dim = d, latent_dim
        self.wz = Linear(latent_dim, d, rng, bias=False)
        self.wf = Linear(2 * d, d, rng, init_std=init_std)
        self.wr = Linear(2 * d, d, rng, init_std=init_std)
        if init == "near_zero":
            # with r near 1/2, g = f^2 + 2rf(1-f) is close to f, so this pins g near 0.05
            self.wf.bias.data[:] = np.log(NEAR_ZERO_GATE / (1.0 - NEAR_ZERO_GATE))


def _gate_parts(h, zK, gate: RefinedGate):
    h, zK = nc.as_tensor(h), nc.as_tensor(zK)
    if h.shape[-1] != gate.d:
        raise ShapeError(f"gate_fuse: hidden width {h.shape[-1]} != gate width {gate.d}")
    if zK.shape[-1] != gate.latent_dim:
        raise ShapeError(f"gate_fuse: latent width {zK.shape[-1]} != {gate.latent_dim}")
    if h.ndim == 2:
        if zK.ndim != 1:
            raise ShapeError(f"gate_fuse: (n, d) states need a single latent, got {zK.shape}")
        zp = nc.reshape(gate.wz(zK), (1, gate.d))
    elif h.ndim == 3:
        if zK.shape != (h.shape[0], gate.latent_dim):
            raise ShapeError(f"gate_fuse: states {h.shape} vs latents {zK.shape}")
        zp = nc.reshape(gate.wz(zK), (h.shape[0], 1, gate.d))
    else:
        raise ShapeError(f"gate_fuse: expected (n, d) or (B, n, d) states, got {h.shape}")
    zp = nc.broadcast_to(zp, h.shape)  # the same z' at every position
    hz = nc.concat([h, zp], axis=-1)
    f = nc.sigmoid(gate.wf(hz))
    r = nc.sigmoid(gate.wr(hz))
    g = (1.0 - r) * f * f + r * (1.0 - (1.0 - f) * (1.0 - f))
    return h, zp, g


def gate_scores(h, zK, gate: RefinedGate) -> Tensor:
    return _gate_parts(h, zK, gate)[2]


def gate_fuse(h, zK, gate: RefinedGate) -> Tensor:
    """``h'_j = (1 - g_j) h_j + g_j z'_K`` with the refined gate ``g_j``."""
    h, zp, g = _gate_parts(h, zK, gate)
    return (1.0 - g) * h + g * zp


class SumModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        self.embed = nc.parameter(rng.normal(0.0, d ** -0.5, size=(cfg.vocab_size, d)))
        self.encoder = [EncoderBlock(d, cfg.n_heads, cfg.d_ff, rng, cfg.dropout, cfg.activation)
                        for _ in range(cfg.n_enc)]
        self.enc_ln = LayerNorm(d)
        self.decoder = [DecoderBlock(d, cfg.n_heads, cfg.d_ff, rng, cfg.dropout, cfg.activation)
                        for _ in range(cfg.n_dec)]
        self.dec_ln = LayerNorm(d)
        self.gate = RefinedGate(d, cfg.latent_dim, rng, cfg.gate_init, cfg.gate_std)
        self.lm_head = Linear(d, cfg.vocab_size, rng)
        self.infer = InferenceNet(d, cfg.latent_dim, rng, hidden_dim=cfg.infer_hidden,
                                  n_hidden=cfg.infer_layers, dropout=cfg.infer_dropout)
        if cfg.n_flows > 0:
            self.flows = build_stack(cfg.flow, cfg.n_flows, cfg.latent_dim, rng, **cfg.flow_opts)
        else:
            self.flows = FlowStack([], dim=cfg.latent_dim)
        self._pos = sinusoidal_positions(cfg.max_positions, d)

    VARIATIONAL_PREFIXES = ("infer.", "flows.")

    def _embed(self, ids: np.ndarray) -> Tensor:
        if ids.shape[1] > self._pos.shape[0]:
            raise ShapeError(f"sequence length {ids.shape[1]} exceeds max_positions {self._pos.shape[0]}")
        x = nc.embedding(self.embed, ids) * np.sqrt(self.cfg.d_model)
        return x + self._pos[: ids.shape[1]]


def encode(model: SumModel, src: np.ndarray, src_mask: np.ndarray, rng=None) -> Tensor:
    x = model._embed(src)
    mask = key_padding_mask(src_mask)
    for block in model.encoder:
        x = block(x, mask, rng)
    return model.enc_ln(x)


def decode_states(model: SumModel, memory: Tensor, src_mask: np.ndarray, tgt_in: np.ndarray,
                  rng=None) -> Tensor:
    """Final-layer decoder states, taken after the terminal layer norm."""
    y = model._embed(tgt_in)
    self_mask = causal_mask(tgt_in.shape[1])
    mem_mask = key_padding_mask(src_mask)
    for block in model.decoder:
        y = block(y, memory, self_mask, mem_mask, rng)
    return model.dec_ln(y)


def posterior(model: SumModel, batch: Batch, rng: np.random.Generator | None = None,
              deterministic: bool = False) -> LatentSample:
    """Draw ``zK`` for every document from its BoW-conditioned flow posterior."""
    xbar = bow_embedding(batch.bow, model.embed)
    mu0, log_sigma0 = infer_posterior(model.infer, xbar, rng)
    return sample_latent(mu0, log_sigma0, model.flows, rng, deterministic=deterministic)


def forward(model: SumModel, batch: Batch, sample: LatentSample | None,
            rng: np.random.Generator | None = None) -> Tensor:
    """Teacher-forced logits ``(B, n, V)``. ``sample=None`` skips the gate,
    which is the plain encoder-decoder."""
    memory = encode(model, batch.src, batch.src_mask, rng)
    h = decode_states(model, memory, batch.src_mask, batch.tgt_in, rng)
    if sample is not None:
        h = gate_fuse(h, sample.zK, model.gate)
    return model.lm_head(h)

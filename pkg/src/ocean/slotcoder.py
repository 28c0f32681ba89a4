"""Slot-attention autoencoder: image -> N slot vectors (+ attention) -> reconstruction."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .numcore import ParamStore, Tape, affine_forward, gru_cell, mse, softmax

EPS_ATTN = 1e-8


@dataclass
class SlotcoderConfig:
    resolution: int = 32
    n_slots: int = 7
    slot_dim: int = 32
    enc_channels: int = 32
    dec_channels: int = 16
    mlp_hidden: int = 64
    n_iters: int = 3
    decoder_grid: int = 8
    kernel: int = 5
    empty_tau: float = 0.5
    enc_downsample: int = 2

    def __post_init__(self):
        if self.resolution % 4 or self.resolution < 8:
            raise ValueError(f"resolution must be a multiple of 4 and >= 8, got {self.resolution}")
        ups = math.log2(self.resolution / self.decoder_grid)
        if ups != int(ups) or ups < 0:
            raise ValueError(f"resolution {self.resolution} is not decoder_grid * 2^k")
        if self.enc_downsample not in (1, 2, 4):
            raise ValueError(f"enc_downsample must be 1, 2 or 4, got {self.enc_downsample}")

    @property
    def n_locations(self) -> int:
        return (self.resolution // self.enc_downsample) ** 2

    @property
    def enc_strides(self) -> tuple:
        return {1: (1, 1, 1, 1), 2: (2, 1, 1, 1), 4: (2, 2, 1, 1)}[self.enc_downsample]

    @property
    def n_upsamples(self) -> int:
        return int(math.log2(self.resolution / self.decoder_grid))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SlotSet:
    slots: torch.Tensor  # [B, N, D]
    attention: torch.Tensor  # [B, N, L], softmax over N per location
    image_ids: list | None = None


@dataclass
class SlotRecon:
    full: torch.Tensor  # [B, 3, R, R]
    rgb: torch.Tensor  # [B, N, 3, R, R]
    alpha: torch.Tensor  # [B, N, R, R], softmax over N per pixel


def position_grid(size: int, dtype=None) -> torch.Tensor:
    """[size*size, 4] features (x, y, 1-x, 1-y) on cell centres, row-major."""
    c = (torch.arange(size, dtype=dtype or torch.get_default_dtype()) + 0.5) / size
    ys, xs = torch.meshgrid(c, c, indexing="ij")
    g = torch.stack([xs, ys, 1 - xs, 1 - ys], dim=-1)
    return g.reshape(size * size, 4)


def init_params(cfg: SlotcoderConfig, seed: int = 0, dtype=torch.float32) -> ParamStore:
    g = torch.Generator().manual_seed(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return (torch.rand(shape, generator=g, dtype=torch.float64) * 2 - 1).mul(bound).to(dtype)

    def he(shape, fan_in):
        # variance-preserving for ReLU stacks; the 1/sqrt(fan_in) default starves the keys of content
        return uniform(shape, fan_in / 6.0)

    p = ParamStore()
    C, D, k = cfg.enc_channels, cfg.slot_dim, cfg.kernel
    in_ch = 3
    for i in range(4):
        p.add(f"enc.conv{i}.w", he((C, in_ch, k, k), in_ch * k * k))
        p.add(f"enc.conv{i}.b", torch.zeros(C, dtype=dtype))
        in_ch = C
    p.add("enc.pos.w", uniform((4, C), 4))
    p.add("enc.pos.b", torch.zeros(C, dtype=dtype))

    p.add("sa.ln_in.g", torch.ones(C, dtype=dtype))
    p.add("sa.ln_in.b", torch.zeros(C, dtype=dtype))
    p.add("sa.q", uniform((D, D), D))
    p.add("sa.k", uniform((C, D), C))
    p.add("sa.v", uniform((C, D), C))
    p.add("sa.ln_slot.g", torch.ones(D, dtype=dtype))
    p.add("sa.ln_slot.b", torch.zeros(D, dtype=dtype))
    p.add("sa.gru.w", uniform((D, 3 * D), D))
    p.add("sa.gru.u", uniform((D, 3 * D), D))
    p.add("sa.gru.b", torch.zeros(3 * D, dtype=dtype))
    p.add("sa.ln_mlp.g", torch.ones(D, dtype=dtype))
    p.add("sa.ln_mlp.b", torch.zeros(D, dtype=dtype))
    p.add("sa.mlp.w0", uniform((D, cfg.mlp_hidden), D))
    p.add("sa.mlp.b0", torch.zeros(cfg.mlp_hidden, dtype=dtype))
    p.add("sa.mlp.w1", uniform((cfg.mlp_hidden, D), cfg.mlp_hidden))
    p.add("sa.mlp.b1", torch.zeros(D, dtype=dtype))
    p.add("sa.init_mu", uniform((D,), D))
    p.add("sa.init_logsigma", uniform((D,), D))

    Cd = cfg.dec_channels
    p.add("dec.pos.w", uniform((4, D), 4))
    p.add("dec.pos.b", torch.zeros(D, dtype=dtype))
    in_ch = D
    for i in range(cfg.n_upsamples):
        # conv_transpose2d weight layout: [in, out, k, k]
        p.add(f"dec.up{i}.w", he((in_ch, Cd, k, k), in_ch * k * k / 4))
        p.add(f"dec.up{i}.b", torch.zeros(Cd, dtype=dtype))
        in_ch = Cd
    p.add("dec.out.w", uniform((4, in_ch, 3, 3), in_ch * 9))
    p.add("dec.out.b", torch.zeros(4, dtype=dtype))
    return p


def _layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * g + b


def encode(params: ParamStore, images: torch.Tensor, cfg: SlotcoderConfig) -> torch.Tensor:
    """[B, 3, R, R] -> [B, L, C] conv features plus additive position embedding."""
    if images.dim() != 4 or images.shape[1:] != (3, cfg.resolution, cfg.resolution):
        raise ValueError(f"expected images [B, 3, {cfg.resolution}, {cfg.resolution}], got {tuple(images.shape)}")
    Tape.record("encode")
    x = images
    pad = cfg.kernel // 2
    for i, stride in enumerate(cfg.enc_strides):
        x = F.relu(F.conv2d(x, params[f"enc.conv{i}.w"], params[f"enc.conv{i}.b"], stride=stride, padding=pad))
    B, C, h, w = x.shape
    feats = x.permute(0, 2, 3, 1).reshape(B, h * w, C)
    pos = affine_forward(position_grid(h, dtype=feats.dtype), params["enc.pos.w"], params["enc.pos.b"])
    return feats + pos


def sample_init_slots(params: ParamStore, batch: int, cfg: SlotcoderConfig, generator: torch.Generator) -> torch.Tensor:
    mu, logsigma = params["sa.init_mu"], params["sa.init_logsigma"]
    noise = torch.randn((batch, cfg.n_slots, cfg.slot_dim), generator=generator, dtype=torch.float64).to(mu.dtype)
    return mu + torch.exp(logsigma) * noise


def slot_attention(
    params: ParamStore, features: torch.Tensor, init_slots: torch.Tensor, n_iters: int = 3
) -> SlotSet:
    """Iterative competitive attention; returns final slots and final-iteration attention."""
    if n_iters < 1:
        raise ValueError("slot attention needs at least one iteration")
    D = init_slots.shape[-1]
    inputs = _layer_norm(features, params["sa.ln_in.g"], params["sa.ln_in.b"])
    k = inputs @ params["sa.k"]  # [B, L, D]
    v = inputs @ params["sa.v"]
    slots = init_slots
    attn = None
    for it in range(n_iters):
        prev = slots
        q = _layer_norm(slots, params["sa.ln_slot.g"], params["sa.ln_slot.b"]) @ params["sa.q"]
        logits = torch.einsum("bnd,bld->bnl", q, k) / math.sqrt(D)
        attn = softmax(logits, dim=1)  # compete over slots
        weights = (attn + EPS_ATTN) / (attn + EPS_ATTN).sum(dim=-1, keepdim=True)
        updates = torch.einsum("bnl,bld->bnd", weights, v)
        B, N, _ = updates.shape
        if not torch.isfinite(updates).all():
            raise FloatingPointError(f"non-finite attention updates at slot-attention iteration {it}")
        slots = gru_cell(updates.reshape(B * N, D), prev.reshape(B * N, D), params, "sa.gru").reshape(B, N, D)
        h = _layer_norm(slots, params["sa.ln_mlp.g"], params["sa.ln_mlp.b"])
        h = torch.relu(h @ params["sa.mlp.w0"] + params["sa.mlp.b0"]) @ params["sa.mlp.w1"] + params["sa.mlp.b1"]
        slots = slots + h
        if not torch.isfinite(slots).all():
            raise FloatingPointError(f"non-finite slots at slot-attention iteration {it}")
    return SlotSet(slots=slots, attention=attn)


def decode(params: ParamStore, slots: torch.Tensor, cfg: SlotcoderConfig) -> SlotRecon:
    """Spatial-broadcast decode of each slot; alpha masks are softmaxed across slots."""
    B, N, D = slots.shape
    if D != params["dec.pos.w"].shape[1]:
        raise ValueError(f"slot dim {D} does not match decoder ({params['dec.pos.w'].shape[1]})")
    Tape.record("decode")
    G = cfg.decoder_grid
    pos = affine_forward(position_grid(G, dtype=slots.dtype), params["dec.pos.w"], params["dec.pos.b"])
    x = slots.reshape(B * N, 1, D) + pos  # [BN, G*G, D]
    x = x.reshape(B * N, G, G, D).permute(0, 3, 1, 2)
    pad = cfg.kernel // 2
    for i in range(cfg.n_upsamples):
        x = F.relu(
            F.conv_transpose2d(
                x, params[f"dec.up{i}.w"], params[f"dec.up{i}.b"], stride=2, padding=pad, output_padding=1
            )
        )
    x = F.conv2d(x, params["dec.out.w"], params["dec.out.b"], padding=1)
    R = x.shape[-1]
    x = x.reshape(B, N, 4, R, R)
    rgb, mask_logits = x[:, :, :3], x[:, :, 3]
    alpha = softmax(mask_logits, dim=1)
    full = (rgb * alpha.unsqueeze(2)).sum(dim=1)
    return SlotRecon(full=full, rgb=rgb, alpha=alpha)


def recon_loss(recon: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    return mse(recon, image)


def empty_slot_mask(attention: torch.Tensor, tau: float = 0.5) -> torch.Tensor:
    """Slots whose total attention mass is strictly below ``tau * L / N``."""
    N, L = attention.shape[-2], attention.shape[-1]
    return attention.sum(dim=-1) < tau * L / N


def forward(params, images, cfg, generator) -> tuple[SlotSet, SlotRecon]:
    feats = encode(params, images, cfg)
    init = sample_init_slots(params, images.shape[0], cfg, generator)
    slot_set = slot_attention(params, feats, init, cfg.n_iters)
    return slot_set, decode(params, slot_set.slots, cfg)


def attention_maps(attention: torch.Tensor, resolution: int) -> np.ndarray:
    """Upsample [..., N, L] attention to [..., N, R, R] pixel maps (nearest)."""
    a = attention.detach().cpu().numpy() if torch.is_tensor(attention) else np.asarray(attention)
    side = int(round(math.sqrt(a.shape[-1])))
    a = a.reshape(a.shape[:-1] + (side, side))
    rep = resolution // side
    return a.repeat(rep, axis=-2).repeat(rep, axis=-1)
